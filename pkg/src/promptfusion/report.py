"""Plain-text tables from results files."""
from __future__ import annotations

from .runner import read_records


def format_matrix(rows: list[list[float]]) -> str:
    n = len(rows)
    head = "after\\on " + " ".join(f"{f'T{i + 1}':>6}" for i in range(n))
    lines = [head]
    for t, row in enumerate(rows):
        cells = [f"{v:6.3f}" for v in row] + [f"{'':>6}"] * (n - len(row))
        lines.append(f"{f'T{t + 1}':<8} " + " ".join(cells))
    return "\n".join(lines)


def format_report(records: list[dict]) -> str:
    tasks = [r for r in records if r["event"] == "task"]
    summary = next((r for r in records if r["event"] == "summary"), None)
    rows = summary["R"] if summary else [r["row"] for r in tasks]
    out = ["Accuracy matrix R", format_matrix(rows), ""]
    out.append("A_T per task: " + ", ".join(f"{r['A']:.4f}" for r in tasks))
    if summary:
        out.append(f"final A_T: {summary['A_T']:.4f}")
        if "forgetting" in summary:
            f = summary["forgetting"]
            out.append("drops: " + ", ".join(f"{d:+.4f}" for d in f["drops"])
                       + f"  (mean {f['mean_drop']:+.4f})")
        if "activation_rate" in summary:
            out.append(f"booster activation rate: {summary['activation_rate']:.4f}")
        c = summary["costs"]
        out.append(f"modelled MACs/image: {c['flops']:.4g}  trainable params: {c['params']}")
    for r in records:
        if r["event"] == "kde":
            out.append(f"KDE shift of task-1 features ({r['branch']}): {r['divergence']:.4f}")
    return "\n".join(out)


def report_file(path) -> str:
    return format_report(read_records(path))
