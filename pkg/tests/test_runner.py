import json

import numpy as np
import pytest

from promptfusion.checkpoint import CheckpointError
from promptfusion.cli import main
from promptfusion.config import from_dict
from promptfusion.report import format_matrix
from promptfusion.runner import read_records, resume, run

SMALL = {"stream": {"n_classes": 6, "per_class": 20, "image_size": 8, "n_tasks": 3, "latent_dim": 4},
         "model": {"vision_width": 8, "text_width": 8, "depth": 1, "n_heads": 2, "patch_size": 4,
                   "text_prompt_length": 2, "booster_prompt_length": 2, "image_prompt_length": 2},
         "gate": {"enabled": True, "hidden": 4},
         "rehearsal": {"mode": "buffer", "capacity": 12},
         "optim": {"epochs": 1, "batch_size": 16}}


def small(tmp_path, name="a", **over):
    data = json.loads(json.dumps(SMALL))
    for k, v in over.items():
        data.setdefault(k, {}).update(v) if isinstance(v, dict) else data.__setitem__(k, v)
    data["output_dir"] = str(tmp_path / name)
    return from_dict(data)


def test_results_layout(tmp_path):
    res = run(small(tmp_path))
    recs = read_records(res.results_path)
    assert [r["event"] for r in recs] == ["task"] * 3 + ["kde", "kde", "summary"]
    s = res.summary
    assert len(s["R"]) == 3 and [len(r) for r in s["R"]] == [1, 2, 3]
    assert s["A_T"] == pytest.approx(np.mean(s["R"][-1]))
    # the decision log covers every test item of the seen tasks, 4 per class here
    assert [len(r["decisions"]) for r in recs[:3]] == [8, 16, 24]
    assert 0.0 <= s["activation_rate"] <= 1.0
    assert s["costs"]["activation_rate"] == s["activation_rate"]
    assert sorted(p.name for p in (res.output_dir / "checkpoints").iterdir()) == \
        ["task_001", "task_002", "task_003"]


def test_identical_config_gives_byte_identical_results(tmp_path):
    a, b = run(small(tmp_path, "a")), run(small(tmp_path, "b"))
    assert a.results_path.read_bytes() == b.results_path.read_bytes()


def test_resume_reproduces_uninterrupted_run(tmp_path):
    straight = run(small(tmp_path, "straight"))
    part = run(small(tmp_path, "part"), stop_after=1)
    assert part.summary is None
    resumed = resume(part.output_dir / "checkpoints" / "task_001", output_dir=tmp_path / "resumed")
    assert resumed.summary["R"] == straight.summary["R"]
    assert resumed.results_path.read_bytes() == straight.results_path.read_bytes()


def test_resume_with_other_config_is_rejected(tmp_path):
    part = run(small(tmp_path), stop_after=1)
    with pytest.raises(CheckpointError):
        resume(part.output_dir / "checkpoints" / "task_001", config=small(tmp_path, seed=3))


def test_format_matrix():
    text = format_matrix([[1.0], [0.5, 0.75]])
    assert "T1" in text and "0.750" in text


def test_cli_round_trip(tmp_path, capsys):
    cfg = dict(SMALL, output_dir=str(tmp_path / "cli"), gate={"enabled": False},
               rehearsal={"mode": "gaussian"}, stream=dict(SMALL["stream"], n_tasks=2))
    path = tmp_path / "run.yaml"
    path.write_text(json.dumps(cfg))
    assert main(["run", "--config", str(path), "--stop-after", "1"]) == 0
    assert main(["resume", "--checkpoint", str(tmp_path / "cli" / "checkpoints" / "task_001"),
                 "--config", str(path)]) == 0
    results = tmp_path / "cli" / "results.jsonl"
    assert main(["report", "--results", str(results)]) == 0
    out = capsys.readouterr().out
    assert "final A_T" in out and "KDE shift" in out
    assert main(["plot", "--results", str(results), "--out", str(tmp_path / "fig")]) == 0
    assert (tmp_path / "fig" / "accuracy.png").stat().st_size > 0
    assert (tmp_path / "fig" / "kde.png").stat().st_size > 0


def test_cli_reports_config_errors(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("model: {variant: nope}\n")
    assert main(["run", "--config", str(path)]) == 2
    assert "model.variant" in capsys.readouterr().err
    assert main(["resume", "--checkpoint", str(tmp_path / "missing")]) == 2
