"""Continual protocol driver: train task by task, evaluate, checkpoint, log.

Results go to ``<output_dir>/results.jsonl`` with one JSON object per line:
a ``task`` record after every task, then ``kde`` records (one per branch)
and a closing ``summary``. Nothing time- or host-dependent is written, so
repeated runs of one config produce byte-identical files.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig, from_dict
from .costs import cost_model
from .estimator import PromptFusionClassifier
from .metrics import MetricsMatrix, accuracy, average_accuracy, forgetting_profile, kde_profile
from .stream import (Dataset, TaskStream, load_manifest, make_class_incremental_stream,
                     make_domain_blobs, make_domain_incremental_stream, make_split_blobs)

log = logging.getLogger(__name__)

RESULTS_FILE = "results.jsonl"
CHECKPOINT_DIR = "checkpoints"


def build_stream(cfg: RunConfig) -> tuple[TaskStream, Dataset]:
    """The task stream a config describes, plus the dataset its sample keys index."""
    s = cfg.stream
    if s.kind == "split_blobs":
        ds = make_split_blobs(s.n_classes, s.per_class, s.image_size, 3, s.latent_dim, s.separation,
                              s.noise, s.modes_per_class, seed=s.seed)
    elif s.kind == "domain_blobs":
        ds = make_domain_blobs(s.n_classes, s.per_class, s.angles, s.colour_shifts, s.image_size, 3,
                               s.latent_dim, s.separation, s.noise, seed=s.seed)
    else:
        ds = load_manifest(s.manifest)
    if cfg.scenario == "domain":
        return make_domain_incremental_stream(ds, s.train_domains, s.test_domains, seed=s.seed), ds
    test_ds = load_manifest(s.test_manifest) if s.kind == "manifest" and s.test_manifest else None
    return make_class_incremental_stream(ds, s.n_tasks, seed=s.seed, train_fraction=s.train_fraction,
                                         test_ds=test_ds), ds


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dump_records(records: list[dict], path) -> None:
    lines = [json.dumps(_jsonable(r), sort_keys=True) for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_records(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class RunResult:
    config: RunConfig
    R: MetricsMatrix
    records: list[dict]
    output_dir: Path
    classifier: PromptFusionClassifier = field(repr=False)

    @property
    def results_path(self) -> Path:
        return self.output_dir / RESULTS_FILE

    @property
    def summary(self) -> dict | None:
        return next((r for r in self.records if r["event"] == "summary"), None)


class _Runner:
    def __init__(self, cfg: RunConfig, output_dir=None):
        self.cfg = cfg
        self.out = Path(output_dir if output_dir is not None else cfg.output_dir)
        self.stream, self.dataset = build_stream(cfg)
        self.clf = PromptFusionClassifier(**cfg.estimator_params())
        self.R = MetricsMatrix(self.stream.n_tasks)
        self.records: list[dict] = []
        self.kde_reference: dict[str, np.ndarray] = {}
        self.next_task = 0

    # -- one task ------------------------------------------------------------
    def _evaluate(self, t: int) -> tuple[list[float], list[int] | None]:
        row, decisions = [], []
        for i in range(t + 1):
            test = self.stream[i].test
            acc = accuracy(test.labels, self.clf.predict(test.images))
            row.append(acc)
            if self.clf.last_decisions_ is not None:
                decisions.append(self.clf.last_decisions_)
        return row, (np.concatenate(decisions).tolist() if decisions else None)

    def _train(self, t: int) -> None:
        task = self.stream[t]
        self.clf.partial_fit(task.train.images, task.train.labels,
                             classes=np.arange(self.dataset.n_classes),
                             sample_keys=self.stream.train_index[t])
        row, decisions = self._evaluate(t)
        self.R.set_row(t, row)
        if t == 0:
            self.kde_reference = self.clf.branch_features(self.stream[0].test.images)
        rec = {"event": "task", "task": t + 1, "row": row,
               "A": average_accuracy(self.R.R, t + 1)}
        if t > 0:
            rec["forgetting"] = forgetting_profile(self.R.R[: t + 1, : t + 1])
        if self.cfg.model.variant == "promptfusion":
            rec["lambda"] = float(self.clf.fusion_.lam.data)
        if decisions is not None:
            rec["decisions"] = decisions
            rec["activation_rate"] = float(np.mean(decisions))
        self.records.append(rec)
        self.next_task = t + 1
        log.info("task %d/%d: A=%.4f", t + 1, self.stream.n_tasks, rec["A"])

    def _finish(self) -> None:
        T = self.stream.n_tasks
        after = self.clf.branch_features(self.stream[0].test.images)
        for branch in sorted(self.kde_reference):
            prof = kde_profile(self.kde_reference[branch], after[branch], seed=self.cfg.kde_seed,
                               grid_points=self.cfg.kde_grid_points)
            self.records.append({"event": "kde", "task": T, "branch": branch,
                                 "divergence": prof["divergence"], "grid": prof["grid"],
                                 "before": prof["before"], "after": prof["after"]})
        last = self.records[-1 - len(self.kde_reference)]
        rate = last.get("activation_rate")
        summary = {"event": "summary", "task": T, "R": self.R.rows(),
                   "A_T": average_accuracy(self.R.R), "config_hash": self.cfg.hash(),
                   "costs": cost_model(self.cfg, rate).to_dict()}
        if T > 1:
            summary["forgetting"] = forgetting_profile(self.R.R)
        if rate is not None:
            summary["activation_rate"] = rate
        self.records.append(summary)

    # -- persistence ---------------------------------------------------------------
    def _save(self) -> None:
        meta, tensors = self.clf.get_state()
        tensors = {f"model/{k}": v for k, v in tensors.items()}
        tensors.update({f"kde_reference/{b}": f for b, f in self.kde_reference.items()})
        ckpt.save(self.out / CHECKPOINT_DIR / f"task_{self.next_task:03d}", tensors,
                  config_hash=self.cfg.hash(), task_index=self.next_task,
                  meta={"config": self.cfg.to_dict(), "estimator": _jsonable(meta),
                        "records": _jsonable(self.records)})

    def restore(self, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
        meta = manifest["meta"]
        model = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
        images = self.dataset.images
        self.clf.set_state(meta["estimator"], model, image_lookup=lambda keys: images[np.asarray(keys)])
        self.kde_reference = {k.split("/", 1)[1]: v for k, v in tensors.items()
                              if k.startswith("kde_reference/")}
        self.records = meta["records"]
        for rec in self.records:
            if rec["event"] == "task":
                self.R.set_row(rec["task"] - 1, rec["row"])
        self.next_task = int(manifest["task_index"])

    # -- driver -------------------------------------------------------------------
    def execute(self, stop_after: int | None = None) -> RunResult:
        self.out.mkdir(parents=True, exist_ok=True)
        T = self.stream.n_tasks
        end = T if stop_after is None else min(int(stop_after), T)
        for t in range(self.next_task, end):
            self._train(t)
            if t + 1 == T:
                self._finish()
            self._save()
            dump_records(self.records, self.out / RESULTS_FILE)
        if self.next_task == T and not any(r["event"] == "summary" for r in self.records):
            self._finish()
        dump_records(self.records, self.out / RESULTS_FILE)
        return RunResult(self.cfg, self.R, self.records, self.out, self.clf)


def run(cfg: RunConfig, output_dir=None, stop_after: int | None = None) -> RunResult:
    """Run the whole protocol (or the first ``stop_after`` tasks) for ``cfg``."""
    return _Runner(cfg, output_dir).execute(stop_after)


def resume(checkpoint_dir, config: RunConfig | None = None, output_dir=None,
           stop_after: int | None = None) -> RunResult:
    """Continue a run from a per-task checkpoint.

    When ``config`` is given its hash must match the checkpoint's. Output
    goes to ``output_dir``, else the config's output directory.
    """
    manifest, tensors = ckpt.load(checkpoint_dir, expected_hash=None if config is None else config.hash())
    stored = from_dict(manifest["meta"]["config"])
    if stored.hash() != manifest["config_hash"]:
        raise ckpt.CheckpointError("checkpoint manifest is inconsistent with its stored config")
    runner = _Runner(config or stored, output_dir)
    runner.restore(manifest, tensors)
    return runner.execute(stop_after)
