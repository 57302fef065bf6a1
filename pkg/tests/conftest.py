import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_images(n, size=8, channels=3, seed=0):
    return np.random.default_rng(seed).random((n, size, size, channels)).astype(np.float32)


TOY_PARAMS = dict(vision_width=8, text_width=8, depth=1, n_heads=2, patch_size=4,
                  text_prompt_length=2, booster_prompt_length=2, image_prompt_length=2,
                  gate_hidden=4, epochs=1, batch_size=8, feature_samples_per_class=4, finetune_steps=2)


def toy_stream(n_classes=4, n_tasks=2, per_class=12, size=8, seed=0):
    """Class-incremental toy: list of ``(X_train, y_train, X_test, y_test)`` per task."""
    from promptfusion.stream import make_class_incremental_stream, make_split_blobs
    ds = make_split_blobs(n_classes, per_class, size, 3, 4, 3.0, 0.5, 1, seed=seed)
    stream = make_class_incremental_stream(ds, n_tasks, seed=seed, train_fraction=0.75)
    return [(t.train.images, t.train.labels, t.test.images, t.test.labels) for t in stream]


@pytest.fixture
def toy():
    return toy_stream()


# -- acceptance reporting ------------------------------------------------------

CRITERIA: dict[int, tuple[str, bool, list[str]]] = {}


class Criterion:
    """Collects the sub-checks of one acceptance criterion into one summary line."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.checks: list[tuple[str, bool, str]] = []

    def check(self, label: str, ok, detail: str = "") -> bool:
        self.checks.append((label, bool(ok), detail))
        return bool(ok)

    def finish(self) -> None:
        ok = all(c[1] for c in self.checks)
        lines = [f"{'ok  ' if c[1] else 'FAIL'} {c[0]}" + (f": {c[2]}" if c[2] else "") for c in self.checks]
        CRITERIA[self.number] = (self.title, ok, lines)
        failed = [c[0] for c in self.checks if not c[1]]
        assert not failed, f"criterion {self.number} failed: {failed}"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, ok, lines = CRITERIA[n]
        tr.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}")
        for line in lines:
            tr.write_line(f"      {line}")
