import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from fedspk import experiment

settings.register_profile("default", max_examples=50, deadline=None)
settings.register_profile("fast", max_examples=10, deadline=None)
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
SWEEP_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@dataclass
class Sweep:
    metrics: list[dict]
    timings: list[dict]

    def teacher_mean(self, regime: str, key: str) -> float:
        return float(np.mean([float(m["teachers"][regime][key]) for m in self.metrics]))

    def student_mean(self, name: str, key: str) -> float:
        return float(np.mean([m["students"][name][key] for m in self.metrics]))

    def stage_seconds(self, prefixes: tuple[str, ...]) -> float:
        return sum(v for t in self.timings for k, v in t.items() if k.startswith(prefixes))


@pytest.fixture(scope="session")
def default_sweep(tmp_path_factory) -> Sweep:
    """The shipped default config run once per seed; shared by every default-scale test."""
    out = tmp_path_factory.mktemp("default_sweep")
    metrics, timings = [], []
    for seed in SWEEP_SEEDS:
        cfg = experiment.load_config(ROOT / "configs" / "default.yaml", seed)
        manifest = experiment.run_pipeline(cfg, out / f"seed{seed}")
        metrics.append(json.loads((out / f"seed{seed}" / "metrics.json").read_text()))
        timings.append(manifest.timings)
    return Sweep(metrics, timings)


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    def _record(criterion: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[criterion] = (bool(passed), detail)
        print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} ({detail})")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
