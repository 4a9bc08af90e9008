import time

import pytest

from ftdba.config import ExperimentConfig
from ftdba.experiments import ABLATION_ROWS, run_one, seeds_of

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


class RunCache:
    """Default-scale runs per (schedule mode, benign) on the config's seeds, with wall times."""

    def __init__(self, cfg):
        self.cfg = cfg
        self._runs: dict = {}
        self.seconds: dict = {}

    def get(self, mode: str = "three_stage", benign: bool = False):
        key = (mode, benign)
        if key not in self._runs:
            start = time.perf_counter()
            extra = {"malicious_ratio": 0.0} if benign else {}
            self._runs[key] = [run_one(self.cfg, s, mode=mode, **extra) for s in seeds_of(self.cfg)]
            self.seconds[key] = time.perf_counter() - start
        return self._runs[key]


@pytest.fixture(scope="session")
def default_cfg():
    return ExperimentConfig()


@pytest.fixture(scope="session")
def run_cache(default_cfg):
    return RunCache(default_cfg)


@pytest.fixture(scope="session")
def ablation_runs(run_cache):
    return {mode: run_cache.get(mode) for _, mode in ABLATION_ROWS}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
