import os
from pathlib import Path

import pytest

from dnfeat.experiment import Run, load_config
from dnfeat.formats import read_json

ROOT = Path(__file__).resolve().parent.parent
BENCHMARK_CONFIG = ROOT / "configs" / "benchmark.json"
# point at a finished run of configs/benchmark.json to skip recomputing it
BENCHMARK_ENV = "DNFEAT_BENCHMARK_DIR"

_acceptance_lines = []


class Benchmark:
    def __init__(self, out: Path, timings: dict | None):
        self.out = out
        self.timings = timings  # None when an earlier run was reused
        self.report = read_json(out / "report.json")


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    """One full run of the committed benchmark config."""
    cfg = load_config(BENCHMARK_CONFIG)
    given = os.environ.get(BENCHMARK_ENV)
    out = Path(given) if given else tmp_path_factory.mktemp("benchmark")
    timings = None
    if not (out / "report.json").exists():
        run = Run(cfg, out)
        run.execute()
        timings = run.timings
    manifest = read_json(out / "run_manifest.json")
    assert manifest["config_hash"] == Run(cfg, out).manifest()["config_hash"], \
        f"{out} holds a run of a different config"
    bench = Benchmark(out, timings)
    assert "failed_stage" not in bench.report, bench.report.get("error")
    return bench


@pytest.fixture
def record_acceptance():
    def record(number: int, passed: bool, detail: str):
        _acceptance_lines.append((number, passed, detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_acceptance_lines):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")
