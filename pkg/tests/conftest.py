import time

import pytest

from fedslice.config import ExperimentConfig
from fedslice.federation import run_baseline, run_method1, run_method2

SESSION_START = time.perf_counter()

ACCEPTANCE_CRITERIA = {
    1: "otp-affine-exactness",
    2: "masked-matmul-exactness",
    3: "mask-one-time-property",
    4: "taint-soundness",
    5: "functional-transparency",
    6: "truncation-effect",
    7: "aggregation-oracle",
    8: "spf-equivalence-isolation-selection",
    9: "parameter-count-monotonicity",
    10: "cost-ordering-and-runtime",
    11: "method2-protocol-shape",
    12: "learning-sanity",
}

_RESULTS: dict[int, tuple[str, str]] = {}


def record_criterion(num: int, status: str, detail: str = "") -> None:
    _RESULTS[num] = (status, detail)


def pytest_runtest_makereport(item, call):
    if call.when != "call" or "test_acceptance" not in str(item.fspath):
        return
    name = item.name
    if not name.startswith("test_criterion_"):
        return
    try:
        num = int(name.split("_")[2])
    except (IndexError, ValueError):
        return
    if call.excinfo is not None:
        _RESULTS[num] = ("FAIL", str(call.excinfo.value).splitlines()[0][:120])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_CRITERIA):
        if num in _RESULTS:
            status, detail = _RESULTS[num]
            suffix = f"  [{detail}]" if detail else ""
            tr.write_line(f"criterion {num:02d} {ACCEPTANCE_CRITERIA[num]}: {status}{suffix}")
        else:
            tr.write_line(f"criterion {num:02d} {ACCEPTANCE_CRITERIA[num]}: NOT RUN")
    tr.write_line(f"acceptance elapsed: {time.perf_counter() - SESSION_START:.1f}s")


# ---------------------------------------------------------------------------
# shared full-size runs (defaults: 3 clients, 10 rounds, rank 8, dropout 0.1)

SEEDS = (0, 1, 2)


def full_cfg(method: str, seed: int = 0, **kw) -> ExperimentConfig:
    return ExperimentConfig(method=method, seed=seed, **kw)


@pytest.fixture(scope="session")
def fl_runs():
    return {s: run_baseline(full_cfg("fl-llm", s)) for s in SEEDS}


@pytest.fixture(scope="session")
def m1_runs():
    return {s: run_method1(full_cfg("method1", s)) for s in SEEDS}


@pytest.fixture(scope="session")
def m1_simhalf_runs():
    return {s: run_method1(full_cfg("method1", s, precision="simhalf")) for s in SEEDS}


@pytest.fixture(scope="session")
def m2_run():
    return run_method2(full_cfg("method2"))


@pytest.fixture(scope="session")
def swmt_run():
    return run_baseline(full_cfg("swmt"))
