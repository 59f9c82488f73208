import functools

import numpy as np
import pytest

from rdtrigger import harness
from rdtrigger.kernels import PlantParams, compute_kernels

REF = PlantParams(eps=0.001, lam=0.01, q=5.1)
FAST = PlantParams(eps=1.0, lam=8.0, q=9.0)

# acceptance outcomes, printed as one line each at the end of the session
ACCEPTANCE = {}


@functools.lru_cache(maxsize=None)
def kernels(p: PlantParams, n: int):
    return compute_kernels(p, n)


@functools.lru_cache(maxsize=None)
def prepared(name: str, horizon: float | None = None):
    sc = harness.BUILTINS[name]
    if horizon is not None:
        d = sc.to_dict()
        d["grid"]["horizon"] = horizon
        sc = harness.scenario_from_dict(d)
    return harness.prepare(sc)


@functools.lru_cache(maxsize=None)
def scheme_run(name: str, scheme: str, horizon: float | None = None):
    return harness.run_prepared(prepared(name, horizon), scheme)


@pytest.fixture(scope="session")
def ref_ks():
    return kernels(REF, 256)


@pytest.fixture(scope="session")
def fast_runs():
    return {s: scheme_run("fast-ci", s) for s in ("cetc", "petc", "stc")}


@pytest.fixture(scope="session")
def ref_runs():
    """Full-horizon runs of the reference scenario (tens of seconds each)."""
    return {s: scheme_run("paper", s) for s in ("cetc", "petc", "stc")}


def record(key: str, passed: bool, detail: str):
    ACCEPTANCE[key] = (passed, detail)
    print(f"{key} {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")
