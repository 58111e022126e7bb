"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""

import time

import pytest

CRITERIA = {
    1: "1D homogenization: effective coefficient and u_eps(0.5) against the harmonic mean",
    2: "Poincare constants on (0,1) and (0,1)^2 against Dirichlet eigenvalues",
    3: "momenta converge weakly while gradients stay strongly apart",
    4: "H-convergence of 1D oscillating operators, including the zero solution",
    5: "Heisenberg structure: affine exactness, group identities, cell matrix",
    6: "pointwise Gamma family: relative gaps 1/(h+1) and decaying minimizer distances",
    7: "invariant suites and total suite time",
}
SUITE_BUDGET = 600.0

_outcomes = {}
_start = [0.0]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")
    _start[0] = time.perf_counter()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or rep.failed or rep.skipped:
        for n in mark.args:
            _outcomes.setdefault(n, []).append((item.name, "skipped" if rep.skipped else rep.passed))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    elapsed = time.perf_counter() - _start[0]
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, label in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            tr.write_line(f"criterion {n}: NOT RUN  {label}")
            continue
        if any(r == "skipped" for _, r in results):
            status = "SKIPPED"
        else:
            status = "PASS" if all(r for _, r in results) else "FAIL"
        extra = ""
        if n == 7:
            within = elapsed <= SUITE_BUDGET
            extra = f" (session {elapsed:.0f} s of {SUITE_BUDGET:.0f} s)"
            if status == "PASS" and not within:
                status = "FAIL"
        failed = [name for name, r in results if r is False]
        if failed:
            extra += " failing: " + ", ".join(failed)
        tr.write_line(f"criterion {n}: {status}  {label}{extra}")
