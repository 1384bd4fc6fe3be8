"""Shared fixtures.  The acceptance suite reports one line per criterion in the
terminal summary, so the verdicts are visible even when output is captured."""

import pytest

ACCEPTANCE_TITLES = {
    1: "gradient correctness",
    2: "ReLU input Hessian is zero",
    3: "projection estimator",
    4: "regression sweep ratio at n=100",
    5: "low-data emphasis",
    6: "distillation direction",
    7: "synthetic gradient ordering",
    8: "oracle SG equals backprop",
    9: "zero-loss interpolant witness",
    10: "Gaussian identification witness",
    11: "manifest reproducibility",
}
_verdicts: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str) -> None:
        _verdicts[number] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in ACCEPTANCE_TITLES.items():
        if number in _verdicts:
            passed, detail = _verdicts[number]
            verdict = "PASS" if passed else "FAIL"
        else:
            verdict, detail = "FAIL", "not evaluated (test errored or was deselected)"
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {title}: {detail}")
