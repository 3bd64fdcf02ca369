from collections import defaultdict

import pytest

CRITERIA = {
    1: "gradient oracle on every objective",
    2: "closed-form contrastive loss values",
    3: "stop-gradient and EMA contract",
    4: "masking invariants over 1,000 draws",
    5: "training descent at desk scale",
    6: "probe and retrieval after training",
    7: "full objective vs reconstruction-only probe",
    8: "caption verifier and ranking",
    9: "end-to-end determinism",
    10: "geomorphon classification",
}

_outcomes = defaultdict(list)
_notes = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and (rep.when == "call" or rep.failed):
        _outcomes[marker.args[0]].append(rep.passed)


@pytest.fixture
def note(request):
    """Attach a measured value to the test's criterion line in the summary."""
    marker = request.node.get_closest_marker("criterion")
    return lambda text: _notes[marker.args[0]].append(text)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n not in _outcomes:
            continue
        status = "PASS" if all(_outcomes[n]) else "FAIL"
        detail = "; ".join(_notes[n])
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}" + (f"  [{detail}]" if detail else ""))
