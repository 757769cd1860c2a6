import pytest

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion(request):
    """Record a numbered acceptance criterion's outcome for the end-of-run summary."""
    state = {}

    def start(number: int, text: str):
        state["number"], state["text"] = number, text

    yield start
    if "number" in state:
        rep = getattr(request.node, "rep_call", None)
        ok = rep is not None and rep.passed
        # parametrised criteria pass only if every case passes
        prior = ACCEPTANCE.get(state["number"], (True, ""))[0]
        ACCEPTANCE[state["number"]] = (ok and prior, state["text"])


@pytest.hookimpl(wrapper=True, tryfirst=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    if rep.when == "call":
        item.rep_call = rep
    return rep


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {text}")
