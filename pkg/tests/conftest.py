import pytest

try:
    from hypothesis import settings

    settings.register_profile("repro", derandomize=True)
    settings.load_profile("repro")
except ImportError:
    pass

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = "; ".join(f"{k}={v}" for k, v in rep.user_properties)
        _CRITERIA[mark.args[0]] = (mark.args[1], "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[num]
        line = f"C{num} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
