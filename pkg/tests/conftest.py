import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")
    config.stash[_LINES] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if report.passed else "FAIL"
    item.config.stash[_LINES].append(f"{status}  {marker.args[0]}" + (f"  [{detail}]" if detail else ""))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
