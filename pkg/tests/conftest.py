import pytest

CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")
    config.stash[CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or (rep.when == "setup" and not rep.passed)):
        return
    number, title = mark.args
    if rep.passed:
        status, note = "PASS", dict(item.user_properties).get("detail", "")
    elif rep.skipped:
        status, note = "SKIP", rep.longrepr[2].removeprefix("Skipped: ")
    else:
        status, note = "FAIL", rep.longrepr.reprcrash.message.splitlines()[0] if hasattr(
            rep.longrepr, "reprcrash") else str(rep.longrepr).splitlines()[-1]
    line = f"criterion {number:2d} {status}  {title}"
    item.config.stash[CRITERIA][number] = line + (f"  [{note}]" if note else "")


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(CRITERIA, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
