import pytest

RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion reported in the summary")
    config.stash[RESULTS] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or (rep.when == "setup" and rep.failed)):
        return
    detail = dict(item.user_properties).get("detail", "")
    item.config.stash[RESULTS].append((marker.args[0], marker.args[1], rep.passed, detail))


def pytest_terminal_summary(terminalreporter, config):
    results = sorted(config.stash.get(RESULTS, []))
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in results:
        terminalreporter.write_line(f"criterion {number:>2} {name}: {'PASS' if passed else 'FAIL'}  {detail}")
