import pytest

# criterion -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE = {}
PROPERTY_OUTCOMES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "property: invariant / property-based test (acceptance criterion 10)")


def pytest_collection_modifyitems(session, config, items):
    # acceptance runs last so criterion 10 can see the property-suite outcomes
    items.sort(key=lambda it: it.nodeid.startswith("tests/test_acceptance.py") or "test_acceptance.py" in it.nodeid)


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if "property" in report.keywords:
            PROPERTY_OUTCOMES.append((report.nodeid, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
