"""Shared pytest hooks.

The release gates live in test_acceptance.py as test_cNN_* functions; the
terminal summary below prints one PASS/FAIL line per gate so a full run
always ends with the per-criterion verdict, whatever else is in the run.
"""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = {}
    # failures first so a test that passed its call phase but blew up in
    # teardown still reports FAIL
    for outcome in ("failed", "error", "passed"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_c" not in nodeid:
                continue
            rows.setdefault(nodeid.split("::")[-1], outcome)
    if not rows:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name in sorted(rows):
        verdict = "PASS" if rows[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"{name}: {verdict}")
