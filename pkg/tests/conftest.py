from hypothesis import settings

# Property tests draw from a fixed seed so every run sees the same examples.
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")

# Lines appended by the acceptance module, echoed at the end of the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
