import pytest

CRITERIA = {
    1: "gradient correctness",
    2: "mask oracle",
    3: "pooling oracle",
    4: "analytic constants and instrumented prefill count",
    5: "LoRA contracts",
    6: "training sanity",
    7: "directional comparison against baselines",
    8: "K-sweep shape",
    9: "data integrity",
}

_outcomes: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _outcomes.setdefault(marker.args[0], []).append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n not in _outcomes:
            continue
        ok = all(_outcomes[n])
        terminalreporter.write_line(f"criterion {n} ({name}): {'PASS' if ok else 'FAIL'}")
