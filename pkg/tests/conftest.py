import numpy as np
import pytest

from moeleak.moe import build_model, preset


@pytest.fixture(scope="session")
def toy():
    return build_model(preset("toy"))


@pytest.fixture(scope="session")
def lite():
    return build_model(preset("lite-shape"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary: one PASS/FAIL line per criterion -----------------------------

_criteria = {}


@pytest.fixture
def measured(request):
    """Tests append human-readable measurements shown in the summary line."""
    notes = []
    request.node.user_properties.append(("measured", notes))
    return notes


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    notes = dict(item.user_properties).get("measured", [])
    _criteria[mark.args[0]] = (mark.args[1], rep.passed, rep.duration, list(notes))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok, secs, notes = _criteria[n]
        detail = "; ".join(notes)
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title} ({secs:.1f} s)"
                                    + (f"  [{detail}]" if detail else ""))
