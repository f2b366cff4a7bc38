import numpy as np
import pytest

from freectl.model import DiTModel, ModelConfig

SMALL = ModelConfig(image_size=8, patch_size=4, dim=8, heads=2, layers=3, num_classes=4)


@pytest.fixture
def small_model():
    return DiTModel(SMALL, seed=1, dtype=np.float64)


@pytest.fixture(scope="session")
def random_model():
    """Default geometry, random weights, float32."""
    return DiTModel(ModelConfig(), seed=3)


# ---------------------------------------------------------------------------
# acceptance reporting: one pass/fail line per criterion in the summary
# ---------------------------------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown" or (rep.when == "setup" and rep.passed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and call.excinfo is not None:
        err = " ".join(str(call.excinfo.value).split())[:160]
        detail = f"{detail} | {err}" if detail else err
    _CRITERIA[number] = (rep.passed, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
