import numpy as np
import pytest

from hspace import denoiser as dn
from hspace import diffusion as df
from hspace import experiments as ex


@pytest.fixture(scope="session")
def tiny64():
    """Untrained tiny denoiser in 64-bit, with non-trivial biases and norms."""
    p = dn.init_params(dn.TINY, seed=3, dtype=np.float64)
    rng = np.random.default_rng(11)
    for k, v in p.arrays.items():
        if k.endswith(".b") or k.endswith(".g"):
            v += 0.1 * rng.standard_normal(v.shape)
    return p


@pytest.fixture(scope="session")
def tiny_schedule():
    return df.linear_schedule(100)


@pytest.fixture(scope="session")
def tiny_trained():
    return ex.trained_model(ex.TINY_RECIPE)


@pytest.fixture(scope="session")
def desk_trained():
    return ex.trained_model(ex.DESK_RECIPE)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_pca(desk_trained):
    return ex.fitted_pca(desk_trained, n_samples=512, k=16, steps=50)


# ------------------------------------------------- acceptance reporting

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seconds": 0.0, "ran": False})
    entry["seconds"] += rep.duration
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed or rep.skipped:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {number:2d}  {e['title']}  ({e['seconds']:.1f} s)")
