import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from satmpi.fit import fit, scene_config
from satmpi.io import load_scene
from satmpi.synth import fixture_spec, make_scene

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


# criterion number -> (title, all parts passed so far)
_CRITERIA = {}
# free-form measurement lines reported by the acceptance tests
_MEASUREMENTS = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion n")


def pytest_runtest_logreport(report):
    mark = getattr(report, "acceptance", None)
    if mark is None:
        return
    n, title = mark
    ok = not report.failed and (report.when != "call" or report.passed)
    _CRITERIA[n] = (title, _CRITERIA.get(n, (title, True))[1] and ok)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("acceptance")
    if mark is not None:
        outcome.get_result().acceptance = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}")
    if _MEASUREMENTS:
        terminalreporter.section("acceptance measurements")
        for line in _MEASUREMENTS:
            terminalreporter.write_line(line)


@pytest.fixture
def measure():
    """Record a line for the acceptance measurement summary."""
    return _MEASUREMENTS.append


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scene_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    out = {}
    for kind in ("flat", "ramp"):
        make_scene(fixture_spec(kind), root / kind)
        out[kind] = root / kind / "manifest.json"
    return out


@pytest.fixture(scope="session")
def scenes(scene_dirs):
    return {k: load_scene(p) for k, p in scene_dirs.items()}


@pytest.fixture(scope="session")
def fitted(scenes):
    """Lazily fitted traces keyed by (scene kind, weight overrides)."""
    cache = {}

    def get(kind, **weights):
        key = (kind, tuple(sorted(weights.items())))
        if key not in cache:
            from satmpi.objective import LossWeights
            cache[key] = fit(scenes[kind], scene_config(weights=LossWeights(**weights)))
        return cache[key]

    return get
