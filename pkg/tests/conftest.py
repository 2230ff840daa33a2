import sys

import numpy as np
import pytest

from vidrec import _kernels
from vidrec.simulator import WorldConfig, generate_world

BACKENDS = [pytest.param(_kernels.fallback, id="python")]
if _kernels.compiled is not None:
    BACKENDS.append(pytest.param(_kernels.compiled, id="cython"))


@pytest.fixture(params=BACKENDS)
def kernels(request):
    return request.param


@pytest.fixture(scope="session")
def small_cfg():
    return WorldConfig(seed=1, n_users=100, n_videos=500, n_products=400, taste_clusters=4, n_creators=40,
                       n_hashtags=40)


@pytest.fixture(scope="session")
def small_world(small_cfg):
    return generate_world(small_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL_OVERRIDES = ("world.n_users=120", "world.n_videos=600", "world.n_products=400", "world.n_creators=40",
                   "world.n_hashtags=40", "judge.n_users=10")


@pytest.fixture(scope="session")
def small_run_cfg():
    from vidrec.config import load_config

    return load_config(None, SMALL_OVERRIDES)


@pytest.fixture(scope="session")
def small_world_dir(tmp_path_factory, small_run_cfg):
    from vidrec import experiment as exp

    out = tmp_path_factory.mktemp("world")
    exp.write_world(exp.world_from_config(small_run_cfg), small_run_cfg, out)
    return out


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
