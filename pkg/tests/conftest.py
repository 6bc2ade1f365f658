import os
import sys
import pathlib

import numpy as np
import pytest

ROOT = pathlib.Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

os.environ.setdefault("SPARSEDERF_PROGRESS", "false")

from src.sparsederf import settings  # noqa: E402
from src.sparsederf.scene.domain_models import SyntheticSceneSpec  # noqa: E402
from src.sparsederf.scene.scene_repository import SceneRepository  # noqa: E402
from src.sparsederf.scene.synthetic_setup import generate_synthetic_scene  # noqa: E402


def pytest_collection_modifyitems(config, items):
    """Skip `slow` end-to-end runs unless SPARSEDERF_RUN_SLOW is truthy."""
    if settings.RUN_SLOW_TESTS:
        return
    skip = pytest.mark.skip(reason="set SPARSEDERF_RUN_SLOW=true to run end-to-end training checks")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def tiny_spec(**overrides) -> SyntheticSceneSpec:
    base = dict(views=3, test_views=1, heldout_views=2, image_size=16, n=3, samples=32, seed=0)
    base.update(overrides)
    return SyntheticSceneSpec(**base)


@pytest.fixture(scope="session")
def tiny_scene_dir(tmp_path_factory):
    """A 16x16 synthetic blurry scene generated once per session."""
    out = tmp_path_factory.mktemp("tiny_scene")
    generate_synthetic_scene(tiny_spec(), str(out), name="tiny")
    return str(out)


@pytest.fixture()
def tiny_scene(tiny_scene_dir):
    return SceneRepository(tiny_scene_dir).load()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
