import numpy as np
import pytest

from voxcomplete.voxel import DenseField, VoxelGrid


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_grid(rng, n=8, p=0.3, object_id=None, category=None):
    return VoxelGrid(rng.random((n, n, n)) < p, object_id=object_id,
                     category=category)


def random_field(rng, n=8):
    return DenseField(rng.random((n, n, n)))


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Small shared corpus: 4 families x 3 objects x 2 scans at 16^3."""
    from voxcomplete import data as dg

    root = tmp_path_factory.mktemp("corpus")
    manifest = dg.gen_toy_dataset(
        16, ("table", "lamp", "basket", "bench"), 3, 2, seed=5, out_dir=root
    )
    return manifest
