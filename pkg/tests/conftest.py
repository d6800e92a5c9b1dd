import numpy as np
import pytest

from sconv.data import SynthConfig, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small shared synthetic dataset: 10 train / 4 val scenes at 32x32."""
    root = tmp_path_factory.mktemp("tiny_data")
    cfg = SynthConfig(image_size=32, train_scenes=10, val_scenes=4, seed=7)
    manifests = synth_generate(cfg, str(root))
    return {"root": str(root), "cfg": cfg, "manifests": manifests}
