import shutil
from pathlib import Path

import numpy as np
import pytest

from mcbn_sr import data
from mcbn_sr.config import load_config
from mcbn_sr.network import NetworkConfig, build_network

DESK_INI = Path(__file__).resolve().parents[1] / "src" / "mcbn_sr" / "configs" / "desk.ini"


def write_synthetic_dataset(root, n_train=8, size=96, n_val=1, n_test=1, seed=7, test_size=None):
    """Grayscale textured PNGs under root/{train,val,test}; returns the root path."""
    root = Path(root)
    specs = (("train", n_train, size, 0), ("val", n_val, size, 200), ("test", n_test, test_size or size, 100))
    for name, count, sz, offset in specs:
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            img = data.synthetic_image(sz, sz, np.random.default_rng([seed, offset + i]))
            data.save_png(img, d / f"{name}{i:02d}.png")
    return root


def desk_config(root, overrides=()):
    """The shipped desk config pointed at a dataset root."""
    root = Path(root)
    base = [f"paths.train_dir={root / 'train'}", f"paths.val_dir={root / 'val'}",
            f"paths.test_dir={root / 'test'}", f"paths.checkpoint={root / 'out' / 'model.mcsr'}",
            f"paths.stats_file={root / 'out' / 'stats.mcbn'}", f"paths.output_dir={root / 'out'}"]
    return load_config(DESK_INI, base + list(overrides))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_params():
    """Untrained D=3, C=4 network whose BN layers see non-trivial statistics."""
    return build_network(NetworkConfig(depth=3, channels=4), np.random.default_rng(0))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    return write_synthetic_dataset(tmp_path_factory.mktemp("small"), n_train=4, size=48, test_size=40)


@pytest.fixture
def small_run(small_dataset, tmp_path):
    """Copy of the small dataset plus a fast config writing into tmp_path."""
    root = tmp_path / "run"
    shutil.copytree(small_dataset, root)
    cfg = desk_config(root, ["network.depth=3", "network.channels=4", "training.iterations=20",
                             "training.val_every=10", "training.patch_size=16", "training.batch_size=4",
                             "run.T=5", "benchmark.image_size=40", "benchmark.repeats=1",
                             "evaluate.sweep_T=1,3,5"])
    return root, cfg
