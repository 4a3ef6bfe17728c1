import numpy as np
import pytest

from fcntrainer.dataset import generate_dataset, load_dataset

DIM_DOMAINS = {
    "2d": {"kernels": (1, 3, 5, 7)},
    "3d": {"kernels": (1, 3, 5)},
}


def random_genome(rng, dim):
    kernels = DIM_DOMAINS[dim]["kernels"]
    return {
        "n_blocks": int(rng.choice([3, 5, 7, 9])),
        "base_filters": int(rng.choice([4, 8, 16, 32])),
        "k1": int(rng.choice(kernels)),
        "k2": int(rng.choice(kernels)),
        "k3": int(rng.choice(kernels)),
        "activation": str(rng.choice(["relu", "elu"])),
        "merge": str(rng.choice(["sum", "concat"])),
        "dropout": float(rng.uniform(0.0, 0.7)),
        "lr": float(10.0 ** rng.uniform(-8, np.log10(9e-3))),
    }


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "toy"
    generate_dataset(8, (64, 64, 16), seed=3, out_dir=out)
    return load_dataset(out)
