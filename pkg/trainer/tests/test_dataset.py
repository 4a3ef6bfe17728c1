import numpy as np

from fcntrainer.dataset import (
    NOISE_SIGMA, generate_dataset, kfold_indices, load_dataset, make_volume,
)


def test_deterministic_regeneration(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_dataset(4, (16, 16, 8), seed=5, out_dir=a)
    generate_dataset(4, (16, 16, 8), seed=5, out_dir=b)
    for name in ("img_000.svol", "lab_003.svol", "dataset.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_labels_nonempty_and_binary(tmp_path):
    generate_dataset(6, (16, 16, 8), seed=1, out_dir=tmp_path / "d")
    _, _, labels = load_dataset(tmp_path / "d")
    for lab in labels:
        assert set(np.unique(lab)) <= {0, 1}
        assert lab.any()


def test_foreground_contrast_exceeds_two_sigma():
    rng = np.random.default_rng(9)
    gaps = []
    for _ in range(10):
        image, mask = make_volume((32, 32, 16), rng)
        fg = image[mask == 1].mean()
        bg = image[mask == 0].mean()
        gaps.append(fg - bg)
    assert min(gaps) >= 2.0 * NOISE_SIGMA


def test_kfold_partition():
    folds = kfold_indices(20, 5, seed=2)
    assert len(folds) == 5
    all_val = sorted(v for _, val in folds for v in val)
    assert all_val == list(range(20))
    for train, val in folds:
        assert sorted(train + val) == list(range(20))
    assert kfold_indices(20, 5, seed=2) == folds
