import numpy as np
import pytest

from moenas.objectives import (
    EvalResult, ObjectiveVector, dice_coefficient, f1_objective, objective_vector,
)


def test_dice_identical_masks():
    m = np.zeros((4, 4, 4), dtype=np.uint8)
    m[1:3, 1:3, 1:3] = 1
    assert dice_coefficient(m, m) == 1.0


def test_dice_disjoint_masks():
    a = np.zeros((4, 4, 4), dtype=np.uint8)
    b = np.zeros((4, 4, 4), dtype=np.uint8)
    a[0, 0, 0] = 1
    b[3, 3, 3] = 1
    assert dice_coefficient(a, b) == 0.0


def test_dice_partial_overlap():
    a = np.zeros((8, 1, 1), dtype=np.uint8)
    b = np.zeros((8, 1, 1), dtype=np.uint8)
    a[0:4] = 1          # 4 voxels
    b[2:6] = 1          # 4 voxels, overlap 2
    assert dice_coefficient(a, b) == pytest.approx(0.5, abs=1e-15)


def test_dice_both_empty_is_one():
    z = np.zeros((3, 3, 3), dtype=np.uint8)
    assert dice_coefficient(z, z) == 1.0


def test_dice_empty_vs_nonempty_is_zero():
    z = np.zeros((3, 3, 3), dtype=np.uint8)
    m = z.copy()
    m[0, 0, 0] = 1
    assert dice_coefficient(z, m) == 0.0
    assert dice_coefficient(m, z) == 0.0


def test_dice_symmetric_and_permutation_invariant():
    rng = np.random.default_rng(0)
    a = (rng.random((5, 5, 5)) > 0.5).astype(np.uint8)
    b = (rng.random((5, 5, 5)) > 0.5).astype(np.uint8)
    assert dice_coefficient(a, b) == dice_coefficient(b, a)
    perm = rng.permutation(a.size)
    ap = a.ravel()[perm].reshape(a.shape)
    bp = b.ravel()[perm].reshape(b.shape)
    assert dice_coefficient(ap, bp) == pytest.approx(dice_coefficient(a, b), abs=1e-15)


def test_dice_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        dice_coefficient(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_f1_perfect_fit_is_zero():
    r = EvalResult(dsc_train=1.0, dsc_val=1.0, e_max=120, param_count=10)
    assert f1_objective(r, 0.25, 0.25, 120) == 0.0


def test_f1_worked_example():
    r = EvalResult(dsc_train=0.9, dsc_val=0.8, e_max=60, param_count=1)
    assert f1_objective(r, 0.25, 0.25, 120) == pytest.approx(0.35, abs=1e-12)


def test_f1_worst_case_upper_bound():
    r = EvalResult(dsc_train=0.0, dsc_val=0.0, e_max=0, param_count=0)
    assert f1_objective(r, 0.25, 0.25, 120) == pytest.approx(1.5, abs=1e-12)


def test_f1_monotone_in_each_component():
    base = dict(dsc_train=0.5, dsc_val=0.5, e_max=60, param_count=1)
    f0 = f1_objective(EvalResult(**base))
    assert f1_objective(EvalResult(**{**base, "dsc_train": 0.6})) < f0
    assert f1_objective(EvalResult(**{**base, "dsc_val": 0.6})) < f0
    assert f1_objective(EvalResult(**{**base, "e_max": 61})) < f0


def test_f1_rejects_e_max_over_budget():
    r = EvalResult(dsc_train=0.5, dsc_val=0.5, e_max=121, param_count=1)
    with pytest.raises(ValueError):
        f1_objective(r, 0.25, 0.25, 120)


def test_f1_rejects_bad_weights():
    r = EvalResult(dsc_train=0.5, dsc_val=0.5, e_max=1, param_count=1)
    with pytest.raises(ValueError):
        f1_objective(r, 1.5, 0.25, 120)
    with pytest.raises(ValueError):
        f1_objective(r, 0.25, -0.1, 120)


def test_f1_bounds_hold_on_random_inputs():
    rng = np.random.default_rng(1)
    for _ in range(500):
        alpha, beta = rng.random(), rng.random()
        e = int(rng.integers(1, 200))
        r = EvalResult(dsc_train=float(rng.random()), dsc_val=float(rng.random()),
                       e_max=int(rng.integers(0, e + 1)), param_count=int(rng.integers(0, 10**7)))
        f1 = f1_objective(r, alpha, beta, e)
        assert 0.0 <= f1 <= alpha + 1.0 + beta + 1e-12


def test_objective_vector():
    r = EvalResult(dsc_train=1.0, dsc_val=1.0, e_max=120, param_count=10)
    assert objective_vector(r, 0.25, 0.25, 120) == ObjectiveVector(0.0, 10.0)
    r2 = EvalResult(dsc_train=0.9, dsc_val=0.8, e_max=60, param_count=1_600_000)
    v = objective_vector(r2, 0.25, 0.25, 120)
    assert v.f1 == pytest.approx(0.35, abs=1e-12)
    assert v.f2 == 1_600_000.0


def test_f1_independent_of_param_count():
    a = EvalResult(dsc_train=0.7, dsc_val=0.6, e_max=30, param_count=100)
    b = EvalResult(dsc_train=0.7, dsc_val=0.6, e_max=30, param_count=10**6)
    assert f1_objective(a) == f1_objective(b)


def test_eval_result_validation():
    with pytest.raises(ValueError):
        EvalResult(dsc_train=1.2, dsc_val=0.5, e_max=1, param_count=1)
    with pytest.raises(ValueError):
        EvalResult(dsc_train=0.5, dsc_val=-0.1, e_max=1, param_count=1)
    with pytest.raises(ValueError):
        EvalResult(dsc_train=0.5, dsc_val=0.5, e_max=-1, param_count=1)
    with pytest.raises(ValueError):
        EvalResult(dsc_train=0.5, dsc_val=0.5, e_max=1, param_count=-1)
