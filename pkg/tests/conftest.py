import numpy as np
import pytest

from morphfit.morphable import BasisSet, ParamVec, random_rotation, synthetic_basis


@pytest.fixture
def small_basis():
    return synthetic_basis(20, 4, 2, seed=101)


@pytest.fixture
def medium_basis():
    return synthetic_basis(120, 10, 4, seed=202)


def make_similarity_params(basis, rng, frame=32.0):
    """Random parameters whose transform is a true similarity f * [R | t]."""
    alpha = rng.standard_normal(basis.n_dims) * basis.basis_col_norms
    rot = random_rotation(rng)
    f = rng.uniform(0.8, 1.2)
    t = np.array([rng.uniform(0, frame), rng.uniform(0, frame), 0.0])
    return ParamVec(transform=np.column_stack([f * rot, t]), alpha=alpha)


def make_arbitrary_params(basis, rng, spread=1.0):
    """Random parameters with a fully generic 3x4 transform."""
    return ParamVec(
        transform=rng.standard_normal((3, 4)) * spread,
        alpha=rng.standard_normal(basis.n_dims) * basis.basis_col_norms,
    )


def finite_difference(fn, x, h=1e-5):
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[i] += h
        lo[i] -= h
        grad[i] = (fn(hi) - fn(lo)) / (2.0 * h)
    return grad


def rel_err(actual, expected):
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    denom = max(float(np.max(np.abs(expected))), 1e-12)
    return float(np.max(np.abs(actual - expected))) / denom
