import math
from itertools import combinations, permutations

import numpy as np
import pytest

from mbem.errors import InvalidInputError
from mbem.families import Gaussian, MixtureParams, Poisson, sample
from mbem.metrics import (
    MetricReport,
    adjusted_rand_index,
    dataset_loglik,
    map_labels,
    squared_error,
)

from conftest import make_gaussian_mixture

STD_NORMAL_1D = MixtureParams([1.0], (Gaussian([0.0], [[1.0]]),))


# ---------------------------------------------------------------------------
# dataset_loglik
# ---------------------------------------------------------------------------

def test_loglik_single_point_equals_log_density(rng):
    from mbem.families import log_density

    theta = make_gaussian_mixture(rng, 2, 2)
    y = rng.normal(0, 1, (1, 2))
    assert dataset_loglik(y, theta) == log_density(y[0], theta)


def test_loglik_duplicated_data_doubles_exactly(rng):
    theta = make_gaussian_mixture(rng, 1, 2)
    data, _ = sample(theta, 101, rng)
    assert dataset_loglik(np.vstack([data, data]), theta) == 2.0 * dataset_loglik(data, theta)


def test_loglik_two_points_at_standard_normal_mode():
    assert dataset_loglik(np.zeros((2, 1)), STD_NORMAL_1D) == pytest.approx(
        -math.log(2 * math.pi), abs=1e-15
    )


def test_loglik_split_additivity(rng):
    # compensated summation leaves at most the final rounding between the
    # whole-set value and the sum of the split values
    theta = make_gaussian_mixture(rng, 1, 2)
    for _ in range(30):
        data, _ = sample(theta, int(rng.integers(5, 200)), rng)
        k = int(rng.integers(1, len(data)))
        whole = dataset_loglik(data, theta)
        parts = dataset_loglik(data[:k], theta) + dataset_loglik(data[k:], theta)
        assert abs(whole - parts) <= np.spacing(abs(whole))


def test_loglik_order_invariance(rng):
    theta = make_gaussian_mixture(rng, 1, 3)
    data, _ = sample(theta, 200, rng)
    shuffled = data[rng.permutation(len(data))]
    assert dataset_loglik(data, theta) == dataset_loglik(shuffled, theta)


def test_loglik_requires_data():
    with pytest.raises(InvalidInputError):
        dataset_loglik(np.zeros((0, 1)), STD_NORMAL_1D)


# ---------------------------------------------------------------------------
# map_labels
# ---------------------------------------------------------------------------

def test_map_labels_single_component(rng):
    data = rng.normal(0, 1, (25, 1))
    assert np.array_equal(map_labels(data, STD_NORMAL_1D), np.zeros(25, dtype=int))


def test_map_labels_tie_breaks_to_lowest_index():
    theta = MixtureParams([0.5, 0.5], (Gaussian([-1.0], [[1.0]]), Gaussian([1.0], [[1.0]])))
    assert map_labels(np.array([[0.0]]), theta)[0] == 0


def test_map_labels_recovers_well_separated_sample(rng):
    theta = MixtureParams(
        [0.5, 0.5], (Gaussian([0.0], [[1.0]]), Gaussian([20.0], [[1.0]]))
    )  # separation 20 sigma
    data, labels = sample(theta, 2000, rng)
    fitted = map_labels(data, theta)
    assert adjusted_rand_index(fitted, labels) == 1.0


# ---------------------------------------------------------------------------
# adjusted_rand_index
# ---------------------------------------------------------------------------

def _ari_pair_oracle(a, b):
    """Direct pair-enumeration Hubert-Arabie index."""
    n = len(a)
    n11 = n10 = n01 = 0
    for i, j in combinations(range(n), 2):
        sa, sb = a[i] == a[j], b[i] == b[j]
        n11 += sa and sb
        n10 += sa and not sb
        n01 += sb and not sa
    pairs = n * (n - 1) // 2
    expected = (n11 + n10) * (n11 + n01) / pairs
    maximum = (2 * n11 + n10 + n01) / 2.0
    if maximum == expected:
        return 1.0
    return (n11 - expected) / (maximum - expected)


def test_ari_identical_partitions():
    a = np.array([0, 0, 1, 1, 2, 2])
    assert adjusted_rand_index(a, a) == 1.0


def test_ari_single_cluster_against_nonconstant():
    a = np.array([0, 0, 1, 1])
    b = np.zeros(4, dtype=int)
    assert adjusted_rand_index(a, b) == 0.0


def test_ari_frozen_cross_example():
    # enumeration over all six pairs of [1,1,2,2] vs [1,2,1,2] gives -1/2
    assert adjusted_rand_index([1, 1, 2, 2], [1, 2, 1, 2]) == pytest.approx(-0.5, abs=1e-15)


def test_ari_matches_pair_enumeration_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(2, 13))
        a = rng.integers(0, 4, n)
        b = rng.integers(0, 4, n)
        assert adjusted_rand_index(a, b) == pytest.approx(_ari_pair_oracle(a, b), abs=1e-12)


def test_ari_symmetry(rng):
    for _ in range(30):
        n = int(rng.integers(2, 40))
        a, b = rng.integers(0, 5, n), rng.integers(0, 5, n)
        assert adjusted_rand_index(a, b) == adjusted_rand_index(b, a)


def test_ari_relabel_invariance_exact(rng):
    for _ in range(30):
        n = int(rng.integers(4, 40))
        a, b = rng.integers(0, 4, n), rng.integers(0, 4, n)
        perm = rng.permutation(4)
        assert adjusted_rand_index(perm[a], b) == adjusted_rand_index(a, b)
        assert adjusted_rand_index(a, perm[b]) == adjusted_rand_index(a, b)


def test_ari_both_single_cluster_convention():
    assert adjusted_rand_index([3, 3, 3], [7, 7, 7]) == 1.0


def test_ari_length_mismatch():
    with pytest.raises(InvalidInputError):
        adjusted_rand_index([0, 1], [0, 1, 2])


def test_ari_large_n_no_overflow():
    # marginal pair products exceed int64 near n = 1e5; exact integers keep this safe
    n = 100_000
    rng = np.random.default_rng(0)
    a = rng.integers(0, 3, n)
    b = a.copy()
    assert adjusted_rand_index(a, b) == 1.0


# ---------------------------------------------------------------------------
# squared_error
# ---------------------------------------------------------------------------

def _two_comp(w, mu, var):
    return MixtureParams(w, (Gaussian([mu[0]], [[var[0]]]), Gaussian([mu[1]], [[var[1]]])))


def test_squared_error_zero_on_equal(rng):
    theta = make_gaussian_mixture(rng, 2, 3)
    assert squared_error(theta, theta) == 0.0


def test_squared_error_zero_on_reversed_components():
    a = _two_comp([0.3, 0.7], [-1.0, 2.0], [1.0, 2.0])
    b = _two_comp([0.7, 0.3], [2.0, -1.0], [2.0, 1.0])
    assert squared_error(a, b) == 0.0


def test_squared_error_coordinate_arithmetic():
    a = MixtureParams([1.0], (Gaussian([1.0], [[2.0]]),))
    b = MixtureParams([1.0], (Gaussian([0.0], [[1.0]]),))
    assert squared_error(a, b) == pytest.approx(2.0, abs=1e-15)
    assert squared_error(a, b, root=True) == pytest.approx(math.sqrt(2.0), abs=1e-15)


def test_squared_error_permutation_invariance_exact(rng):
    theta = make_gaussian_mixture(rng, 2, 4)
    ref = make_gaussian_mixture(rng, 2, 4)
    base = squared_error(theta, ref)
    for perm in permutations(range(4)):
        shuffled = MixtureParams(
            theta.weights[list(perm)], tuple(theta.components[z] for z in perm)
        )
        assert squared_error(shuffled, ref) == base


def test_squared_error_pseudo_metric(rng):
    a = make_gaussian_mixture(rng, 1, 2)
    b = make_gaussian_mixture(rng, 1, 2)
    assert squared_error(a, b) > 0.0
    flipped = MixtureParams(a.weights[[1, 0]], (a.components[1], a.components[0]))
    assert squared_error(a, flipped) == 0.0


def test_squared_error_assignment_matches_enumeration():
    # the g > 8 assignment path must agree with brute-force enumeration
    rng = np.random.default_rng(4)
    g = 9
    comps_a = tuple(Gaussian([float(rng.normal())], [[1.0 + float(rng.uniform())]]) for _ in range(g))
    comps_b = tuple(Gaussian([float(rng.normal())], [[1.0 + float(rng.uniform())]]) for _ in range(g))
    wa = rng.dirichlet(np.ones(g)) + 0.01
    wa /= wa.sum()
    wb = rng.dirichlet(np.ones(g)) + 0.01
    wb /= wb.sum()
    a = MixtureParams(wa, comps_a)
    b = MixtureParams(wb, comps_b)
    from mbem.metrics import _component_blocks

    blocks_a, blocks_b = _component_blocks(a), _component_blocks(b)
    cost = ((blocks_a[:, None, :] - blocks_b[None, :, :]) ** 2).sum(axis=2)
    brute = min(sum(cost[z, p[z]] for z in range(g)) for p in permutations(range(g)))
    assert squared_error(a, b) == pytest.approx(brute, rel=1e-12)


def test_squared_error_shape_mismatch():
    a = MixtureParams([1.0], (Gaussian([0.0], [[1.0]]),))
    b = MixtureParams([0.5, 0.5], (Gaussian([0.0], [[1.0]]), Gaussian([1.0], [[1.0]])))
    with pytest.raises(InvalidInputError):
        squared_error(a, b)
    c = MixtureParams([1.0], (Poisson(1.0),))
    with pytest.raises(InvalidInputError):
        squared_error(a, c)


def test_squared_error_rate_family():
    a = MixtureParams([0.5, 0.5], (Poisson(1.0), Poisson(4.0)))
    b = MixtureParams([0.5, 0.5], (Poisson(4.0), Poisson(1.0)))
    assert squared_error(a, b) == 0.0


# ---------------------------------------------------------------------------
# MetricReport
# ---------------------------------------------------------------------------

def test_metric_report_validation():
    MetricReport(loglik=-10.0, se=0.1, ari=0.5, runtime_seconds=1.0)
    with pytest.raises(InvalidInputError):
        MetricReport(loglik=0.0, se=0.0, ari=1.5, runtime_seconds=0.0)
    with pytest.raises(InvalidInputError):
        MetricReport(loglik=0.0, se=0.0, ari=0.0, runtime_seconds=-1.0)
