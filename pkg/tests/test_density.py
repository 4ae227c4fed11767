import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tripod import density, oracles, quantizers
from tripod import tensor as T
from tripod.quantizers import LatentBatch
from tripod.tensor import Tensor


def batch(z):
    t = Tensor(np.asarray(z, dtype=np.float64))
    return LatentBatch(t, t, quantizers.latent_sigma(t))


def test_silverman_reference_value_is_exact():
    spec = density.silverman(Tensor(np.ones(2)), 64, 2)
    assert spec.s_diag.data.tolist() == [0.25, 0.25]


def test_silverman_floor_and_scaling():
    factor = density.silverman_factor(64, 3)
    spec = density.silverman(Tensor([0.0, 1.0, 2.0]), 64, 3)
    assert spec.s_diag.data[0] == pytest.approx(factor * quantizers.SIGMA_FLOOR**2)
    assert spec.s_diag.data[2] == pytest.approx(4.0 * spec.s_diag.data[1])
    with pytest.raises(ValueError):
        density.silverman(Tensor([1.0]), 1, 1)


def test_single_point_joint_is_kernel_peak():
    s_diag = np.array([0.3, 0.7])
    spec = density.SmoothingSpec(Tensor(np.sqrt(s_diag)), Tensor(s_diag))
    got = float(density.kde_log_joint(Tensor([[0.4, -1.2]]), spec).data[0])
    assert got == pytest.approx(-math.log(2 * math.pi) - 0.5 * np.log(s_diag).sum(), rel=1e-14)


def test_single_point_marginal_is_kernel_peak():
    spec = density.SmoothingSpec(Tensor([0.5]), Tensor([0.1]))
    got = float(density.kde_log_marginal(Tensor([[3.0]]), 0, spec).data[0])
    assert got == pytest.approx(-0.5 * math.log(2 * math.pi) - math.log(0.5), rel=1e-14)


def test_vectorized_matches_double_loop():
    res = oracles.suite_kde(seed=3, n_batches=10)
    assert all(r.passed for r in res), [r.line() for r in res]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_translation_invariance(seed, shift):
    z = np.random.default_rng(seed).normal(size=(10, 3))
    spec = density.silverman(Tensor(z.std(axis=0)), 10, 3)
    a = density.kde_log_joint(Tensor(z), spec).data
    b = density.kde_log_joint(Tensor(z + shift), spec).data
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(density.kde_log_marginals(Tensor(z), spec).data,
                               density.kde_log_marginals(Tensor(z + shift), spec).data, rtol=1e-9, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 20.0))
def test_scale_robustness_in_silverman_mode(seed, scale):
    z = np.random.default_rng(seed).normal(size=(12, 3))
    stretched = z.copy()
    stretched[:, 1] *= scale
    a, b = batch(z), batch(stretched)
    spec_a = density.silverman(a.sigma, 12, 3)
    spec_b = density.silverman(b.sigma, 12, 3)
    # marginal of the stretched dim shifts by exactly -log(scale); the joint by the same amount
    la = density.kde_log_marginals(a.quantized, spec_a).data
    lb = density.kde_log_marginals(b.quantized, spec_b).data
    np.testing.assert_allclose(lb[:, 1] + math.log(scale), la[:, 1], rtol=1e-9, atol=1e-9)
    ja = density.kde_log_joint(a.quantized, spec_a).data
    jb = density.kde_log_joint(b.quantized, spec_b).data
    np.testing.assert_allclose(jb + math.log(scale), ja, rtol=1e-9, atol=1e-9)
    assert float(density.klm_loss(b).data) == pytest.approx(float(density.klm_loss(a).data), rel=1e-9, abs=1e-9)


def test_duplicated_dimension_is_strongly_dependent():
    z = np.random.default_rng(0).uniform(-1, 1, size=(256, 1))
    assert float(density.klm_loss(batch(np.hstack([z, z]))).data) > 0.5
    assert float(density.klm_loss_naive(batch(np.hstack([z, z])), 0.1).data) > 0.5


def test_duplicated_beats_permuted():
    perm, dup = oracles.klm_calibration(n_seeds=3, n_b=256)
    assert dup > perm + 0.5


def test_fixed_bandwidth_estimate_concentrates_for_independent_batches():
    small = abs(oracles.klm_calibration(n_seeds=4, n_b=128, estimator=density.klm_loss_naive)[0])
    large = abs(oracles.klm_calibration(n_seeds=4, n_b=1024, estimator=density.klm_loss_naive)[0])
    assert large < small
    assert large < 0.1


def test_identical_points_give_finite_loss():
    z = np.full((16, 3), 0.25)
    assert np.isfinite(float(density.klm_loss(batch(z)).data))


def test_klm_needs_two_samples():
    with pytest.raises(ValueError):
        density.klm_loss(batch([[0.1, 0.2]]))
    with pytest.raises(ValueError):
        density.klm_loss_naive(batch([[0.1, 0.2]]))


def test_klm_gradient_reaches_latents_and_sigma():
    rng = np.random.default_rng(4)
    pre = Tensor(rng.normal(size=(16, 3)), requires_grad=True)
    lat = quantizers.fsq_quantize(pre, quantizers.FsqSpec(3))
    (g,) = T.grad(density.klm_loss(lat), [pre])
    assert np.all(np.isfinite(g)) and np.any(g != 0.0)


def test_fixed_spec_rejects_nonpositive_bandwidth():
    with pytest.raises(ValueError):
        density.fixed(0.0, 2)
