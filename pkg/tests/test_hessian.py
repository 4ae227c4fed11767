import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tripod import hessian as H
from tripod import oracles, quantizers
from tripod import tensor as T
from tripod.quantizers import LatentBatch
from tripod.tensor import Tensor


def additive_decoder(z):
    return [T.square(z[:, 0:1]) + T.square(z[:, 1:2]) * 3.0]


@pytest.mark.parametrize("direction,expected", [((1.0, 1.0), 2.0), ((1.0, -1.0), -2.0), ((1.0, 0.0), 0.0)])
def test_curvature_probe_on_product(direction, expected):
    (curv,) = H.curvature_probe(oracles.product_decoder(), np.array([0.3, -0.7]), np.array(direction))
    assert float(curv.data[0]) == pytest.approx(expected, abs=1e-10)


def test_curvature_probe_batched_rows():
    z = np.array([[0.0, 0.0], [1.0, 2.0], [-3.0, 0.5]])
    (curv,) = H.curvature_probe(oracles.product_decoder(2.0), z, np.array([1.0, 1.0]))
    np.testing.assert_allclose(curv.data[:, 0], 4.0, atol=1e-9)


def test_vanilla_hp_on_product_averages_to_four():
    rng = np.random.default_rng(0)
    z = Tensor(rng.normal(size=(4000, 2)))
    est = float(H.vanilla_hp_loss(oracles.product_decoder(), z, rng).data)
    assert est == pytest.approx(4.0, rel=0.05)


def test_vanilla_hp_values_are_quantized_for_product():
    # With two probes the unbiased variance of {+-2} draws is either 0 or 8
    rng = np.random.default_rng(1)
    z = Tensor(rng.normal(size=(1, 2)))
    vals = {round(float(H.vanilla_hp_loss(oracles.product_decoder(), z, rng).data), 8) for _ in range(40)}
    assert vals == {0.0, 8.0}


def test_additive_decoder_has_zero_penalty():
    rng = np.random.default_rng(2)
    z = Tensor(rng.normal(size=(32, 2)))
    lat = LatentBatch(z, z, Tensor([0.5, 2.0]))
    assert abs(float(H.nhp_loss(additive_decoder, lat, rng).data)) < 1e-8
    assert abs(float(H.vanilla_hp_loss(additive_decoder, z, rng).data)) < 1e-6


def test_nhp_lies_in_unit_interval_in_expectation():
    rng = np.random.default_rng(3)
    dec = oracles.random_tanh_decoder(rng, n_z=3)
    z = Tensor(rng.normal(size=(256, 3)))
    lat = LatentBatch(z, z, Tensor([0.5, 1.0, 1.5]))
    val = float(H.nhp_loss(dec, lat, rng, n_p=8).data)
    assert 0.0 < val < 1.5


def test_perturbation_draw_shapes_and_scales():
    rng = np.random.default_rng(4)
    draw = H.draw_perturbations(rng, Tensor([0.5, 2.0]), n_b=5000, n_p=3)
    assert draw.v.shape == draw.w.shape == (3, 5000, 2)
    np.testing.assert_allclose(np.unique(np.abs(draw.v.data[..., 0])), [0.5])
    np.testing.assert_allclose(draw.w.data.std(axis=(0, 1)), [0.5, 2.0], rtol=0.03)


def test_argument_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        H.draw_perturbations(rng, Tensor([1.0]), 4, n_p=1)
    with pytest.raises(ValueError):
        H.draw_perturbations(rng, Tensor([1.0]), 4, epsilon=0.0)
    with pytest.raises(ValueError):
        H.vanilla_hp_loss(oracles.product_decoder(), Tensor(np.zeros((3, 2))), rng, n_p=1)


def test_oracle_recovers_product_hessian():
    got = H.hessian_oracle(oracles.product_decoder(), np.array([0.4, -1.1]), k=0)
    np.testing.assert_allclose(got, [[0.0, 1.0], [1.0, 0.0]], atol=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_oracle_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    dec = oracles.random_tanh_decoder(rng, n_z=3, width=6)
    Hs = H.hessian_oracle(dec, rng.normal(size=3))
    np.testing.assert_allclose(Hs, np.swapaxes(Hs, -1, -2), atol=1e-8)


def test_exact_penalties():
    Hm = np.array([[1.0, 2.0], [2.0, -3.0]])
    assert H.hessian_penalty_exact(Hm) == pytest.approx(8.0)
    assert H.normalized_penalty_exact(Hm, [1.0, 1.0]) == pytest.approx(8.0 / 18.0)
    np.testing.assert_allclose(H.quadratic_forms(Hm, np.array([[1.0, 1.0]])), [2.0])


def test_suites_pass():
    for suite in (oracles.suite_invariance, oracles.suite_hutchinson):
        results = suite()
        assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_nhp_gradient_reaches_weights_and_latents():
    rng = np.random.default_rng(5)
    w = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    pre = Tensor(rng.normal(size=(16, 3)), requires_grad=True)
    lat = quantizers.fsq_quantize(pre, quantizers.FsqSpec(3))
    loss = H.nhp_loss(lambda z: [T.tanh(z @ w)], lat, rng)
    gw, gp = T.grad(loss, [w, pre])
    assert np.any(gw != 0) and np.any(gp != 0)
    assert np.all(np.isfinite(gw)) and np.all(np.isfinite(gp))
