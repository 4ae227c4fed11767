import math

import numpy as np
import pytest

from tripod import data, model
from tripod import tensor as T
from tripod.model import ConfigError, TrainConfig
from tripod.rng import RngState
from tripod.tensor import Tensor


@pytest.fixture(scope="module")
def blob():
    return data.Dataset.build("blob")


def small(**kw):
    base = dict(width=16, depth=1, n_b=16, dtype="float64", max_updates=5, eval_every=2, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


def grads_for(cfg, x, seed=0):
    m = model.build_model(cfg, x.shape[1], 4, RngState(seed))
    loss, parts = model.tripod_objective(Tensor(x), m, cfg, np.random.default_rng(1))
    params = m.parameters()
    g = T.grad(loss, list(params.values()))
    return dict(zip(params, g)), parts


def test_toggle_identity_reduces_to_reconstruction(blob):
    x = blob.flat[:16]
    cfg = small(lambda_klm=0.0, lambda_nhp=0.0)
    m = model.build_model(cfg, 256, 4, RngState(0))
    loss, parts = model.tripod_objective(Tensor(x), m, cfg, np.random.default_rng(0))
    assert float(loss.data) == parts["recon"]


@pytest.mark.parametrize("leg,weight", [("hessian", "lambda_nhp"), ("klm", "lambda_klm")])
def test_zero_weight_leg_matches_absent_leg(blob, leg, weight):
    x = blob.flat[:16]
    built, _ = grads_for(small(**{weight: 0.0}), x)
    absent, _ = grads_for(small(**{leg: "off"}), x)
    for name in built:
        np.testing.assert_allclose(built[name], absent[name], atol=1e-10, rtol=0)


def test_bce_limit():
    target = Tensor(np.array([[0.0, 1.0, 1.0]]))
    for scale in (10.0, 30.0):
        logits = Tensor(np.array([[-scale, scale, scale]]))
        loss = float(model.bce_with_logits(logits, target).sum().data)
        assert loss == pytest.approx(3 * math.log1p(math.exp(-scale)), rel=1e-9)


def test_objective_is_bit_reproducible(blob):
    x = blob.flat[:16].astype(np.float32)
    cfg = TrainConfig(width=16, depth=1, n_b=16)
    runs = []
    for _ in range(2):
        m = model.build_model(cfg, 256, 4, RngState(3))
        loss, parts = model.tripod_objective(Tensor(x), m, cfg, np.random.default_rng(5))
        runs.append((loss.data.tobytes(), T.grad(loss, [m.encoder.weights[0]])[0].tobytes()))
    assert runs[0] == runs[1]


def test_adamw_examples():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    state = model.adamw_step(p, {"w": np.zeros(2)}, model.AdamState())
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    p = {"w": Tensor(np.array([0.0]))}
    model.adamw_step(p, {"w": np.array([0.3])}, model.AdamState(), lr=0.1)
    assert p["w"].data[0] == pytest.approx(-0.1 * 0.3 / (0.3 + 1e-8))
    assert state.step == 1


def test_adamw_weight_decay_is_decoupled():
    p = {"w": Tensor(np.array([2.0]))}
    model.adamw_step(p, {"w": np.zeros(1)}, model.AdamState(), lr=0.1, weight_decay=0.5)
    assert p["w"].data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adamw_descends_quadratic_bowl():
    target = np.array([1.0, -3.0, 0.5])
    p = {"w": Tensor(np.zeros(3))}
    state = model.AdamState()
    losses = []
    for _ in range(100):
        g = 2.0 * (p["w"].data - target)
        losses.append(float(((p["w"].data - target) ** 2).sum()))
        model.adamw_step(p, {"w": g}, state, lr=0.01)
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))


def test_psnr_examples():
    x = np.zeros(100)
    assert model.psnr(x, np.full(100, 0.1)) == pytest.approx(20.0)
    assert model.psnr(x, x) == model.PSNR_CAP
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=50), rng.uniform(size=50)
    assert model.psnr(a, b) == pytest.approx(-10 * math.log10(np.mean((a - b) ** 2)), rel=1e-12)


def test_select_checkpoint_cases():
    log = [{"psnr": 30.0, "InfoM": 0.9}, {"psnr": 36.0, "InfoM": 0.4}, {"psnr": 40.0, "InfoM": 0.6},
           {"psnr": 35.0, "InfoM": 0.5}]
    assert model.select_checkpoint(list("abcd"), log, 35.0) == (2, "c")
    assert model.select_checkpoint(["x"], [{"psnr": 50.0, "InfoM": 0.1}], 35.0) == (0, "x")
    with pytest.raises(model.NoCheckpointPassed):
        model.select_checkpoint(["x"], [{"psnr": 10.0, "InfoM": 0.1}], 35.0)
    with pytest.raises(ValueError):
        model.select_checkpoint([], [], 35.0)


def test_learning_rate_schedule():
    cfg = TrainConfig(max_updates=100, lr=1e-3, lr_decay_from=0.5)
    assert model.learning_rate(cfg, 50) == 1e-3
    assert model.learning_rate(cfg, 75) == pytest.approx(1e-3 * (1 - 0.5 * 0.95))
    assert model.learning_rate(cfg, 100) == pytest.approx(1e-3 * model.LR_FLOOR)
    assert model.learning_rate(TrainConfig(max_updates=100), 100) == 1e-3


@pytest.mark.parametrize("quantizer", ["fsq", "lq"])
def test_checkpoint_round_trip_and_resume(tmp_path, blob, quantizer):
    cfg = small(quantizer=quantizer, max_updates=4, eval_every=2)
    full = model.train(cfg, blob)
    mid = full.checkpoints[1]
    assert mid.step == 2
    path = tmp_path / "mid.trpd"
    model.save_checkpoint(mid, path)
    loaded = model.load_checkpoint(path)
    for k, v in mid.params.items():
        assert loaded.params[k].tobytes() == v.tobytes()
    resumed = model.train(cfg, blob, resume=loaded)
    for k, v in full.checkpoints[-1].params.items():
        assert resumed.checkpoints[-1].params[k].tobytes() == v.tobytes()
    assert resumed.step_log[0] == full.step_log[2]


def test_corrupted_checkpoint_is_rejected(tmp_path, blob):
    res = model.train(small(max_updates=0), blob)
    path = tmp_path / "c.trpd"
    model.save_checkpoint(res.checkpoints[0], path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        model.load_checkpoint(path)


def test_default_run_components_finite(blob):
    res = model.train(TrainConfig(width=32, depth=2, max_updates=30, log_every=1), blob)
    assert len(res.step_log) == 30
    for row in res.step_log:
        assert all(math.isfinite(v) for v in row.values())


@pytest.mark.parametrize("bad", [dict(lambda_klm=-1.0), dict(n_b=1), dict(n_p=1), dict(epsilon=0.0),
                                 dict(quantizer="vq"), dict(klm="x"), dict(hessian="x"), dict(n_q=1),
                                 dict(dtype="float16"), dict(eval_every=0), dict(lr_decay_from=1.5)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"not_a_key": 1})


def test_config_hash_changes_with_values():
    assert TrainConfig().hash() == TrainConfig().hash()
    assert TrainConfig().hash() != TrainConfig(seed=1).hash()


def test_output_bias_starts_at_pixel_mean(blob):
    mean = blob.flat.mean(axis=0)
    m = model.build_model(small(), 256, 4, RngState(0), mean)
    np.testing.assert_allclose(1 / (1 + np.exp(-m.decoder.biases[-1].data)), np.clip(mean, 1e-3, 1 - 1e-3))


@pytest.mark.parametrize("seed", [1, 2])
def test_fsq_latents_survive_early_training(blob, seed):
    # these seeds used to drive every latent into tanh saturation within 50 updates
    cfg = TrainConfig(width=128, depth=2, klm="off", hessian="off", max_updates=60, eval_every=60,
                      log_every=60, seed=seed)
    x = blob.flat.astype(np.float32)

    def saturation(m):
        c, _ = m.latents(x)
        return {"abs_c": float(np.abs(c).mean())}

    res = model.train(cfg, blob, evaluate=saturation)
    assert res.eval_log[-1]["abs_c"] < 0.9
