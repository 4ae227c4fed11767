"""MLP autoencoder, the three-leg objective, AdamW, training and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import density, hessian, quantizers
from . import tensor as T
from .quantizers import FsqSpec, LatentBatch, LearnedCodebook
from .rng import RngState
from .tensor import Tensor

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
QUANTIZERS = ("fsq", "lq")
KLM_LEGS = ("klm", "klm_naive", "off")
HESSIAN_LEGS = ("nhp", "vanilla_hp", "off")


class ConfigError(ValueError):
    pass


class NoCheckpointPassed(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_klm: float = 1e-2
    lambda_nhp: float = 1e-1
    n_b: int = 64
    n_p: int = 2
    epsilon: float = 0.1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    lr_decay_from: float = 1.0  # fraction of max_updates after which lr decays linearly to LR_FLOOR * lr
    max_updates: int = 20_000
    eval_every: int = 1_000
    log_every: int = 50
    seed: int = 0
    quantizer: str = "fsq"
    klm: str = "klm"
    hessian: str = "nhp"
    n_q: int = 12
    n_z: int | None = None  # None -> 2 * n_s
    width: int = 256
    depth: int = 3
    klm_bandwidth: float = 0.1
    hp_normalize: bool = True
    lq_quantize_weight: float = 1.0
    lq_commit_weight: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lambda_klm < 0 or self.lambda_nhp < 0:
            raise ConfigError("regularization weights must be nonnegative")
        if self.n_b < 2:
            raise ConfigError("batch size must be >= 2")
        if self.n_p < 2:
            raise ConfigError("n_p must be >= 2")
        if not 0.0 <= self.lr_decay_from <= 1.0:
            raise ConfigError("lr_decay_from must lie in [0, 1]")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.quantizer not in QUANTIZERS:
            raise ConfigError(f"quantizer must be one of {QUANTIZERS}")
        if self.klm not in KLM_LEGS:
            raise ConfigError(f"klm must be one of {KLM_LEGS}")
        if self.hessian not in HESSIAN_LEGS:
            raise ConfigError(f"hessian must be one of {HESSIAN_LEGS}")
        if self.n_q < 2:
            raise ConfigError("n_q must be >= 2")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.max_updates < 0 or self.eval_every < 1 or self.log_every < 1:
            raise ConfigError("max_updates >= 0, eval_every >= 1, log_every >= 1 required")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def hash(self) -> int:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> int:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


# -- network -----------------------------------------------------------------
class MLP:
    """tanh MLP; every hidden activation and the final linear output are exposed as taps."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, dtype=np.float32):
        self.sizes = list(sizes)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out, dtype), requires_grad=True))

    def taps(self, x: Tensor) -> list[Tensor]:
        out = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = T.tanh(h)
            out.append(h)
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return self.taps(x)[-1]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{prefix}.{i}.W"] = w
            params[f"{prefix}.{i}.b"] = b
        return params


class Autoencoder:
    """Encoder MLP -> quantizer -> decoder MLP producing pixel logits."""

    def __init__(self, n_x: int, config: TrainConfig, n_z: int, rng: np.random.Generator):
        dtype = np.dtype(config.dtype)
        hidden = [config.width] * config.depth
        self.n_x, self.n_z = n_x, n_z
        self.quantizer = config.quantizer
        self.encoder = MLP([n_x, *hidden, n_z], rng, dtype)
        self.decoder = MLP([n_z, *hidden, n_x], rng, dtype)
        self.fsq = FsqSpec(n_z, config.n_q)
        self.codebook = LearnedCodebook(n_z, config.n_q, dtype) if config.quantizer == "lq" else None
        self.tap_names = [f"hidden{i}" for i in range(config.depth)] + ["logits"]

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder(x)

    def quantize(self, c_pre: Tensor) -> LatentBatch:
        if self.codebook is not None:
            return quantizers.lq_quantize(c_pre, self.codebook)
        return quantizers.fsq_quantize(c_pre, self.fsq)

    def decode_taps(self, z: Tensor) -> list[Tensor]:
        return self.decoder.taps(z)

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z)

    def parameters(self) -> dict[str, Tensor]:
        params = {**self.encoder.named_parameters("enc"), **self.decoder.named_parameters("dec")}
        if self.codebook is not None:
            params["codebook"] = self.codebook.values
        return params

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters().items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
            p.data = arrays[name].copy()

    def latents(self, x: np.ndarray, batch: int = 1024) -> tuple[np.ndarray, np.ndarray]:
        """Continuous and quantized latents for a data array (no tape)."""
        cs, zs = [], []
        for i in range(0, len(x), batch):
            lat = self.quantize(self.encode(Tensor(x[i : i + batch])))
            cs.append(lat.continuous.data)
            zs.append(lat.quantized.data)
        return np.concatenate(cs), np.concatenate(zs)

    def reconstruct(self, x: np.ndarray, batch: int = 1024) -> np.ndarray:
        out = []
        for i in range(0, len(x), batch):
            lat = self.quantize(self.encode(Tensor(x[i : i + batch])))
            out.append(T._stable_sigmoid(self.decode(lat.quantized).data))
        return np.concatenate(out)


def build_model(config: TrainConfig, n_x: int, n_s: int, rng: RngState | np.random.Generator,
                pixel_mean: np.ndarray | None = None) -> Autoencoder:
    """Fresh autoencoder; ``pixel_mean`` (per pixel, in (0, 1)) seeds the output bias.

    Starting the decoder at the data mean matters for FSQ: otherwise the first
    updates see one large gradient shared by every sample, the encoder pushes
    all latents into tanh saturation and they never recover.
    """
    gen = rng.init if isinstance(rng, RngState) else rng
    m = Autoencoder(n_x, config, config.n_z or 2 * n_s, gen)
    if pixel_mean is not None:
        p = np.clip(np.asarray(pixel_mean, np.float64), 1e-3, 1 - 1e-3)
        m.decoder.biases[-1].data = np.log(p / (1 - p)).astype(m.decoder.biases[-1].data.dtype)
    return m


# -- objective ---------------------------------------------------------------
def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Per-element binary cross-entropy of sigmoid(logits) against targets in [0, 1]."""
    return T.softplus(logits) - logits * target


def tripod_objective(x, model: Autoencoder, config: TrainConfig,
                     rng: np.random.Generator) -> tuple[Tensor, dict[str, float]]:
    """Reconstruction + weighted multiinformation + weighted Hessian penalty.

    A leg whose toggle is not ``"off"`` is always built into the graph, even
    with weight 0.  Components are reported as plain floats (0.0 when off).
    """
    x = T.as_tensor(x)
    latents = model.quantize(model.encode(x))
    z = latents.quantized
    n_b = z.shape[0]
    n_p, eps = config.n_p, config.epsilon

    if config.hessian == "nhp":
        draw = hessian.draw_perturbations(rng, latents.sigma, n_b, n_p, eps)
        dec_in = hessian.probe_inputs(z, T.concat([draw.v, draw.w], axis=0), eps)
    elif config.hessian == "vanilla_hp":
        v = Tensor(hessian.rademacher(rng, (n_p, n_b, z.shape[1]), z.dtype))
        dec_in = hessian.probe_inputs(z, v, eps)
    else:
        dec_in = z
    taps = model.decode_taps(dec_in)

    logits = taps[-1][:n_b] if config.hessian != "off" else taps[-1]
    recon = bce_with_logits(logits, x).sum(axis=-1).mean()
    loss = recon
    parts = {"recon": float(recon.data)}

    klm_val = 0.0
    if config.klm != "off":
        klm = density.klm_loss(latents) if config.klm == "klm" else density.klm_loss_naive(latents, config.klm_bandwidth)
        loss = loss + config.lambda_klm * klm
        klm_val = float(klm.data)
    parts["klm"] = klm_val

    hp_val = 0.0
    if config.hessian == "nhp":
        hp = hessian.nhp_from_taps(taps, n_b, n_p, eps)
    elif config.hessian == "vanilla_hp":
        hp = hessian.vanilla_from_taps(taps, n_b, n_p, eps, normalize=config.hp_normalize)
    if config.hessian != "off":
        loss = loss + config.lambda_nhp * hp
        hp_val = float(hp.data)
    parts["nhp"] = hp_val

    if config.quantizer == "lq":
        lq_q, lq_c = quantizers.lq_losses(latents.continuous, latents.codes)
        loss = loss + config.lq_quantize_weight * lq_q + config.lq_commit_weight * lq_c
        parts["lq_quantize"], parts["lq_commit"] = float(lq_q.data), float(lq_c.data)

    parts["loss"] = float(loss.data)
    parts["psnr"] = psnr(x.data, T._stable_sigmoid(logits.data))
    return loss, parts


# -- optimizer ---------------------------------------------------------------
@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float = 1e-3,
               beta1: float = 0.9, beta2: float = 0.99, weight_decay: float = 0.0, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam step with decoupled weight decay; parameters are replaced, not mutated."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.dtype, copy=False)
    return state


# -- metrics used during training ----------------------------------------------
def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """10 log10(1 / MSE) for pixels in [0, 1], capped at 99 dB."""
    mse = float(np.mean((np.asarray(x, np.float64) - np.asarray(x_hat, np.float64)) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


# -- checkpoints ---------------------------------------------------------------
@dataclass
class Checkpoint:
    step: int
    config: TrainConfig
    params: dict[str, np.ndarray]
    rng_state: dict
    opt_state: AdamState = field(default_factory=AdamState)
    n_x: int = 0
    n_s: int = 0
    dataset: str = ""

    def model(self) -> Autoencoder:
        m = build_model(self.config, self.n_x, self.n_s, np.random.default_rng(0))
        m.load_arrays(self.params)
        return m


def snapshot(step: int, model: Autoencoder, config: TrainConfig, rng: RngState, opt: AdamState,
             n_s: int, dataset: str = "") -> Checkpoint:
    params = {k: p.data.copy() for k, p in model.parameters().items()}
    opt_copy = AdamState(opt.step, {k: a.copy() for k, a in opt.m.items()}, {k: a.copy() for k, a in opt.v.items()})
    return Checkpoint(step, config, params, rng.state(), opt_copy, model.n_x, n_s, dataset)


MAGIC = b"TRPD"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.kind == "f" else arr.dtype
    code = _CODES[np.dtype(dt)]
    body = arr.astype(dt, copy=False).tobytes()
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BI", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + struct.pack("<Q", len(body)) + body


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Little-endian binary: magic, u32 version, u64 config hash, u32 count, named arrays.

    Each array: u16 name length, name, u8 dtype code (0 f32, 1 f64, 2 u8),
    u32 ndim, u64 dims, u64 byte length, raw data.  Step, config, RNG and
    optimizer step live in the JSON-encoded ``meta`` array.
    """
    meta = {"step": ckpt.step, "config": ckpt.config.to_dict(), "rng": ckpt.rng_state,
            "opt_step": ckpt.opt_state.step, "n_x": ckpt.n_x, "n_s": ckpt.n_s, "dataset": ckpt.dataset}
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    arrays.update({f"param/{k}": v for k, v in ckpt.params.items()})
    arrays.update({f"adam_m/{k}": v for k, v in ckpt.opt_state.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in ckpt.opt_state.v.items()})
    chunks = [MAGIC, struct.pack("<IQI", FORMAT_VERSION, ckpt.config.hash(), len(arrays))]
    chunks += [_pack_array(k, v) for k, v in arrays.items()]
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, chash, count = struct.unpack_from("<IQI", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<IQI")
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BI", buf, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", buf, off)
        off += 8
        arrays[name] = np.frombuffer(buf[off : off + nbytes], dtype=_DTYPES[code]).reshape(shape).copy()
        off += nbytes
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    config = TrainConfig.from_dict(meta["config"])
    if config.hash() != chash:
        raise ValueError("config hash mismatch: file corrupted or edited")

    def section(prefix):
        return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

    opt = AdamState(meta["opt_step"], section("adam_m/"), section("adam_v/"))
    return Checkpoint(meta["step"], config, section("param/"), meta["rng"], opt, meta["n_x"], meta["n_s"], meta["dataset"])


# -- training ------------------------------------------------------------------
@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]
    step_log: list[dict]
    eval_log: list[dict]


LR_FLOOR = 0.05


def learning_rate(config: TrainConfig, step: int) -> float:
    """Constant, then a linear ramp down to ``LR_FLOOR * lr`` over the final stretch."""
    total = config.max_updates
    start = config.lr_decay_from * total
    if step <= start or total <= start:
        return config.lr
    frac = (step - start) / (total - start)
    return config.lr * max(LR_FLOOR, 1.0 - frac * (1.0 - LR_FLOOR))


def train_step(model: Autoencoder, opt: AdamState, x: np.ndarray, config: TrainConfig,
               rng: RngState) -> dict[str, float]:
    params = model.parameters()
    loss, parts = tripod_objective(Tensor(x), model, config, rng.perturb)
    grads = T.backward(loss)
    named = {k: grads.get(p.node.id, np.zeros_like(p.data)) for k, p in params.items()}
    adamw_step(params, named, opt, learning_rate(config, opt.step + 1), config.beta1, config.beta2, config.weight_decay)
    return parts


def train(config: TrainConfig, dataset, evaluate: Callable[[Autoencoder], dict] | None = None,
          resume: Checkpoint | None = None, on_eval: Callable[[Checkpoint, dict], None] | None = None) -> TrainResult:
    """Train on a fully enumerated :class:`~tripod.data.Dataset`.

    Checkpoints are taken at step 0 (or the resume step), every
    ``eval_every`` updates and at the last update; ``evaluate`` (if given)
    maps a model to a dict of metrics recorded in ``eval_log``.
    """
    data = dataset.flat.astype(config.dtype)
    n_s = dataset.process.n_s
    if resume is not None:
        rng = RngState.from_state(resume.rng_state)
        model = resume.model()
        opt = AdamState(resume.opt_state.step, {k: v.copy() for k, v in resume.opt_state.m.items()},
                        {k: v.copy() for k, v in resume.opt_state.v.items()})
        start = resume.step
    else:
        rng = RngState(config.seed)
        model = build_model(config, data.shape[1], n_s, rng, data.mean(axis=0))
        opt = AdamState()
        start = 0

    checkpoints, step_log, eval_log = [], [], []

    def checkpoint(step):
        ckpt = snapshot(step, model, config, rng, opt, n_s, dataset.process.name)
        checkpoints.append(ckpt)
        if evaluate is not None:
            metrics = {"step": step, **evaluate(model)}
            eval_log.append(metrics)
            log.info("step %d %s", step, {k: round(v, 4) for k, v in metrics.items() if isinstance(v, float)})
            if on_eval is not None:
                on_eval(ckpt, metrics)

    checkpoint(start)
    for step in range(start + 1, config.max_updates + 1):
        idx = rng.data.choice(len(data), size=config.n_b, replace=False)
        parts = train_step(model, opt, data[idx], config, rng)
        if not all(math.isfinite(v) for v in parts.values()):
            raise T.NumericalError(f"non-finite loss component at step {step}: {parts}")
        if step % config.log_every == 0 or step == config.max_updates:
            step_log.append({"step": step, **parts})
        if step % config.eval_every == 0 or step == config.max_updates:
            checkpoint(step)
    return TrainResult(checkpoints, step_log, eval_log)


def select_checkpoint(series: list, metric_log: list[dict], psnr_threshold: float,
                      key: str = "InfoM") -> tuple[int, object]:
    """Index and item with the best ``key`` among entries whose PSNR clears the threshold."""
    if not series:
        raise ValueError("empty checkpoint series")
    if len(series) != len(metric_log):
        raise ValueError("series and metric log lengths differ")
    passing = [i for i, m in enumerate(metric_log) if m["psnr"] >= psnr_threshold]
    if not passing:
        best = max(m["psnr"] for m in metric_log)
        raise NoCheckpointPassed(f"no checkpoint reached {psnr_threshold} dB PSNR (best {best:.2f} dB)")
    best_i = max(passing, key=lambda i: (metric_log[i][key], -i))
    return best_i, series[best_i]
