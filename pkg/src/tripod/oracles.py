"""Independent numerical oracles for the estimators, grouped into named suites.

Each check returns an :class:`OracleResult` with the measured error and the
tolerance it was held to.  The suites back both ``tripod oracle`` and the
acceptance tests.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import density, hessian, model, quantizers
from . import tensor as T
from .quantizers import LatentBatch
from .tensor import Tensor


@dataclass
class OracleResult:
    suite: str
    name: str
    measured: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status} {self.suite}/{self.name}: measured={self.measured:.3e} tol={self.tolerance:.1e}{extra}"


def _below(suite: str, name: str, measured: float, tol: float, detail: str = "") -> OracleResult:
    return OracleResult(suite, name, float(measured), tol, bool(measured < tol), detail)


# -- small decoders ------------------------------------------------------------
def product_decoder(scale: float = 1.0) -> Callable[[Tensor], list[Tensor]]:
    """``g(z) = scale * z_1 z_2`` as a single-dimension tap."""

    def decode(z: Tensor) -> list[Tensor]:
        return [(z[:, 0:1] * z[:, 1:2]) * scale]

    return decode


def random_tanh_decoder(rng: np.random.Generator, n_z: int = 4, width: int = 16,
                        n_out: int = 1) -> Callable[[Tensor], list[Tensor]]:
    """One tanh hidden layer; taps are the hidden activations and the linear output."""
    w1 = Tensor(rng.normal(0.0, 1.0, size=(n_z, width)))
    b1 = Tensor(rng.normal(0.0, 0.5, size=width))
    w2 = Tensor(rng.normal(0.0, 1.0 / math.sqrt(width), size=(width, n_out)))

    def decode(z: Tensor) -> list[Tensor]:
        h = T.tanh(z @ w1 + b1)
        return [h, h @ w2]

    return decode


def output_tap(decoder, k: int = -1):
    """Restrict a decoder to one tap."""
    return lambda z: [decoder(z)[k]]


def _mc_ratio(H: np.ndarray, sigma: np.ndarray, rng: np.random.Generator, n_draws: int) -> float:
    n_z = len(sigma)
    v = sigma * hessian.rademacher(rng, (n_draws, n_z))
    w = sigma * rng.standard_normal((n_draws, n_z))
    return float(np.var(hessian.quadratic_forms(H, v), ddof=1) / np.var(hessian.quadratic_forms(H, w), ddof=1))


# -- suites --------------------------------------------------------------------
def suite_ratio(seed: int = 0, n_decoders: int = 20, n_draws: int = 100_000, rel_tol: float = 0.02,
                 min_pass: int = 19) -> list[OracleResult]:
    """Monte-Carlo ratio of Rademacher to Gaussian quadratic-form variances vs the closed form."""
    rng = np.random.default_rng(seed)
    results = []
    for i in range(n_decoders):
        dec = output_tap(random_tanh_decoder(rng, 4, 16))
        z = rng.normal(0.0, 0.5, size=4)
        sigma = rng.uniform(0.2, 1.5, size=4)
        H = hessian.hessian_oracle(dec, z, k=0)
        exact = float(hessian.normalized_penalty_exact(H, sigma))
        mc = _mc_ratio(H, sigma, rng, n_draws)
        results.append(_below("ratio", f"decoder{i:02d}", abs(mc - exact) / exact, rel_tol,
                              f"mc={mc:.5f} exact={exact:.5f}"))
    n_ok = sum(r.passed for r in results)
    results.append(OracleResult("ratio", "aggregate", n_ok, min_pass, n_ok >= min_pass,
                                f"{n_ok}/{n_decoders} within {rel_tol:.0%}"))
    return results


def suite_invariance(seed: int = 0) -> list[OracleResult]:
    """Output-scale and latent-scale behaviour of the exact penalties."""
    rng = np.random.default_rng(seed)
    results = []
    cases = [("product", product_decoder, lambda a: product_decoder(a))]
    mlp_seed = int(rng.integers(1 << 31))
    base_mlp = random_tanh_decoder(np.random.default_rng(mlp_seed), 4, 16, n_out=3)

    def scaled_mlp(alpha):
        return lambda z: [t * alpha for t in base_mlp(z)]

    cases.append(("mlp", lambda: base_mlp, scaled_mlp))
    for label, make, make_scaled in cases:
        n_z = 2 if label == "product" else 4
        z = rng.normal(0.0, 0.5, size=n_z)
        batch = rng.normal(0.0, 0.7, size=(64, n_z))
        sigma = batch.std(axis=0)
        H = hessian.hessian_oracle(make(), z)
        vanilla = hessian.hessian_penalty_exact(H)
        normalized = hessian.normalized_penalty_exact(H, sigma)
        keep = vanilla > 1e-8  # tap dims with curvature mass worth a relative check
        for alpha in (0.1, 10.0):
            Ha = hessian.hessian_oracle(make_scaled(alpha), z)
            rel = np.abs(hessian.hessian_penalty_exact(Ha)[keep] / (alpha**2 * vanilla[keep]) - 1.0).max()
            results.append(_below("invariance", f"{label}/vanilla_scales_alpha2/alpha={alpha:g}", rel, 1e-6))
            diff = np.abs(hessian.normalized_penalty_exact(Ha, sigma) - normalized)[keep].max()
            results.append(_below("invariance", f"{label}/normalized_unchanged/alpha={alpha:g}", diff, 1e-9))
        s = rng.uniform(0.3, 3.0, size=n_z)
        base = make()
        stretched = lambda zz, base=base, s=s: base(zz * Tensor(1.0 / s))  # noqa: E731
        Hs = hessian.hessian_oracle(stretched, z * s)
        diff = np.abs(hessian.normalized_penalty_exact(Hs, (batch * s).std(axis=0)) - normalized)[keep].max()
        results.append(_below("invariance", f"{label}/normalized_latent_rescale", diff, 1e-6))
    return results


def suite_hutchinson(seed: int = 0, n_draws: int = 100_000, rel_tol: float = 0.02,
                     n_mlps: int = 5) -> list[OracleResult]:
    """Variance of Rademacher quadratic forms equals twice the off-diagonal squared mass."""
    rng = np.random.default_rng(seed)
    results = []
    H = hessian.hessian_oracle(product_decoder(), np.array([0.3, -0.2]), k=0)
    v = hessian.rademacher(rng, (n_draws, 2))
    mc = float(np.var(hessian.quadratic_forms(H, v), ddof=1))
    results.append(_below("hutchinson", "product/exact_quadratic_forms", abs(mc - 4.0) / 4.0, rel_tol, f"var={mc:.5f}"))
    # same statistic through the finite-difference probe used in training
    z = np.tile(np.array([0.3, -0.2]), (n_draws, 1))
    probe = hessian.curvature_probe(product_decoder(), Tensor(z), Tensor(hessian.rademacher(rng, (n_draws, 2))))
    mc = float(np.var(probe[0].data[:, 0], ddof=1))
    results.append(_below("hutchinson", "product/finite_difference_probe", abs(mc - 4.0) / 4.0, rel_tol, f"var={mc:.5f}"))
    mc10 = float(np.var(hessian.quadratic_forms(10.0 * H, v), ddof=1))
    results.append(_below("hutchinson", "product_x10/statistic_400", abs(mc10 - 400.0) / 400.0, rel_tol,
                          f"var={mc10:.3f}"))
    for i in range(n_mlps):
        dec = output_tap(random_tanh_decoder(rng, 4, 16))
        Hm = hessian.hessian_oracle(dec, rng.normal(0.0, 0.5, size=4), k=0)
        exact = float(2.0 * hessian.hessian_penalty_exact(Hm))
        mc = float(np.var(hessian.quadratic_forms(Hm, hessian.rademacher(rng, (n_draws, 4))), ddof=1))
        results.append(_below("hutchinson", f"mlp{i}", abs(mc - exact) / exact, rel_tol,
                              f"mc={mc:.5f} exact={exact:.5f}"))
    return results


# -- KDE -----------------------------------------------------------------------
def kde_double_loop(z: np.ndarray, s_diag: np.ndarray, sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Densities by direct summation: joint q(z_i) and marginals q_j(z_ij)."""
    n, d = z.shape
    joint = np.zeros(n)
    marg = np.zeros((n, d))
    for i in range(n):
        acc = 0.0
        for l in range(n):
            k = 1.0
            for j in range(d):
                diff = z[i, j] - z[l, j]
                k *= math.exp(-0.5 * diff * diff / s_diag[j]) / math.sqrt(2.0 * math.pi * s_diag[j])
            acc += k
        joint[i] = acc / n
        for j in range(d):
            acc = 0.0
            for l in range(n):
                diff = (z[i, j] - z[l, j]) / sigma[j]
                acc += math.exp(-0.5 * diff * diff) / (math.sqrt(2.0 * math.pi) * sigma[j])
            marg[i, j] = acc / n
    return joint, marg


def suite_kde(seed: int = 0, n_batches: int = 50, tol: float = 1e-10) -> list[OracleResult]:
    rng = np.random.default_rng(seed)
    worst_joint = worst_marg = 0.0
    for _ in range(n_batches):
        n_b = int(rng.integers(2, 33))
        n_z = int(rng.integers(1, 5))
        z = rng.normal(0.0, 1.0, size=(n_b, n_z)) * rng.uniform(0.1, 2.0, size=n_z)
        spec = density.silverman(Tensor(z.std(axis=0)), n_b, n_z)
        joint = np.exp(density.kde_log_joint(Tensor(z), spec).data)
        marg = np.exp(density.kde_log_marginals(Tensor(z), spec).data)
        ref_joint, ref_marg = kde_double_loop(z, spec.s_diag.data, spec.sigma.data)
        worst_joint = max(worst_joint, float(np.max(np.abs(joint - ref_joint) / ref_joint)))
        worst_marg = max(worst_marg, float(np.max(np.abs(marg - ref_marg) / ref_marg)))
    factor = density.silverman_factor(64, 2)
    s = float(density.silverman(Tensor(np.ones(2)), 64, 2).s_diag.data[0])
    return [
        _below("kde", "joint_vs_double_loop", worst_joint, tol, f"{n_batches} batches"),
        _below("kde", "marginal_vs_double_loop", worst_marg, tol, f"{n_batches} batches"),
        OracleResult("kde", "silverman_nz2_nb64_sigma1", abs(s - 0.25), 0.0, s == 0.25 and factor == 0.25,
                     f"S_jj={s!r}"),
    ]


def klm_calibration(n_seeds: int = 20, n_b: int = 512, n_z: int = 2,
                    estimator: Callable[[LatentBatch], Tensor] = density.klm_loss) -> tuple[float, float]:
    """Mean multiinformation estimate for dimension-wise permuted and for duplicated-dimension batches.

    Latents are tanh-squashed Gaussians (the continuous latent range) with
    a shared factor driving every dimension before permutation.
    """
    permuted, duplicated = [], []
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        shared = rng.normal(size=(n_b, 1))
        c = np.tanh(shared + 0.3 * rng.normal(size=(n_b, n_z)))
        perm = np.stack([rng.permutation(c[:, j]) for j in range(n_z)], axis=1)
        dup = np.repeat(c[:, :1], n_z, axis=1)
        for arr, out in ((perm, permuted), (dup, duplicated)):
            t = Tensor(arr)
            out.append(float(estimator(LatentBatch(t, t, quantizers.latent_sigma(t))).data))
    return float(np.mean(permuted)), float(np.mean(duplicated))


# -- gradient checks -----------------------------------------------------------
FD_STEP = 1e-5


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``arr`` (mutated in place and restored)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference over the larger of the max numeric magnitude and 1e-8."""
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-8))


def gradcheck(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator,
              step: float = FD_STEP) -> float:
    """Worst relative error of d<fn(inputs), R>/d inputs against central differences."""
    probe = None

    def scalar(ts):
        nonlocal probe
        out = fn(*ts)
        if probe is None:
            probe = rng.normal(size=out.shape)
        return (out * Tensor(probe)).sum()

    leaves = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    grads = T.grad(scalar(leaves), leaves)
    worst = 0.0
    for i, arr in enumerate(inputs):
        work = [a.copy() for a in inputs]

        def f():
            return float(scalar([Tensor(w) for w in work]).data)

        worst = max(worst, relative_error(grads[i], numeric_gradient(f, work[i], step)))
    return worst


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[np.ndarray]]]:
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    idx = rng.integers(0, 4, size=(3, 2))
    return {
        "add": (lambda x, y: x + y, [a, rng.normal(size=(4,))]),
        "sub": (lambda x, y: x - y, [a, b]),
        "mul": (lambda x, y: x * y, [a, rng.normal(size=(3, 1))]),
        "div": (lambda x, y: x / y, [a, pos]),
        "neg": (lambda x: -x, [a]),
        "maximum": (lambda x: T.maximum(x, 0.1), [a]),
        "matmul": (lambda x, y: x @ y, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        "tanh": (T.tanh, [a]),
        "sigmoid": (T.sigmoid, [a]),
        "softplus": (T.softplus, [a]),
        "relu": (T.relu, [a + np.sign(a) * 0.01]),
        "exp": (T.exp, [a]),
        "log": (T.log, [pos]),
        "sqrt": (T.sqrt, [pos]),
        "square": (T.square, [a]),
        "sum": (lambda x: x.sum(axis=0), [a]),
        "mean": (lambda x: x.mean(axis=1, keepdims=True), [a]),
        "variance": (lambda x: T.variance(x, axis=0, ddof=1), [a]),
        "logsumexp": (lambda x: T.logsumexp(x, axis=1), [a]),
        "broadcast": (lambda x: T.broadcast_to(x, (3, 4)), [rng.normal(size=(4,))]),
        "reshape": (lambda x: x.reshape(4, 3), [a]),
        "transpose": (lambda x: x.T, [a]),
        "concat": (lambda x, y: T.concat([x, y], axis=0), [a, b]),
        "slice": (lambda x: x[1:, ::2], [a]),
        "take_along_axis": (lambda x: T.take_along_axis(x, idx, axis=1), [a]),
        "straight_through_tanh": (lambda x: T.straight_through(T.tanh(x), T.tanh(x).data), [a]),
    }


class _FrozenQuantizer(model.Autoencoder):
    """FSQ with the grid offset frozen at a reference point, so finite differences see the straight-through path."""

    offset: np.ndarray | None = None

    def quantize(self, c_pre: Tensor) -> LatentBatch:
        c = T.tanh(c_pre)
        if self.offset is None:
            self.offset = quantizers.fsq_values(c.data, self.fsq.n_q) - c.data
        return LatentBatch(c, c + Tensor(self.offset), quantizers.latent_sigma(c))


def objective_gradcheck(seed: int = 0, hessian_leg: str = "nhp", klm_leg: str = "klm") -> float:
    """Worst relative error of the full objective gradient over every parameter entry (64-bit)."""
    rng = np.random.default_rng(seed)
    cfg = model.TrainConfig(n_b=8, width=8, depth=2, dtype="float64", hessian=hessian_leg, klm=klm_leg,
                            lambda_klm=0.5, lambda_nhp=0.5)
    net = _FrozenQuantizer(16, cfg, 4, rng)
    x = rng.uniform(0.0, 1.0, size=(8, 16))
    params = net.parameters()

    def loss() -> Tensor:
        return model.tripod_objective(Tensor(x), net, cfg, np.random.default_rng(seed + 1))[0]

    analytic = T.grad(loss(), list(params.values()))
    worst = 0.0
    for g, p in zip(analytic, params.values()):
        numeric = numeric_gradient(lambda: float(loss().data), p.data)
        worst = max(worst, relative_error(g, numeric))
    return worst


def stop_gradient_check(rng: np.random.Generator) -> float:
    """``sum (c - sg(z))^2``: the c-gradient must match differences with z held fixed, the z-gradient must be 0."""
    c0, z0 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    c, z = Tensor(c0.copy(), requires_grad=True), Tensor(z0.copy(), requires_grad=True)
    gc, gz = T.grad(T.square(c - T.stop_gradient(z)).sum(), [c, z])
    work = c0.copy()
    numeric = numeric_gradient(lambda: float(np.sum((work - z0) ** 2)), work)
    return max(relative_error(gc, numeric), float(np.max(np.abs(gz))))


def suite_gradcheck(seed: int = 0, tol: float = 1e-4) -> list[OracleResult]:
    rng = np.random.default_rng(seed)
    results = [_below("gradcheck", f"op/{name}", gradcheck(fn, ins, rng), tol)
               for name, (fn, ins) in _op_cases(rng).items()]
    results.append(_below("gradcheck", "op/stop_gradient", stop_gradient_check(rng), tol))
    for h_leg, k_leg in (("nhp", "klm"), ("vanilla_hp", "klm_naive")):
        err = objective_gradcheck(seed, h_leg, k_leg)
        results.append(_below("gradcheck", f"objective/{k_leg}+{h_leg}", err, tol))
    return results


SUITES: dict[str, Callable[[], list[OracleResult]]] = {
    "invariance": suite_invariance,
    "ratio": suite_ratio,
    "hutchinson": suite_hutchinson,
    "kde": suite_kde,
    "gradcheck": suite_gradcheck,
}


def run_suites(names: list[str]) -> tuple[list[OracleResult], dict[str, float]]:
    """Run the named suites (``all`` expands to every suite); returns results and per-suite seconds."""
    if "all" in names:
        names = list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {['all', *SUITES]}")
    results, timings = [], {}
    for name in names:
        t0 = time.perf_counter()
        results.extend(SUITES[name]())
        timings[name] = time.perf_counter() - t0
    return results, timings
