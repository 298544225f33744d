"""Score models, Tweedie denoising and score-Jacobian products.

Three kinds share one interface: two exact oracles (a Gaussian supported on an
affine subspace and the empirical mixture of a finite dataset) and a small
numpy MLP trained by denoising score matching. All of them accept a single
vector ``(n,)`` or a batch ``(B, n)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import kernels
from .schedule import NoiseLevel, ParameterError, Schedule, SdeKind, make_ve_schedule, make_vp_schedule


class TrainingError(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration
        self.loss = loss


def _as2d(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _restore(out, squeeze):
    return out[0] if squeeze else out


class ScoreModel:
    """Base class. Subclasses implement ``_score`` and ``_vjp`` on 2-D batches."""

    kind = "base"

    def __init__(self, schedule: Schedule):
        self.schedule = schedule

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def _score(self, X, lv: NoiseLevel):
        raise NotImplementedError

    def _vjp(self, X, lv: NoiseLevel, V):
        raise NotImplementedError

    def score_at(self, x, lv: NoiseLevel):
        X, sq = _as2d(x)
        return _restore(self._score(X, lv), sq)

    def vjp_at(self, x, lv: NoiseLevel, v):
        X, sq = _as2d(x)
        V, _ = _as2d(v)
        return _restore(self._vjp(X, lv, np.broadcast_to(V, X.shape)), sq)

    def tweedie_at(self, x, lv: NoiseLevel, score=None):
        if score is None:
            score = self.score_at(x, lv)
        return (np.asarray(x) + lv.b ** 2 * score) / lv.a


class GaussianSubspaceScore(ScoreModel):
    """Prior ``N(mean, tau^2 T T^T)`` on the affine subspace ``mean + range(T)``.

    The noised marginal has covariance ``a^2 tau^2 P + b^2 I`` with ``P = T T^T``,
    whose inverse splits into ``P / (a^2 tau^2 + b^2) + (I - P) / b^2``.
    """

    kind = "gaussian"

    def __init__(self, mean, basis, tau: float, schedule: Schedule):
        super().__init__(schedule)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.basis = np.atleast_2d(np.asarray(basis, dtype=np.float64))
        if self.basis.shape[0] != self.mean.shape[0]:
            self.basis = self.basis.T
        self.tau = float(tau)
        gram = self.basis.T @ self.basis
        if np.abs(gram - np.eye(gram.shape[0])).max() > 1e-12:
            raise ParameterError("tangent basis must be column-orthonormal")
        if self.tau <= 0:
            raise ParameterError("tau must be positive")

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def manifold_dim(self):
        return self.basis.shape[1]

    def tangent(self, V):
        return (V @ self.basis) @ self.basis.T

    def normal(self, V):
        return V - self.tangent(V)

    def _inv_cov(self, V, lv):
        tv = self.tangent(V)
        return tv / (lv.a ** 2 * self.tau ** 2 + lv.b ** 2) + (V - tv) / lv.b ** 2

    def _score(self, X, lv):
        return -self._inv_cov(X - lv.a * self.mean, lv)

    def _vjp(self, X, lv, V):
        return -self._inv_cov(V, lv)

    def tweedie_jacobian(self, lv: NoiseLevel) -> np.ndarray:
        """Closed-form Jacobian of the Tweedie map: ``a tau^2 P / (a^2 tau^2 + b^2)``."""
        P = self.basis @ self.basis.T
        return lv.a * self.tau ** 2 * P / (lv.a ** 2 * self.tau ** 2 + lv.b ** 2)


class EmpiricalMixtureScore(ScoreModel):
    """Exact score of ``mean_k N(a x0_k, b^2 I)``: the DSM minimiser for a finite dataset."""

    kind = "mixture"

    def __init__(self, data, schedule: Schedule):
        super().__init__(schedule)
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        if data.shape[0] == 0:
            raise ParameterError("mixture needs at least one data point")
        self.data = np.ascontiguousarray(data)

    @property
    def dim(self):
        return self.data.shape[1]

    def posterior_mean(self, x, lv):
        X, sq = _as2d(x)
        xbar, _ = kernels.mixture_posterior(X, self.data, lv.a, lv.b)
        return _restore(xbar, sq)

    def _score(self, X, lv):
        xbar, _ = kernels.mixture_posterior(X, self.data, lv.a, lv.b)
        return (lv.a * xbar - X) / lv.b ** 2

    def _vjp(self, X, lv, V):
        # J = (a^2 / b^4) Cov_w - I / b^2, symmetric
        _, covv = kernels.mixture_posterior(X, self.data, lv.a, lv.b, V)
        b2 = lv.b ** 2
        return (lv.a ** 2 / b2 ** 2) * covv - V / b2


# ---------------------------------------------------------------------------
# MLP denoiser
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    hidden: tuple = (128, 128, 128)
    emb_dim: int = 16
    emb_max_freq: float = 100.0
    learning_rate: float = 2e-3
    batch_size: int = 256
    iterations: int = 4000
    log_every: int = 50


def _silu(z):
    sig = expit(z)
    return z * sig, sig


def _silu_grad(z, sig):
    return sig * (1.0 + z * (1.0 - sig))


class MlpScore(ScoreModel):
    """``score(x, t) = net([c_in x, emb(t)]) / b`` with SiLU hidden layers.

    The ``1/b`` output scaling and ``c_in = 1/sqrt(a^2 + b^2)`` keep the network
    targets O(1) across the schedule; the model still returns the score.
    """

    kind = "mlp"

    def __init__(self, dim: int, params: MlpParams, schedule: Schedule, weights=None, rng=None):
        super().__init__(schedule)
        self.params = params
        self.n = int(dim)
        widths = [self.n + params.emb_dim, *params.hidden, self.n]
        self.widths = widths
        if weights is None:
            rng = np.random.default_rng(rng)
            weights = []
            for fan_in, fan_out in zip(widths[:-1], widths[1:]):
                weights.append(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, fan_out)))
                weights.append(np.zeros(fan_out))
            weights[-2] *= 0.1
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        half = params.emb_dim // 2
        self.freqs = np.exp(np.linspace(0.0, np.log(params.emb_max_freq), half))
        self.loss_history: list[tuple[int, float]] = []

    @property
    def dim(self):
        return self.n

    @property
    def n_params(self):
        return sum(w.size for w in self.weights)

    def embed(self, t, batch):
        ang = np.outer(np.broadcast_to(np.atleast_1d(t), (batch,)), self.freqs)
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def _forward(self, X, a, b, t):
        """Returns the raw network output and the activation cache."""
        a = np.broadcast_to(np.asarray(a, dtype=np.float64), (X.shape[0],))
        b = np.broadcast_to(np.asarray(b, dtype=np.float64), (X.shape[0],))
        c_in = 1.0 / np.sqrt(a ** 2 + b ** 2)
        h = np.concatenate([X * c_in[:, None], self.embed(t, X.shape[0])], axis=1)
        cache = [h]
        n_layers = len(self.weights) // 2
        for k in range(n_layers):
            W, bias = self.weights[2 * k], self.weights[2 * k + 1]
            z = h @ W + bias
            if k < n_layers - 1:
                h, sig = _silu(z)
                cache.append((z, sig, h))
            else:
                h = z
        return h, cache, c_in

    def _backward(self, g_out, cache, want_params=False):
        n_layers = len(self.weights) // 2
        grads = [None] * len(self.weights)
        g = g_out
        for k in range(n_layers - 1, -1, -1):
            h_in = cache[k] if k == 0 else cache[k][2]
            W = self.weights[2 * k]
            if want_params:
                grads[2 * k] = h_in.T @ g
                grads[2 * k + 1] = g.sum(axis=0)
            g = g @ W.T
            if k > 0:
                z, sig, _ = cache[k]
                g = g * _silu_grad(z, sig)
        return g, grads

    def _score(self, X, lv):
        out, _, _ = self._forward(X, lv.a, lv.b, lv.t)
        return out / lv.b

    def _vjp(self, X, lv, V):
        _, cache, c_in = self._forward(X, lv.a, lv.b, lv.t)
        g_in, _ = self._backward(V / lv.b, cache)
        return g_in[:, : self.n] * c_in[:, None]


def train_dsm(params: MlpParams, dataset, schedule: Schedule, seed: int, callback=None,
              eval_every: int = 0) -> MlpScore:
    """Denoising score matching with Adam.

    Per step: ``i ~ U{1..N}``, ``x0`` from the dataset, ``x_i = a x0 + b z``; the
    loss is ``b^2 |s(x_i) - (a x0 - x_i)/b^2|^2 = |net + z|^2`` averaged per
    coordinate. ``callback(iteration, model)`` fires every ``eval_every`` steps.
    """
    data = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    if data.shape[0] == 0:
        raise ParameterError("empty dataset")
    rng = np.random.default_rng(seed)
    model = MlpScore(data.shape[1], params, schedule, rng=rng)
    m1 = [np.zeros_like(w) for w in model.weights]
    m2 = [np.zeros_like(w) for w in model.weights]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    N = schedule.N
    for it in range(1, params.iterations + 1):
        idx = rng.integers(0, data.shape[0], size=params.batch_size)
        steps = rng.integers(1, N + 1, size=params.batch_size)
        a, b, t = schedule.a[steps - 1], schedule.b[steps - 1], schedule.t[steps - 1]
        z = rng.standard_normal((params.batch_size, model.n))
        xi = a[:, None] * data[idx] + b[:, None] * z
        out, cache, _ = model._forward(xi, a, b, t)
        resid = out + z
        loss = float(np.mean(resid ** 2))
        if not np.isfinite(loss):
            raise TrainingError(it, loss)
        g_out = 2.0 * resid / resid.size
        _, grads = model._backward(g_out, cache, want_params=True)
        lr = params.learning_rate * 0.5 * (1.0 + np.cos(np.pi * (it - 1) / params.iterations))
        for k, g in enumerate(grads):
            m1[k] = beta1 * m1[k] + (1 - beta1) * g
            m2[k] = beta2 * m2[k] + (1 - beta2) * g * g
            mhat = m1[k] / (1 - beta1 ** it)
            vhat = m2[k] / (1 - beta2 ** it)
            model.weights[k] = model.weights[k] - lr * mhat / (np.sqrt(vhat) + eps)
        if it % params.log_every == 0 or it == params.iterations:
            model.loss_history.append((it, loss))
        if callback is not None and eval_every and it % eval_every == 0:
            callback(it, model)
    return model


def dsm_loss(model: ScoreModel, dataset, schedule: Schedule, rng, n_samples: int = 4096,
             weighted: bool = False) -> tuple[float, float]:
    """Monte-Carlo DSM loss of ``model`` and of the zero-score baseline on the same draws."""
    data = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    idx = rng.integers(0, data.shape[0], size=n_samples)
    steps = rng.integers(1, schedule.N + 1, size=n_samples)
    z = rng.standard_normal((n_samples, data.shape[1]))
    total = zero = 0.0
    for i in np.unique(steps):
        sel = steps == i
        lv = schedule.level(int(i))
        xi = lv.a * data[idx[sel]] + lv.b * z[sel]
        target = (lv.a * data[idx[sel]] - xi) / lv.b ** 2
        w = lv.b ** 2 if weighted else 1.0
        total += w * np.sum((model.score_at(xi, lv) - target) ** 2)
        zero += w * np.sum(target ** 2)
    return total / n_samples, zero / n_samples


def zero_score_dsm_baseline(schedule: Schedule, dim: int) -> float:
    """``E|(a x0 - x_i)/b^2|^2 = n * mean_i 1/b_i^2`` for i uniform on the schedule."""
    return float(dim * np.mean(1.0 / schedule.b ** 2))


# ---------------------------------------------------------------------------
# Step-indexed entry points (levels taken from the model's own schedule)
# ---------------------------------------------------------------------------


def score(m: ScoreModel, x, i: int):
    return m.score_at(x, m.schedule.level(i))


def tweedie_denoise(m: ScoreModel, x_i, i: int):
    return m.tweedie_at(x_i, m.schedule.level(i))


def score_jacobian_vjp(m: ScoreModel, x, i: int, v):
    return m.vjp_at(x, m.schedule.level(i), v)


# ---------------------------------------------------------------------------
# Binary weight files
#
# magic(8) | kind u32 | sched: kind u32, N_base u32, N u32, p1 f64, p2 f64 |
# kind-specific u32 header | little-endian float64 payload
# ---------------------------------------------------------------------------

MAGIC = b"MCGSCOR1"
_KIND_TAGS = {"gaussian": 1, "mixture": 2, "mlp": 3}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


def _sched_header(s: Schedule) -> bytes:
    p = s.params
    if s.kind is SdeKind.VP:
        p1, p2, tag = p["beta_min"], p["beta_max"], 0
    else:
        p1, p2, tag = p["sigma_min"], p["sigma_max"], 1
    return struct.pack("<III dd", tag, int(p.get("respaced_from", s.N)), s.N, p1, p2)


def _read_sched(buf: bytes, off: int):
    tag, n_base, n, p1, p2 = struct.unpack_from("<III dd", buf, off)
    make = make_vp_schedule if tag == 0 else make_ve_schedule
    return make(n_base, p1, p2).respaced(n), off + struct.calcsize("<III dd")


def _f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_model(m: ScoreModel, path) -> None:
    parts = [MAGIC, struct.pack("<I", _KIND_TAGS[m.kind]), _sched_header(m.schedule)]
    if isinstance(m, GaussianSubspaceScore):
        parts += [struct.pack("<II", m.dim, m.manifold_dim), _f64([m.tau]), _f64(m.mean), _f64(m.basis)]
    elif isinstance(m, EmpiricalMixtureScore):
        parts += [struct.pack("<II", *m.data.shape), _f64(m.data)]
    elif isinstance(m, MlpScore):
        p = m.params
        parts += [struct.pack("<II", len(m.widths), p.emb_dim), struct.pack(f"<{len(m.widths)}I", *m.widths),
                  _f64([p.emb_max_freq])]
        parts += [_f64(w) for w in m.weights]
    else:
        raise TypeError(f"cannot serialise {type(m).__name__}")
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path) -> ScoreModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a score-model file")
    (tag,) = struct.unpack_from("<I", buf, 8)
    sched, off = _read_sched(buf, 12)

    def take(count):
        nonlocal off
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        return arr

    kind = _TAG_KINDS[tag]
    if kind == "gaussian":
        n, l = struct.unpack_from("<II", buf, off)
        off += 8
        tau = take(1)[0]
        mean = take(n)
        basis = take(n * l).reshape(n, l)
        return GaussianSubspaceScore(mean, basis, tau, sched)
    if kind == "mixture":
        K, n = struct.unpack_from("<II", buf, off)
        off += 8
        return EmpiricalMixtureScore(take(K * n).reshape(K, n), sched)
    n_w, emb_dim = struct.unpack_from("<II", buf, off)
    off += 8
    widths = list(struct.unpack_from(f"<{n_w}I", buf, off))
    off += 4 * n_w
    max_freq = take(1)[0]
    weights = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(take(fan_in * fan_out).reshape(fan_in, fan_out))
        weights.append(take(fan_out))
    params = MlpParams(hidden=tuple(widths[1:-1]), emb_dim=emb_dim, emb_max_freq=max_freq)
    return MlpScore(widths[-1], params, sched, weights=weights)


def write_loss_log(model: MlpScore, path) -> None:
    with open(path, "w") as fh:
        for it, loss in model.loss_history:
            fh.write(f"{it} {loss!r}\n")
