"""Discrete VP / VE noise schedules.

Index convention: steps run ``i = 1..N`` with ``i = N`` the noisiest state.
Level ``i = 0`` is the clean signal (``a = 1``, ``b = 0``); it is never part of
the stored arrays but is accepted wherever a *level* (not a step) is asked for,
e.g. the measurement noise level after the final reverse step.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import yaml


class ParameterError(ValueError):
    """Invalid construction parameters."""


class SdeKind(str, enum.Enum):
    VP = "VP"
    VE = "VE"


class NoiseLevel(NamedTuple):
    a: float
    b: float
    t: float


class ReverseCoeffs(NamedTuple):
    """Unconditional reverse step ``x_{i-1} = scale * (x + weight * s) + g * z``."""

    scale: float
    weight: float
    g: float

    def apply(self, x, s):
        return self.scale * (x + self.weight * s)


@dataclass(frozen=True, eq=False)
class Schedule:
    kind: SdeKind
    N: int
    a: np.ndarray
    b: np.ndarray
    t: np.ndarray
    beta: np.ndarray | None = None
    alpha_bar: np.ndarray | None = None
    sigma: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("a", "b", "t", "beta", "alpha_bar", "sigma"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, dtype=np.float64)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        if len(self.a) != self.N or len(self.b) != self.N:
            raise ParameterError("coefficient arrays must have length N")

    def _check(self, i: int, lowest: int = 1) -> None:
        if not (lowest <= i <= self.N):
            raise IndexError(f"step index {i} outside [{lowest}, {self.N}]")

    def a_at(self, i: int) -> float:
        self._check(i, 0)
        return 1.0 if i == 0 else float(self.a[i - 1])

    def b_at(self, i: int) -> float:
        self._check(i, 0)
        return 0.0 if i == 0 else float(self.b[i - 1])

    def level(self, i: int) -> NoiseLevel:
        self._check(i, 0)
        if i == 0:
            return NoiseLevel(1.0, 0.0, 0.0)
        return NoiseLevel(float(self.a[i - 1]), float(self.b[i - 1]), float(self.t[i - 1]))

    def alpha_bar_at(self, i: int) -> float:
        return 1.0 if i == 0 else float(self.alpha_bar[i - 1])

    def sigma_at(self, i: int) -> float:
        return 0.0 if i == 0 else float(self.sigma[i - 1])

    def respaced(self, n_steps: int) -> "Schedule":
        """Sub-sample the schedule to ``n_steps`` levels, keeping both endpoints.

        VP: the retained ``alpha_bar`` values define new per-step betas
        ``1 - alpha_bar[k] / alpha_bar[k-1]``. VE: retained sigmas. The original
        continuous times are kept so time-conditioned models stay consistent.
        """
        if n_steps == self.N:
            return self
        if not (2 <= n_steps <= self.N):
            raise ParameterError(f"cannot respace {self.N} steps to {n_steps}")
        idx = np.unique(np.round(np.linspace(0, self.N - 1, n_steps)).astype(int))
        if len(idx) != n_steps:
            raise ParameterError("respacing produced duplicate indices")
        params = dict(self.params, respaced_from=self.N)
        if self.kind is SdeKind.VP:
            abar = self.alpha_bar[idx]
            prev = np.concatenate([[1.0], abar[:-1]])
            beta = 1.0 - abar / prev
            return Schedule(SdeKind.VP, n_steps, a=np.sqrt(abar), b=np.sqrt(1.0 - abar),
                            t=self.t[idx], beta=beta, alpha_bar=abar, params=params)
        sig = self.sigma[idx]
        return Schedule(SdeKind.VE, n_steps, a=np.ones(n_steps), b=sig, t=self.t[idx],
                        sigma=sig, params=params)

    def to_text(self) -> str:
        doc = {"kind": self.kind.value, "N": int(self.N)}
        for key, val in self.params.items():
            doc[key] = val
        return yaml.safe_dump(doc, sort_keys=False)

    @classmethod
    def from_text(cls, text: str) -> "Schedule":
        doc = yaml.safe_load(text)
        kind = SdeKind(doc["kind"])
        base_n = int(doc.get("respaced_from", doc["N"]))
        if kind is SdeKind.VP:
            s = make_vp_schedule(base_n, float(doc["beta_min"]), float(doc["beta_max"]))
        else:
            s = make_ve_schedule(base_n, float(doc["sigma_min"]), float(doc["sigma_max"]))
        return s.respaced(int(doc["N"]))


def make_vp_schedule(N: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> Schedule:
    """Linearly increasing betas from ``beta_min`` to ``beta_max``.

    ``beta_min == beta_max`` (a constant schedule) is accepted.
    """
    if N < 2:
        raise ParameterError("N must be >= 2")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ParameterError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, N)
    alpha_bar = np.cumprod(1.0 - beta)
    return Schedule(
        SdeKind.VP, N,
        a=np.sqrt(alpha_bar), b=np.sqrt(1.0 - alpha_bar),
        t=np.arange(1, N + 1) / N,
        beta=beta, alpha_bar=alpha_bar,
        params={"beta_min": float(beta_min), "beta_max": float(beta_max)},
    )


def make_ve_schedule(N: int, sigma_min: float = 0.01, sigma_max: float = 50.0) -> Schedule:
    """Geometric sigmas, ``sigma[1] = sigma_min`` and ``sigma[N] = sigma_max`` exactly."""
    if N < 2:
        raise ParameterError("N must be >= 2")
    if not (0.0 < sigma_min < sigma_max):
        raise ParameterError(f"need 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})")
    frac = np.arange(N) / (N - 1)
    sigma = sigma_min * (sigma_max / sigma_min) ** frac
    sigma[0], sigma[-1] = sigma_min, sigma_max
    return Schedule(
        SdeKind.VE, N,
        a=np.ones(N), b=sigma, t=np.arange(1, N + 1) / N, sigma=sigma,
        params={"sigma_min": float(sigma_min), "sigma_max": float(sigma_max)},
    )


def max_pairwise_distance(data) -> float:
    """Largest Euclidean distance between two rows; the usual VE ``sigma_max``."""
    X = np.atleast_2d(np.asarray(data, dtype=np.float64))
    sq = np.einsum("ij,ij->i", X, X)
    best = 0.0
    for start in range(0, X.shape[0], 1024):
        blk = X[start:start + 1024]
        d2 = sq[start:start + 1024, None] + sq[None, :] - 2.0 * blk @ X.T
        best = max(best, float(d2.max()))
    return float(np.sqrt(max(best, 0.0)))


def forward_diffuse(s: Schedule, x0, i: int, noise) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape[-1] != noise.shape[-1]:
        raise ValueError(f"dimension mismatch: x0 {x0.shape} vs noise {noise.shape}")
    s._check(i)
    return s.a_at(i) * x0 + s.b_at(i) * noise


def reverse_coeffs(s: Schedule, i: int) -> ReverseCoeffs:
    """Coefficients of the unconditional reverse step from level ``i`` to ``i - 1``.

    VP uses the fixed posterior variance ``beta_i (1 - abar_{i-1}) / (1 - abar_i)``;
    VE is Euler-Maruyama with ``sigma_0 = 0``. At ``i = 1`` both give ``g = 0`` and
    the deterministic part collapses to the Tweedie posterior mean.
    """
    s._check(i)
    if s.kind is SdeKind.VP:
        abar_i, abar_prev = s.alpha_bar_at(i), s.alpha_bar_at(i - 1)
        alpha_i = 1.0 - float(s.beta[i - 1])
        post_var = (1.0 - alpha_i) * (1.0 - abar_prev) / (1.0 - abar_i)
        return ReverseCoeffs(1.0 / np.sqrt(alpha_i), 1.0 - alpha_i, float(np.sqrt(max(post_var, 0.0))))
    dvar = s.sigma_at(i) ** 2 - s.sigma_at(i - 1) ** 2
    g = 0.0 if i == 1 else float(np.sqrt(max(dvar, 0.0)))
    return ReverseCoeffs(1.0, dvar, g)


def score_to_eps(s: Schedule, score, i: int):
    return -s.b_at(i) * np.asarray(score)


def eps_to_score(s: Schedule, eps, i: int):
    return -np.asarray(eps) / s.b_at(i)
