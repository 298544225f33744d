"""Numerical checks of the manifold geometry behind MCG.

* concentration: noisy samples sit in a thin shell of radius ``b sqrt(n - l)``
  around the scaled manifold,
* projector: the Jacobian of the Tweedie map is (locally) an orthogonal
  projection onto the tangent space,
* tangency: the MCG gradient has no normal component, while the plain
  measurement gradient does.

Every check returns records with the measured statistic, its threshold and a
pass flag; ``write_csv`` dumps them in a fixed column order.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .operators import ForwardOperator, InpaintingMask, WeightSpec
from .phantoms import random_orthonormal
from .schedule import NoiseLevel, ParameterError, Schedule, make_ve_schedule
from .scores import GaussianSubspaceScore, ScoreModel
from .solvers import mcg_gradient_at, naive_gradient

CSV_SCHEMA = "mcgdiff-geometry/1"


@dataclass(frozen=True)
class ManifoldSpec:
    n: int
    l: int
    tangent_basis: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        if not (0 < self.l < self.n):
            raise ParameterError(f"need 0 < l < n, got l={self.l}, n={self.n}")
        T = np.asarray(self.tangent_basis, dtype=np.float64)
        if T.shape != (self.n, self.l):
            raise ParameterError(f"tangent basis must be {self.n}x{self.l}")
        if np.abs(T.T @ T - np.eye(self.l)).max() > 1e-12:
            raise ParameterError("tangent basis is not orthonormal")
        object.__setattr__(self, "tangent_basis", T)
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64))

    @classmethod
    def random(cls, n: int, l: int, rng, free_coordinate: int | None = None) -> "ManifoldSpec":
        """Random subspace; with ``free_coordinate`` the basis vanishes on that axis."""
        if not (0 < l < n):
            raise ParameterError(f"need 0 < l < n, got l={l}, n={n}")
        rng = np.random.default_rng(rng)
        if free_coordinate is None:
            T = random_orthonormal(n, l, rng)
        else:
            T = np.zeros((n, l))
            keep = np.delete(np.arange(n), free_coordinate)
            T[keep] = random_orthonormal(n - 1, l, rng)
        offset = rng.standard_normal(n)
        offset -= T @ (T.T @ offset)
        return cls(n, l, T, offset)

    def normal(self, V):
        return V - (V @ self.tangent_basis) @ self.tangent_basis.T

    def gaussian_model(self, tau: float, schedule: Schedule) -> GaussianSubspaceScore:
        return GaussianSubspaceScore(self.offset, self.tangent_basis, tau, schedule)


@dataclass
class CheckRecord:
    check: str
    params: str
    statistic: float
    threshold: float
    comparison: str
    passed: bool


@dataclass
class ConcentrationResult:
    i: int
    r_i: float
    epsilon_band: float
    delta_target: float
    empirical_fraction_in_band: float
    sample_count: int

    @property
    def passed(self) -> bool:
        return self.empirical_fraction_in_band > 1.0 - self.delta_target


@dataclass
class ProjectorResult:
    b: float
    asymmetry: float
    idempotence: float
    range_normal: float
    closed_form_error: float = float("nan")


@dataclass
class TangencyResult:
    b: float
    mcg_ratio: float
    naive_ratio: float
    queries: int
    ratios: np.ndarray = field(repr=False, default=None)


def band_radius(b: float, n: int, l: int) -> float:
    return float(b * math.sqrt(n - l))


def epsilon_from_prime(eps_prime: float) -> float:
    """Relative band half-width implied by the tail parameter ``eps'``."""
    if not (0.0 < eps_prime <= 0.25):
        raise ParameterError("eps' must lie in (0, 1/4]")
    root = math.sqrt(eps_prime)
    return min(1.0 - math.sqrt(1.0 - 2.0 * root), math.sqrt(1.0 + 2.0 * root + 2.0 * eps_prime) - 1.0)


def _level(s: Schedule, i) -> tuple[int, NoiseLevel]:
    if isinstance(i, NoiseLevel):
        return -1, i
    return int(i), s.level(int(i))


def check_concentration(spec: ManifoldSpec, s: Schedule, i, samples: int, epsilon_prime: float, rng,
                        tau: float = 1.0, batch: int = 10_000) -> ConcentrationResult:
    """Fraction of ``x_i`` whose distance to ``a_i M`` lies in ``r_i (1 -+ eps)``.

    Clean points are uniform on a box of side ``10 tau`` in tangent coordinates.
    """
    if samples < 1000:
        raise ParameterError("need at least 1000 samples")
    step, lv = _level(s, i)
    rng = np.random.default_rng(rng)
    r = band_radius(lv.b, spec.n, spec.l)
    eps = epsilon_from_prime(epsilon_prime)
    inside = 0
    done = 0
    while done < samples:
        k = min(batch, samples - done)
        coords = rng.uniform(-5.0 * tau, 5.0 * tau, size=(k, spec.l))
        x0 = spec.offset + coords @ spec.tangent_basis.T
        xi = lv.a * x0 + lv.b * rng.standard_normal((k, spec.n))
        dist = np.linalg.norm(spec.normal(xi - lv.a * spec.offset), axis=1)
        inside += int(np.count_nonzero((dist > r * (1 - eps)) & (dist < r * (1 + eps))))
        done += k
    delta = 2.0 * math.exp(-(spec.n - spec.l) * epsilon_prime)
    return ConcentrationResult(step, r, eps, delta, inside / samples, samples)


def tweedie_jacobian_vjp(m: ScoreModel, x, lv: NoiseLevel) -> np.ndarray:
    """Full Jacobian of ``x -> (x + b^2 s(x)) / a`` assembled row by row from VJPs."""
    n = m.dim
    eye = np.eye(n)
    X = np.broadcast_to(np.asarray(x, dtype=np.float64), (n, n))
    rows = (eye + lv.b ** 2 * m.vjp_at(X, lv, eye)) / lv.a
    return rows


def check_projector(spec: ManifoldSpec, m: ScoreModel, s: Schedule, i, rng, queries: int = 3,
                    probes: int = 100) -> ProjectorResult:
    """Symmetry, idempotence defect and range containment of the Tweedie Jacobian."""
    _, lv = _level(s, i)
    rng = np.random.default_rng(rng)
    closed = m.tweedie_jacobian(lv) if isinstance(m, GaussianSubspaceScore) else None
    asym = idem = rng_normal = closed_err = 0.0
    for _ in range(queries):
        coords = rng.standard_normal(spec.l)
        x = lv.a * (spec.offset + spec.tangent_basis @ coords) + lv.b * rng.standard_normal(spec.n)
        J = tweedie_jacobian_vjp(m, x, lv)
        jn = np.linalg.norm(J, 2)
        asym = max(asym, np.linalg.norm(J - J.T, 2) / jn)
        idem = max(idem, np.linalg.norm(J @ J - J, 2))
        V = rng.standard_normal((probes, spec.n))
        JV = V @ J.T
        ratio = np.linalg.norm(spec.normal(JV), axis=1) / np.linalg.norm(JV, axis=1)
        rng_normal = max(rng_normal, float(ratio.max()))
        if closed is not None:
            closed_err = max(closed_err, np.linalg.norm(J - closed, 2) / np.linalg.norm(closed, 2))
    return ProjectorResult(lv.b, float(asym), float(idem), rng_normal,
                           float(closed_err) if closed is not None else float("nan"))


def _ratio(spec, g):
    gn = np.linalg.norm(g)
    return 0.0 if gn == 0.0 else float(np.linalg.norm(spec.normal(g)) / gn)


def check_tangency(spec: ManifoldSpec, m: ScoreModel, s: Schedule, H: ForwardOperator, W: WeightSpec, y,
                   i, queries: int, rng, tau: float = 1.0, negate_jacobian: bool = False) -> TangencyResult:
    """Worst normal/total ratio of the MCG gradient and of the naive gradient over noisy queries.

    A zero gradient (zero residual) counts as ratio 0.
    """
    _, lv = _level(s, i)
    rng = np.random.default_rng(rng)
    mcg, naive = [], []
    for _ in range(queries):
        coords = tau * rng.standard_normal(spec.l)
        x = lv.a * (spec.offset + spec.tangent_basis @ coords) + lv.b * rng.standard_normal(spec.n)
        g, _ = mcg_gradient_at(m, H, W, x, lv, y, negate_jacobian=negate_jacobian)
        mcg.append(_ratio(spec, g))
        naive.append(_ratio(spec, naive_gradient(H, W, x, y)))
    return TangencyResult(lv.b, max(mcg), max(naive), queries, np.array(mcg))


def adversarial_operator(spec: ManifoldSpec, free_coordinate: int, extra_every: int = 3) -> InpaintingMask:
    """Mask keeping ``free_coordinate`` (orthogonal to the manifold) and every ``extra_every``-th axis."""
    kept = sorted(set(range(0, spec.n, extra_every)) | {free_coordinate})
    return InpaintingMask(np.array(kept), spec.n)


# ---------------------------------------------------------------------------
# Default suite
# ---------------------------------------------------------------------------

CONCENTRATION_GRID = ((100, 2), (400, 4))
B_GRID = (1.0, 0.1, 0.01)


def run_default_suite(seed: int, negate_jacobian: bool = False, concentration_samples: int = 100_000,
                      epsilon_prime: float = 0.01) -> list[CheckRecord]:
    from . import rng as rng_mod

    records: list[CheckRecord] = []
    tau = 1.0

    for k, (n, l) in enumerate(CONCENTRATION_GRID):
        spec = ManifoldSpec.random(n, l, rng_mod.stream(seed, 10, k))
        lv = NoiseLevel(1.0, 0.5, 0.0)
        res = check_concentration(spec, None, lv, concentration_samples, epsilon_prime,
                                  rng_mod.stream(seed, 11, k), tau=tau)
        records.append(CheckRecord("concentration", f"n={n};l={l};eps'={epsilon_prime};b={lv.b}",
                                   res.empirical_fraction_in_band, 1.0 - res.delta_target, ">", res.passed))

    spec = ManifoldSpec.random(50, 5, rng_mod.stream(seed, 20), free_coordinate=0)
    sched = make_ve_schedule(1000, 0.01, 50.0)
    model = spec.gaussian_model(tau, sched)
    idem = []
    for k, b in enumerate(B_GRID):
        lv = NoiseLevel(1.0, b * tau, 0.0)
        pr = check_projector(spec, model, sched, lv, rng_mod.stream(seed, 21, k))
        tag = f"n=50;l=5;b={b * tau}"
        records.append(CheckRecord("projector_symmetry", tag, pr.asymmetry, 1e-10, "<=", pr.asymmetry <= 1e-10))
        records.append(CheckRecord("projector_range", tag, pr.range_normal, 1e-10, "<=", pr.range_normal <= 1e-10))
        records.append(CheckRecord("projector_closed_form", tag, pr.closed_form_error, 1e-8, "<=",
                                   pr.closed_form_error <= 1e-8))
        idem.append(pr.idempotence)
    decreasing = all(u > v for u, v in zip(idem, idem[1:]))
    records.append(CheckRecord("projector_idempotence_decreasing", "b=" + ",".join(map(str, B_GRID)),
                               idem[-1], idem[0], "<", decreasing))

    H = adversarial_operator(spec, 0)
    x_ref = spec.offset + spec.tangent_basis @ rng_mod.stream(seed, 30).standard_normal(spec.l)
    y = H.apply(x_ref)
    for k, b in enumerate(B_GRID):
        lv = NoiseLevel(1.0, b * tau, 0.0)
        tr = check_tangency(spec, model, sched, H, WeightSpec.IDENTITY, y, lv, 20, rng_mod.stream(seed, 31, k),
                            tau=tau, negate_jacobian=negate_jacobian)
        tag = f"n=50;l=5;b={b * tau}"
        records.append(CheckRecord("tangency_mcg", tag, tr.mcg_ratio, 1e-8, "<=", tr.mcg_ratio <= 1e-8))
        records.append(CheckRecord("tangency_naive", tag, tr.naive_ratio, 0.1, ">=", tr.naive_ratio >= 0.1))
    return records


def write_csv(records: list[CheckRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {CSV_SCHEMA}\n")
        writer = csv.DictWriter(fh, fieldnames=list(CheckRecord.__dataclass_fields__))
        writer.writeheader()
        for rec in records:
            row = asdict(rec)
            row["statistic"] = repr(float(row["statistic"]))
            row["threshold"] = repr(float(row["threshold"]))
            writer.writerow(row)
