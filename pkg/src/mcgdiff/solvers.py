"""Reverse samplers: unconditional, projection-only, MCG and the ablation variants.

One sampler iteration moves from level ``i`` to ``i - 1``. Guidance acts on the
output of a stochastic sub-step and differentiates with respect to its input:

* MCG: ``x'' = x' - alpha * d/dx |W (y - H x0_hat(x))|^2`` with ``x0_hat`` from Tweedie,
* matched noise: ``x'' = x' - alpha * d/dx |y_{i-1} - H x'(x)|^2`` through the reverse step,

with ``alpha = alpha' / |residual|``. The consistency step then replaces the
measured component with a measurement noised to the output level.
"""
from __future__ import annotations

import dataclasses
import enum
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .metrics import mse, mse_mc, psnr, ssim
from .operators import ForwardOperator, WeightSpec, apply_weight, apply_weight_adjoint, sample_y_i
from .schedule import NoiseLevel, ParameterError, Schedule, SdeKind, reverse_coeffs
from .scores import GaussianSubspaceScore, ScoreModel

RESIDUAL_FLOOR = 1e-12
DIVERGENCE_BOUND = 1e12


class Family(str, enum.Enum):
    ANCESTRAL_VP = "ancestral_vp"
    PC_VE = "pc_ve"


class GradientVariant(str, enum.Enum):
    NONE = "none"
    MCG = "mcg"
    MATCHED = "matched"


class Placement(str, enum.Enum):
    AFTER_PREDICTOR_AND_CORRECTOR = "predictor_and_corrector"
    AFTER_SWEEP = "sweep"


class SamplerDivergence(RuntimeError):
    def __init__(self, step: int, diagnostics=None):
        super().__init__(f"sampler state became non-finite or unbounded at step {step}")
        self.step = step
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class SamplerConfig:
    family: Family = Family.ANCESTRAL_VP
    n_steps: int = 1000
    alpha_prime: float = 1.0
    gradient_variant: GradientVariant = GradientVariant.MCG
    use_projection: bool = True
    corrector_steps: int = 1
    snr: float = 0.16
    placement: Placement = Placement.AFTER_PREDICTOR_AND_CORRECTOR
    seed: int = 0
    stop_gradient: bool = False
    negate_jacobian: bool = False

    def __post_init__(self):
        for name, enum_type in (("family", Family), ("gradient_variant", GradientVariant),
                                ("placement", Placement)):
            object.__setattr__(self, name, enum_type(getattr(self, name)))
        if not self.alpha_prime >= 0.0:
            raise ParameterError(f"alpha_prime must be >= 0, got {self.alpha_prime}")
        if self.n_steps < 2:
            raise ParameterError("n_steps must be >= 2")
        if self.corrector_steps < 0 or self.snr < 0:
            raise ParameterError("corrector_steps and snr must be non-negative")

    def replace(self, **changes) -> "SamplerConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key, val in out.items():
            if isinstance(val, enum.Enum):
                out[key] = val.value
        return out


TASK_DEFAULTS = {
    "inpaint": (SamplerConfig(Family.ANCESTRAL_VP, 1000, 1.0), WeightSpec.IDENTITY),
    "colorize": (SamplerConfig(Family.PC_VE, 2000, 0.1,
                               placement=Placement.AFTER_PREDICTOR_AND_CORRECTOR), WeightSpec.TRANSPOSE),
    "ct": (SamplerConfig(Family.PC_VE, 2000, 0.1, placement=Placement.AFTER_SWEEP), WeightSpec.PSEUDO_INVERSE),
}


def task_defaults(task: str) -> tuple[SamplerConfig, WeightSpec]:
    try:
        return TASK_DEFAULTS[task]
    except KeyError:
        raise ParameterError(f"no defaults for task {task!r}") from None


DIAG_DTYPE = np.dtype([("step", "i8"), ("residual", "f8"), ("fixed_point", "f8"),
                       ("tangency", "f8"), ("alpha", "f8")])


@dataclass
class ReconstructionReport:
    x0_hat: np.ndarray
    diagnostics: np.ndarray
    mse: float = float("nan")
    psnr: float = float("nan")
    ssim: float = float("nan")
    mse_mc: float = float("nan")
    nfe: int = 0
    wall_time: float = 0.0
    config: SamplerConfig | None = field(default=None, repr=False)

    def same_result(self, other: "ReconstructionReport") -> bool:
        """Bitwise equality of everything except wall time."""
        def same(u, v):
            return np.array_equal(np.asarray(u), np.asarray(v), equal_nan=True)
        return (same(self.x0_hat, other.x0_hat) and self.diagnostics.tobytes() == other.diagnostics.tobytes()
                and all(same(getattr(self, k), getattr(other, k)) for k in ("mse", "psnr", "ssim", "mse_mc"))
                and self.nfe == other.nfe)

    @property
    def max_tangency(self) -> float:
        t = self.diagnostics["tangency"]
        t = t[np.isfinite(t)]
        return float(t.max()) if t.size else float("nan")


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def reverse_step_unconditional(s: Schedule, m: ScoreModel, x_i, i: int, noise, score=None):
    c = reverse_coeffs(s, i)
    if score is None:
        score = m.score_at(x_i, s.level(i))
    return c.apply(np.asarray(x_i, dtype=np.float64), score) + c.g * np.asarray(noise)


def pc_corrector_step(s: Schedule, m: ScoreModel, x, i: int, snr: float, rng=None, noise=None, score=None):
    """One Langevin step at fixed level ``i``: ``x + eta s + sqrt(2 eta) z``.

    ``eta = 2 (snr |z| / |s|)^2``; for a batch of chains both norms are averaged
    over the batch, so every chain shares one step size. A zero score skips the step.
    """
    x = np.asarray(x, dtype=np.float64)
    if score is None:
        score = m.score_at(x, s.level(i))
    z = np.random.default_rng(rng).standard_normal(x.shape) if noise is None else np.asarray(noise)
    s_norm = float(np.mean(np.linalg.norm(score, axis=-1)))
    if s_norm == 0.0 or snr == 0.0:
        return x
    z_norm = float(np.mean(np.linalg.norm(z, axis=-1)))
    eta = 2.0 * (snr * z_norm / s_norm) ** 2
    return x + eta * score + np.sqrt(2.0 * eta) * z


def tweedie(s: Schedule, m: ScoreModel, x_i, i: int, score=None):
    lv = s.level(i)
    return m.tweedie_at(x_i, lv, score)


def mcg_gradient_at(m: ScoreModel, H: ForwardOperator, W: WeightSpec, x, lv: NoiseLevel, y, score=None,
                    stop_gradient: bool = False, negate_jacobian: bool = False):
    """``mcg_gradient`` at an explicit noise level."""
    x = np.asarray(x, dtype=np.float64)
    if score is None:
        score = m.score_at(x, lv)
    x0 = m.tweedie_at(x, lv, score)
    r = apply_weight(H, W, np.asarray(y) - H.apply(x0))
    rn = float(np.linalg.norm(r))
    if rn == 0.0:
        return np.zeros_like(x), 0.0
    v = H.apply_transpose(apply_weight_adjoint(H, W, r))
    if stop_gradient:
        jt = 0.0
    else:
        jt = m.vjp_at(x, lv, v)
        if negate_jacobian:
            jt = -jt
    return -(2.0 / lv.a) * (v + lv.b ** 2 * jt), rn


def mcg_gradient(s: Schedule, m: ScoreModel, H: ForwardOperator, W: WeightSpec, x_i, i: int, y,
                 score=None, stop_gradient: bool = False, negate_jacobian: bool = False):
    """Gradient of ``|W (y - H x0_hat(x_i))|^2`` with respect to ``x_i``, and the residual norm.

    ``d x0_hat / dx = (I + b^2 J_s) / a``, so the gradient is
    ``-(2/a) (I + b^2 J_s^T) H^T W^T r``. ``stop_gradient`` drops the score
    Jacobian; ``negate_jacobian`` flips its sign (a deliberate bug for mutation checks).
    """
    return mcg_gradient_at(m, H, W, x_i, s.level(i), y, score, stop_gradient, negate_jacobian)


def naive_gradient(H: ForwardOperator, W: WeightSpec, x, y):
    """``d/dx |W (y - H x)|^2`` evaluated at the noisy point itself (no denoising)."""
    r = apply_weight(H, W, np.asarray(y) - H.apply(x))
    return -2.0 * H.apply_transpose(apply_weight_adjoint(H, W, r))


def _matched_parts(s, m, H, x_i, i, y_prev, noise, score=None):
    c = reverse_coeffs(s, i)
    if score is None:
        score = m.score_at(x_i, s.level(i))
    x_prime = c.apply(x_i, score) + c.g * noise
    resid = y_prev - H.apply(x_prime)
    v = H.apply_transpose(resid)
    grad = -2.0 * c.scale * (v + c.weight * m.vjp_at(x_i, s.level(i), v))
    return grad, x_prime, float(np.linalg.norm(resid))


def matched_noise_gradient(s: Schedule, m: ScoreModel, H: ForwardOperator, x_i, i: int, y,
                           rng=None, noise=None, y_prev=None):
    """Gradient of ``|y_{i-1} - H x'(x_i)|^2`` through the unconditional reverse step.

    ``noise`` (the reverse-step noise) and ``y_prev`` are drawn from ``rng`` when omitted.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    gen = np.random.default_rng(rng)
    if noise is None:
        noise = gen.standard_normal(x_i.shape)
    if y_prev is None:
        y_prev = sample_y_i(H, y, s, i - 1, rng=gen)
    grad, _, _ = _matched_parts(s, m, H, x_i, i, y_prev, noise)
    return grad


# ---------------------------------------------------------------------------
# Sampler loop
# ---------------------------------------------------------------------------


def _steps_schedule(s: Schedule, n_steps: int) -> Schedule:
    if n_steps > s.N:
        raise ParameterError(f"schedule has {s.N} steps, config asks for {n_steps}")
    return s.respaced(n_steps)


class _Chain:
    def __init__(self, cfg: SamplerConfig, s: Schedule, m: ScoreModel, H, W, y, shape):
        expected = SdeKind.VP if cfg.family is Family.ANCESTRAL_VP else SdeKind.VE
        if s.kind is not expected:
            raise ParameterError(f"{cfg.family.value} sampler needs a {expected.value} schedule")
        self.cfg, self.s, self.m, self.H, self.W = cfg, s, m, H, W
        self.y = None if y is None else np.asarray(y, dtype=np.float64)
        self.rx = rng_mod.stream(cfg.seed, rng_mod.SAMPLER)
        self.ry = rng_mod.stream(cfg.seed, rng_mod.MEASUREMENT)
        self.shape = shape
        self.nfe = 0
        self.diag: list[tuple] = []
        self.guided = cfg.gradient_variant is not GradientVariant.NONE and cfg.alpha_prime > 0
        self.tangency = np.nan
        self.alpha = 0.0

    def score(self, x, i):
        self.nfe += 1
        return self.m.score_at(x, self.s.level(i))

    def y_at(self, level):
        return sample_y_i(self.H, self.y, self.s, level, rng=self.ry)

    def mcg(self, x_out, x_in, i, score):
        """Apply the MCG update to ``x_out`` using the gradient at ``x_in`` (level ``i``)."""
        cfg = self.cfg
        grad, rn = mcg_gradient(self.s, self.m, self.H, self.W, x_in, i, self.y, score=score,
                                stop_gradient=cfg.stop_gradient, negate_jacobian=cfg.negate_jacobian)
        if rn < RESIDUAL_FLOOR:
            return x_out
        self.alpha = cfg.alpha_prime / rn
        if isinstance(self.m, GaussianSubspaceScore):
            gn = np.linalg.norm(grad)
            self.tangency = float(np.linalg.norm(self.m.normal(grad)) / gn) if gn > 0 else 0.0
        return x_out - self.alpha * grad

    def predictor(self, x, i, score=None, guide=True):
        cfg = self.cfg
        if score is None:
            score = self.score(x, i)
        z = self.rx.standard_normal(self.shape)
        y_prev = None
        if cfg.gradient_variant is GradientVariant.MATCHED and self.guided and guide:
            y_prev = self.y_at(i - 1)
            grad, x_new, rn = _matched_parts(self.s, self.m, self.H, x, i, y_prev, z, score)
            if rn >= RESIDUAL_FLOOR:
                self.alpha = cfg.alpha_prime / rn
                x_new = x_new - self.alpha * grad
        else:
            x_new = reverse_step_unconditional(self.s, self.m, x, i, z, score=score)
            if cfg.gradient_variant is GradientVariant.MCG and self.guided and guide:
                x_new = self.mcg(x_new, x, i, score)
        if cfg.use_projection and guide:
            x_new = self.H.consistency_step(x_new, self.y_at(i - 1) if y_prev is None else y_prev)
        return x_new

    def corrector(self, x, i, score, guide):
        cfg = self.cfg
        z = self.rx.standard_normal(self.shape)
        x_new = pc_corrector_step(self.s, self.m, x, i, cfg.snr, noise=z, score=score)
        if guide and cfg.gradient_variant is GradientVariant.MCG and self.guided:
            x_new = self.mcg(x_new, x, i, score)
        if guide and cfg.use_projection:
            x_new = self.H.consistency_step(x_new, self.y_at(i))
        return x_new

    def record(self, x, i, score):
        if self.H is None or x.ndim != 1:
            return
        x0 = self.m.tweedie_at(x, self.s.level(i), score)
        resid = float(np.linalg.norm(apply_weight(self.H, self.W, self.y - self.H.apply(x0))))
        self.diag.append((i, resid, float(np.linalg.norm(x - x0)), self.tangency, self.alpha))
        self.tangency, self.alpha = np.nan, 0.0

    def iterate(self, x, i):
        cfg = self.cfg
        score = self.score(x, i)
        if cfg.family is Family.ANCESTRAL_VP:
            x_new = self.predictor(x, i, score)
        else:
            both = cfg.placement is Placement.AFTER_PREDICTOR_AND_CORRECTOR
            x_new, sc = x, score
            for _ in range(cfg.corrector_steps):
                x_new = self.corrector(x_new, i, sc, guide=both)
                sc = self.score(x_new, i)
            x_new = self.predictor(x_new, i, sc, guide=both)
            if not both:
                if cfg.gradient_variant is GradientVariant.MCG and self.guided:
                    x_new = self.mcg(x_new, x, i, score)
                if cfg.use_projection:
                    x_new = self.H.consistency_step(x_new, self.y_at(i - 1))
        self.record(x, i, score)
        return x_new

    def run(self):
        s = self.s
        x = self.rx.standard_normal(self.shape) * (1.0 if s.kind is SdeKind.VP else s.b_at(s.N))
        for i in range(s.N, 0, -1):
            x = self.iterate(x, i)
            if not np.all(np.isfinite(x)) or np.abs(x).max() > DIVERGENCE_BOUND:
                raise SamplerDivergence(i, np.array(self.diag, dtype=DIAG_DTYPE))
        return x


def _check_problem(cfg, m, H, W, y):
    needs_h = cfg.use_projection or (cfg.gradient_variant is not GradientVariant.NONE and cfg.alpha_prime > 0)
    if H is None:
        if needs_h:
            raise ParameterError("guidance or projection requires an operator")
        return
    if H.n != m.dim:
        raise ValueError(f"operator acts on dimension {H.n}, model on {m.dim}")
    if y is None or np.asarray(y).shape != (H.m,):
        raise ValueError(f"measurement must have shape ({H.m},)")
    if cfg.gradient_variant is GradientVariant.MATCHED and cfg.family is not Family.ANCESTRAL_VP:
        raise ParameterError("the matched-noise variant is defined for the ancestral sampler")


def solve_inverse(cfg: SamplerConfig, s: Schedule, m: ScoreModel, H: ForwardOperator | None,
                  W: WeightSpec = WeightSpec.IDENTITY, y=None, x_true=None, image_shape=None
                  ) -> ReconstructionReport:
    """Run the configured sampler from pure noise down to ``x_0`` and score the result."""
    _check_problem(cfg, m, H, WeightSpec(W), y)
    t0 = time.perf_counter()
    chain = _Chain(cfg, _steps_schedule(s, cfg.n_steps), m, H, WeightSpec(W), y, (m.dim,))
    x0 = chain.run()
    report = ReconstructionReport(x0, np.array(chain.diag, dtype=DIAG_DTYPE), nfe=chain.nfe, config=cfg)
    if H is not None:
        report.mse_mc = mse_mc(y, H.apply(x0))
    if x_true is not None:
        x_true = np.asarray(x_true, dtype=np.float64).ravel()
        report.mse = mse(x0, x_true)
        report.psnr = psnr(x0, x_true)
        if image_shape is not None:
            report.ssim = ssim(x0.reshape(image_shape), x_true.reshape(image_shape))
    report.wall_time = time.perf_counter() - t0
    return report


def sample_unconditional(cfg: SamplerConfig, s: Schedule, m: ScoreModel, n_chains: int | None = None):
    """Prior samples; ``n_chains=None`` runs one chain with the same random stream as ``solve_inverse``."""
    cfg = cfg.replace(gradient_variant=GradientVariant.NONE, use_projection=False)
    shape = (m.dim,) if n_chains is None else (int(n_chains), m.dim)
    return _Chain(cfg, _steps_schedule(s, cfg.n_steps), m, None, WeightSpec.IDENTITY, None, shape).run()
