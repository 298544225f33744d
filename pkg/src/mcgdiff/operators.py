"""Linear forward operators, measurement-consistency steps and weightings.

All operators act on flattened signals. Indices are 0-based.
"""
from __future__ import annotations

import enum
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from . import kernels
from .schedule import ParameterError, Schedule


class ConsistencyError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"CG did not converge in {iterations} iterations (residual {residual:.3e})")
        self.residual = residual


class WeightSpec(str, enum.Enum):
    IDENTITY = "identity"
    TRANSPOSE = "transpose"
    PSEUDO_INVERSE = "pinv"


def _check_dim(v, expected, what):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != expected:
        raise ValueError(f"{what}: expected dimension {expected}, got {v.shape[-1]}")
    return v


class ForwardOperator:
    kind = "base"
    orthonormal_rows = False

    def __init__(self, n: int, m: int):
        self.n, self.m = int(n), int(m)

    def apply(self, x):
        return self._apply(_check_dim(x, self.n, "apply"))

    def apply_transpose(self, y):
        return self._transpose(_check_dim(y, self.m, "apply_transpose"))

    def consistency_step(self, x_prime, y_i):
        """``A x' + b(y_i)``: replace the measured component of ``x'`` with ``y_i``."""
        x_prime = _check_dim(x_prime, self.n, "consistency_step")
        y_i = _check_dim(y_i, self.m, "consistency_step")
        if self.orthonormal_rows:
            return x_prime + self._transpose(y_i - self._apply(x_prime))
        return x_prime + self._min_norm_correction(y_i - self._apply(x_prime))

    def pseudo_inverse_apply(self, y):
        y = _check_dim(y, self.m, "pseudo_inverse_apply")
        if self.orthonormal_rows:
            return self._transpose(y)
        raise NotImplementedError(f"pseudo-inverse unsupported for {self.kind}")

    def pseudo_inverse_adjoint(self, u):
        u = _check_dim(u, self.n, "pseudo_inverse_adjoint")
        if self.orthonormal_rows:
            return self._apply(u)
        raise NotImplementedError(f"pseudo-inverse unsupported for {self.kind}")

    def _min_norm_correction(self, r):
        raise NotImplementedError

    def measurement_noise(self, rng) -> np.ndarray:
        """Standard noise in measurement space with the law of ``H z``, ``z ~ N(0, I_n)``.

        For orthonormal rows this is plain ``N(0, I_m)``. Otherwise the draw stays
        in ``range(H)``, so a consistency step never chases unreachable components.
        """
        if self.orthonormal_rows:
            return rng.standard_normal(self.m)
        return self._apply(rng.standard_normal(self.n))

    def dense(self) -> np.ndarray:
        return np.stack([self._apply(e) for e in np.eye(self.n)], axis=1)


class InpaintingMask(ForwardOperator):
    """Coordinate selection ``P``: one 1 per row, ``P P^T = I_m``."""

    kind = "inpaint"
    orthonormal_rows = True

    def __init__(self, kept_indices, n: int):
        kept = np.asarray(kept_indices, dtype=np.int64)
        if kept.ndim != 1 or np.any(np.diff(kept) <= 0):
            raise ParameterError("kept indices must be sorted and distinct")
        if kept.size and (kept[0] < 0 or kept[-1] >= n):
            raise ParameterError("kept index out of range")
        super().__init__(n, kept.size)
        self.kept = kept

    @classmethod
    def from_box(cls, shape, x0: int, y0: int, w: int, h: int):
        """Mask hiding the box ``[y0, y0+h) x [x0, x0+w)`` of an image of ``shape``."""
        shape = tuple(shape)
        keep = np.ones(shape, dtype=bool)
        keep[y0:y0 + h, x0:x0 + w, ...] = False
        return cls(np.flatnonzero(keep.ravel()), int(np.prod(shape)))

    @classmethod
    def from_keep_mask(cls, keep):
        keep = np.asarray(keep, dtype=bool)
        return cls(np.flatnonzero(keep.ravel()), keep.size)

    def consistency_step(self, x_prime, y_i):
        # assignment rather than x + P^T (y - P x): exact on the measured entries
        out = np.array(_check_dim(x_prime, self.n, "consistency_step"), dtype=np.float64)
        out[..., self.kept] = _check_dim(y_i, self.m, "consistency_step")
        return out

    def _apply(self, x):
        return x[..., self.kept]

    def _transpose(self, y):
        out = np.zeros(y.shape[:-1] + (self.n,))
        out[..., self.kept] = y
        return out


def luminance_mixing_matrix() -> np.ndarray:
    """Orthonormal RGB mixing with the luminance row ``(1,1,1)/sqrt(3)`` first."""
    rows = np.array([[1.0, 1.0, 1.0], [1.0, 0.0, -1.0], [1.0, -2.0, 1.0]])
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


class ColorCoupling(ForwardOperator):
    """``C = P M``: mix channels per pixel with orthogonal ``M`` and keep one mixed channel.

    Signals are channel-last ``(H, W, 3)`` flattened.
    """

    kind = "colorize"
    orthonormal_rows = True

    def __init__(self, height: int, width: int, mixing=None, kept_channel: int = 0):
        M = luminance_mixing_matrix() if mixing is None else np.asarray(mixing, dtype=np.float64)
        if M.shape != (3, 3) or np.abs(M.T @ M - np.eye(3)).max() > 1e-12:
            raise ParameterError("mixing matrix must be 3x3 orthogonal")
        super().__init__(height * width * 3, height * width)
        self.shape = (height, width, 3)
        self.mixing = M
        self.row = M[kept_channel]

    def _apply(self, x):
        return x.reshape(x.shape[:-1] + (-1, 3)) @ self.row

    def _transpose(self, y):
        return (y[..., None] * self.row).reshape(y.shape[:-1] + (self.n,))


def ram_lak_kernel(n_det: int) -> np.ndarray:
    """Spatial Ram-Lak taps ``h[k]`` for ``k = -(n_det-1)..(n_det-1)`` at unit spacing."""
    k = np.arange(-(n_det - 1), n_det)
    h = np.zeros(k.shape)
    h[k == 0] = 0.25
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi ** 2 * k[odd] ** 2)
    return h


class Radon(ForwardOperator):
    """Parallel-beam projector over 180 degrees, view-major sinogram.

    ``weighting="strip"`` integrates each pixel's chord profile over the
    detector cell (exact per-view mass conservation); ``"line"`` samples the
    chord length along the central ray.
    """

    kind = "ct"

    DENSE_LIMIT = 2000

    def __init__(self, image_side: int, n_views: int, n_detectors: int | None = None,
                 weighting: str = "strip", cg_tol: float = 1e-8, cg_maxiter: int = 500,
                 solver: str = "auto"):
        if weighting not in ("strip", "line"):
            raise ParameterError(f"unknown weighting {weighting!r}")
        if solver not in ("auto", "dense", "cg"):
            raise ParameterError(f"unknown solver {solver!r}")
        n_det = image_side if n_detectors is None else int(n_detectors)
        super().__init__(image_side * image_side, n_views * n_det)
        self.image_side, self.n_views, self.n_detectors = image_side, n_views, n_det
        self.angles = np.pi * np.arange(n_views) / n_views
        self.weighting = weighting
        self.cg_tol, self.cg_maxiter = cg_tol, cg_maxiter
        if solver == "auto":
            solver = "dense" if self.m <= self.DENSE_LIMIT else "cg"
        self.solver = solver
        rows, cols, vals = kernels.projection_triplets(image_side, self.angles, n_det, weighting == "strip")
        self.matrix = sp.csr_matrix((vals, (rows, cols)), shape=(self.m, self.n))
        self.matrix.sort_indices()
        self.matrix_t = self.matrix.T.tocsr()
        h = ram_lak_kernel(n_det)
        j = np.arange(n_det)
        self.filter_matrix = h[(j[:, None] - j[None, :]) + n_det - 1]
        self.cg_iterations: list[int] = []

    def _apply(self, x):
        return (self.matrix @ x.T).T

    def _transpose(self, y):
        return (self.matrix_t @ y.T).T

    @cached_property
    def normal_matrix(self):
        return (self.matrix @ self.matrix_t).tocsr()

    @cached_property
    def _svd(self):
        """Thin SVD of ``R`` truncated at the numerical rank."""
        U, sv, Vt = np.linalg.svd(self.matrix.toarray(), full_matrices=False)
        keep = sv > max(self.m, self.n) * np.finfo(np.float64).eps * sv[0]
        return np.ascontiguousarray(U[:, keep]), sv[keep], np.ascontiguousarray(Vt[keep])

    def _min_norm_correction(self, r):
        """``R^T (R R^T)^+ r``; the dense path uses ``V S^-1 U^T r`` to avoid squaring the conditioning."""
        if self.solver == "dense":
            U, sv, Vt = self._svd
            return ((r @ U) / sv) @ Vt
        return self._min_norm_correction_cg(r)

    def _min_norm_correction_cg(self, r):
        """Conjugate gradients on ``R R^T u = r`` from a zero start."""
        rn = float(np.linalg.norm(r))
        if rn == 0.0:
            return np.zeros(self.n)
        iters = [0]

        def count(_):
            iters[0] += 1

        op = LinearOperator((self.m, self.m), matvec=self.normal_matrix.dot, dtype=np.float64)
        u, info = cg(op, r, x0=np.zeros(self.m), rtol=self.cg_tol, atol=0.0,
                     maxiter=self.cg_maxiter, callback=count)
        self.cg_iterations.append(iters[0])
        if info != 0:
            res = float(np.linalg.norm(r - self.normal_matrix @ u))
            if res > self.cg_tol * rn:
                raise ConsistencyError(res, iters[0])
        return self.matrix_t @ u

    def _filter(self, sino):
        views = sino.reshape(self.n_views, self.n_detectors)
        return (views @ self.filter_matrix).ravel()

    def pseudo_inverse_apply(self, y):
        """Filtered backprojection (Ram-Lak, no apodisation)."""
        y = _check_dim(y, self.m, "pseudo_inverse_apply")
        return (np.pi / self.n_views) * (self.matrix_t @ self._filter(y))

    def pseudo_inverse_adjoint(self, u):
        u = _check_dim(u, self.n, "pseudo_inverse_adjoint")
        return (np.pi / self.n_views) * self._filter(self.matrix @ u)

    def fbp(self, y) -> np.ndarray:
        return self.pseudo_inverse_apply(y).reshape(self.image_side, self.image_side)


class Dense(ForwardOperator):
    kind = "dense"

    def __init__(self, matrix):
        H = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        super().__init__(H.shape[1], H.shape[0])
        self.matrix = H
        self.pinv = np.linalg.pinv(H)
        self.orthonormal_rows = bool(np.abs(H @ H.T - np.eye(self.m)).max() < 1e-12)

    def _apply(self, x):
        return x @ self.matrix.T

    def _transpose(self, y):
        return y @ self.matrix

    def _min_norm_correction(self, r):
        return self.pinv @ r

    def pseudo_inverse_apply(self, y):
        return _check_dim(y, self.m, "pseudo_inverse_apply") @ self.pinv.T

    def pseudo_inverse_adjoint(self, u):
        return _check_dim(u, self.n, "pseudo_inverse_adjoint") @ self.pinv


def apply_weight(H: ForwardOperator, W: WeightSpec, r):
    if W is WeightSpec.IDENTITY:
        return r
    if W is WeightSpec.TRANSPOSE:
        return H.apply_transpose(r)
    return H.pseudo_inverse_apply(r)


def apply_weight_adjoint(H: ForwardOperator, W: WeightSpec, u):
    if W is WeightSpec.IDENTITY:
        return u
    if W is WeightSpec.TRANSPOSE:
        return H.apply(u)
    return H.pseudo_inverse_adjoint(u)


def consistency_step(H: ForwardOperator, x_prime, y_i):
    return H.consistency_step(x_prime, y_i)


def pseudo_inverse_apply(H: ForwardOperator, y):
    return H.pseudo_inverse_apply(y)


def sample_y_i(H: ForwardOperator, y, s: Schedule, i: int, noise=None, rng=None):
    """Measurement at noise level ``i``: ``a_i y + b_i noise`` (level 0 returns ``y``).

    Without explicit ``noise`` one is drawn from ``H.measurement_noise(rng)``.
    """
    y = _check_dim(y, H.m, "sample_y_i")
    if i == 0:
        return y.copy()
    if noise is None:
        noise = H.measurement_noise(np.random.default_rng(rng))
    return s.a_at(i) * y + s.b_at(i) * np.asarray(noise, dtype=np.float64)


def measure(H: ForwardOperator, x, noise_sigma: float = 0.0, rng=None):
    y = H.apply(x)
    if noise_sigma > 0:
        y = y + noise_sigma * np.random.default_rng(rng).standard_normal(y.shape)
    return y
