"""Hot numeric kernels, each with a numba loop and a numpy fallback.

Dispatch happens per call through :func:`mcgdiff._accel.use_numba`.
"""
from __future__ import annotations

import math

import numpy as np

from . import _accel
from ._accel import njit

LOG_WEIGHT_FLOOR = -700.0


# ---------------------------------------------------------------------------
# Parallel-beam projection weights
#
# A unit pixel seen from angle theta has a trapezoidal chord-length profile in
# the detector coordinate u (distance from the projected pixel centre):
#   plateau 1/hi on |u| <= (hi-lo)/2, linear ramps to 0 at |u| = (hi+lo)/2,
# with hi/lo = max/min(|cos|, |sin|). The profile integrates to 1.
# "line" weighting samples it at the detector centre; "strip" weighting
# integrates it over the detector cell, so every pixel deposits exactly its
# area into each view it is fully seen by.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _chord(u, w1, w2, h):
    au = abs(u)
    if au <= w1:
        return h
    if au >= w2:
        return 0.0
    return h * (w2 - au) / (w2 - w1)


@njit(cache=True)
def _chord_cdf(u, w1, w2, h):
    if u < 0.0:
        return 1.0 - _chord_cdf(-u, w1, w2, h)
    # u >= 0: mass left of u = 1/2 + integral over [0, u]
    if u <= w1:
        return 0.5 + h * u
    ramp = w2 - w1
    if u >= w2:
        return 1.0
    d = w2 - u
    return 1.0 - h * d * d / (2.0 * ramp)


@njit(cache=True)
def _projection_triplets_numba(side, cosv, sinv, n_det, strip):
    n_views = cosv.shape[0]
    cap = n_views * side * side * 4
    rows = np.empty(cap, dtype=np.int64)
    cols = np.empty(cap, dtype=np.int64)
    vals = np.empty(cap, dtype=np.float64)
    half_img = (side - 1) / 2.0
    half_det = (n_det - 1) / 2.0
    k = 0
    for v in range(n_views):
        ca, sa = cosv[v], sinv[v]
        A, B = abs(ca), abs(sa)
        hi, lo = max(A, B), min(A, B)
        w1 = (hi - lo) / 2.0
        w2 = (hi + lo) / 2.0
        h = 1.0 / hi
        for r in range(side):
            yc = half_img - r
            for c in range(side):
                xc = c - half_img
                p = xc * ca + yc * sa
                jlo = int(math.ceil(p - w2 + half_det - 0.5))
                jhi = int(math.floor(p + w2 + half_det + 0.5))
                for j in range(jlo, jhi + 1):
                    if j < 0 or j >= n_det:
                        continue
                    tj = j - half_det
                    if strip:
                        w = _chord_cdf(tj + 0.5 - p, w1, w2, h) - _chord_cdf(tj - 0.5 - p, w1, w2, h)
                    else:
                        w = _chord(tj - p, w1, w2, h)
                    if w > 1e-15:
                        rows[k] = v * n_det + j
                        cols[k] = r * side + c
                        vals[k] = w
                        k += 1
    return rows[:k], cols[:k], vals[:k]


def _chord_np(u, w1, w2, h):
    au = np.abs(u)
    ramp = max(w2 - w1, 1e-300)
    out = np.where(au <= w1, h, h * (w2 - au) / ramp)
    return np.where(au >= w2, 0.0, out)


def _chord_cdf_np(u, w1, w2, h):
    au = np.abs(u)
    ramp = max(w2 - w1, 1e-300)
    d = w2 - au
    right = np.where(au <= w1, 0.5 + h * au, 1.0 - h * d * d / (2.0 * ramp))
    right = np.where(au >= w2, 1.0, right)
    return np.where(u < 0.0, 1.0 - right, right)


def _projection_triplets_numpy(side, cosv, sinv, n_det, strip):
    half_img = (side - 1) / 2.0
    half_det = (n_det - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    xc = (cc - half_img).ravel()
    yc = (half_img - rr).ravel()
    pix = np.arange(side * side)
    out_r, out_c, out_v = [], [], []
    for v, (ca, sa) in enumerate(zip(cosv, sinv)):
        A, B = abs(ca), abs(sa)
        hi, lo = max(A, B), min(A, B)
        w1, w2, h = (hi - lo) / 2.0, (hi + lo) / 2.0, 1.0 / hi
        p = xc * ca + yc * sa
        jlo = np.ceil(p - w2 + half_det - 0.5).astype(np.int64)
        jhi = np.floor(p + w2 + half_det + 0.5).astype(np.int64)
        for off in range(int((jhi - jlo).max()) + 1):
            j = jlo + off
            tj = j - half_det
            if strip:
                w = _chord_cdf_np(tj + 0.5 - p, w1, w2, h) - _chord_cdf_np(tj - 0.5 - p, w1, w2, h)
            else:
                w = _chord_np(tj - p, w1, w2, h)
            keep = (j <= jhi) & (j >= 0) & (j < n_det) & (w > 1e-15)
            out_r.append(v * n_det + j[keep])
            out_c.append(pix[keep])
            out_v.append(w[keep])
    return np.concatenate(out_r), np.concatenate(out_c), np.concatenate(out_v)


def projection_triplets(side: int, angles: np.ndarray, n_det: int, strip: bool = True):
    """COO triplets (row, col, weight) of the parallel-beam projector.

    Rows are view-major (``view * n_det + detector``), columns row-major pixels.
    """
    cosv = np.ascontiguousarray(np.cos(angles), dtype=np.float64)
    sinv = np.ascontiguousarray(np.sin(angles), dtype=np.float64)
    if _accel.use_numba():
        return _projection_triplets_numba(int(side), cosv, sinv, int(n_det), bool(strip))
    return _projection_triplets_numpy(int(side), cosv, sinv, int(n_det), bool(strip))


# ---------------------------------------------------------------------------
# Empirical-mixture posterior
#
# For p_i(x) = mean_k N(x; a x0_k, b^2 I) the posterior weights are
# softmax_k(-|x - a x0_k|^2 / 2b^2). Returns the posterior mean xbar and,
# when probes are given, Cov_w @ probe with Cov_w = sum_k w_k d_k d_k^T.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _mixture_numba(X, data, a, b2, V, want_cov):
    B, n = X.shape
    K = data.shape[0]
    xbar = np.zeros((B, n))
    covv = np.zeros((B, n))
    logw = np.empty(K)
    w = np.empty(K)
    for q in range(B):
        mx = -np.inf
        for k in range(K):
            acc = 0.0
            for d in range(n):
                diff = X[q, d] - a * data[k, d]
                acc += diff * diff
            logw[k] = -acc / (2.0 * b2)
            if logw[k] > mx:
                mx = logw[k]
        tot = 0.0
        for k in range(K):
            z = logw[k] - mx
            w[k] = math.exp(z) if z > -700.0 else 0.0
            tot += w[k]
        for k in range(K):
            w[k] /= tot
            if w[k] == 0.0:
                continue
            for d in range(n):
                xbar[q, d] += w[k] * data[k, d]
        if want_cov:
            for k in range(K):
                if w[k] == 0.0:
                    continue
                dot = 0.0
                for d in range(n):
                    dot += (data[k, d] - xbar[q, d]) * V[q, d]
                coef = w[k] * dot
                for d in range(n):
                    covv[q, d] += coef * (data[k, d] - xbar[q, d])
    return xbar, covv


def _mixture_numpy(X, data, a, b2, V, want_cov):
    B, n = X.shape
    xbar = np.empty((B, n))
    covv = np.zeros((B, n))
    chunk = max(1, int(4_000_000 // max(1, data.size)))
    for start in range(0, B, chunk):
        sl = slice(start, start + chunk)
        diff = X[sl, None, :] - a * data[None, :, :]
        logw = -np.einsum("bkn,bkn->bk", diff, diff) / (2.0 * b2)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.where(logw > LOG_WEIGHT_FLOOR, np.exp(logw), 0.0)
        w /= w.sum(axis=1, keepdims=True)
        xbar[sl] = w @ data
        if want_cov:
            dev = data[None, :, :] - xbar[sl, None, :]
            proj = np.einsum("bkn,bn->bk", dev, V[sl])
            covv[sl] = np.einsum("bk,bkn->bn", w * proj, dev)
    return xbar, covv


def mixture_posterior(X: np.ndarray, data: np.ndarray, a: float, b: float, V: np.ndarray | None = None):
    X = np.ascontiguousarray(X, dtype=np.float64)
    data = np.ascontiguousarray(data, dtype=np.float64)
    want_cov = V is not None
    Vc = np.ascontiguousarray(V, dtype=np.float64) if want_cov else np.zeros((1, 1))
    b2 = float(b) * float(b)
    if _accel.use_numba():
        if not want_cov:
            Vc = np.zeros_like(X)
        xbar, covv = _mixture_numba(X, data, float(a), b2, Vc, want_cov)
    else:
        xbar, covv = _mixture_numpy(X, data, float(a), b2, Vc, want_cov)
    return xbar, (covv if want_cov else None)
