"""Desk-scale datasets: Shepp-Logan variants, 8-Gaussians, subspace patches."""
from __future__ import annotations

import numpy as np

from .schedule import ParameterError

# (x0, y0, semi-axis a, semi-axis b, rotation deg, additive intensity)
SHEPP_LOGAN_ELLIPSES = np.array([
    [0.0, 0.0, 0.69, 0.92, 0.0, 2.0],
    [0.0, -0.0184, 0.6624, 0.874, 0.0, -0.98],
    [0.22, 0.0, 0.11, 0.31, -18.0, -0.02],
    [-0.22, 0.0, 0.16, 0.41, 18.0, -0.02],
    [0.0, 0.35, 0.21, 0.25, 0.0, 0.01],
    [0.0, 0.1, 0.046, 0.046, 0.0, 0.01],
    [0.0, -0.1, 0.046, 0.046, 0.0, 0.01],
    [-0.08, -0.605, 0.046, 0.023, 0.0, 0.01],
    [0.0, -0.605, 0.023, 0.023, 0.0, 0.01],
    [0.06, -0.605, 0.023, 0.046, 0.0, 0.01],
])

MODIFIED_INTENSITIES = np.array([1.0, -0.8, -0.2, -0.2, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1])


SUPERSAMPLE = 4


def render_ellipses(ellipses, size: int, supersample: int = SUPERSAMPLE) -> np.ndarray:
    """Additive ellipses over ``[-1, 1]^2`` (y up), pixel values averaged over a
    ``supersample x supersample`` sub-grid."""
    fine = size * supersample
    coords = (np.arange(fine) - (fine - 1) / 2.0) / (fine / 2.0)
    X, Y = np.meshgrid(coords, -coords)
    img = np.zeros((fine, fine))
    for x0, y0, a, b, deg, val in ellipses:
        th = np.deg2rad(deg)
        u = (X - x0) * np.cos(th) + (Y - y0) * np.sin(th)
        v = -(X - x0) * np.sin(th) + (Y - y0) * np.cos(th)
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += val
    return img.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def shepp_logan(size: int, variant: str = "classical") -> np.ndarray:
    """Ten-ellipse head phantom scaled into ``[0, 1]`` with background exactly 0."""
    ell = SHEPP_LOGAN_ELLIPSES.copy()
    if variant == "modified":
        ell[:, 5] = MODIFIED_INTENSITIES
    elif variant != "classical":
        raise ParameterError(f"unknown Shepp-Logan variant {variant!r}")
    img = render_ellipses(ell, size)
    return np.clip(img / img.max(), 0.0, 1.0)


def random_ellipse_phantoms(count: int, size: int, rng, variant: str = "classical",
                            jitter: float = 0.04) -> np.ndarray:
    """Head-like phantoms: Shepp-Logan ellipses with jittered geometry and contrast."""
    rng = np.random.default_rng(rng)
    base = SHEPP_LOGAN_ELLIPSES.copy()
    if variant == "modified":
        base[:, 5] = MODIFIED_INTENSITIES
    out = np.empty((count, size, size))
    for k in range(count):
        ell = base.copy()
        ell[:, 0:2] += rng.uniform(-jitter, jitter, size=(len(ell), 2))
        ell[:, 2:4] *= rng.uniform(1.0 - 2 * jitter, 1.0 + 2 * jitter, size=(len(ell), 2))
        ell[:, 4] += rng.uniform(-10.0, 10.0, size=len(ell))
        ell[2:, 5] *= rng.uniform(0.5, 1.5, size=len(ell) - 2)
        # skull/brain pair shares geometry so the skull keeps a uniform thickness
        ell[1, 0:2] = ell[0, 0:2] + (base[1, 0:2] - base[0, 0:2])
        ell[1, 2:4] = ell[0, 2:4] * (base[1, 2:4] / base[0, 2:4])
        ell[1, 4] = ell[0, 4]
        img = render_ellipses(ell, size)
        out[k] = np.clip(img / max(base[0, 5], img.max()), 0.0, 1.0)
    return out


def eight_gaussians(count: int, rng, radius: float = 2.0, std: float = 0.15) -> np.ndarray:
    rng = np.random.default_rng(rng)
    which = rng.integers(0, 8, size=count)
    ang = which * np.pi / 4
    centers = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return centers + std * rng.standard_normal((count, 2))


def smooth_embedding(side: int, dim: int = 2) -> np.ndarray:
    """Orthonormal ``(side*side, dim)`` basis of low-frequency image patterns."""
    c = (np.arange(side) + 0.5) / side
    X, Y = np.meshgrid(c, c)
    patterns = [np.cos(np.pi * X) + 0.5 * np.cos(np.pi * Y), np.cos(np.pi * Y) - 0.5 * np.cos(np.pi * X),
                np.cos(2 * np.pi * X) * np.cos(np.pi * Y), np.cos(np.pi * X) * np.cos(2 * np.pi * Y)]
    B = np.stack([p.ravel() for p in patterns[:dim]], axis=1)
    q, _ = np.linalg.qr(B)
    return q


def random_orthonormal(n: int, l: int, rng) -> np.ndarray:
    q, r = np.linalg.qr(np.random.default_rng(rng).standard_normal((n, l)))
    return q * np.sign(np.diag(r))


def subspace_patch(count: int, n: int, l: int, rng, tau: float = 1.0, dist: str = "uniform"):
    """Points on a random ``l``-dim affine subspace of ``R^n``.

    Returns ``(points, basis, offset)``. ``dist="uniform"`` draws tangent
    coordinates from a box of side ``10 tau``; ``"gaussian"`` from ``N(0, tau^2)``.
    """
    if not (0 < l < n):
        raise ParameterError("need 0 < l < n")
    rng = np.random.default_rng(rng)
    basis = random_orthonormal(n, l, rng)
    offset = rng.standard_normal(n)
    offset -= basis @ (basis.T @ offset)
    if dist == "uniform":
        coords = rng.uniform(-5.0 * tau, 5.0 * tau, size=(count, l))
    elif dist == "gaussian":
        coords = tau * rng.standard_normal((count, l))
    else:
        raise ParameterError(f"unknown distribution {dist!r}")
    return offset + coords @ basis.T, basis, offset


PHANTOM_KINDS = ("shepp-logan", "ellipses", "eight-gaussians-2d", "subspace-patch")


def make_phantom(kind: str, size: int, seed: int, count: int = 1000, **opts):
    """Generate a dataset; returns a dict of named arrays."""
    if kind not in PHANTOM_KINDS:
        raise ParameterError(f"unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")
    rng = np.random.default_rng(seed)
    if kind == "shepp-logan":
        if not 16 <= size <= 256:
            raise ParameterError("size must be within [16, 256]")
        return {"image": shepp_logan(size, opts.get("variant", "classical"))}
    if kind == "ellipses":
        if not 16 <= size <= 256:
            raise ParameterError("size must be within [16, 256]")
        return {"images": random_ellipse_phantoms(count, size, rng, opts.get("variant", "classical"))}
    if kind == "eight-gaussians-2d":
        pts = eight_gaussians(count, rng)
        side = opts.get("embed_side")
        if side:
            return {"points": pts @ smooth_embedding(int(side)).T, "latent": pts}
        return {"points": pts}
    n, l = int(opts.get("n", 50)), int(opts.get("l", 5))
    pts, basis, offset = subspace_patch(count, n, l, rng, dist=opts.get("dist", "uniform"))
    return {"points": pts, "basis": basis, "offset": offset}
