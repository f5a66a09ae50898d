"""Rotation algebra and isotropic Gaussian distributions on SO(3).

Rotations are plain 3x3 numpy arrays (orthonormal, det +1). The angle
distribution of the isotropic Gaussian is realized as a truncated
heat-kernel series tabulated on a regular grid for inverse-CDF sampling.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import InvalidVariance

# Series truncation: small variances need many terms before the tail
# drops below double precision; 27.63 = -ln(1e-12).
_L_SMALL_EPS = 2000
_L_LARGE_EPS = 200
_EPS_CUTOFF = 0.05
_TAIL_EXPONENT = 27.63

# Grid resolution of the tabulated angle CDF.
_TABLE_K = 4096


def is_rotation(mat: np.ndarray, tol: float = 1e-6) -> bool:
    """True if mat is orthonormal with determinant +1 within tol."""
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (3, 3) or not np.all(np.isfinite(mat)):
        return False
    err = np.linalg.norm(mat.T @ mat - np.eye(3))
    return err <= tol and abs(np.linalg.det(mat) - 1.0) <= tol


def project_rotation(mat: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) via SVD, det forced to +1."""
    u, _, vt = np.linalg.svd(np.asarray(mat, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues formula; axis need not be normalized."""
    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if norm == 0.0 or angle == 0.0:
        return np.eye(3)
    u = axis / norm
    k = np.array([[0.0, -u[2], u[1]],
                  [u[2], 0.0, -u[0]],
                  [-u[1], u[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def axis_angle(rot: np.ndarray) -> tuple[np.ndarray, float]:
    """Axis-angle decomposition with angle in [0, pi].

    Near angle pi the skew part vanishes; the axis is then taken as the
    largest-norm column of (R + I)/2, which is numerically stable and
    deterministic.
    """
    rot = np.asarray(rot, dtype=float)
    skew = np.array([rot[2, 1] - rot[1, 2],
                     rot[0, 2] - rot[2, 0],
                     rot[1, 0] - rot[0, 1]])
    sin_t = 0.5 * np.linalg.norm(skew)
    cos_t = 0.5 * (np.trace(rot) - 1.0)
    angle = float(np.arctan2(sin_t, cos_t))
    if angle < 1e-12:
        return np.array([0.0, 0.0, 1.0]), 0.0
    if angle > np.pi - 1e-6:
        sym = 0.5 * (rot + np.eye(3))
        col = int(np.argmax(np.linalg.norm(sym, axis=0)))
        axis = sym[:, col] / np.linalg.norm(sym[:, col])
        return axis, angle
    return skew / (2.0 * sin_t), angle


def scale_rot(rot: np.ndarray, k: float) -> np.ndarray:
    """Rescale the rotation angle by k in (0, 1], keeping the axis."""
    if not 0.0 < k <= 1.0:
        raise ValueError(f"scale factor must be in (0, 1], got {k}")
    axis, angle = axis_angle(rot)
    if angle == 0.0:
        return np.eye(3)
    return rotation_from_axis_angle(axis, k * angle)


def geodesic_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle between two rotations, arccos((tr(a^T b) - 1)/2)."""
    arg = 0.5 * (np.trace(np.asarray(a).T @ np.asarray(b)) - 1.0)
    return float(np.arccos(np.clip(arg, -1.0, 1.0)))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform (Haar) random rotation via a normalized random quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotations_from_axis_angle_many(axes: np.ndarray,
                                   angles: np.ndarray) -> np.ndarray:
    """Vectorized Rodrigues formula; axes must be unit length, (m, 3)."""
    u = np.asarray(axes, dtype=float)
    theta = np.asarray(angles, dtype=float)
    m = len(theta)
    k = np.zeros((m, 3, 3))
    k[:, 0, 1] = -u[:, 2]
    k[:, 0, 2] = u[:, 1]
    k[:, 1, 0] = u[:, 2]
    k[:, 1, 2] = -u[:, 0]
    k[:, 2, 0] = -u[:, 1]
    k[:, 2, 1] = u[:, 0]
    sin_t = np.sin(theta)[:, None, None]
    cos_t = np.cos(theta)[:, None, None]
    return np.eye(3) + sin_t * k + (1.0 - cos_t) * np.einsum("mij,mjk->mik", k, k)


def scale_rot_many(rots: np.ndarray, k: float) -> np.ndarray:
    """scale_rot applied to a stack of rotations, (m, 3, 3)."""
    if not 0.0 < k <= 1.0:
        raise ValueError(f"scale factor must be in (0, 1], got {k}")
    rots = np.asarray(rots, dtype=float)
    skew = np.stack([rots[:, 2, 1] - rots[:, 1, 2],
                     rots[:, 0, 2] - rots[:, 2, 0],
                     rots[:, 1, 0] - rots[:, 0, 1]], axis=1)
    sin_t = 0.5 * np.linalg.norm(skew, axis=1)
    cos_t = 0.5 * (np.trace(rots, axis1=1, axis2=2) - 1.0)
    angles = np.arctan2(sin_t, cos_t)
    axes = np.zeros_like(skew)
    axes[:, 2] = 1.0
    regular = (angles >= 1e-12) & (angles <= np.pi - 1e-6)
    axes[regular] = skew[regular] / (2.0 * sin_t[regular, None])
    for i in np.flatnonzero(angles > np.pi - 1e-6):
        axes[i], angles[i] = axis_angle(rots[i])
    out = rotations_from_axis_angle_many(axes, k * angles)
    out[angles < 1e-12] = np.eye(3)
    return out


def sample_igso3_many(means: np.ndarray, eps: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Independent IG_SO(3) draws around a stack of means, (m, 3, 3)."""
    if eps <= 0.0:
        raise InvalidVariance(f"variance must be positive, got {eps}")
    means = np.asarray(means, dtype=float)
    m = len(means)
    table = igso3_table(float(eps))
    angles = table.sample_angle(rng, m)
    axes = rng.standard_normal((m, 3))
    norms = np.linalg.norm(axes, axis=1)
    while np.any(norms < 1e-12):
        bad = norms < 1e-12
        axes[bad] = rng.standard_normal((int(bad.sum()), 3))
        norms = np.linalg.norm(axes, axis=1)
    perturb = rotations_from_axis_angle_many(axes / norms[:, None], angles)
    return np.einsum("mij,mjk->mik", means, perturb)


def _series_terms(eps: float) -> int:
    if eps >= _EPS_CUTOFF:
        return _L_LARGE_EPS
    # enough terms that exp(-L(L+1) eps) < 1e-12, never fewer than 2000
    return max(_L_SMALL_EPS, int(np.ceil(np.sqrt(_TAIL_EXPONENT / eps))))


# The angle-ratio matrix sin((l + 1/2) w) / sin(w / 2) on the standard grid
# depends only on (grid, l); it is shared across all table variances and
# grown lazily to the largest truncation requested.
_SHARED_GRID = np.linspace(0.0, np.pi, _TABLE_K)
_ratio_cache: dict = {"n_cols": 0, "mat": None}


def _ratio_matrix(n_cols: int) -> np.ndarray:
    if _ratio_cache["n_cols"] < n_cols:
        ell = np.arange(n_cols, dtype=float)
        mat = np.empty((_TABLE_K, n_cols))
        w = _SHARED_GRID[1:]
        mat[1:] = np.sin(np.outer(w, ell + 0.5)) / np.sin(0.5 * w)[:, None]
        mat[0] = 2.0 * ell + 1.0
        _ratio_cache["n_cols"] = n_cols
        _ratio_cache["mat"] = mat
    return _ratio_cache["mat"][:, :n_cols]


def _density_on_shared_grid(eps: float) -> np.ndarray:
    """igso3_density evaluated on the standard table grid, reusing the
    shared ratio matrix."""
    n_terms = _series_terms(eps)
    ell = np.arange(n_terms + 1, dtype=float)
    weights = (2.0 * ell + 1.0) * np.exp(-ell * (ell + 1.0) * eps)
    series = _ratio_matrix(n_terms + 1) @ weights
    out = (1.0 - np.cos(_SHARED_GRID)) / np.pi * series
    np.clip(out, 0.0, None, out=out)
    return out


def igso3_density(omega, eps: float):
    """Marginal angle density of the isotropic Gaussian on SO(3).

    f(w) = (1 - cos w)/pi * sum_l (2l+1) exp(-l(l+1) eps)
           * sin((l + 1/2) w) / sin(w/2),

    truncated and clamped to be nonnegative. Accepts scalars or arrays;
    omega must lie in [0, pi].
    """
    if eps <= 0.0:
        raise InvalidVariance(f"variance must be positive, got {eps}")
    omega_arr = np.atleast_1d(np.asarray(omega, dtype=float))
    n_terms = _series_terms(eps)
    ell = np.arange(n_terms + 1, dtype=float)
    weights = (2.0 * ell + 1.0) * np.exp(-ell * (ell + 1.0) * eps)

    out = np.zeros_like(omega_arr)
    nz = omega_arr > 0.0
    if np.any(nz):
        w = omega_arr[nz]
        half = np.sin(0.5 * w)
        # ratio matrix: rows are angles, columns are series terms
        ratio = np.sin(np.outer(w, ell + 0.5)) / half[:, None]
        series = ratio @ weights
        out[nz] = (1.0 - np.cos(w)) / np.pi * series
    np.clip(out, 0.0, None, out=out)
    if np.isscalar(omega) or np.ndim(omega) == 0:
        return float(out[0])
    return out


class IgSo3Table:
    """Tabulated angle CDF of IG_SO(3) for inverse-CDF sampling.

    Immutable after construction; shareable across threads.
    """

    def __init__(self, eps: float, k: int = _TABLE_K):
        if eps <= 0.0:
            raise InvalidVariance(f"variance must be positive, got {eps}")
        self.eps = float(eps)
        self.grid = np.linspace(0.0, np.pi, k)
        if k == _TABLE_K:
            pdf = _density_on_shared_grid(eps)
        else:
            pdf = igso3_density(self.grid, eps)
        cdf = np.concatenate([
            [0.0],
            np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(self.grid)),
        ])
        total = cdf[-1]
        if total <= 0.0:
            raise InvalidVariance(f"density vanished for eps={eps}")
        self.pdf = pdf / total
        self.cdf = cdf / total

    def sample_angle(self, rng: np.random.Generator, n: int | None = None):
        """Inverse-CDF draw of rotation angles; linear interpolation."""
        u = rng.random(n if n is not None else 1)
        idx = np.searchsorted(self.cdf, u, side="right")
        idx = np.clip(idx, 1, len(self.grid) - 1)
        c0 = self.cdf[idx - 1]
        c1 = self.cdf[idx]
        frac = np.where(c1 > c0, (u - c0) / np.where(c1 > c0, c1 - c0, 1.0), 0.0)
        angles = self.grid[idx - 1] + frac * (self.grid[idx] - self.grid[idx - 1])
        if n is None:
            return float(angles[0])
        return angles


@lru_cache(maxsize=512)
def igso3_table(eps: float) -> IgSo3Table:
    """Memoized table lookup; tables are immutable and reused."""
    return IgSo3Table(eps)


def sample_igso3(mean: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Draw one rotation from IG_SO(3)(mean, eps).

    The angle comes from the tabulated marginal, the axis is uniform on
    the sphere, and the sample is mean composed with the perturbation.
    """
    if eps <= 0.0:
        raise InvalidVariance(f"variance must be positive, got {eps}")
    table = igso3_table(float(eps))
    angle = table.sample_angle(rng)
    axis = rng.standard_normal(3)
    norm = np.linalg.norm(axis)
    while norm < 1e-12:
        axis = rng.standard_normal(3)
        norm = np.linalg.norm(axis)
    return np.asarray(mean, dtype=float) @ rotation_from_axis_angle(axis / norm, angle)
