"""General parametric distortion model and its task-specific reductions.

Points live on the normalized image plane. The general model maps an
undistorted point ``p`` (radius ``r``, incidence angle ``theta = arctan(r)``)
to

    p_d = (r_d / r) * R(alpha) @ p + t0
    r_d = sum_j k_j * theta**(2j-1) + k'_j * r**(2j-1)

The radial scale ``r_d / r`` is extended continuously to ``r = 0`` where it
equals ``k_1 + k'_1``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from rectiwarp.errors import InvalidArgumentError, NoConvergenceError

DEFAULT_ORDER = 4


def _as_point(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape != (2,):
        raise InvalidArgumentError(f"expected a 2-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("point has non-finite coordinates")
    return arr


def _as_coeffs(coeffs, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(coeffs, dtype=np.float64))
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidArgumentError(f"{name} must be a nonempty 1-D list")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class DistortionParams:
    """Parameters of the general model. Both coefficient lists have length ``order``."""

    theta_coeffs: tuple = (0.0,) * DEFAULT_ORDER
    radial_coeffs: tuple = (1.0,) + (0.0,) * (DEFAULT_ORDER - 1)
    alpha: float = 0.0
    t0: tuple = (0.0, 0.0)
    order: int = field(default=0)

    def __post_init__(self):
        k = _as_coeffs(self.theta_coeffs, "theta_coeffs")
        kp = _as_coeffs(self.radial_coeffs, "radial_coeffs")
        order = self.order or max(k.size, kp.size)
        if order < 1:
            raise InvalidArgumentError("order must be >= 1")
        if k.size > order or kp.size > order:
            raise InvalidArgumentError("coefficient list longer than order")
        # short lists are zero-padded up to the common order
        k = np.pad(k, (0, order - k.size))
        kp = np.pad(kp, (0, order - kp.size))
        t0 = _as_point(self.t0)
        if not math.isfinite(float(self.alpha)):
            raise InvalidArgumentError("alpha must be finite")
        object.__setattr__(self, "theta_coeffs", tuple(float(v) for v in k))
        object.__setattr__(self, "radial_coeffs", tuple(float(v) for v in kp))
        object.__setattr__(self, "t0", (float(t0[0]), float(t0[1])))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "order", int(order))

    @classmethod
    def identity(cls, order: int = DEFAULT_ORDER) -> "DistortionParams":
        return cls((0.0,) * order, (1.0,) + (0.0,) * (order - 1), 0.0, (0.0, 0.0), order)

    def to_dict(self) -> dict:
        return {
            "theta_coeffs": list(self.theta_coeffs),
            "radial_coeffs": list(self.radial_coeffs),
            "alpha": self.alpha,
            "t0": list(self.t0),
            "order": self.order,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DistortionParams":
        allowed = {"theta_coeffs", "radial_coeffs", "alpha", "t0", "order"}
        unknown = set(d) - allowed
        if unknown:
            raise InvalidArgumentError(f"unknown keys in distortion params: {sorted(unknown)}")
        kw = {}
        if "theta_coeffs" in d:
            kw["theta_coeffs"] = tuple(d["theta_coeffs"])
        if "radial_coeffs" in d:
            kw["radial_coeffs"] = tuple(d["radial_coeffs"])
        if "alpha" in d:
            kw["alpha"] = d["alpha"]
        if "t0" in d:
            kw["t0"] = tuple(d["t0"])
        if "order" in d:
            kw["order"] = int(d["order"])
        if "theta_coeffs" not in d and "radial_coeffs" in d:
            kw["theta_coeffs"] = (0.0,)
        if "radial_coeffs" not in d and "theta_coeffs" in d:
            kw["radial_coeffs"] = (0.0,)
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DistortionParams":
        d = json.loads(text)
        if not isinstance(d, dict):
            raise InvalidArgumentError("distortion params JSON must be an object")
        return cls.from_dict(d)


def rotation_matrix(alpha: float) -> np.ndarray:
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([[c, -s], [s, c]])


def _theta_over_r(r: np.ndarray) -> np.ndarray:
    out = np.ones_like(r)
    nz = r > 0
    out[nz] = np.arctan(r[nz]) / r[nz]
    return out


def radial_scale(r, params: DistortionParams) -> np.ndarray:
    """r_d / r as a function of r, continuous at r = 0."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.arctan(r)
    theta_sq = theta * theta
    r_sq = r * r
    # Horner in theta**2 and r**2 on the even parts
    poly_t = np.zeros_like(r)
    poly_r = np.zeros_like(r)
    for kj, kpj in zip(reversed(params.theta_coeffs), reversed(params.radial_coeffs)):
        poly_t = poly_t * theta_sq + kj
        poly_r = poly_r * r_sq + kpj
    return _theta_over_r(np.atleast_1d(r)).reshape(r.shape) * poly_t + poly_r


def radial_map(r, params: DistortionParams) -> np.ndarray:
    """r_d as a function of r."""
    r = np.asarray(r, dtype=np.float64)
    return radial_scale(r, params) * r


def radial_map_derivative(r, params: DistortionParams) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    theta = np.arctan(r)
    dtheta = 1.0 / (1.0 + r * r)
    out = np.zeros_like(r)
    for j, (kj, kpj) in enumerate(zip(params.theta_coeffs, params.radial_coeffs), start=1):
        n = 2 * j - 1
        out = out + kj * n * theta ** (n - 1) * dtheta + kpj * n * r ** (n - 1)
    return out


def distort_points(xy, params: DistortionParams) -> np.ndarray:
    """Vectorized general model over an array of shape (..., 2)."""
    xy = np.asarray(xy, dtype=np.float64)
    if xy.shape[-1] != 2:
        raise InvalidArgumentError("points must have a trailing dimension of 2")
    if not np.all(np.isfinite(xy)):
        raise InvalidArgumentError("points contain non-finite values")
    x = xy[..., 0]
    y = xy[..., 1]
    r = np.hypot(x, y)
    s = radial_scale(r, params)
    c, sn = math.cos(params.alpha), math.sin(params.alpha)
    xd = s * (c * x - sn * y) + params.t0[0]
    yd = s * (sn * x + c * y) + params.t0[1]
    return np.stack([xd, yd], axis=-1)


def distort_general(p, params: DistortionParams) -> np.ndarray:
    return distort_points(_as_point(p)[None, :], params)[0]


# The specialized models are evaluated independently of distort_points so the
# reduction identities are a genuine cross-check.

def _specialized(p, r_d_fn, scale_at_zero: float) -> np.ndarray:
    p = _as_point(p)
    r = math.hypot(p[0], p[1])
    if r == 0.0:
        return p * scale_at_zero
    return (r_d_fn(r) / r) * p


def distort_kannala(p, theta_coeffs) -> np.ndarray:
    """Kannala-Brandt: r_d = sum_j k_j * theta**(2j-1)."""
    k = _as_coeffs(theta_coeffs, "theta_coeffs")

    def r_d(r):
        theta = math.atan(r)
        return sum(kj * theta ** (2 * j - 1) for j, kj in enumerate(k, start=1))

    return _specialized(p, r_d, float(k[0]))


def _brown_rd(k):
    def r_d(r):
        return sum(kj * r ** (2 * j - 1) for j, kj in enumerate(k, start=1))
    return r_d


def distort_brown(p, radial_coeffs) -> np.ndarray:
    """Brown-Conrady radial model: r_d = sum_j k'_j * r**(2j-1)."""
    k = _as_coeffs(radial_coeffs, "radial_coeffs")
    return _specialized(p, _brown_rd(k), float(k[0]))


def distort_stitched(p, radial_coeffs, decenter) -> np.ndarray:
    """Decentered Brown-Conrady variant used for stitched images."""
    t0 = _as_point(decenter)
    return distort_brown(p, radial_coeffs) + t0


def distort_rotation(p, radial_coeffs, alpha: float) -> np.ndarray:
    """Brown-Conrady radial scaling applied to the rotated point."""
    if not math.isfinite(alpha):
        raise InvalidArgumentError("alpha must be finite")
    p = _as_point(p)
    k = _as_coeffs(radial_coeffs, "radial_coeffs")
    c, s = math.cos(alpha), math.sin(alpha)
    rotated = np.array([c * p[0] - s * p[1], s * p[0] + c * p[1]])
    r = math.hypot(p[0], p[1])
    scale = float(k[0]) if r == 0.0 else _brown_rd(k)(r) / r
    return scale * rotated


@dataclass(frozen=True)
class PixelGeometry:
    """Maps pixel centres (u, v) to the normalized plane: ((u - cx) / f, (v - cy) / f).

    Defaults put the principal point at the image centre and use
    ``f = min(width, height) / 2``.
    """

    width: int
    height: int
    focal: float | None = None
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidArgumentError("image dimensions must be positive")
        f = min(self.width, self.height) / 2.0 if self.focal is None else float(self.focal)
        if not math.isfinite(f) or f == 0.0:
            raise InvalidArgumentError("focal scale must be finite and nonzero")
        object.__setattr__(self, "focal", f)
        if self.cx is None:
            object.__setattr__(self, "cx", (self.width - 1) / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", (self.height - 1) / 2.0)

    def pixel_lattice(self) -> np.ndarray:
        """Pixel-centre coordinates, shape (height, width, 2) as (u, v)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([u, v], axis=-1)

    def to_normalized(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        return np.stack([(uv[..., 0] - self.cx) / self.focal,
                         (uv[..., 1] - self.cy) / self.focal], axis=-1)

    def to_pixel(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return np.stack([xy[..., 0] * self.focal + self.cx,
                         xy[..., 1] * self.focal + self.cy], axis=-1)


@dataclass
class FlowField:
    """Backward flow: ``vectors[v, u]`` is (source - destination) in pixels."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 3 or self.vectors.shape[2] != 2:
            raise InvalidArgumentError("flow must have shape (height, width, 2)")
        if self.height == 0 or self.width == 0:
            raise InvalidArgumentError("flow dimensions must be positive")
        if not np.all(np.isfinite(self.vectors)):
            raise InvalidArgumentError("flow contains non-finite vectors")

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


def distortion_flow(params: DistortionParams, width: int, height: int,
                    geometry: PixelGeometry | None = None) -> FlowField:
    """Dense backward flow whose source is the distorted location of each pixel."""
    if geometry is None:
        geometry = PixelGeometry(width, height)
    elif (geometry.width, geometry.height) != (width, height):
        raise InvalidArgumentError("geometry does not match the requested size")
    uv = geometry.pixel_lattice()
    src = geometry.to_pixel(distort_points(geometry.to_normalized(uv), params))
    return FlowField(src - uv)


def _monotone_limit(params: DistortionParams, r_cap: float = 1e3, samples: int = 4096) -> float:
    """Largest r (up to r_cap) such that r -> r_d is strictly increasing on [0, r]."""
    rs = np.concatenate([[0.0], np.geomspace(1e-6, r_cap, samples)])
    d = radial_map_derivative(rs, params)
    bad = np.nonzero(d <= 0)[0]
    if bad.size == 0:
        return r_cap
    if bad[0] == 0:
        return 0.0
    return float(rs[bad[0] - 1])


def _solve_radius(rho: np.ndarray, params: DistortionParams, r_hi: float,
                  max_iter: int, tol: float) -> np.ndarray:
    """Invert r_d(r) = rho on [0, r_hi] by bisection followed by Newton polishing.

    Entries that cannot be bracketed come back as NaN.
    """
    rho = np.asarray(rho, dtype=np.float64)
    lo = np.zeros_like(rho)
    hi = np.full_like(rho, r_hi)
    ok = radial_map(hi, params) >= rho
    # bisection to a coarse bracket, then Newton
    n_bisect = min(max_iter // 2, 40)
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        above = radial_map(mid, params) >= rho
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    r = 0.5 * (lo + hi)
    for _ in range(max_iter - n_bisect):
        f = radial_map(r, params) - rho
        if np.all(np.abs(f[ok]) <= tol * 1e-2):
            break
        d = radial_map_derivative(r, params)
        step = np.where(d > 0, f / np.where(d > 0, d, 1.0), 0.0)
        r_new = np.clip(r - step, lo, hi)
        r = np.where(ok, r_new, r)
    return np.where(ok, r, np.nan)


def undistort_points(xy_d, params: DistortionParams, tol: float = 1e-10,
                     max_iter: int = 100) -> np.ndarray:
    """Vectorized inverse of :func:`distort_points`; unreachable points are NaN."""
    xy_d = np.asarray(xy_d, dtype=np.float64)
    r_hi = _monotone_limit(params)
    if r_hi == 0.0:
        return np.full_like(xy_d, np.nan)
    q = xy_d - np.asarray(params.t0)
    c, s = math.cos(params.alpha), math.sin(params.alpha)
    qx = c * q[..., 0] + s * q[..., 1]
    qy = -s * q[..., 0] + c * q[..., 1]
    rho = np.hypot(qx, qy)
    r = _solve_radius(rho, params, r_hi, max_iter, tol)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(rho > 0, r / np.where(rho > 0, rho, 1.0), 0.0)
    ratio = np.where(np.isnan(r), np.nan, ratio)
    p = np.stack([qx * ratio, qy * ratio], axis=-1)
    with np.errstate(invalid="ignore"):
        fine = np.isfinite(p).all(axis=-1)
    if np.any(fine):
        err = np.full(rho.shape, np.inf)
        err[fine] = np.linalg.norm(distort_points(p[fine], params) - xy_d[fine], axis=-1)
        p[err > tol] = np.nan
    return p


def undistort_point(p_d, params: DistortionParams, tol: float = 1e-10,
                    max_iter: int = 100) -> np.ndarray:
    """Inverse of :func:`distort_general` for monotone radial maps.

    Raises NoConvergenceError when the radial map is not increasing near the
    origin, the target radius lies beyond the monotone range, or the result
    misses ``tol``.
    """
    p_d = _as_point(p_d)
    if _monotone_limit(params) == 0.0:
        raise NoConvergenceError("radial map is not increasing at the origin")
    p = undistort_points(p_d[None, :], params, tol=tol, max_iter=max_iter)[0]
    if not np.all(np.isfinite(p)):
        raise NoConvergenceError(f"could not invert distortion at {p_d.tolist()}")
    return p
