"""Thin-plate spline solving, grid generation, bilinear sampling and the
two-stage residual-progressive warp.

All control points and sampling coordinates are in the normalized frame
[-1, 1]^2 where -1 and 1 hit the centres of the first and last pixel
(row-major, origin top-left, x to the right, y down). A transform maps
points of the rectified output into the distorted input.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from rectiwarp.errors import DegenerateError, InvalidArgumentError

DEFAULT_COLS = 12
DEFAULT_ROWS = 10
MAX_CONDITION = 1e12
# sampling coordinates this close to a pixel centre are snapped onto it
SNAP_TOL = 1e-9

GRID_MAGIC = b"TPSG"


@dataclass(frozen=True)
class ControlGrid:
    cols: int
    rows: int
    points: np.ndarray  # (rows * cols, 2), row-major

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if self.cols < 1 or self.rows < 1:
            raise InvalidArgumentError("grid shape must be positive")
        if pts.shape != (self.cols * self.rows, 2):
            raise InvalidArgumentError(
                f"expected {self.cols * self.rows} points, got array of shape {pts.shape}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def basic(cls, cols: int = DEFAULT_COLS, rows: int = DEFAULT_ROWS) -> "ControlGrid":
        """Evenly spaced grid covering [-1, 1]^2 with points on the corners."""
        if cols < 2 or rows < 2:
            raise InvalidArgumentError("a basic grid needs at least 2 points per axis")
        ys, xs = np.meshgrid(np.linspace(-1.0, 1.0, rows), np.linspace(-1.0, 1.0, cols),
                             indexing="ij")
        return cls(cols, rows, np.stack([xs.ravel(), ys.ravel()], axis=1))

    def moved(self, offsets) -> "ControlGrid":
        offsets = np.asarray(offsets, dtype=np.float64).reshape(self.points.shape)
        return ControlGrid(self.cols, self.rows, self.points + offsets)

    def as_lattice(self) -> np.ndarray:
        return self.points.reshape(self.rows, self.cols, 2)

    def perimeter_indices(self) -> np.ndarray:
        """Indices of the outermost ring, 2 * (cols + rows) - 4 of them."""
        idx = np.arange(self.rows * self.cols).reshape(self.rows, self.cols)
        if self.rows == 1 or self.cols == 1:
            return idx.ravel()
        ring = np.concatenate([idx[0, :], idx[1:-1, -1], idx[-1, ::-1], idx[-2:0:-1, 0]])
        return ring

    def perimeter(self) -> np.ndarray:
        return self.points[self.perimeter_indices()]


@dataclass(frozen=True)
class TpsTransform:
    affine: np.ndarray          # (2, 3), acts on [x, y, 1]
    kernel_weights: np.ndarray  # (N, 2)
    sources: ControlGrid
    lam: float = 0.0

    def __call__(self, xy) -> np.ndarray:
        return tps_evaluate_points(self, xy)


@dataclass
class SamplingGrid:
    """Per-output-pixel source coordinates, ``coords[v, u] = (x, y)``."""

    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 3 or self.coords.shape[2] != 2:
            raise InvalidArgumentError("sampling grid must have shape (height, width, 2)")
        if self.coords.shape[0] == 0 or self.coords.shape[1] == 0:
            raise InvalidArgumentError("sampling grid dimensions must be positive")
        if not np.all(np.isfinite(self.coords)):
            raise InvalidArgumentError("sampling grid has non-finite coordinates")

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]


def tps_kernel(r) -> np.ndarray:
    """U(r) = r^2 log r with U(0) = 0."""
    r = np.asarray(r, dtype=np.float64)
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] ** 2 * np.log(r[nz])
    return out


def _pairwise_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return tps_kernel(d)


def normalized_lattice(width: int, height: int) -> np.ndarray:
    """Normalized coordinates of every pixel centre, shape (height, width, 2)."""
    if width < 1 or height < 1:
        raise InvalidArgumentError("image dimensions must be positive")
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx, gy], axis=-1)


def normalized_to_pixel(xy, width: int, height: int) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64)
    return np.stack([(xy[..., 0] + 1.0) * (width - 1) / 2.0,
                     (xy[..., 1] + 1.0) * (height - 1) / 2.0], axis=-1)


def pixel_to_normalized(uv, width: int, height: int) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    sx = 2.0 / (width - 1) if width > 1 else 0.0
    sy = 2.0 / (height - 1) if height > 1 else 0.0
    return np.stack([uv[..., 0] * sx - 1.0, uv[..., 1] * sy - 1.0], axis=-1)


def tps_system(sources: np.ndarray, lam: float = 0.0) -> np.ndarray:
    """The (N+3) x (N+3) matrix [[K + lam I, P], [P^T, 0]] with P = [x, y, 1]."""
    n = sources.shape[0]
    system = np.zeros((n + 3, n + 3))
    system[:n, :n] = _pairwise_kernel(sources, sources) + lam * np.eye(n)
    system[:n, n:n + 2] = sources
    system[:n, n + 2] = 1.0
    system[n:, :n] = system[:n, n:].T
    return system


def _checked_inverse_columns(sources: np.ndarray, lam: float) -> np.ndarray:
    """Columns of the inverse system acting on the target block, shape (N+3, N)."""
    n = sources.shape[0]
    if n < 3:
        raise DegenerateError("TPS needs at least 3 control points")
    system = tps_system(sources, lam)
    if not np.all(np.isfinite(system)) or np.linalg.cond(system) > MAX_CONDITION:
        raise DegenerateError("TPS system is singular (collinear or repeated sources?)")
    rhs = np.zeros((n + 3, n))
    rhs[:n] = np.eye(n)
    return np.linalg.solve(system, rhs)


def solve_tps(sources: ControlGrid, targets: ControlGrid, lam: float = 0.0) -> TpsTransform:
    """Closed-form TPS fitting sources -> targets (exact interpolation at lam=0)."""
    if lam < 0 or not np.isfinite(lam):
        raise InvalidArgumentError("lambda must be a finite non-negative scalar")
    src, dst = sources.points, targets.points
    if src.shape != dst.shape:
        raise InvalidArgumentError("sources and targets must have equal point counts")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise InvalidArgumentError("control points must be finite")
    n = src.shape[0]
    if n < 3:
        raise DegenerateError("TPS needs at least 3 control points")
    system = tps_system(src, lam)
    if np.linalg.cond(system) > MAX_CONDITION:
        raise DegenerateError("TPS system is singular (collinear or repeated sources?)")
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = dst
    sol = np.linalg.solve(system, rhs)
    return TpsTransform(affine=sol[n:].T.copy(), kernel_weights=sol[:n].copy(),
                        sources=sources, lam=float(lam))


def tps_evaluate_points(t: TpsTransform, xy) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64)
    flat = xy.reshape(-1, 2)
    if not np.all(np.isfinite(flat)):
        raise InvalidArgumentError("evaluation points must be finite")
    a = t.affine
    out = flat @ a[:, :2].T + a[:, 2]
    out = out + _pairwise_kernel(flat, t.sources.points) @ t.kernel_weights
    return out.reshape(xy.shape)


def tps_evaluate(t: TpsTransform, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (2,):
        raise InvalidArgumentError("expected a single 2-vector")
    return tps_evaluate_points(t, p[None, :])[0]


def identity_transform(sources: ControlGrid) -> TpsTransform:
    n = sources.points.shape[0]
    return TpsTransform(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), np.zeros((n, 2)), sources)


def generate_grid(t: TpsTransform, width: int, height: int) -> SamplingGrid:
    """Evaluate the transform at every output pixel centre."""
    lattice = normalized_lattice(width, height)
    return SamplingGrid(tps_evaluate_points(t, lattice))


class TpsBasis:
    """Precomputed linear map from target control points to a dense grid.

    For fixed sources, output size and lambda the TPS grid is linear in the
    targets: ``grid = matrix @ targets``. The fitter uses this to evaluate
    thousands of candidate control configurations cheaply.
    """

    def __init__(self, sources: ControlGrid, width: int, height: int, lam: float = 0.0,
                 points: np.ndarray | None = None):
        self.sources = sources
        self.width = width
        self.height = height
        self.lam = lam
        inv = _checked_inverse_columns(sources.points, lam)
        if points is None:
            points = normalized_lattice(width, height).reshape(-1, 2)
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        n = sources.points.shape[0]
        design = np.empty((self.points.shape[0], n + 3))
        design[:, :n] = _pairwise_kernel(self.points, sources.points)
        design[:, n:n + 2] = self.points
        design[:, n + 2] = 1.0
        self.matrix = design @ inv  # (P, N)

    def grid(self, targets) -> np.ndarray:
        """Dense coordinates of shape (height, width, 2) (or (P, 2) for custom points)."""
        pts = targets.points if isinstance(targets, ControlGrid) else np.asarray(targets)
        out = self.matrix @ pts
        if self.points.shape[0] == self.width * self.height:
            return out.reshape(self.height, self.width, 2)
        return out


def _as_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim not in (2, 3) or img.shape[0] == 0 or img.shape[1] == 0:
        raise InvalidArgumentError("image must have shape (H, W) or (H, W, C)")
    return img


def _source_pixels(coords: np.ndarray, width: int, height: int):
    uv = normalized_to_pixel(coords, width, height)
    snapped = np.rint(uv)
    uv = np.where(np.abs(uv - snapped) <= SNAP_TOL, snapped, uv)
    u, v = uv[..., 0], uv[..., 1]
    inside = (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
    return u, v, inside


def _bilinear_parts(u, v, inside, width, height):
    u = np.where(inside, u, 0.0)
    v = np.where(inside, v, 0.0)
    u0 = np.floor(u).astype(np.intp)
    v0 = np.floor(v).astype(np.intp)
    fu = u - u0
    fv = v - v0
    u1 = np.minimum(u0 + 1, width - 1)
    v1 = np.minimum(v0 + 1, height - 1)
    return u0, v0, u1, v1, fu, fv


def bilinear_sample(image, grid) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``image`` at the grid's source coordinates.

    Returns the warped image and a validity mask. Coordinates outside
    [-1, 1]^2 yield value 0 and mask 0.
    """
    img = _as_image(image)
    coords = grid.coords if isinstance(grid, SamplingGrid) else np.asarray(grid, dtype=np.float64)
    h, w = img.shape[:2]
    u, v, inside = _source_pixels(coords, w, h)
    u0, v0, u1, v1, fu, fv = _bilinear_parts(u, v, inside, w, h)
    if img.ndim == 3:
        fu = fu[..., None]
        fv = fv[..., None]
    top = img[v0, u0] * (1.0 - fu) + img[v0, u1] * fu
    bottom = img[v1, u0] * (1.0 - fu) + img[v1, u1] * fu
    out = top * (1.0 - fv) + bottom * fv
    out[~inside] = 0.0
    return out, inside.astype(np.uint8)


def bilinear_sample_with_jacobian(image, coords):
    """Bilinear sample plus d(value)/d(normalized x, y) at each output pixel.

    The derivative is the one-sided (right/below) slope of the bilinear
    patch; out-of-range pixels have zero value and zero derivative.
    """
    img = _as_image(image)
    h, w = img.shape[:2]
    u, v, inside = _source_pixels(coords, w, h)
    u0, v0, u1, v1, fu, fv = _bilinear_parts(u, v, inside, w, h)
    if img.ndim == 3:
        fu = fu[..., None]
        fv = fv[..., None]
    a, b = img[v0, u0], img[v0, u1]
    c, d = img[v1, u0], img[v1, u1]
    top = a * (1.0 - fu) + b * fu
    bottom = c * (1.0 - fu) + d * fu
    out = top * (1.0 - fv) + bottom * fv
    du = (b - a) * (1.0 - fv) + (d - c) * fv
    dv = bottom - top
    # chain rule through the normalized -> pixel mapping
    dx = du * ((w - 1) / 2.0)
    dy = dv * ((h - 1) / 2.0)
    out[~inside] = 0.0
    dx[~inside] = 0.0
    dy[~inside] = 0.0
    return out, dx, dy, inside.astype(np.uint8)


def warp(x0, m0, sources: ControlGrid, targets: ControlGrid, lam: float = 0.0):
    """One TPS warp of image and prompt from ``x0``; returns (image, mask)."""
    img = _as_image(x0)
    h, w = img.shape[:2]
    grid = generate_grid(solve_tps(sources, targets, lam), w, h)
    out, inside = bilinear_sample(img, grid)
    msk, _ = bilinear_sample(np.asarray(m0, dtype=np.float64), grid)
    mask = (inside.astype(bool) & (msk >= 0.5)).astype(np.uint8)
    return out, mask


@dataclass
class RpTpsResult:
    x1: np.ndarray
    m1: np.ndarray
    xd: np.ndarray
    md: np.ndarray
    c1: ControlGrid
    c2: ControlGrid


def rp_tps_apply(x0, m0, c0: ControlGrid, delta1, delta2, lam: float = 0.0) -> RpTpsResult:
    """Two-stage residual-progressive TPS.

    c1 = c0 + delta1 and c2 = c1 + delta2; both warps read only ``x0`` and
    ``m0`` so interpolation error never compounds across stages.
    """
    img = _as_image(x0)
    m0 = np.asarray(m0)
    if m0.shape != img.shape[:2]:
        raise InvalidArgumentError("mask and image dimensions differ")
    c1 = c0.moved(delta1)
    c2 = c1.moved(delta2)
    x1, m1 = warp(img, m0, c0, c1, lam)
    xd, md = warp(img, m0, c0, c2, lam)
    return RpTpsResult(x1, m1, xd, md, c1, c2)


# binary layout: b"TPSG", u32 width, u32 height, then width*height (x, y)
# pairs as little-endian float32, row-major

def grid_to_bytes(grid) -> bytes:
    if isinstance(grid, ControlGrid):
        width, height, coords = grid.cols, grid.rows, grid.as_lattice()
    elif isinstance(grid, SamplingGrid):
        width, height, coords = grid.width, grid.height, grid.coords
    else:
        raise InvalidArgumentError("expected a ControlGrid or SamplingGrid")
    body = np.ascontiguousarray(coords, dtype="<f4").tobytes()
    return GRID_MAGIC + struct.pack("<II", width, height) + body


def grid_from_bytes(data: bytes, kind: str = "sampling"):
    if len(data) < 12 or data[:4] != GRID_MAGIC:
        raise InvalidArgumentError("not a TPSG grid file")
    width, height = struct.unpack("<II", data[4:12])
    expected = 12 + 8 * width * height
    if len(data) != expected:
        raise InvalidArgumentError(f"grid file has {len(data)} bytes, expected {expected}")
    coords = np.frombuffer(data, dtype="<f4", offset=12).reshape(height, width, 2)
    coords = coords.astype(np.float64)
    if kind == "control":
        return ControlGrid(width, height, coords.reshape(-1, 2))
    if kind == "sampling":
        return SamplingGrid(coords)
    raise InvalidArgumentError(f"unknown grid kind {kind!r}")
