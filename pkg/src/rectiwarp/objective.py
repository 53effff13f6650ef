"""Deformation losses: level-set boundary penalty, appearance and gradient
L1 terms, mesh line/shape penalties and the two-stage weighted total.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from rectiwarp.errors import DegenerateError, InvalidArgumentError
from rectiwarp.tps import ControlGrid, normalized_to_pixel

_EPS = 1e-12


@dataclass(frozen=True)
class LevelSet:
    """Signed distance to the mask boundary, negative inside, in normalized units.

    The boundary is the set of mask pixels with at least one 4-neighbour
    outside the mask (or on the image border). ``unit`` is the pixel length
    expressed in normalized units, ``2 / (max(width, height) - 1)``.
    """

    sdf: np.ndarray
    unit: float

    @property
    def height(self) -> int:
        return self.sdf.shape[0]

    @property
    def width(self) -> int:
        return self.sdf.shape[1]

    def sample(self, xy) -> np.ndarray:
        """Bilinear lookup at normalized points, clamped to the image extent."""
        xy = np.asarray(xy, dtype=np.float64)
        uv = normalized_to_pixel(xy, self.width, self.height)
        u = np.clip(uv[..., 0], 0, self.width - 1)
        v = np.clip(uv[..., 1], 0, self.height - 1)
        return ndimage.map_coordinates(self.sdf, [np.atleast_1d(v).ravel(), np.atleast_1d(u).ravel()],
                                       order=1, mode="nearest").reshape(u.shape)


def mask_boundary(mask) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[1:-1, 1:-1] & padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def build_level_set(mask) -> LevelSet:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise InvalidArgumentError("mask must be 2-D")
    m = m.astype(bool)
    if m.all() or not m.any():
        raise DegenerateError("mask needs both inside and outside pixels")
    boundary = mask_boundary(m)
    dist = ndimage.distance_transform_edt(~boundary)
    h, w = m.shape
    unit = 2.0 / (max(w, h) - 1)
    sdf = np.where(m, -dist, dist) * unit
    sdf[boundary] = 0.0
    return LevelSet(sdf=sdf, unit=unit)


def level_set_penalty_points(xy, ls: LevelSet) -> np.ndarray:
    d = ls.sample(xy)
    return np.where(d < 0, -d, np.where(d > 0, 2.0 * d, 0.0))


def level_set_penalty(p, ls: LevelSet) -> float:
    """|d| inside the mask, 0 on its boundary, 2|d| outside."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (2,):
        raise InvalidArgumentError("expected a single 2-vector")
    return float(level_set_penalty_points(p[None, :], ls)[0])


def boundary_loss(outer_points, ls: LevelSet) -> float:
    pts = np.asarray(outer_points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise InvalidArgumentError("boundary loss needs at least one point")
    return float(level_set_penalty_points(pts, ls).mean())


def _check_pair(a, b, valid):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    if valid is None:
        valid = np.ones(a.shape[:2], dtype=bool)
    valid = np.asarray(valid).astype(bool)
    if valid.shape != a.shape[:2]:
        raise InvalidArgumentError("validity mask does not match the images")
    return a, b, valid


def _masked_mean(diff: np.ndarray, valid: np.ndarray) -> float:
    n = int(valid.sum())
    if n == 0:
        return 0.0
    if diff.ndim == 3:
        return float(diff[valid].sum() / (n * diff.shape[2]))
    return float(diff[valid].sum() / n)


def appearance_loss(a, b, valid=None) -> float:
    """Mean absolute difference over valid pixels and all channels."""
    a, b, valid = _check_pair(a, b, valid)
    return _masked_mean(np.abs(a - b), valid)


def forward_gradients(img: np.ndarray):
    """Forward differences along x and y; the last column/row is undefined."""
    gx = img[:, 1:] - img[:, :-1]
    gy = img[1:, :] - img[:-1, :]
    return gx, gy


def gradient_loss(a, b, valid=None) -> float:
    """L1 distance between forward-difference gradients.

    A difference counts only where both pixels it spans are valid. The x and
    y terms are averaged separately and summed.
    """
    a, b, valid = _check_pair(a, b, valid)
    ax, ay = forward_gradients(a)
    bx, by = forward_gradients(b)
    vx = valid[:, 1:] & valid[:, :-1]
    vy = valid[1:, :] & valid[:-1, :]
    return _masked_mean(np.abs(ax - bx), vx) + _masked_mean(np.abs(ay - by), vy)


def _one_minus_cos(e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
    n1 = np.linalg.norm(e1, axis=-1)
    n2 = np.linalg.norm(e2, axis=-1)
    cos = (e1 * e2).sum(-1) / np.maximum(n1 * n2, _EPS)
    return 1.0 - np.clip(cos, -1.0, 1.0)


def line_penalty(grid: ControlGrid) -> float:
    """Mean (1 - cos) of the turning angle along every mesh row and column."""
    lat = grid.as_lattice()
    terms = []
    if grid.cols >= 3:
        e = lat[:, 1:] - lat[:, :-1]
        terms.append(_one_minus_cos(e[:, :-1], e[:, 1:]).ravel())
    if grid.rows >= 3:
        e = lat[1:, :] - lat[:-1, :]
        terms.append(_one_minus_cos(e[:-1, :], e[1:, :]).ravel())
    if not terms:
        return 0.0
    return float(np.concatenate(terms).mean())


def _quads(lat: np.ndarray) -> np.ndarray:
    """Cells as (n_cells, 4, 2) in order top-left, top-right, bottom-right, bottom-left."""
    return np.stack([lat[:-1, :-1], lat[:-1, 1:], lat[1:, 1:], lat[1:, :-1]], axis=2).reshape(-1, 4, 2)


def similarity_residuals(ref_quads: np.ndarray, quads: np.ndarray) -> np.ndarray:
    """Per-quad least-squares residual of the best similarity ref -> quad.

    Mean squared residual over the ref quad's mean squared radius, so the
    penalty is smooth (quadratic) around the undeformed grid.
    """
    # closed form for [x' y'] = [[a, -b], [b, a]] [x y] + t on centred points
    s = ref_quads - ref_quads.mean(axis=1, keepdims=True)
    d = quads - quads.mean(axis=1, keepdims=True)
    ss = np.maximum((s ** 2).sum(axis=(1, 2)), _EPS)
    a = (s * d).sum(axis=(1, 2)) / ss
    b = (s[..., 0] * d[..., 1] - s[..., 1] * d[..., 0]).sum(axis=1) / ss
    fit_x = a[:, None] * s[..., 0] - b[:, None] * s[..., 1]
    fit_y = b[:, None] * s[..., 0] + a[:, None] * s[..., 1]
    sq = ((fit_x - d[..., 0]) ** 2 + (fit_y - d[..., 1]) ** 2).mean(axis=1)
    return sq / (ss / s.shape[1])


def shape_penalty(grid: ControlGrid, reference: ControlGrid) -> float:
    if (grid.cols, grid.rows) != (reference.cols, reference.rows):
        raise InvalidArgumentError("grid and reference shapes differ")
    if grid.cols < 2 or grid.rows < 2:
        return 0.0
    return float(similarity_residuals(_quads(reference.as_lattice()), _quads(grid.as_lattice())).mean())


def mesh_penalty(grid: ControlGrid, reference: ControlGrid) -> float:
    return line_penalty(grid) + shape_penalty(grid, reference)


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.9
    alpha1: float = 1e-2
    alpha2: float = 1.0
    alpha3: float = 1e-2

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise InvalidArgumentError(f"loss weight {name} must be finite and >= 0")


@dataclass
class StageComponents:
    appearance: float = 0.0
    boundary: float = 0.0
    mesh: float = 0.0
    gradient: float = 0.0

    def combined(self, w: LossWeights, boundary_changing: bool = True) -> float:
        if not boundary_changing:
            return self.appearance
        return (self.appearance + w.alpha1 * self.boundary + w.alpha2 * self.mesh
                + w.alpha3 * self.gradient)


def total_loss(stages, w: LossWeights = LossWeights(), boundary_changing: bool = True) -> float:
    """sum_j gamma^j (L_a + a1 L_b + a2 L_p + a3 L_g) over stages j = 0 (X1), 1 (XD).

    Without boundary changes only the appearance terms remain.
    """
    stages = list(stages)
    if len(stages) != 2:
        raise InvalidArgumentError("total loss needs exactly two stages")
    return sum(w.gamma ** j * s.combined(w, boundary_changing) for j, s in enumerate(stages))


@dataclass
class LossReport:
    stages: list = field(default_factory=lambda: [StageComponents(), StageComponents()])
    weights: LossWeights = LossWeights()
    boundary_changing: bool = True
    total: float = 0.0

    @classmethod
    def build(cls, stages, w: LossWeights, boundary_changing: bool = True) -> "LossReport":
        stages = list(stages)
        return cls(stages, w, boundary_changing, total_loss(stages, w, boundary_changing))

    def to_dict(self) -> dict:
        return {
            "stages": [asdict(s) for s in self.stages],
            "weights": asdict(self.weights),
            "boundary_changing": self.boundary_changing,
            "total": self.total,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "LossReport":
        return cls([StageComponents(**s) for s in d["stages"]], LossWeights(**d["weights"]),
                   bool(d["boundary_changing"]), float(d["total"]))
