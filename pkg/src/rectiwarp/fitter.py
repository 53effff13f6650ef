"""Direct-optimization stand-in for learned control-point predictors.

Two fitting routes are provided: a linear least-squares fit of the control
targets to a dense backward flow, and a two-stage descent on the
deformation loss that follows the residual-progressive schedule (stage 2
refines from the realized stage-1 grid; every warp samples the original
input).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from rectiwarp.errors import DegenerateError, InvalidArgumentError
from rectiwarp.geometry import FlowField
from rectiwarp.objective import (
    LevelSet,
    LossReport,
    LossWeights,
    StageComponents,
    appearance_loss,
    boundary_loss,
    gradient_loss,
    mesh_penalty,
)
from rectiwarp.tps import (
    ControlGrid,
    TpsBasis,
    bilinear_sample,
    bilinear_sample_with_jacobian,
    grid_to_bytes,
    pixel_to_normalized,
)


@dataclass(frozen=True)
class FitConfig:
    stages: int = 2
    max_iters: int = 8
    initial_step: float = 0.01
    min_step: float = 1e-4
    tolerance: float = 1e-7
    seed: int = 0
    cols: int = 12
    rows: int = 10
    lam: float = 0.0
    method: str = "coordinate"  # or "gradient"
    boundary_changing: bool = True

    def __post_init__(self):
        if self.stages != 2:
            raise InvalidArgumentError("the residual-progressive fit has exactly 2 stages")
        if self.max_iters < 1:
            raise InvalidArgumentError("max_iters must be >= 1")
        if not (self.initial_step > 0 and self.tolerance > 0 and self.min_step > 0):
            raise InvalidArgumentError("step sizes and tolerance must be positive")
        if self.method not in ("coordinate", "gradient"):
            raise InvalidArgumentError(f"unknown fit method {self.method!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown fit config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FitResult:
    c1: ControlGrid
    c2: ControlGrid
    traces: list          # accepted per-stage loss values, one list per stage
    iterations: list      # sweeps run per stage
    report: LossReport
    initial_loss: float = 0.0

    @property
    def stage_finals(self) -> list:
        return [t[-1] for t in self.traces]

    def to_dict(self) -> dict:
        return {
            "grid_shape": [self.c1.cols, self.c1.rows],
            "c1": self.c1.points.tolist(),
            "c2": self.c2.points.tolist(),
            "initial_loss": self.initial_loss,
            "traces": self.traces,
            "iterations": self.iterations,
            "report": self.report.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def grid_bytes(self) -> tuple[bytes, bytes]:
        return grid_to_bytes(self.c1), grid_to_bytes(self.c2)


def has_foldover(points: np.ndarray, cols: int, rows: int) -> bool:
    """True if any mesh cell has a non-positive corner cross product (flipped or degenerate)."""
    lat = np.asarray(points).reshape(rows, cols, 2)
    corners = [lat[:-1, :-1], lat[:-1, 1:], lat[1:, 1:], lat[1:, :-1]]
    # walk each cell tl -> tr -> br -> bl; with y down every turn is positive
    for i in range(4):
        prev, cur, nxt = corners[i - 1], corners[i], corners[(i + 1) % 4]
        e1 = cur - prev
        e2 = nxt - cur
        cross = e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0]
        if np.any(cross <= 0):
            return True
    return False


def fit_from_flow(flow: FlowField, grid_shape=(12, 10), valid=None, lam: float = 0.0,
                  rcond: float = 1e-10) -> ControlGrid:
    """Least-squares control targets whose TPS best reproduces a backward flow.

    The grid is linear in the targets, so this is an ordinary linear least
    squares problem over the (optionally masked) pixels.
    """
    vec = flow.vectors if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        raise InvalidArgumentError("flow must be finite")
    h, w = vec.shape[:2]
    cols, rows = grid_shape
    c0 = ControlGrid.basic(cols, rows)
    basis = TpsBasis(c0, w, h, lam)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    src_px = np.stack([u, v], axis=-1) + vec
    target = pixel_to_normalized(src_px, w, h).reshape(-1, 2)
    design = basis.matrix
    if valid is not None:
        sel = np.asarray(valid).astype(bool).ravel()
        design, target = design[sel], target[sel]
    if design.shape[0] < design.shape[1]:
        raise DegenerateError("flow covers fewer pixels than there are control points")
    sv = np.linalg.svd(design, compute_uv=False)
    if sv[-1] <= rcond * sv[0]:
        raise DegenerateError("flow does not constrain every control point")
    sol, *_ = np.linalg.lstsq(design, target, rcond=None)
    return ControlGrid(cols, rows, sol)


def finite_diff_gradient(loss_fn, grid, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``loss_fn(points)`` w.r.t. every control coordinate.

    ``grid`` is a ControlGrid or an (N, 2) array; returns an (N, 2) array.
    """
    pts = grid.points if isinstance(grid, ControlGrid) else np.asarray(grid, dtype=np.float64)
    pts = np.array(pts, dtype=np.float64)
    grad = np.zeros_like(pts)
    for idx in np.ndindex(*pts.shape):
        orig = pts[idx]
        pts[idx] = orig + eps
        f_plus = loss_fn(pts.copy())
        pts[idx] = orig - eps
        f_minus = loss_fn(pts.copy())
        pts[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2 * eps)
    return grad


class ZeroPaddedSource:
    """The fit input surrounded by one ring of zero pixels.

    Sampling through the ring makes the warped image, and so the loss, fade
    continuously to zero across the image border instead of dropping to zero
    the moment a coordinate leaves [-1, 1]. Inside the border it agrees with
    the plain sampler.
    """

    def __init__(self, image):
        img = np.asarray(image, dtype=np.float64)
        self.height, self.width = img.shape[:2]
        pad = ((1, 1), (1, 1)) + ((0, 0),) * (img.ndim - 2)
        self.padded = np.pad(img, pad)
        self.scale = np.array([(self.width - 1) / (self.width + 1),
                                (self.height - 1) / (self.height + 1)])

    def _padded_coords(self, coords):
        # pixel u in the input is pixel u + 1 in the padded image
        return np.asarray(coords, dtype=np.float64) * self.scale

    def sample(self, coords) -> np.ndarray:
        return bilinear_sample(self.padded, self._padded_coords(coords))[0]

    def sample_with_jacobian(self, coords):
        out, dx, dy, _ = bilinear_sample_with_jacobian(self.padded, self._padded_coords(coords))
        return out, dx * self.scale[0], dy * self.scale[1]


class SamplingLoss:
    """Appearance (L1) loss of the TPS-warped input against a reference, with
    an analytic gradient w.r.t. the target control points.
    """

    def __init__(self, x0, reference, basis: TpsBasis):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.source = ZeroPaddedSource(self.x0)
        self.reference = np.asarray(reference, dtype=np.float64)
        self.basis = basis
        if self.reference.shape[:2] != (basis.height, basis.width):
            raise InvalidArgumentError("reference does not match the output size")
        self.channels = 1 if self.x0.ndim == 2 else self.x0.shape[2]

    def __call__(self, targets) -> float:
        return appearance_loss(self.source.sample(self.basis.grid(targets)), self.reference)

    def value_and_grad(self, targets):
        coords = self.basis.grid(targets)
        out, dx, dy = self.source.sample_with_jacobian(coords)
        sign = np.sign(out - self.reference)
        gx = sign * dx
        gy = sign * dy
        if gx.ndim == 3:
            gx, gy = gx.sum(-1), gy.sum(-1)
        n = gx.size * self.channels
        grad = np.stack([self.basis.matrix.T @ gx.ravel(), self.basis.matrix.T @ gy.ravel()], axis=1) / n
        return float(np.abs(out - self.reference).mean()), grad


class StageObjective:
    """Per-stage deformation loss L_a + a1 L_b + a2 L_p + a3 L_g as a function of the targets."""

    def __init__(self, x0, reference, ls: LevelSet | None, weights: LossWeights,
                 basis: TpsBasis, c0: ControlGrid, boundary_changing: bool = True):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.source = ZeroPaddedSource(self.x0)
        self.reference = None if reference is None else np.asarray(reference, dtype=np.float64)
        self.ls = ls
        self.weights = weights
        self.basis = basis
        self.c0 = c0
        self.boundary_changing = boundary_changing
        self._perimeter = c0.perimeter_indices()

    def components(self, targets: np.ndarray, coords: np.ndarray | None = None,
                   image_terms: bool = True) -> StageComponents:
        comps = StageComponents()
        if self.reference is not None and image_terms:
            if coords is None:
                coords = self.basis.grid(targets)
            warped = self.source.sample(coords)
            comps.appearance = appearance_loss(warped, self.reference)
            if self.boundary_changing:
                comps.gradient = gradient_loss(warped, self.reference)
        if self.boundary_changing:
            grid = ControlGrid(self.c0.cols, self.c0.rows, targets)
            if self.ls is not None:
                comps.boundary = boundary_loss(targets[self._perimeter], self.ls)
            comps.mesh = mesh_penalty(grid, self.c0)
        return comps

    def loss(self, targets, coords=None) -> float:
        return self.components(np.asarray(targets), coords).combined(self.weights, self.boundary_changing)


def _coordinate_descent(objective: StageObjective, start: np.ndarray, start_loss: float,
                        cfg: FitConfig, rng: np.random.Generator):
    basis = objective.basis
    need_grid = objective.reference is not None
    x = start.copy()
    fx = start_loss
    trace = [fx]
    steps = np.full(x.size, cfg.initial_step)
    sweeps = 0
    for _ in range(cfg.max_iters):
        sweeps += 1
        before = fx
        # fresh grid each sweep so incremental updates cannot drift
        coords = basis.grid(x) if need_grid else None
        for flat in rng.permutation(x.size):
            if steps[flat] < cfg.min_step:
                continue
            point, axis = divmod(int(flat), 2)
            accepted = False
            for sign in (1.0, -1.0):
                delta = sign * steps[flat]
                cand = x.copy()
                cand[point, axis] += delta
                if has_foldover(cand, cfg.cols, cfg.rows):
                    continue
                cand_coords = None
                if need_grid:
                    cand_coords = coords.copy()
                    cand_coords[..., axis] += delta * basis.matrix[:, point].reshape(coords.shape[:2])
                fc = objective.loss(cand, cand_coords)
                if fc < fx:
                    x, fx, coords = cand, fc, cand_coords
                    trace.append(fx)
                    accepted = True
                    break
            steps[flat] = steps[flat] * 1.5 if accepted else steps[flat] * 0.5
        if before - fx <= cfg.tolerance or np.all(steps < cfg.min_step):
            break
    return x, trace, sweeps


def _gradient_descent(objective: StageObjective, start: np.ndarray, start_loss: float,
                      cfg: FitConfig, rng: np.random.Generator):
    # Descent direction: analytic appearance gradient plus finite differences
    # of the cheap mesh/boundary terms. The image-gradient term is left out of
    # the direction but still counts in the accepted loss.
    sampling = None
    if objective.reference is not None:
        sampling = SamplingLoss(objective.x0, objective.reference, objective.basis)

    def geometric(pts):
        return objective.components(pts, image_terms=False).combined(
            objective.weights, objective.boundary_changing)

    x = start.copy()
    fx = start_loss
    trace = [fx]
    step = cfg.initial_step
    sweeps = 0
    for _ in range(cfg.max_iters):
        sweeps += 1
        g = np.zeros_like(x)
        if sampling is not None:
            g += sampling.value_and_grad(x)[1]
        if objective.boundary_changing:
            g += finite_diff_gradient(geometric, x)
        gmax = np.abs(g).max()
        if gmax == 0:
            break
        before = fx
        while step >= cfg.min_step:
            cand = x - step * g / gmax
            if not has_foldover(cand, cfg.cols, cfg.rows):
                fc = objective.loss(cand)
                if fc < fx:
                    x, fx = cand, fc
                    trace.append(fx)
                    step *= 1.5
                    break
            step *= 0.5
        if before - fx <= cfg.tolerance or step < cfg.min_step:
            break
    return x, trace, sweeps


def fit_rectification(x0, m0, reference, ls: LevelSet | None, w: LossWeights = LossWeights(),
                      cfg: FitConfig = FitConfig(), init: ControlGrid | None = None) -> FitResult:
    """Fit c1 then c2 by minimizing the stage loss, accepting only strict improvements.

    ``init`` warm-starts stage 1 (for example from :func:`fit_from_flow`);
    otherwise it starts from the basic grid. Without a reference only the
    boundary and mesh terms drive the fit.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    h, w_px = x0.shape[:2]
    if m0 is not None and np.asarray(m0).shape != (h, w_px):
        raise InvalidArgumentError("mask and image dimensions differ")
    if reference is not None and np.asarray(reference).shape != x0.shape:
        raise InvalidArgumentError("reference and input dimensions differ")
    if ls is not None and (ls.width, ls.height) != (w_px, h):
        raise InvalidArgumentError("level set and image dimensions differ")
    c0 = ControlGrid.basic(cfg.cols, cfg.rows)
    basis = TpsBasis(c0, w_px, h, cfg.lam)
    objective = StageObjective(x0, reference, ls, w, basis, c0, cfg.boundary_changing)
    start = c0.points.copy() if init is None else np.array(init.points, dtype=np.float64)
    if start.shape != c0.points.shape:
        raise InvalidArgumentError("warm-start grid has the wrong shape")
    initial = objective.loss(start)
    if not np.isfinite(initial):
        raise InvalidArgumentError("loss is not finite at the initial grid")

    descend = _coordinate_descent if cfg.method == "coordinate" else _gradient_descent
    rng = np.random.default_rng(cfg.seed)
    c1_pts, trace1, it1 = descend(objective, start, initial, cfg, rng)
    c2_pts, trace2, it2 = descend(objective, c1_pts, trace1[-1], cfg, rng)
    c1 = ControlGrid(cfg.cols, cfg.rows, c1_pts)
    c2 = ControlGrid(cfg.cols, cfg.rows, c2_pts)
    report = LossReport.build([objective.components(c1_pts), objective.components(c2_pts)],
                              w, cfg.boundary_changing)
    return FitResult(c1, c2, [trace1, trace2], [it1, it2], report, initial)
