"""Top-k softmax gating and sparse expert combination."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from rectiwarp.errors import InvalidArgumentError

DEFAULT_K = 1
DEFAULT_EXPERTS = 5


@dataclass(frozen=True)
class GateWeights:
    weights: tuple
    k: int

    @property
    def support(self) -> tuple:
        return tuple(i for i, g in enumerate(self.weights) if g > 0)

    def to_dict(self) -> dict:
        return {"weights": list(self.weights), "k": self.k, "selected": list(self.support)}


def topk_softmax(scores, k: int = DEFAULT_K) -> GateWeights:
    """Softmax over the ``k`` highest scores; every other entry gets weight 0.

    Ties at the cut are broken toward the lower index.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0 or not np.all(np.isfinite(s)):
        raise InvalidArgumentError("scores must be a nonempty list of finite values")
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= s.size:
        raise InvalidArgumentError(f"k must be an integer in [1, {s.size}], got {k!r}")
    keep = np.argsort(-s, kind="stable")[:k]
    masked = np.full_like(s, -np.inf)
    masked[keep] = s[keep]
    e = np.exp(masked - s[keep].max())
    w = e / e.sum()
    return GateWeights(tuple(float(v) for v in w), int(k))


def smoe_combine(gates: GateWeights, experts: Sequence):
    """sum_j g_j * E_j, evaluating only experts with nonzero gate.

    ``experts`` holds arrays or zero-argument callables; callables with a zero
    gate are never invoked.
    """
    if len(experts) != len(gates.weights):
        raise InvalidArgumentError(
            f"{len(experts)} experts for {len(gates.weights)} gate weights")
    out = None
    shape = None
    for g, expert in zip(gates.weights, experts):
        if g == 0:
            continue
        value = expert() if callable(expert) else expert
        value = np.asarray(value, dtype=np.float64)
        if shape is None:
            shape = value.shape
        elif value.shape != shape:
            raise InvalidArgumentError(f"expert output shape {value.shape} != {shape}")
        term = value.copy() if g == 1.0 else g * value
        out = term if out is None else out + term
    if out is None:
        raise InvalidArgumentError("all gate weights are zero")
    return out


def route(scores, experts: Sequence[Callable], k: int = DEFAULT_K):
    """Gate then combine; returns (combined output, gates)."""
    gates = topk_softmax(scores, k)
    return smoe_combine(gates, experts), gates


def heuristic_scores(image) -> np.ndarray:
    """Crude image-statistics scores for the five demo experts.

    Experts are ordered portrait, wide-angle rectangling, stitched
    rectangling, rotation, passthrough. Stand-in for a learned gate, meant for
    the CLI demo only.
    """
    img = np.asarray(image, dtype=np.float64)
    gray = img.mean(axis=2) if img.ndim == 3 else img
    h, w = gray.shape
    invalid = gray <= 1.0 / 255.0
    frac = invalid.mean()
    if invalid.any():
        vv, uu = np.nonzero(invalid)
        # asymmetry of the empty region about the image centre, in [0, 1]
        off = np.hypot(uu.mean() - (w - 1) / 2, vv.mean() - (h - 1) / 2)
        asym = min(1.0, off / (0.25 * np.hypot(w, h)))
    else:
        asym = 0.0
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    if mag.sum() > 0:
        ang = np.mod(np.arctan2(gy, gx), np.pi / 2)
        # how far dominant edges sit from the image axes, 0 when aligned
        tilt = float((np.minimum(ang, np.pi / 2 - ang) * mag).sum() / mag.sum()) / (np.pi / 4)
    else:
        tilt = 0.0
    return np.array([
        0.5 * (1.0 - frac) * (1.0 - tilt),
        10.0 * frac * (1.0 - asym),
        10.0 * frac * asym,
        2.0 * tilt * (1.0 - frac),
        0.25,
    ])
