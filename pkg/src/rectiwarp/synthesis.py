"""Synthetic distortion of clean images for the four rectification tasks."""
from __future__ import annotations

import math

import numpy as np

from rectiwarp.geometry import (
    DistortionParams,
    PixelGeometry,
    distortion_flow,
    undistort_points,
)
from rectiwarp.imaging import Task, prompt_from_validity
from rectiwarp.tps import bilinear_sample, pixel_to_normalized

# Sampling ranges per task (uniform draws).
PARAM_RANGES = {
    Task.T1: {"theta_k1": (0.9, 1.1), "theta_k2": (-0.05, 0.05)},
    Task.T2: {"radial_k1": (0.95, 1.1), "radial_k2": (-0.1, 0.1)},
    Task.T3: {"radial_k1": (0.95, 1.1), "radial_k2": (-0.1, 0.1),
              "t0_x": (-0.1, 0.1), "t0_y": (-0.1, 0.1)},
    Task.T4: {"alpha_deg": (-10.0, 10.0)},
}


def sample_task_params(task, rng: np.random.Generator) -> DistortionParams:
    """Draw distortion parameters for ``task`` from :data:`PARAM_RANGES`."""
    task = Task.parse(task)
    ranges = PARAM_RANGES[task]
    draw = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in ranges.items()}
    if task is Task.T1:
        return DistortionParams(theta_coeffs=(draw["theta_k1"], draw["theta_k2"]),
                                radial_coeffs=(0.0,), order=4)
    if task is Task.T2:
        return DistortionParams(theta_coeffs=(0.0,),
                                radial_coeffs=(draw["radial_k1"], draw["radial_k2"]), order=4)
    if task is Task.T3:
        return DistortionParams(theta_coeffs=(0.0,),
                                radial_coeffs=(draw["radial_k1"], draw["radial_k2"]),
                                t0=(draw["t0_x"], draw["t0_y"]), order=4)
    return DistortionParams(theta_coeffs=(0.0,), radial_coeffs=(1.0,),
                            alpha=math.radians(draw["alpha_deg"]), order=4)


def source_grid(params: DistortionParams, width: int, height: int,
                geometry: PixelGeometry | None = None) -> np.ndarray:
    """Normalized sampling coordinates that render the distorted view of a clean image.

    Each distorted pixel samples the clean image at its undistorted location;
    pixels with no preimage get coordinates outside [-1, 1]^2.
    """
    geometry = geometry or PixelGeometry(width, height)
    uv = geometry.pixel_lattice()
    src = undistort_points(geometry.to_normalized(uv), params)
    coords = pixel_to_normalized(geometry.to_pixel(src), width, height)
    coords[~np.isfinite(coords).all(axis=-1)] = 2.0
    return coords


def distort_image(image, params: DistortionParams, geometry: PixelGeometry | None = None):
    """Returns (distorted image, validity mask)."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    return bilinear_sample(img, source_grid(params, w, h, geometry))


def synthesize(clean, task, params: DistortionParams):
    """Distorted image, task prompt and ground-truth rectification flow for one sample."""
    img = np.asarray(clean, dtype=np.float64)
    h, w = img.shape[:2]
    distorted, valid = distort_image(img, params)
    prompt = prompt_from_validity(valid, task)
    flow = distortion_flow(params, w, h)
    return distorted, prompt, flow
