"""Raster/flow/grid file I/O, prompt masks and PSNR/SSIM."""
from __future__ import annotations

import enum
import os
import struct
import tempfile
from pathlib import Path

import cv2
import numpy as np

from rectiwarp.errors import InvalidArgumentError
from rectiwarp.geometry import FlowField
from rectiwarp.tps import grid_from_bytes, grid_to_bytes

FLOW_MAGIC = b"PIEH"  # float32 202021.25 in little-endian
PSNR_CAP = 100.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class Task(str, enum.Enum):
    T1 = "t1"  # portrait correction
    T2 = "t2"  # rectified wide-angle rectangling
    T3 = "t3"  # stitched image rectangling
    T4 = "t4"  # rotation correction

    @classmethod
    def parse(cls, value) -> "Task":
        if isinstance(value, Task):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidArgumentError(f"unknown task {value!r}") from None

    @property
    def boundary_changing(self) -> bool:
        return self in (Task.T2, Task.T3)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def quantize(image, depth: int = 8) -> np.ndarray:
    """Map [0, 1] floats to integers with round-half-to-even."""
    if depth not in (8, 16):
        raise InvalidArgumentError("bit depth must be 8 or 16")
    peak = 255 if depth == 8 else 65535
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.rint(img * peak).astype(np.uint8 if depth == 8 else np.uint16)


def _encode_ext(path) -> str:
    ext = Path(path).suffix.lower()
    if ext not in (".png", ".pgm", ".ppm", ".pnm"):
        raise InvalidArgumentError(f"unsupported raster format {ext!r}")
    return ext


def encode_image(image, ext: str = ".png", depth: int = 8) -> bytes:
    q = quantize(image, depth)
    if q.ndim == 3:
        if q.shape[2] == 1:
            q = q[..., 0]
        elif q.shape[2] == 3:
            q = cv2.cvtColor(q, cv2.COLOR_RGB2BGR)
        else:
            raise InvalidArgumentError("images must have 1 or 3 channels")
    if ext == ".pnm":
        ext = ".ppm" if q.ndim == 3 else ".pgm"
    if ext == ".pgm" and q.ndim == 3:
        raise InvalidArgumentError("PGM holds single-channel images only")
    if ext == ".ppm" and q.ndim == 2:
        q = cv2.cvtColor(q, cv2.COLOR_GRAY2BGR)
    ok, buf = cv2.imencode(ext, q)
    if not ok:
        raise InvalidArgumentError(f"could not encode image as {ext}")
    return buf.tobytes()


def write_image(path, image, depth: int = 8) -> None:
    atomic_write_bytes(path, encode_image(image, _encode_ext(path), depth))


def read_image(path) -> np.ndarray:
    """Read an 8/16-bit PNG or PNM into floats in [0, 1], RGB channel order."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InvalidArgumentError(f"could not decode image {path}")
    if raw.dtype == np.uint8:
        peak = 255.0
    elif raw.dtype == np.uint16:
        peak = 65535.0
    else:
        raise InvalidArgumentError(f"unsupported sample type {raw.dtype}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[..., :3]
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return raw.astype(np.float64) / peak


def write_mask(path, mask) -> None:
    write_image(path, np.asarray(mask, dtype=np.float64))


def read_mask(path) -> np.ndarray:
    img = read_image(path)
    if img.ndim == 3:
        img = img.mean(axis=2)
    return (img >= 0.5).astype(np.uint8)


def flow_to_bytes(flow) -> bytes:
    vec = flow.vectors if isinstance(flow, FlowField) else np.asarray(flow)
    h, w = vec.shape[:2]
    return FLOW_MAGIC + struct.pack("<II", w, h) + np.ascontiguousarray(vec, dtype="<f4").tobytes()


def flow_from_bytes(data: bytes) -> FlowField:
    if len(data) < 12 or data[:4] != FLOW_MAGIC:
        raise InvalidArgumentError("not a .flo file (bad magic)")
    w, h = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 8 * w * h:
        raise InvalidArgumentError("truncated or oversized .flo file")
    vec = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2)
    return FlowField(vec.astype(np.float64))


def write_flow(path, flow) -> None:
    atomic_write_bytes(path, flow_to_bytes(flow))


def read_flow(path) -> FlowField:
    return flow_from_bytes(Path(path).read_bytes())


def write_grid(path, grid) -> None:
    atomic_write_bytes(path, grid_to_bytes(grid))


def read_grid(path, kind: str = "sampling"):
    return grid_from_bytes(Path(path).read_bytes(), kind)


def prompt_from_validity(mask, task) -> np.ndarray:
    """Visual prompt for a task: the validity mask for rectangling, all-one otherwise."""
    task = Task.parse(task)
    m = (np.asarray(mask) > 0).astype(np.uint8)
    if task.boundary_changing:
        return m
    return np.ones_like(m)


def _per_channel(img: np.ndarray) -> list:
    return [img] if img.ndim == 2 else [img[..., c] for c in range(img.shape[2])]


def psnr(a, b, mask=None) -> float:
    """PSNR in dB for images in [0, 1]; identical inputs give ``PSNR_CAP``.

    Channels are scored separately and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    sel = np.ones(a.shape[:2], bool) if mask is None else np.asarray(mask).astype(bool)
    if not sel.any():
        raise InvalidArgumentError("mask selects no pixels")
    scores = []
    for ca, cb in zip(_per_channel(a), _per_channel(b)):
        mse = float(np.mean((ca[sel] - cb[sel]) ** 2))
        scores.append(PSNR_CAP if mse == 0 else min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))
    return float(np.mean(scores))


def _windows(img: np.ndarray, win: int) -> np.ndarray:
    h, w = img.shape
    wy, wx = min(win, h), min(win, w)
    ny, nx = h // wy, w // wx
    return img[:ny * wy, :nx * wx].reshape(ny, wy, nx, wx).transpose(0, 2, 1, 3).reshape(ny, nx, -1)


def ssim(a, b, window: int = 8, mask=None) -> float:
    """Mean SSIM over non-overlapping ``window`` x ``window`` blocks.

    Trailing rows/columns that do not fill a block are ignored; images
    smaller than the window use one block spanning that axis. With a mask,
    only blocks fully inside it count.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    keep = None
    if mask is not None:
        keep = _windows(np.asarray(mask, dtype=np.float64), window).min(axis=-1) > 0
        if not keep.any():
            raise InvalidArgumentError("no SSIM window lies fully inside the mask")
    scores = []
    for ca, cb in zip(_per_channel(a), _per_channel(b)):
        wa, wb = _windows(ca, window), _windows(cb, window)
        mu_a, mu_b = wa.mean(-1), wb.mean(-1)
        da, db = wa - mu_a[..., None], wb - mu_b[..., None]
        var_a, var_b = (da * da).mean(-1), (db * db).mean(-1)
        cov = (da * db).mean(-1)
        s = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
            (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2))
        scores.append(s[keep].mean() if keep is not None else s.mean())
    return float(np.mean(scores))


def checkerboard(width: int, height: int, square: int = 32, channels: int = 1) -> np.ndarray:
    v, u = np.mgrid[0:height, 0:width]
    board = (((u // square) + (v // square)) % 2).astype(np.float64)
    if channels == 3:
        board = np.repeat(board[..., None], 3, axis=2)
    return board
