"""Volumes, landmark sets and their on-disk formats.

A volume is stored as a QVOL pair: a UTF-8 JSON header at ``<name>.qvol``
and a raw little-endian float32 payload at ``<name>.raw`` in ``(z, y, x)``
order with ``x`` varying fastest.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from quizreg._interp import trilinear_sample, voxel_grid


class VolumeError(ValueError):
    """Raised for malformed volumes or volume files."""


class LandmarkError(ValueError):
    """Raised for malformed landmark sets or landmark files."""


@dataclass(eq=False)
class Volume:
    """3-D intensity grid indexed ``(z, y, x)``.

    ``spacing`` is ``(sz, sy, sx)`` in mm per voxel and ``origin`` the world
    position (mm, ``(oz, oy, ox)``) of the centre of voxel ``(0, 0, 0)``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        self.validate()

    def validate(self) -> None:
        if self.data.ndim != 3:
            raise VolumeError(f"volume data must be 3-D, got shape {self.data.shape}")
        if min(self.data.shape) < 2:
            raise VolumeError(f"every dimension must be >= 2, got {self.data.shape}")
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise VolumeError(f"spacing must be three positive values, got {self.spacing}")
        if len(self.origin) != 3 or not all(np.isfinite(self.origin)):
            raise VolumeError(f"origin must be three finite values, got {self.origin}")
        if not np.isfinite(self.data).all():
            raise VolumeError("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def extent_mm(self) -> np.ndarray:
        """Physical size ``(w, h, d)`` along ``(x, y, z)``."""
        return np.array(self.dims[::-1], dtype=np.float64) * np.array(self.spacing[::-1])

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.origin == other.origin
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


@dataclass
class LandmarkSet:
    """Named points in continuous ``(x, y, z)`` voxel coordinates."""

    names: list[str]
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.names = [str(n) for n in self.names]
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.names) != len(self.points):
            raise LandmarkError(f"{len(self.names)} names for {len(self.points)} points")
        if len(set(self.names)) != len(self.names):
            dup = sorted({n for n in self.names if self.names.count(n) > 1})
            raise LandmarkError(f"duplicate landmark names: {dup}")
        if not np.isfinite(self.points).all():
            raise LandmarkError("landmark coordinates must be finite")

    def __len__(self):
        return len(self.names)

    def check_bounds(self, dims) -> None:
        """Raise unless every point lies in ``[0, dim - 1]`` of a ``(D, H, W)`` grid."""
        upper = np.array(dims[::-1], dtype=np.float64) - 1
        bad = np.any((self.points < 0) | (self.points > upper), axis=1)
        if bad.any():
            names = [n for n, b in zip(self.names, bad) if b]
            raise LandmarkError(f"landmarks outside volume bounds {tuple(dims)}: {names}")

    def subset(self, mask) -> "LandmarkSet":
        mask = np.asarray(mask, dtype=bool)
        return LandmarkSet([n for n, m in zip(self.names, mask) if m], self.points[mask])


def _payload_path(path: Path) -> Path:
    return path.with_suffix(".raw")


def save_volume(vol: Volume, path) -> None:
    vol.validate()
    path = Path(path)
    header = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "dtype": "f32",
        "order": "zyx",
    }
    try:
        path.write_text(json.dumps(header), encoding="utf-8")
        _payload_path(path).write_bytes(vol.data.astype("<f4").tobytes(order="C"))
    except OSError as exc:
        raise VolumeError(f"cannot write volume to {path}: {exc}") from exc


def load_volume(path) -> Volume:
    path = Path(path)
    payload = _payload_path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing QVOL header: {path}")
    if not payload.is_file():
        raise FileNotFoundError(f"missing QVOL payload: {payload}")
    try:
        header = json.loads(path.read_text(encoding="utf-8"))
        dims = [int(d) for d in header["dims"]]
        spacing = [float(s) for s in header["spacing"]]
        origin = [float(o) for o in header["origin"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeError(f"malformed QVOL header {path}: {exc}") from exc
    if header.get("dtype", "f32") != "f32" or header.get("order", "zyx") != "zyx":
        raise VolumeError(f"unsupported dtype/order in {path}")
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise VolumeError(f"dims, spacing and origin must each have 3 entries in {path}")
    raw = payload.read_bytes()
    expected = int(np.prod(dims)) * 4
    if len(raw) != expected:
        raise VolumeError(
            f"payload size mismatch: {payload} has {len(raw)} bytes, header implies {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    return Volume(data, tuple(spacing), tuple(origin))


def _sample_volume(vol: Volume, pts_xyz: np.ndarray, dims) -> np.ndarray:
    """Trilinear samples of ``vol`` at xyz voxel coords, reshaped to ``dims``."""
    src = torch.from_numpy(vol.data.astype(np.float64))[None, None]
    pts = torch.as_tensor(pts_xyz, dtype=torch.float64)[None]
    out = trilinear_sample(src, pts)[0, 0]
    return out.reshape(tuple(dims)).numpy().astype(np.float32)


def _check_target(dims, spacing=None):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise VolumeError(f"target dims must be three values >= 2, got {dims}")
    if spacing is not None:
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise VolumeError(f"target spacing must be three positive values, got {spacing}")
    return dims, spacing


def resample_to_reference(vol: Volume, target_dims, target_spacing, target_origin=None) -> Volume:
    """Resample ``vol`` onto a new grid in world coordinates.

    The target grid keeps ``vol.origin`` unless ``target_origin`` is given.
    """
    dims, spacing = _check_target(target_dims, target_spacing)
    origin = vol.origin if target_origin is None else tuple(float(o) for o in target_origin)
    grid = voxel_grid(dims).numpy()
    world_xyz = grid * np.array(spacing[::-1]) + np.array(origin[::-1])
    src_xyz = (world_xyz - np.array(vol.origin[::-1])) / np.array(vol.spacing[::-1])
    return Volume(_sample_volume(vol, src_xyz, dims), spacing, origin)


def crop_resize(vol: Volume, target) -> Volume:
    """Centre-crop to the largest region with the target aspect, then resize.

    Works in continuous coordinates, so the crop need not fall on voxel
    edges; the physical centre of the volume is preserved exactly.
    """
    target, _ = _check_target(target)
    src_dims = np.array(vol.dims, dtype=np.float64)
    tgt = np.array(target, dtype=np.float64)
    step = float(np.min(src_dims / tgt))
    centre = (src_dims - 1) / 2
    first = centre + (0.5 - tgt / 2) * step  # source index of output voxel 0, (z, y, x)

    grid = voxel_grid(target).numpy()  # xyz
    src_xyz = first[::-1] + grid * step
    spacing = tuple(float(s) * step for s in vol.spacing)
    origin = tuple(o + f * s for o, f, s in zip(vol.origin, first, vol.spacing))
    return Volume(_sample_volume(vol, src_xyz, target), spacing, origin)


def normalize_minmax(vol: Volume) -> Volume:
    """Rescale intensities to ``[0, 1]``; constant volumes map to zeros."""
    lo, hi = float(vol.data.min()), float(vol.data.max())
    scale = hi - lo
    data = (vol.data - lo) / scale if scale > 0 else np.zeros_like(vol.data)
    return Volume(data, vol.spacing, vol.origin)


def save_landmarks(lms: LandmarkSet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "x", "y", "z"])
        for name, p in zip(lms.names, lms.points):
            writer.writerow([name] + [f"{float(c):.9g}" for c in p])


def load_landmarks(path, dims=None) -> LandmarkSet:
    """Read a ``name,x,y,z`` CSV; with ``dims`` given, also bounds-check the points."""
    names, points = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["name", "x", "y", "z"]:
            raise LandmarkError(f"{path}: expected header 'name,x,y,z', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise LandmarkError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                points.append([float(c) for c in row[1:]])
            except ValueError as exc:
                raise LandmarkError(f"{path}:{lineno}: {exc}") from exc
            names.append(row[0].strip())
    lms = LandmarkSet(names, np.array(points, dtype=np.float64).reshape(-1, 3))
    if dims is not None:
        lms.check_bounds(dims)
    return lms
