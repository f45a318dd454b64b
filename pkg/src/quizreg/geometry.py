"""Translation-only rigid transforms, differentiable warping and landmark transport.

All vectors are ``(x, y, z)`` in voxel units; volume arrays stay ``(z, y, x)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from quizreg._interp import trilinear_sample, voxel_grid
from quizreg.volume import Volume


@dataclass(frozen=True)
class RigidTransform:
    """Homogeneous 4x4 transform whose linear block is fixed to the identity."""

    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        t = tuple(float(v) for v in self.translation)
        if len(t) != 3 or not np.all(np.isfinite(t)):
            raise ValueError(f"translation must be 3 finite values, got {self.translation}")
        object.__setattr__(self, "translation", t)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        if not np.array_equal(m[:3, :3], np.eye(3)) or not np.array_equal(m[3], [0, 0, 0, 1]):
            raise ValueError("only translation matrices (identity linear block) are supported")
        return cls(tuple(m[:3, 3]))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(tuple(np.add(self.translation, other.translation)))


@dataclass
class PointDisplacements:
    """Per-query offsets ``x_target - x`` in voxel units, in query order."""

    offsets: np.ndarray

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.offsets).all():
            raise ValueError("displacements must be finite")

    def __len__(self):
        return len(self.offsets)


def apply_transform(M: RigidTransform, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if not np.isfinite(pts).all():
        raise ValueError("points must be finite")
    return pts + np.asarray(M.translation)


def warp_translate_tensor(vol: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Pull-warp a ``(B, C, D, H, W)`` batch by per-item translations ``t`` ``(B, 3)``.

    Output voxel ``v`` takes the trilinear sample of the input at ``v - t``;
    differentiable in both ``vol`` and ``t``.
    """
    B, C, D, H, W = vol.shape
    t = t.to(vol.dtype).reshape(B, 1, 3)
    grid = voxel_grid((D, H, W), dtype=vol.dtype, device=vol.device)
    out = trilinear_sample(vol, grid.unsqueeze(0) - t)
    return out.reshape(B, C, D, H, W)


def warp_translate(vol: Volume, t) -> Volume:
    t = np.asarray(t, dtype=np.float64).reshape(3)
    if not np.isfinite(t).all():
        raise ValueError("translation must be finite")
    if not t.any():
        return Volume(vol.data.copy(), vol.spacing, vol.origin)
    src = torch.from_numpy(vol.data.astype(np.float64))[None, None]
    out = warp_translate_tensor(src, torch.from_numpy(t)[None])
    return Volume(out[0, 0].numpy().astype(np.float32), vol.spacing, vol.origin)


# Landmark transport. ``aug`` is duck-typed (``kind`` and ``params``) so that
# this module does not depend on the augmentation module.

def _centre(dims) -> np.ndarray:
    return (np.array(dims[::-1], dtype=np.float64) - 1) / 2


def transform_landmarks(aug, pts, dims) -> np.ndarray:
    """Map ``(x, y, z)`` points through the spatial map ``aug`` applies to a ``(D, H, W)`` volume."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    p = aug.params
    if aug.kind == "translate":
        return pts + np.asarray(p["shift"], dtype=np.float64)
    if aug.kind == "scale":
        c = _centre(dims)
        return c + float(p["factor"]) * (pts - c)
    if aug.kind == "flip":
        axis = int(p["axis"])
        out = pts.copy()
        out[:, axis] = (dims[::-1][axis] - 1) - pts[:, axis]
        return out
    if aug.kind == "axis_swap":
        return pts[:, list(p["perm"])]
    raise ValueError(f"unsupported augmentation kind: {aug.kind!r}")


def inverse_map_points(aug, pts, dims) -> np.ndarray:
    """Source coordinates sampled for output coordinates ``pts`` (pull map of ``aug``).

    ``dims`` is the source ``(D, H, W)``.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    p = aug.params
    if aug.kind == "translate":
        return pts - np.asarray(p["shift"], dtype=np.float64)
    if aug.kind == "scale":
        c = _centre(dims)
        return c + (pts - c) / float(p["factor"])
    if aug.kind == "flip":
        return transform_landmarks(aug, pts, dims)
    if aug.kind == "axis_swap":
        inv = np.argsort(p["perm"])
        return pts[:, inv]
    raise ValueError(f"unsupported augmentation kind: {aug.kind!r}")


def transform_volume(aug, vol: Volume) -> Volume:
    """Apply the spatial map of ``aug`` to a volume.

    Flips and axis swaps are exact array permutations; translations and
    scalings go through trilinear sampling with zero fill.
    """
    p = aug.params
    if aug.kind == "flip":
        array_axis = 2 - int(p["axis"])
        return Volume(np.flip(vol.data, axis=array_axis).copy(), vol.spacing, vol.origin)
    if aug.kind == "axis_swap":
        perm = list(p["perm"])
        # new xyz axis i is old xyz axis perm[i]; array axes run (z, y, x)
        axes = [2 - perm[2 - a] for a in range(3)]
        data = np.transpose(vol.data, axes).copy()
        spacing = tuple(vol.spacing[a] for a in axes)
        origin = tuple(vol.origin[a] for a in axes)
        return Volume(data, spacing, origin)
    if aug.kind == "translate":
        return warp_translate(vol, p["shift"])
    if aug.kind == "scale":
        grid = voxel_grid(vol.dims).numpy()
        src = inverse_map_points(aug, grid, vol.dims)
        t_src = torch.from_numpy(vol.data.astype(np.float64))[None, None]
        out = trilinear_sample(t_src, torch.from_numpy(src)[None])[0, 0]
        return Volume(out.reshape(vol.dims).numpy().astype(np.float32), vol.spacing, vol.origin)
    raise ValueError(f"unsupported augmentation kind: {aug.kind!r}")
