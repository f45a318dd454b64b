"""Placement of a reference/search pair on the network's cubic input grid.

The reference is centre-cropped and resized to ``size^3``. The search volume
is resampled to the same voxel spacing and centred in its own ``size^3``
grid without using world coordinates, so the two grids are related only by
their centres. Displacements in this shared frame are what the network
predicts and what the position resetter applies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from quizreg._interp import trilinear_sample, voxel_grid
from quizreg.volume import Volume, crop_resize, normalize_minmax


@dataclass(frozen=True)
class FrameMap:
    """Per-axis affine map ``model = (native - native_centre) * scale + model_centre`` (xyz)."""

    scale: tuple
    native_centre: tuple
    model_centre: tuple

    def to_model(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - np.array(self.native_centre)) * np.array(self.scale) + np.array(self.model_centre)

    def to_native(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - np.array(self.model_centre)) / np.array(self.scale) + np.array(self.native_centre)


@dataclass
class ModelPair:
    reference: torch.Tensor  # (1, S, S, S)
    search: torch.Tensor
    ref_map: FrameMap
    search_map: FrameMap
    spacing_xyz: np.ndarray  # mm per model voxel


def _centre(dims) -> np.ndarray:
    return (np.array(dims[::-1], dtype=np.float64) - 1) / 2


def place_reference(vol: Volume, size: int) -> tuple[Volume, FrameMap]:
    out = crop_resize(vol, (size, size, size))
    scale = np.array(vol.spacing[::-1]) / np.array(out.spacing[::-1])
    fmap = FrameMap(tuple(scale), tuple(_centre(vol.dims)), tuple(_centre(out.dims)))
    return out, fmap


def place_search(vol: Volume, size: int, spacing_zyx) -> tuple[Volume, FrameMap]:
    """Resample ``vol`` to ``spacing_zyx`` on a ``size^3`` grid sharing its centre."""
    scale = np.array(vol.spacing[::-1]) / np.array(spacing_zyx[::-1], dtype=np.float64)
    dims = (size, size, size)
    fmap = FrameMap(tuple(scale), tuple(_centre(vol.dims)), tuple(_centre(dims)))
    src = fmap.to_native(voxel_grid(dims).numpy())
    data = trilinear_sample(
        torch.from_numpy(vol.data.astype(np.float64))[None, None], torch.from_numpy(src)[None]
    )[0, 0].reshape(dims)
    return Volume(data.numpy().astype(np.float32), tuple(spacing_zyx)), fmap


def prepare_pair(reference: Volume, search: Volume, size: int, normalize: bool = True) -> ModelPair:
    if normalize:
        reference, search = normalize_minmax(reference), normalize_minmax(search)
    ref_m, ref_map = place_reference(reference, size)
    s_m, s_map = place_search(search, size, ref_m.spacing)
    return ModelPair(
        reference=torch.from_numpy(ref_m.data)[None],
        search=torch.from_numpy(s_m.data)[None],
        ref_map=ref_map,
        search_map=s_map,
        spacing_xyz=np.array(ref_m.spacing[::-1]),
    )


def predicted_search_points(pair: ModelPair, q_native, translation_mm) -> np.ndarray:
    """Search-native voxel coordinates of ``q_native`` under a centred-frame translation (mm)."""
    m = pair.ref_map.to_model(q_native) + np.asarray(translation_mm) / pair.spacing_xyz
    return pair.search_map.to_native(m)


def displacements_to_search_points(pair: ModelPair, q_native, d_model) -> np.ndarray:
    """Map per-point model-frame displacements to search-native voxel coordinates."""
    return pair.search_map.to_native(pair.ref_map.to_model(q_native) + np.asarray(d_model))
