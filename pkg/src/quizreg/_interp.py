"""Trilinear point sampling with per-corner zero padding.

Shared by resampling, warping and augmentation so that every spatial
operation in the package agrees on one interpolation rule.
"""

from __future__ import annotations

import torch


def trilinear_sample(vol: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Sample ``vol`` at continuous voxel coordinates.

    Args:
        vol: ``(B, C, D, H, W)`` tensor.
        pts: ``(B, P, 3)`` coordinates in ``(x, y, z)`` voxel order, where
            ``x`` indexes ``W`` and ``z`` indexes ``D``.

    Returns:
        ``(B, C, P)`` samples. Corners falling outside the grid contribute
        zero, which keeps the result continuous in ``pts`` and exact at
        integer coordinates.
    """
    B, C, D, H, W = vol.shape
    P = pts.shape[1]
    x, y, z = pts.unbind(-1)
    x0f, y0f, z0f = torch.floor(x), torch.floor(y), torch.floor(z)
    fx, fy, fz = x - x0f, y - y0f, z - z0f
    x0, y0, z0 = x0f.long(), y0f.long(), z0f.long()
    flat = vol.reshape(B, C, D * H * W)

    out = None
    for dz in (0, 1):
        zi = z0 + dz
        wz = fz if dz else 1 - fz
        vz = (zi >= 0) & (zi < D)
        for dy in (0, 1):
            yi = y0 + dy
            wy = fy if dy else 1 - fy
            vy = vz & (yi >= 0) & (yi < H)
            for dx in (0, 1):
                xi = x0 + dx
                wx = fx if dx else 1 - fx
                valid = vy & (xi >= 0) & (xi < W)
                idx = (zi.clamp(0, D - 1) * H + yi.clamp(0, H - 1)) * W + xi.clamp(0, W - 1)
                v = torch.gather(flat, 2, idx.unsqueeze(1).expand(B, C, P))
                w = (wz * wy * wx) * valid.to(vol.dtype)
                term = v * w.unsqueeze(1)
                out = term if out is None else out + term
    return out


def voxel_grid(dims, dtype=torch.float64, device=None) -> torch.Tensor:
    """All voxel centres of a ``(D, H, W)`` grid as ``(D*H*W, 3)`` xyz coordinates."""
    D, H, W = (int(d) for d in dims)
    zz, yy, xx = torch.meshgrid(
        torch.arange(D, dtype=dtype, device=device),
        torch.arange(H, dtype=dtype, device=device),
        torch.arange(W, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack((xx, yy, zz), dim=-1).reshape(-1, 3)
