"""Training objective and landmark evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

DEFAULT_ALPHA = 0.01
NCC_EPS = 1e-8


@dataclass
class LossReport:
    l_pair: float
    l_trans: float
    total: float
    alpha: float


@dataclass
class MetricsReport:
    tre_mm: float
    rtre: float
    offset_mm: float | None
    seconds_per_pair: float
    offset_axes_mm: list[float] | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def l_pair(d_pred, q, q_t):
    """Mean over points of ``||d_pred + q - q_t||^2``.

    Accepts tensors (differentiable, any leading batch dims) or arrays.
    """
    if not torch.is_tensor(d_pred):
        d_pred, q, q_t = (torch.as_tensor(np.asarray(a, dtype=np.float64)) for a in (d_pred, q, q_t))
        return float(l_pair(d_pred, q, q_t))
    if d_pred.shape != q.shape or q.shape != q_t.shape or d_pred.shape[-1] != 3:
        raise ValueError(f"shape mismatch: {tuple(d_pred.shape)}, {tuple(q.shape)}, {tuple(q_t.shape)}")
    resid = d_pred + q.to(d_pred.dtype) - q_t.to(d_pred.dtype)
    return resid.pow(2).sum(-1).mean()


def _as_batch(x) -> torch.Tensor:
    """Promote a volume-like input to ``(B, 1, D, H, W)``."""
    if not torch.is_tensor(x):
        x = torch.as_tensor(np.asarray(getattr(x, "data", x), dtype=np.float64))
    while x.dim() < 5:
        x = x.unsqueeze(0)
    return x


def _pearson(a: torch.Tensor, b: torch.Tensor, dims) -> torch.Tensor:
    a = a - a.mean(dim=dims, keepdim=True)
    b = b - b.mean(dim=dims, keepdim=True)
    cov = (a * b).sum(dim=dims)
    var = a.pow(2).sum(dim=dims) * b.pow(2).sum(dim=dims)
    return cov / torch.sqrt(var + NCC_EPS)


def ncc(I, I_a, window="global"):
    """Normalized cross-correlation between two volumes.

    ``window="global"`` gives one Pearson correlation per batch item (then
    averaged over the batch). An odd integer window gives the mean of local
    correlations over all window centres, with windows clipped at the border;
    flat windows contribute 0.

    Returns a tensor for tensor inputs and a float otherwise.
    """
    as_float = not (torch.is_tensor(I) or torch.is_tensor(I_a))
    a, b = _as_batch(I), _as_batch(I_a)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    b = b.to(a.dtype)
    if window == "global":
        out = _pearson(a, b, dims=(1, 2, 3, 4)).mean()
    else:
        win = int(window)
        if win < 1 or win % 2 == 0:
            raise ValueError(f"local NCC window must be a positive odd integer, got {window}")
        out = _local_ncc(a, b, win)
    return float(out) if as_float else out


def _local_ncc(a: torch.Tensor, b: torch.Tensor, win: int) -> torch.Tensor:
    kernel = torch.ones((1, 1, win, win, win), dtype=a.dtype, device=a.device)

    def box(x):
        return F.conv3d(x, kernel, padding=win // 2)

    # windows are clipped at the volume border: n counts the voxels actually inside
    n = box(torch.ones_like(a[:1]))
    sa, sb = box(a), box(b)
    saa, sbb, sab = box(a * a), box(b * b), box(a * b)
    cross = sab - sa * sb / n
    var_a = (saa - sa * sa / n).clamp_min(0)
    var_b = (sbb - sb * sb / n).clamp_min(0)
    # flat windows (constant regions) score 0 instead of 0/0
    flat = (var_a <= 1e-12 * n) | (var_b <= 1e-12 * n)
    cc = torch.where(flat, torch.zeros_like(cross), cross / torch.sqrt(var_a * var_b + NCC_EPS))
    return cc.clamp(-1.0, 1.0).mean()


def l_trans(F_ref, M_warped, window="global"):
    out = ncc(F_ref, M_warped, window=window)
    return -out


def total_loss(lp, lt, alpha=DEFAULT_ALPHA) -> LossReport:
    lp, lt, alpha = float(lp), float(lt), float(alpha)
    if lp < 0:
        raise ValueError(f"l_pair must be non-negative, got {lp}")
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    return LossReport(l_pair=lp, l_trans=lt, total=lp + alpha * lt, alpha=alpha)


def tre(a_pts, b_pts) -> float:
    """Mean Euclidean distance between corresponding points (world mm)."""
    a = np.asarray(a_pts, dtype=np.float64)
    b = np.asarray(b_pts, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if len(a) == 0:
        raise ValueError("tre needs at least one point pair")
    return float(np.linalg.norm(a - b, axis=1).mean())


def rtre(tre_val: float, dims_mm) -> float:
    """TRE divided by the physical diagonal ``sqrt(w^2 + h^2 + d^2)``."""
    w, h, d = (float(v) for v in dims_mm)
    return float(tre_val) / math.sqrt(w * w + h * h + d * d)
