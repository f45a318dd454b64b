"""Shared-weight 3-D ResNet encoder, transformer quizzer and position resetter."""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from quizreg._interp import trilinear_sample
from quizreg.geometry import warp_translate_tensor


@dataclass
class ModelConfig:
    input_size: int = 64
    channels: int = 64
    encoder_blocks: list[int] = field(default_factory=lambda: [1, 1, 1])
    tf_layers: int = 4
    tf_heads: int = 4
    tf_dim: int = 128
    mlp_hidden: int = 256
    query_features: bool = True
    local_match: bool = True
    match_radius: int = 12
    match_step: int = 4

    def __post_init__(self):
        self.encoder_blocks = [int(b) for b in self.encoder_blocks]
        if self.input_size % 8 or self.input_size < 8:
            raise ValueError(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if self.tf_dim % self.tf_heads:
            raise ValueError(f"tf_dim ({self.tf_dim}) must be divisible by tf_heads ({self.tf_heads})")
        if self.channels % 4:
            raise ValueError(f"channels must be divisible by 4, got {self.channels}")
        if len(self.encoder_blocks) != 3 or min(self.encoder_blocks) < 1:
            raise ValueError(f"encoder_blocks needs three stage counts >= 1, got {self.encoder_blocks}")

    @property
    def output_scale(self) -> float:
        return self.input_size / 2


def _conv(cin, cout, stride=1, k=3):
    return nn.Conv3d(cin, cout, k, stride=stride, padding=k // 2, bias=False)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = _conv(cin, cout, stride)
        self.norm1 = nn.InstanceNorm3d(cout, affine=True)
        self.conv2 = _conv(cout, cout)
        self.norm2 = nn.InstanceNorm3d(cout, affine=True)
        self.act = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(_conv(cin, cout, stride, k=1), nn.InstanceNorm3d(cout, affine=True))

    def forward(self, x):
        out = self.act(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.act(out + skip)


class Encoder(nn.Module):
    """ResNet-10 style trunk reducing each spatial axis by 8."""

    def __init__(self, channels: int, blocks=(1, 1, 1)):
        super().__init__()
        widths = [channels // 4, channels // 2, channels]
        self.stem = nn.Sequential(
            _conv(1, widths[0], stride=2), nn.InstanceNorm3d(widths[0], affine=True), nn.ReLU(inplace=True)
        )
        stages, cin = [], widths[0]
        for width, stride, n in zip(widths, (2, 2, 1), blocks):
            layers = [BasicBlock(cin, width, stride)] + [BasicBlock(width, width) for _ in range(n - 1)]
            stages.append(nn.Sequential(*layers))
            cin = width
        self.stages = nn.Sequential(*stages)

    def forward(self, x):
        return self.stages(self.stem(x))


def sine_encoding(u: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal encoding of normalized ``(..., 3)`` coordinates into ``dim`` features."""
    n_freq = dim // 6
    freqs = 0.5 * math.pi * torch.exp(
        torch.linspace(0.0, math.log(32.0), n_freq, dtype=u.dtype, device=u.device)
    )
    ang = u.unsqueeze(-1) * freqs  # (..., 3, F)
    enc = torch.cat([ang.sin(), ang.cos()], dim=-1).flatten(-2)
    pad = dim - enc.shape[-1]
    if pad:
        enc = torch.nn.functional.pad(enc, (0, pad))
    return enc


class QuizzerLayer(nn.Module):
    def __init__(self, dim, heads, hidden):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, qpos, memory, mem_pos):
        h = self.norm_q(x) + qpos
        keyed = memory + mem_pos
        attn, _ = self.attn(h, keyed, keyed, need_weights=False)
        x = x + attn
        return x + self.ff(self.norm_ff(x))


class LocalMatchReadout(nn.Module):
    """Soft-argmax over search features sampled at a symmetric set of offsets.

    Each query scores the search half of the memory at ``q + delta`` for every
    offset ``delta`` on a cubic lattice and returns the softmax-weighted offset.
    The sum is taken over antisymmetric pairs ``(a[delta] - a[-delta]) * delta``,
    so uniform attention (the zero-initialised query projection) yields an exact
    zero displacement while the attention still receives gradient.
    """

    def __init__(self, dim: int, radius: int, step: int):
        super().__init__()
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        r = torch.arange(-radius, radius + 1, step, dtype=torch.float32)
        zz, yy, xx = torch.meshgrid(r, r, r, indexing="ij")
        offsets = torch.stack((xx, yy, zz), dim=-1).reshape(-1, 3)
        n = offsets.shape[0]
        half = n // 2  # offsets are ordered so that index n-1-i holds -offsets[i]
        self.register_buffer("offsets", offsets, persistent=False)
        self.register_buffer("pos_idx", torch.arange(half + 1, n), persistent=False)
        self.register_buffer("neg_idx", torch.arange(half - 1, -1, -1), persistent=False)

    def forward(self, x, keyed, shape, q, input_size):
        B, _, Dc, Hc, Wc = shape
        half = Wc // 2
        d = keyed.shape[-1]
        stride = input_size / Dc
        search = keyed.reshape(B, Dc, Hc, Wc, d)[:, :, :, half:].permute(0, 4, 1, 2, 3).contiguous()
        N, K = q.shape[1], self.offsets.shape[0]
        pts = q.unsqueeze(2) + self.offsets.to(q.dtype)  # (B, N, K, 3)
        grid_pts = ((pts - (stride - 1) / 2) / stride).reshape(B, N * K, 3)
        feats = trilinear_sample(search, grid_pts).transpose(1, 2).reshape(B, N, K, d)
        logits = torch.einsum("bnd,bnkd->bnk", self.to_q(x), self.to_k(feats))
        a = logits.softmax(dim=-1)
        diff = a[..., self.pos_idx] - a[..., self.neg_idx]
        return diff @ self.offsets[self.pos_idx].to(q.dtype)


class Quizzer(nn.Module):
    """Transformer decoder answering displacement queries against the merged feature map."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.tf_dim
        self.dim = d
        self.query_lift = nn.Linear(d, d)
        self.query_pos = nn.Linear(d, d)
        self.query_content = nn.Linear(d, d) if cfg.query_features else None
        self.memory_proj = nn.Linear(cfg.channels, d)
        self.segment = nn.Parameter(torch.zeros(2, d))
        self.memory_norm = nn.LayerNorm(d)
        self.layers = nn.ModuleList(
            [QuizzerLayer(d, cfg.tf_heads, cfg.mlp_hidden) for _ in range(cfg.tf_layers)]
        )
        self.out_norm = nn.LayerNorm(d)
        self.head = nn.Sequential(nn.Linear(d, cfg.mlp_hidden), nn.GELU(), nn.Linear(cfg.mlp_hidden, 3))
        self.output_scale = cfg.output_scale
        self.input_size = cfg.input_size
        self.matcher = LocalMatchReadout(d, cfg.match_radius, cfg.match_step) if cfg.local_match else None

    def memory_positions(self, fm: torch.Tensor) -> torch.Tensor:
        """Encodings for the merged map tokens, in each half's own normalized coordinates."""
        _, _, Dc, Hc, Wc = fm.shape
        half = Wc // 2
        stride = self.input_size / Dc
        centres = lambda n: (torch.arange(n, dtype=fm.dtype, device=fm.device) * stride + (stride - 1) / 2) / (
            self.input_size - 1
        )
        zz, yy, xx = torch.meshgrid(centres(Dc), centres(Hc), centres(half), indexing="ij")
        u = torch.stack((xx, yy, zz), dim=-1)  # (Dc, Hc, half, 3)
        pe = sine_encoding(u, self.dim)
        seg = self.segment
        pos = torch.cat([pe + seg[0], pe + seg[1]], dim=2)  # along W, matching the merge
        return pos.reshape(-1, self.dim)

    def _sample_reference(self, memory, shape, q):
        """Reference-half memory tokens interpolated at the query positions."""
        B, _, Dc, Hc, Wc = shape
        half = Wc // 2
        grid = memory.reshape(B, Dc, Hc, Wc, self.dim)[:, :, :, :half].permute(0, 4, 1, 2, 3)
        stride = self.input_size / Dc
        pts = (q - (stride - 1) / 2) / stride
        upper = torch.tensor([half - 1, Hc - 1, Dc - 1], dtype=q.dtype, device=q.device)
        pts = torch.minimum(pts.clamp_min(0), upper)
        return trilinear_sample(grid.contiguous(), pts).transpose(1, 2)

    def forward(self, fm: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        """``fm`` ``(B, C, Dc, Hc, Wc)``, ``q`` ``(B, N, 3)`` model-voxel xyz -> ``(B, N, 3)`` voxels."""
        memory = self.memory_norm(self.memory_proj(fm.flatten(2).transpose(1, 2)))
        mem_pos = self.memory_positions(fm).unsqueeze(0)
        enc = sine_encoding(q / (self.input_size - 1), self.dim)
        x = self.query_lift(enc)
        if self.query_content is not None:
            x = x + self.query_content(self._sample_reference(memory, fm.shape, q))
        qpos = self.query_pos(enc)
        for layer in self.layers:
            x = layer(x, qpos, memory, mem_pos)
        x = self.out_norm(x)
        d = self.head(x) * self.output_scale
        if self.matcher is not None:
            d = d + self.matcher(x, memory + mem_pos, fm.shape, q, self.input_size)
        return d


class QuizNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.config = cfg or ModelConfig()
        self.encoder = Encoder(self.config.channels, self.config.encoder_blocks)
        self.quizzer = Quizzer(self.config)
        self._init_weights()

    def _init_weights(self):
        for m in self.quizzer.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.MultiheadAttention):
                nn.init.xavier_uniform_(m.in_proj_weight)
                nn.init.zeros_(m.in_proj_bias)
        nn.init.trunc_normal_(self.quizzer.segment, std=0.02)
        last = self.quizzer.head[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
        if self.quizzer.matcher is not None:
            nn.init.zeros_(self.quizzer.matcher.to_q.weight)

    def encode(self, I_r: torch.Tensor, I_s: torch.Tensor) -> torch.Tensor:
        """Shared-weight features of both inputs, concatenated along the last spatial axis."""
        if I_r.shape != I_s.shape:
            raise ValueError(f"reference and search shapes differ: {tuple(I_r.shape)} vs {tuple(I_s.shape)}")
        B = I_r.shape[0]
        feats = self.encoder(torch.cat([I_r, I_s], dim=0))
        return torch.cat([feats[:B], feats[B:]], dim=-1)

    def quiz(self, fm: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        if q.shape[-2] < 1:
            raise ValueError("query set is empty")
        if not torch.isfinite(q).all():
            raise ValueError("query coordinates must be finite")
        return self.quizzer(fm, q.to(fm.dtype))

    @staticmethod
    def reduce_mean_displacement(d: torch.Tensor) -> torch.Tensor:
        return d.mean(dim=-2)

    @staticmethod
    def position_reset(I_s: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Warp the search batch so that it lines up with the reference.

        A reference point ``x`` matches search point ``x + t``, so the
        pull-warp samples the search at ``v + t``.
        """
        return warp_translate_tensor(I_s, -t)

    def register(self, I_r, I_s, q, rounds: int = 1):
        """Iterated position reset for inference.

        Each round warps the search by the translation found so far and asks the
        quizzer for the residual. Returns per-point displacements ``(B, N, 3)``
        (accumulated translation plus the last round's answers) and the
        accumulated mean translation ``(B, 3)``. ``rounds=1`` is a plain forward pass.
        """
        if rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {rounds}")
        t = torch.zeros(I_s.shape[0], 3, dtype=I_s.dtype, device=I_s.device)
        for k in range(rounds):
            search = I_s if k == 0 else self.position_reset(I_s, t)
            d = self.quiz(self.encode(I_r, search), q)
            d = d + t.unsqueeze(1).to(d.dtype)
            t = self.reduce_mean_displacement(d)
        return d, t

    def forward(self, I_r, I_s, q, reset: bool = False):
        d = self.quiz(self.encode(I_r, I_s), q)
        if not reset:
            return d, None
        t = self.reduce_mean_displacement(d)
        return d, self.position_reset(I_s, t)


CHECKPOINT_CONFIG = "config.json"
CHECKPOINT_META = "meta.json"


def save_checkpoint(model: QuizNet, path, meta: dict | None = None) -> None:
    """Write a zip archive: ``config.json``, ``meta.json`` and one ``.npy`` per weight."""
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(CHECKPOINT_CONFIG, json.dumps(asdict(model.config), sort_keys=True))
        zf.writestr(CHECKPOINT_META, json.dumps(meta or {}, sort_keys=True))
        for name, tensor in model.state_dict().items():
            buf = io.BytesIO()
            np.save(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
            zf.writestr(f"weights/{name}.npy", buf.getvalue())


def load_checkpoint(path) -> tuple[QuizNet, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        cfg = ModelConfig(**json.loads(zf.read(CHECKPOINT_CONFIG)))
        meta = json.loads(zf.read(CHECKPOINT_META)) if CHECKPOINT_META in zf.namelist() else {}
        state = {}
        for info in zf.infolist():
            if info.filename.startswith("weights/"):
                name = info.filename[len("weights/"):-len(".npy")]
                state[name] = torch.from_numpy(np.load(io.BytesIO(zf.read(info)), allow_pickle=False))
    model = QuizNet(cfg)
    model.load_state_dict(state)
    return model, meta
