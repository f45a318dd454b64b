"""Blob phantoms with known translations, and an exhaustive translation oracle."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.signal import fftconvolve

from quizreg.volume import LandmarkSet, Volume, save_landmarks, save_volume

# true shifts are snapped to this grid so that q_t - q is exactly representable
SHIFT_QUANTUM = 1.0 / 256


class SyntheticError(ValueError):
    pass


@dataclass
class SyntheticPairSpec:
    """Parameters of one phantom pair.

    ``true_shift`` (xyz voxels) is the displacement from a reference point
    to its match in the search volume once both volumes are centred on each
    other; the search volume is the ``crop_side`` cube extracted at
    ``centre - true_shift``.
    """

    side: int = 64
    n_blobs: int = 8
    crop_side: int = 48
    true_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.0
    modality_gamma: float = 1.0
    seed: int = 0
    n_landmarks: int = 6

    def __post_init__(self):
        shift = np.asarray(self.true_shift, dtype=np.float64).reshape(3)
        shift = np.round(shift / SHIFT_QUANTUM) * SHIFT_QUANTUM
        self.true_shift = tuple(float(s) for s in shift)
        if self.crop_side < 2 or self.crop_side > self.side:
            raise SyntheticError(f"crop_side {self.crop_side} must lie in [2, side={self.side}]")
        lo = self.extraction_offset
        if np.any(lo < 0) or np.any(lo + self.crop_side > self.side):
            raise SyntheticError(
                f"crop of {self.crop_side} shifted by {self.true_shift} does not fit inside side {self.side}"
            )
        if self.n_landmarks < 1 or self.n_blobs < self.n_landmarks:
            raise SyntheticError(f"n_blobs ({self.n_blobs}) must be >= n_landmarks ({self.n_landmarks}) >= 1")
        if self.noise_sigma < 0 or self.modality_gamma <= 0:
            raise SyntheticError("noise_sigma must be >= 0 and modality_gamma > 0")

    @property
    def centre_offset(self) -> float:
        return (self.side - self.crop_side) / 2

    @property
    def extraction_offset(self) -> np.ndarray:
        """Reference index (xyz) of search voxel 0."""
        return self.centre_offset - np.asarray(self.true_shift)


@dataclass
class SyntheticPair:
    reference: Volume
    search: Volume
    q: LandmarkSet
    q_t: LandmarkSet
    true_shift: np.ndarray
    spec: SyntheticPairSpec = field(repr=False)

    @property
    def extraction_offset(self) -> np.ndarray:
        return self.spec.extraction_offset


def _phantom(side: int, centres: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Gaussian blobs at ``centres`` (xyz) over a smooth textured background."""
    texture = ndimage.gaussian_filter(rng.standard_normal((side, side, side)), sigma=2.5)
    texture *= 0.15 / (texture.std() + 1e-12)
    zz, yy, xx = np.meshgrid(*(np.arange(side, dtype=np.float64),) * 3, indexing="ij")
    vol = 0.3 + texture
    for c in centres:
        amp = rng.uniform(0.4, 1.0) * rng.choice([-1.0, 1.0])
        sig = rng.uniform(2.0, 4.5)
        r2 = (xx - c[0]) ** 2 + (yy - c[1]) ** 2 + (zz - c[2]) ** 2
        vol += amp * np.exp(-r2 / (2 * sig * sig))
    return vol


def _extract(ref: np.ndarray, offset: np.ndarray, side: int) -> np.ndarray:
    if np.all(offset == np.round(offset)):
        ox, oy, oz = (int(o) for o in offset)
        return ref[oz:oz + side, oy:oy + side, ox:ox + side].copy()
    zz, yy, xx = np.meshgrid(*(np.arange(side, dtype=np.float64),) * 3, indexing="ij")
    coords = [zz + offset[2], yy + offset[1], xx + offset[0]]
    return ndimage.map_coordinates(ref, coords, order=1, mode="nearest")


def gen_pair(spec: SyntheticPairSpec) -> SyntheticPair:
    rng = np.random.default_rng(spec.seed)
    side, crop = spec.side, spec.crop_side
    offset = spec.extraction_offset

    # landmark blobs sit inside the search field of view, 2 voxels from its faces
    margin = min(2.0, (crop - 1) / 2)
    lm = offset + rng.uniform(margin, crop - 1 - margin, size=(spec.n_landmarks, 3))
    lm = np.round(lm * 4) / 4
    extra = rng.uniform(0, side - 1, size=(spec.n_blobs - spec.n_landmarks, 3))
    ref = _phantom(side, np.vstack([lm, extra]), rng)

    search = _extract(ref, offset, crop)
    if spec.modality_gamma != 1.0:
        lo, hi = search.min(), search.max()
        search = ((search - lo) / (hi - lo)) ** spec.modality_gamma
    if spec.noise_sigma > 0:
        search = search + rng.normal(0.0, spec.noise_sigma, size=search.shape)

    names = [f"L{i:02d}" for i in range(len(lm))]
    q_t = lm - offset
    keep = np.all((q_t >= 0) & (q_t <= crop - 1), axis=1)
    if keep.sum() < 3:
        raise SyntheticError(f"only {int(keep.sum())} landmark pairs survive the crop; need >= 3")
    names = [n for n, k in zip(names, keep) if k]
    return SyntheticPair(
        reference=Volume(ref.astype(np.float32)),
        search=Volume(search.astype(np.float32)),
        q=LandmarkSet(names, lm[keep]),
        q_t=LandmarkSet(names, q_t[keep]),
        true_shift=np.asarray(spec.true_shift),
        spec=spec,
    )


def _corr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Full cross-correlation ``out[k] = sum_j a[j + k'] b[j]`` via FFT."""
    return fftconvolve(a, b[::-1, ::-1, ::-1], mode="full")


def ncc_offset_scores(ref: np.ndarray, search: np.ndarray, offsets_zyx: np.ndarray) -> np.ndarray:
    """Global NCC over the overlap for each integer placement of ``search`` in ``ref``.

    ``offsets_zyx`` is ``(K, 3)``; placement ``o`` pairs ``search[j]`` with
    ``ref[j + o]``. Empty overlaps score ``-inf``; flat overlaps score 0.
    """
    r = ref.astype(np.float64)
    s = search.astype(np.float64)
    # normalise for conditioning; NCC is invariant to this
    r = (r - r.mean()) / (r.std() + 1e-30)
    s = (s - s.mean()) / (s.std() + 1e-30)
    mr, ms = np.ones_like(r), np.ones_like(s)
    n = _corr(mr, ms)
    sr, srr = _corr(r, ms), _corr(r * r, ms)
    ss, sss = _corr(mr, s), _corr(mr, s * s)
    srs = _corr(r, s)

    # index of placement o in the full correlation is o + (search_dims - 1)
    idx = np.asarray(offsets_zyx, dtype=np.int64) + (np.array(s.shape) - 1)
    inside = np.all((idx >= 0) & (idx < np.array(n.shape)), axis=1)
    scores = np.full(len(idx), -np.inf)
    ii = tuple(idx[inside].T)
    cnt = np.rint(n[ii])
    with np.errstate(divide="ignore", invalid="ignore"):
        cov = srs[ii] - sr[ii] * ss[ii] / cnt
        var_r = srr[ii] - sr[ii] ** 2 / cnt
        var_s = sss[ii] - ss[ii] ** 2 / cnt
    tol = 1e-9 * cnt
    flat = (var_r <= tol) | (var_s <= tol)
    sc = np.where(flat, 0.0, cov / np.sqrt(np.where(flat, 1.0, var_r * var_s)))
    sc = np.where(cnt >= 1, sc, -np.inf)
    scores[inside] = sc
    return scores


def brute_force_translation(I_ref: Volume, I_search: Volume, range: int) -> np.ndarray:
    """Integer placement (xyz) of the search volume inside the reference maximizing NCC.

    Candidates are the centred placement plus every shift in
    ``[-range, range]^3``; ties go to the lexicographically smallest (x, y, z)
    shift. The returned offset ``o`` pairs search voxel ``j`` with reference
    voxel ``j + o``.
    """
    rng_ = int(range)
    if rng_ < 0:
        raise ValueError(f"range must be >= 0, got {range}")
    centre = (np.array(I_ref.dims) - np.array(I_search.dims)) // 2  # zyx
    steps = np.arange(-rng_, rng_ + 1)
    sx, sy, sz = np.meshgrid(steps, steps, steps, indexing="ij")  # x-major lexicographic order
    shifts_xyz = np.stack([sx.ravel(), sy.ravel(), sz.ravel()], axis=1)
    offsets_zyx = centre + shifts_xyz[:, ::-1]
    scores = ncc_offset_scores(I_ref.data, I_search.data, offsets_zyx)
    best = int(np.argmax(scores))  # first maximum == lexicographically smallest
    return offsets_zyx[best][::-1].astype(np.int64)


def offset_to_translation(offset_xyz, ref_dims, search_dims) -> np.ndarray:
    """Centred-frame displacement (xyz voxels) for a search placement ``offset``."""
    c_ref = (np.array(ref_dims[::-1], dtype=np.float64) - 1) / 2
    c_s = (np.array(search_dims[::-1], dtype=np.float64) - 1) / 2
    return (c_ref - c_s) - np.asarray(offset_xyz, dtype=np.float64)


def write_pair(pair: SyntheticPair, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_volume(pair.reference, d / "ref.qvol")
    save_volume(pair.search, d / "search.qvol")
    save_landmarks(pair.q, d / "q.csv")
    save_landmarks(pair.q_t, d / "q_t.csv")
    spacing_xyz = np.array(pair.reference.spacing[::-1])
    meta = {
        "spec": asdict(pair.spec),
        "true_shift": [float(v) for v in pair.true_shift],
        "translation_mm": [float(v) for v in pair.true_shift * spacing_xyz],
        "extraction_offset": [float(v) for v in pair.extraction_offset],
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return d


def random_specs(n: int, seed: int, max_shift: int = 8, **overrides) -> list[SyntheticPairSpec]:
    """``n`` pair specs with integer shifts uniform in ``[-max_shift, max_shift]^3``."""
    root = np.random.default_rng(seed)
    child_seeds = np.random.SeedSequence(seed).generate_state(n)
    specs = []
    for i in range(n):
        shift = root.integers(-max_shift, max_shift + 1, size=3).astype(float)
        specs.append(SyntheticPairSpec(true_shift=tuple(shift), seed=int(child_seeds[i]), **overrides))
    return specs


def write_dataset(out_dir, n: int, seed: int, max_shift: int = 8, **overrides) -> list[Path]:
    """Generate ``n`` pairs under ``out_dir/pairs/<id>/``."""
    root = Path(out_dir) / "pairs"
    paths = []
    for i, spec in enumerate(random_specs(n, seed, max_shift=max_shift, **overrides)):
        paths.append(write_pair(gen_pair(spec), root / f"{i:04d}"))
    return paths
