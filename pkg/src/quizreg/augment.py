"""Landmark-consistent augmentation: translation, scaling, flips and axis swaps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from quizreg.geometry import transform_landmarks, transform_volume
from quizreg.volume import LandmarkSet, Volume

KINDS = ("translate", "scale", "flip", "axis_swap")
SCALE_RANGE = (0.8, 1.25)
MAX_SHIFT_FRACTION = 0.25


class AugmentError(ValueError):
    pass


@dataclass
class AugmentSpec:
    """One spatial augmentation.

    ``params`` per kind: ``translate`` -> ``shift`` (xyz voxels),
    ``scale`` -> ``factor`` about the volume centre, ``flip`` -> ``axis``
    (0=x, 1=y, 2=z), ``axis_swap`` -> ``perm`` over the xyz axes.
    """

    kind: str
    params: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AugmentError(f"unknown augmentation kind {self.kind!r}; expected one of {KINDS}")
        p = self.params
        if self.kind == "translate":
            shift = np.asarray(p.get("shift", (0, 0, 0)), dtype=np.float64)
            if shift.shape != (3,) or not np.isfinite(shift).all():
                raise AugmentError(f"shift must be 3 finite values, got {p.get('shift')}")
            self.params = {"shift": [float(s) for s in shift]}
        elif self.kind == "scale":
            factor = float(p.get("factor", 1.0))
            if not SCALE_RANGE[0] <= factor <= SCALE_RANGE[1]:
                raise AugmentError(f"scale factor {factor} outside {SCALE_RANGE}")
            self.params = {"factor": factor}
        elif self.kind == "flip":
            axis = int(p.get("axis", 0))
            if axis not in (0, 1, 2):
                raise AugmentError(f"flip axis must be 0, 1 or 2, got {axis}")
            self.params = {"axis": axis}
        else:
            perm = [int(a) for a in p.get("perm", (0, 1, 2))]
            if sorted(perm) != [0, 1, 2]:
                raise AugmentError(f"perm must be a permutation of (0, 1, 2), got {perm}")
            self.params = {"perm": perm}

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls("translate", {"shift": (0.0, 0.0, 0.0)})

    @property
    def is_identity(self) -> bool:
        p = self.params
        return (
            (self.kind == "translate" and not any(p["shift"]))
            or (self.kind == "scale" and p["factor"] == 1.0)
            or (self.kind == "axis_swap" and p["perm"] == [0, 1, 2])
        )

    def check_shift(self, dims) -> None:
        if self.kind != "translate":
            return
        extent = np.array(dims[::-1], dtype=np.float64)
        if np.any(np.abs(self.params["shift"]) > MAX_SHIFT_FRACTION * extent):
            raise AugmentError(
                f"shift {self.params['shift']} would leave less than half of a {tuple(dims)} volume in frame"
            )

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "params": self.params, "seed": self.seed})

    @classmethod
    def from_json(cls, text: str) -> "AugmentSpec":
        d = json.loads(text)
        return cls(d["kind"], d.get("params", {}), d.get("seed"))


def sample_spec(rng: np.random.Generator, extent: int = 48, seed: int | None = None) -> AugmentSpec:
    """Draw one augmentation uniformly over kinds.

    Integer shifts are bounded by a quarter of ``extent`` (the smallest
    volume side the spec will be applied to) so that flips, swaps and
    shifts all transport exactly.
    """
    kind = KINDS[int(rng.integers(len(KINDS)))]
    if kind == "translate":
        bound = int(MAX_SHIFT_FRACTION * extent)
        params = {"shift": rng.integers(-bound, bound + 1, size=3).astype(float).tolist()}
    elif kind == "scale":
        params = {"factor": float(rng.uniform(*SCALE_RANGE))}
    elif kind == "flip":
        params = {"axis": int(rng.integers(3))}
    else:
        params = {"perm": rng.permutation(3).tolist()}
    return AugmentSpec(kind, params, seed)


def _in_frame(pts: np.ndarray, dims) -> np.ndarray:
    upper = np.array(dims[::-1], dtype=np.float64) - 1
    return np.all((pts >= 0) & (pts <= upper), axis=1)


def augment_pair(I: Volume, I_s: Volume, q, q_t, spec: AugmentSpec):
    """Apply one spatial augmentation to both volumes and carry the landmarks along.

    Each volume is transformed about its own grid (own centre, own extent).
    Pairs where either point leaves its frame are dropped from both sets.
    ``q``/``q_t`` may be arrays or :class:`LandmarkSet` objects; the output
    landmarks have the same type as the input.
    """
    sets = isinstance(q, LandmarkSet)
    q_arr = q.points if sets else np.asarray(q, dtype=np.float64).reshape(-1, 3)
    qt_arr = q_t.points if sets else np.asarray(q_t, dtype=np.float64).reshape(-1, 3)
    if len(q_arr) != len(qt_arr):
        raise AugmentError(f"landmark sets differ in length: {len(q_arr)} vs {len(qt_arr)}")
    if sets and q.names != q_t.names:
        raise AugmentError("paired landmark sets must share names in the same order")
    if spec.is_identity:
        return I, I_s, q, q_t
    spec.check_shift(I_s.dims)
    spec.check_shift(I.dims)

    out_I = transform_volume(spec, I)
    out_S = transform_volume(spec, I_s)
    new_q = transform_landmarks(spec, q_arr, I.dims)
    new_qt = transform_landmarks(spec, qt_arr, I_s.dims)
    keep = _in_frame(new_q, out_I.dims) & _in_frame(new_qt, out_S.dims)
    if not keep.any():
        raise AugmentError(f"augmentation {spec.kind} {spec.params} leaves no landmark pair in frame")
    if sets:
        names = [n for n, k in zip(q.names, keep) if k]
        return out_I, out_S, LandmarkSet(names, new_q[keep]), LandmarkSet(names, new_qt[keep])
    return out_I, out_S, new_q[keep], new_qt[keep]
