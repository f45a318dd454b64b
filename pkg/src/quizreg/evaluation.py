"""Per-pair evaluation of translation predictors on a dataset directory."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from quizreg.frames import ModelPair, displacements_to_search_points, prepare_pair, predicted_search_points
from quizreg.losses import MetricsReport, rtre, tre
from quizreg.model import QuizNet
from quizreg.synthetic import brute_force_translation, offset_to_translation
from quizreg.training import pair_dirs
from quizreg.volume import LandmarkSet, Volume, load_landmarks, load_volume


@dataclass
class EvalPair:
    pair_id: str
    reference: Volume
    search: Volume
    q: LandmarkSet
    q_t: LandmarkSet
    translation_mm: np.ndarray | None  # ground truth in the centred frame, xyz


def load_eval_pair(d: Path) -> EvalPair:
    ref, search = load_volume(d / "ref.qvol"), load_volume(d / "search.qvol")
    q = load_landmarks(d / "q.csv", dims=ref.dims)
    q_t = load_landmarks(d / "q_t.csv", dims=search.dims)
    truth = None
    meta = d / "meta.json"
    if meta.is_file():
        info = json.loads(meta.read_text(encoding="utf-8"))
        if "translation_mm" in info:
            truth = np.asarray(info["translation_mm"], dtype=np.float64)
    return EvalPair(d.name, ref, search, q, q_t, truth)


DEFAULT_RESET_ROUNDS = 2


class QuizPredictor:
    """Mean predicted displacement of the landmark queries, as a centred-frame translation.

    ``rounds`` > 1 re-queries the model after resetting the search by the
    translation found so far (see ``QuizNet.register``).
    """

    def __init__(self, model: QuizNet, rounds: int = DEFAULT_RESET_ROUNDS):
        if rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {rounds}")
        self.model = model.eval()
        self.size = model.config.input_size
        self.rounds = rounds

    def displacements(self, mp: ModelPair, q_native) -> np.ndarray:
        q = torch.from_numpy(mp.ref_map.to_model(q_native)).float()[None]
        with torch.no_grad():
            d, _ = self.model.register(mp.reference[None], mp.search[None], q, self.rounds)
        return d[0].double().numpy()

    def __call__(self, pair: EvalPair, mp: ModelPair) -> np.ndarray:
        d = self.displacements(mp, pair.q.points)
        return self.model.reduce_mean_displacement(torch.from_numpy(d)).numpy() * mp.spacing_xyz


class ZeroPredictor:
    def __call__(self, pair, mp):
        return np.zeros(3)


class PerfectPredictor:
    def __call__(self, pair, mp):
        if pair.translation_mm is None:
            raise ValueError(f"pair {pair.pair_id} has no ground truth")
        return pair.translation_mm.copy()


class OraclePredictor:
    """Exhaustive NCC search; assumes both volumes share one isotropic spacing."""

    def __init__(self, search_range: int = 8):
        self.search_range = search_range

    def __call__(self, pair, mp):
        o = brute_force_translation(pair.reference, pair.search, self.search_range)
        t = offset_to_translation(o, pair.reference.dims, pair.search.dims)
        return t * np.array(pair.reference.spacing[::-1])


def evaluate_pair(predictor, pair: EvalPair, size: int, timing: bool = True) -> tuple[MetricsReport, np.ndarray]:
    start = time.perf_counter()
    mp = prepare_pair(pair.reference, pair.search, size)
    t_pred = np.asarray(predictor(pair, mp), dtype=np.float64)
    elapsed = time.perf_counter() - start

    pred = predicted_search_points(mp, pair.q.points, t_pred)
    sp = np.array(pair.search.spacing[::-1])
    tre_mm = tre(pred * sp, pair.q_t.points * sp)
    offset = axes = None
    if pair.translation_mm is not None:
        err = t_pred - pair.translation_mm
        offset, axes = float(np.linalg.norm(err)), [float(v) for v in err]
    report = MetricsReport(
        tre_mm=tre_mm,
        rtre=rtre(tre_mm, pair.reference.extent_mm),
        offset_mm=offset,
        seconds_per_pair=float(elapsed) if timing else None,
        offset_axes_mm=axes,
    )
    return report, t_pred


def _summary(values) -> dict:
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if len(vals) == 0:
        return {"mean": None, "std": None, "formatted": None}
    m, s = float(vals.mean()), float(vals.std())
    return {"mean": m, "std": s, "formatted": f"{m:.3f}({s:.3f})"}


def evaluate(predictor, dataset_dir, size: int = 64, timing: bool = True) -> dict:
    """Score ``predictor`` on every pair; returns per-pair reports and aggregates.

    Read-only with respect to ``dataset_dir``.
    """
    per_pair = []
    for d in pair_dirs(dataset_dir):
        pair = load_eval_pair(d)
        report, t_pred = evaluate_pair(predictor, pair, size, timing)
        entry = {"pair_id": pair.pair_id, **report.to_dict(), "translation_mm": [float(v) for v in t_pred]}
        per_pair.append(entry)
    aggregate = {
        key: _summary(p[key] for p in per_pair)
        for key in ("tre_mm", "rtre", "offset_mm", "seconds_per_pair")
    }
    return {"pairs": per_pair, "aggregate": aggregate}


def point_errors(model: QuizNet, dataset_dir, rounds: int = DEFAULT_RESET_ROUNDS) -> list[dict]:
    """Per-landmark prediction error (mm, xyz) of the quizzer's point answers."""
    predictor = QuizPredictor(model, rounds)
    rows = []
    for d in pair_dirs(dataset_dir):
        pair = load_eval_pair(d)
        mp = prepare_pair(pair.reference, pair.search, predictor.size)
        disp = predictor.displacements(mp, pair.q.points)
        pred = displacements_to_search_points(mp, pair.q.points, disp)
        err = (pred - pair.q_t.points) * np.array(pair.search.spacing[::-1])
        for name, e in zip(pair.q.names, err):
            rows.append({"pair_id": pair.pair_id, "name": name, "dx": e[0], "dy": e[1], "dz": e[2]})
    return rows
