"""Two-stage training: quizzer with the pair loss, then refinement through the position resetter."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from quizreg.augment import AugmentError, AugmentSpec, augment_pair, sample_spec
from quizreg.frames import ModelPair, prepare_pair
from quizreg.losses import DEFAULT_ALPHA, l_pair, l_trans, total_loss
from quizreg.model import ModelConfig, QuizNet, load_checkpoint, save_checkpoint
from quizreg.volume import Volume, load_landmarks, load_volume

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 2
    alpha: float = DEFAULT_ALPHA
    stage1_iters: int = 1400
    stage2_iters: int = 600
    seed: int = 0
    checkpoint_every: int = 500
    dataset_dir: str = ""
    out_dir: str = "run"
    n_queries: int = 8
    augment: bool = True
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.n_queries < 1:
            raise ValueError(f"n_queries must be >= 1, got {self.n_queries}")

    @classmethod
    def from_json(cls, path, **overrides) -> "TrainConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    @staticmethod
    def split_iters(total: int, stage1_fraction: float = 0.7) -> tuple[int, int]:
        s1 = int(round(total * stage1_fraction))
        return s1, total - s1


def deterministic_mode() -> bool:
    return os.environ.get("QUIZ_DETERMINISTIC", "") == "1"


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    if deterministic_mode():
        torch.use_deterministic_algorithms(True)


@dataclass
class PairRecord:
    """One dataset pair placed on the model grid."""

    pair_id: str
    reference: Volume
    search: Volume
    q: np.ndarray  # model-frame xyz
    q_t: np.ndarray


def pair_dirs(dataset_dir) -> list[Path]:
    root = Path(dataset_dir)
    pairs = root / "pairs" if (root / "pairs").is_dir() else root
    if not pairs.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {dataset_dir}")
    dirs = sorted(p for p in pairs.iterdir() if (p / "ref.qvol").is_file())
    if not dirs:
        raise FileNotFoundError(f"no pairs found under {pairs}")
    return dirs


def load_records(dataset_dir, size: int) -> list[PairRecord]:
    records = []
    for d in pair_dirs(dataset_dir):
        ref, search = load_volume(d / "ref.qvol"), load_volume(d / "search.qvol")
        q = load_landmarks(d / "q.csv", dims=ref.dims)
        q_t = load_landmarks(d / "q_t.csv", dims=search.dims)
        if q.names != q_t.names:
            raise TrainingError(f"{d}: q.csv and q_t.csv list different landmarks")
        mp = prepare_pair(ref, search, size)
        records.append(
            PairRecord(
                pair_id=d.name,
                reference=Volume(mp.reference[0].numpy(), tuple(mp.spacing_xyz[::-1])),
                search=Volume(mp.search[0].numpy(), tuple(mp.spacing_xyz[::-1])),
                q=mp.ref_map.to_model(q.points),
                q_t=mp.search_map.to_model(q_t.points),
            )
        )
    return records


class BatchSampler:
    """Draws pairs uniformly with replacement, one augmentation per pair per step."""

    def __init__(self, records, cfg: TrainConfig, rng: np.random.Generator):
        self.records = records
        self.cfg = cfg
        self.rng = rng

    def _item(self, rec: PairRecord, augment: bool):
        ref, search, q, q_t = rec.reference, rec.search, rec.q, rec.q_t
        if augment:
            spec = sample_spec(self.rng, extent=min(search.dims))
            try:
                ref, search, q, q_t = augment_pair(ref, search, q, q_t, spec)
            except AugmentError:
                pass
        idx = self.rng.integers(len(q), size=self.cfg.n_queries)
        return ref.data, search.data, q[idx], q_t[idx]

    def sample(self, augment=None):
        augment = self.cfg.augment if augment is None else augment
        picks = self.rng.integers(len(self.records), size=self.cfg.batch_size)
        items = [self._item(self.records[i], augment) for i in picks]
        return self._stack(items), [self.records[i].pair_id for i in picks]

    @staticmethod
    def _stack(items):
        ref = torch.from_numpy(np.stack([it[0] for it in items]))[:, None]
        search = torch.from_numpy(np.stack([it[1] for it in items]))[:, None]
        q = torch.from_numpy(np.stack([it[2] for it in items])).float()
        q_t = torch.from_numpy(np.stack([it[3] for it in items])).float()
        return ref, search, q, q_t


def _probe_batch(records, cfg: TrainConfig):
    sampler = BatchSampler(records, cfg, np.random.default_rng([cfg.seed, 1]))
    return sampler.sample(augment=False)[0]


def _write_log(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


def _check_finite(value: torch.Tensor, it: int, ids, batch, out_dir: Path) -> None:
    if torch.isfinite(value).all():
        return
    dump = out_dir / f"nonfinite_iter{it}.pt"
    torch.save({"iter": it, "pair_ids": ids, "batch": batch}, dump)
    raise TrainingError(f"non-finite loss at iteration {it} on pairs {ids}; batch dumped to {dump}")


def _run_stage(model, records, cfg: TrainConfig, stage: int, out_dir: Path):
    iters = cfg.stage1_iters if stage == 1 else cfg.stage2_iters
    rng = np.random.default_rng([cfg.seed, stage + 10])
    sampler = BatchSampler(records, cfg, rng)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    probe = _probe_batch(records, cfg)
    rows = []
    model.train()
    for it in range(iters):
        batch, ids = sampler.sample()
        ref, search, q, q_t = batch
        if stage == 1:
            d, _ = model(ref, search, q)
            loss = l_pair(d, q, q_t)
            row = (it, float(loss.detach()))
        else:
            d, warped = model(ref, search, q, reset=True)
            lp = l_pair(d, q, q_t)
            lt = l_trans(ref, warped)
            loss = lp + cfg.alpha * lt
            rep = total_loss(float(lp.detach()), float(lt.detach()), cfg.alpha)
            row = (it, rep.l_pair, rep.l_trans, float(loss.detach()))
        _check_finite(loss, it, ids, batch, out_dir)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rows.append(row)
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"stage{stage}_iter{it + 1}.ckpt", {"stage": stage, "iter": it + 1})
        if it % 100 == 99:
            recent = np.mean([r[-1] for r in rows[-100:]])
            log.info("stage %d iter %d mean loss (last 100) %.4f", stage, it + 1, recent)

    header = ["iter", "l_pair"] if stage == 1 else ["iter", "l_pair", "l_trans", "total"]
    _write_log(out_dir / f"stage{stage}_loss.csv", header, rows)
    probe_loss = probe_l_pair(model, probe)
    return rows, probe_loss


def probe_l_pair(model: QuizNet, batch) -> float:
    ref, search, q, q_t = batch
    was_training = model.training
    model.eval()
    with torch.no_grad():
        d, _ = model(ref, search, q)
    model.train(was_training)
    return float(l_pair(d, q, q_t))


def _prepare(cfg: TrainConfig, out_dir: Path, model: QuizNet | None):
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed)
    if model is None:
        model = QuizNet(ModelConfig(**cfg.model))
    records = load_records(cfg.dataset_dir, model.config.input_size)
    (out_dir / "train_config.json").write_text(json.dumps(asdict(cfg), indent=2), encoding="utf-8")
    return model, records


def train_stage1(cfg: TrainConfig, model: QuizNet | None = None, records=None) -> Path:
    """Train encoder and quizzer on the pair loss alone; returns the final checkpoint path."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if records is None:
        model, records = _prepare(cfg, out_dir, model)
    elif model is None:
        seed_everything(cfg.seed)
        model = QuizNet(ModelConfig(**cfg.model))
    probe0 = probe_l_pair(model, _probe_batch(records, cfg))
    _, probe1 = _run_stage(model, records, cfg, 1, out_dir)
    path = out_dir / "stage1.ckpt"
    save_checkpoint(model, path, {"stage": 1, "iters": cfg.stage1_iters, "probe_l_pair": [probe0, probe1]})
    log.info("stage 1 probe l_pair %.4f -> %.4f", probe0, probe1)
    return path


def train_stage2(cfg: TrainConfig, checkpoint, records=None) -> Path:
    """Refine a stage-1 checkpoint on the total loss with the resetter in the graph."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed + 1)
    model, _ = load_checkpoint(checkpoint)
    if records is None:
        records = load_records(cfg.dataset_dir, model.config.input_size)
    _run_stage(model, records, cfg, 2, out_dir)
    path = out_dir / "final.ckpt"
    save_checkpoint(model, path, {"stage": 2, "iters": cfg.stage2_iters, "alpha": cfg.alpha})
    return path


def train(cfg: TrainConfig) -> Path:
    out_dir = Path(cfg.out_dir)
    model, records = _prepare(cfg, out_dir, None)
    ckpt = train_stage1(cfg, model, records)
    return train_stage2(cfg, ckpt, records)
