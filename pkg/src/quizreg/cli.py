"""Command-line entry point: ``quiz synth|train|eval|match|warp|plot-offsets``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("quizreg")


def _cmd_synth(args):
    from quizreg.synthetic import write_dataset

    paths = write_dataset(
        args.out,
        args.n,
        args.seed,
        max_shift=args.max_shift,
        side=args.side,
        crop_side=args.crop,
        n_blobs=args.n_blobs,
        noise_sigma=args.noise,
        modality_gamma=args.gamma,
    )
    print(f"wrote {len(paths)} pairs to {Path(args.out) / 'pairs'}")


def _cmd_train(args):
    from quizreg.training import TrainConfig, train

    overrides = {
        "lr": args.lr,
        "batch_size": args.batch_size,
        "alpha": args.alpha,
        "stage1_iters": args.stage1_iters,
        "stage2_iters": args.stage2_iters,
        "seed": args.seed,
        "checkpoint_every": args.checkpoint_every,
        "dataset_dir": args.dataset_dir,
        "out_dir": args.out_dir,
    }
    cfg = TrainConfig.from_json(args.config, **overrides)
    if not cfg.dataset_dir:
        raise ValueError("no dataset given (--dataset-dir or dataset_dir in the config file)")
    path = train(cfg)
    print(f"final checkpoint: {path}")


def _predictor(args):
    from quizreg import evaluation

    if args.predictor == "quiz":
        if not args.checkpoint:
            raise ValueError("--checkpoint is required for the quiz predictor")
        from quizreg.model import load_checkpoint

        model, _ = load_checkpoint(args.checkpoint)
        return evaluation.QuizPredictor(model, args.reset_rounds), model.config.input_size
    size = args.size
    if args.predictor == "zero":
        return evaluation.ZeroPredictor(), size
    if args.predictor == "perfect":
        return evaluation.PerfectPredictor(), size
    return evaluation.OraclePredictor(args.search_range), size


def _cmd_eval(args):
    from quizreg.evaluation import evaluate
    from quizreg.training import deterministic_mode

    predictor, size = _predictor(args)
    result = evaluate(predictor, args.dataset, size=size, timing=not (args.no_timing or deterministic_mode()))
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    agg = result["aggregate"]
    print(f"pairs: {len(result['pairs'])}  TRE(mm): {agg['tre_mm']['formatted']}  "
          f"rTRE: {agg['rtre']['formatted']}  offset(mm): {agg['offset_mm']['formatted']}")


def _cmd_match(args):
    import torch

    from quizreg.evaluation import QuizPredictor
    from quizreg.frames import displacements_to_search_points, predicted_search_points, prepare_pair
    from quizreg.model import load_checkpoint
    from quizreg.volume import LandmarkSet, load_landmarks, load_volume, save_landmarks

    model, _ = load_checkpoint(args.checkpoint)
    ref, search = load_volume(args.ref), load_volume(args.search)
    queries = load_landmarks(args.queries, dims=ref.dims)
    if len(queries) == 0:
        raise ValueError(f"{args.queries} contains no query points")
    predictor = QuizPredictor(model, args.reset_rounds)
    mp = prepare_pair(ref, search, model.config.input_size)
    disp = predictor.displacements(mp, queries.points)
    if args.rigid:
        t_mm = model.reduce_mean_displacement(torch.from_numpy(disp)).numpy() * mp.spacing_xyz
        pts = predicted_search_points(mp, queries.points, t_mm)
    else:
        pts = displacements_to_search_points(mp, queries.points, disp)
    save_landmarks(LandmarkSet(queries.names, pts), args.out)
    print(f"wrote {len(pts)} correspondences to {args.out}")


def _cmd_warp(args):
    from quizreg.geometry import warp_translate
    from quizreg.volume import load_volume, save_volume

    vol = load_volume(args.input)
    save_volume(warp_translate(vol, args.t), args.out)
    print(f"warped {args.input} by {tuple(args.t)} -> {args.out}")


def _cmd_plot_offsets(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from quizreg.evaluation import point_errors
    from quizreg.model import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    rows = point_errors(model, args.dataset, args.reset_rounds)
    prefix = Path(args.out)
    csv_path, svg_path = prefix.with_suffix(".csv"), prefix.with_suffix(".svg")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["pair_id", "name", "dx", "dy", "dz"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, **{k: f"{r[k]:.6g}" for k in ("dx", "dy", "dz")}})

    err = np.array([[r["dx"], r["dy"], r["dz"]] for r in rows])
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    for ax, (i, j) in zip(axes, [(0, 1), (0, 2), (1, 2)]):
        ax.scatter(err[:, i], err[:, j], s=8, alpha=0.6)
        ax.axhline(0, color="k", lw=0.5)
        ax.axvline(0, color="k", lw=0.5)
        ax.set_xlabel(f"error {'xyz'[i]} (mm)")
        ax.set_ylabel(f"error {'xyz'[j]} (mm)")
        ax.set_aspect("equal", adjustable="datalim")
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
    print(f"wrote {len(rows)} point errors to {csv_path} and {svg_path}")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return value


def _add_rounds(p):
    p.add_argument("--reset-rounds", type=_positive_int, default=2,
                   help="position-reset rounds at inference (1 = single forward pass)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quiz", description="Query-point matching for volume pre-alignment.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--crop", type=int, default=48)
    p.add_argument("--max-shift", type=int, default=8)
    p.add_argument("--n-blobs", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="run two-stage training")
    p.add_argument("--config", help="JSON file mirroring TrainConfig")
    p.add_argument("--dataset-dir", "--dataset_dir", dest="dataset_dir")
    p.add_argument("--out-dir", "--out_dir", dest="out_dir")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", "--batch_size", dest="batch_size", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--stage1-iters", "--stage1_iters", dest="stage1_iters", type=int)
    p.add_argument("--stage2-iters", "--stage2_iters", dest="stage2_iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", "--checkpoint_every", dest="checkpoint_every", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a predictor on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictor", choices=["quiz", "zero", "perfect", "oracle"], default="quiz")
    p.add_argument("--size", type=int, default=64, help="model grid side for non-network predictors")
    p.add_argument("--search-range", type=int, default=8)
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--no-timing", action="store_true", help="omit wall-clock timings from the report")
    _add_rounds(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("match", help="predict correspondences for query points")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--search", required=True)
    p.add_argument("--queries", required=True, help="name,x,y,z CSV in reference voxel coordinates")
    p.add_argument("--out", required=True)
    p.add_argument("--rigid", action="store_true", help="answer with the mean translation instead of per-point offsets")
    _add_rounds(p)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("warp", help="translate a QVOL volume")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--t", type=float, nargs=3, required=True, metavar=("TX", "TY", "TZ"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_warp)

    p = sub.add_parser("plot-offsets", help="per-axis point prediction errors as CSV + SVG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output prefix; writes <prefix>.csv and <prefix>.svg")
    _add_rounds(p)
    p.set_defaults(func=_cmd_plot_offsets)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 1
        print(f"quiz {args.command}: error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
