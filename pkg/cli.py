"""
cli.py

Command-line entry point.

    python cli.py train   --config F --data DIR --out DIR [--seed N] [--resume CKPT]
    python cli.py eval    --checkpoint F --pairs F [--data DIR] [--far-levels ...] [--degrade F]
    python cli.py report  --checkpoint F
    python cli.py sample  --data DIR --out DIR --num-ids N --min K --max M --seed S
    python cli.py synth   --out DIR --ids N --per-id M --size S --seed X [--pairs P]
    python cli.py select  --run DIR [--top-n 2] [--val NAME ...]
    python cli.py compare --run A --run B

Exit codes: 0 success, 2 configuration error, 3 data error, 1 any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from checkpoint import load_checkpoint
from config import env_log_level, load_train_config
from errors import ConfigError, DataError, LwfrError, SerUndefined
from face_data import (
    SamplerConfig,
    load_batch,
    load_dataset_dir,
    make_pairs,
    sample_subset,
    synth_dataset,
    write_dataset_dir,
    write_pair_file,
)
from face_eval import (
    FAR_LEVELS,
    evaluate_pairs,
    identification_split,
    rank_k,
    read_subgroup_file,
    subgroup_stats,
    subgroup_verification,
    tar_at_far,
    verify_10fold,
)
from model_zoo import embed
from trainer import compare_runs, load_val_set, report, run_checkpoints, select_best, train_run
from utils import format_count, format_flops

logger = logging.getLogger("lwfr")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = load_train_config(args.config, {"train.seed": args.seed, "train.checkpoint_dir": args.out})
    dataset = load_dataset_dir(args.data)
    size = cfg.arch.input_size[0]
    val_sets = [load_val_set(name, path, size, dataset) for name, path in sorted(cfg.val_pairs.items())]
    logger.info(
        "training %s on %d images / %d identities for %d epochs",
        cfg.optim_kind, len(dataset), dataset.num_identities, cfg.epochs,
    )
    result = train_run(cfg, dataset, val_sets, resume=args.resume)
    summary = {
        "initial_loss": result.metrics[0]["train_loss"] if result.metrics else None,
        "final_loss": result.metrics[-1]["train_loss"] if result.metrics else None,
        "checkpoints": result.checkpoints,
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    rep = report(args.checkpoint)
    model, _ = load_checkpoint(args.checkpoint)
    size = model.arch.input_size[0]
    dataset = load_dataset_dir(args.data) if args.data else None
    val = load_val_set(Path(args.pairs).stem, args.pairs, size, dataset, degrade=args.degrade)

    scores = evaluate_pairs(model, val.images, val.pairs)
    labels = val.pairs.labels
    rep.accuracy_mean, rep.accuracy_std = verify_10fold(scores, labels, val.pairs.fold_count)
    rep.tar_at_far = tar_at_far(scores[labels], scores[~labels], args.far_levels, skip_insufficient=True)

    per_group = {}
    if args.subgroups:
        per_group = read_subgroup_file(args.subgroups)
    elif dataset is not None and dataset.tags:
        known = dataset.by_relpath()
        tags = [
            dataset.records[known[val.paths[a]]].subgroup if val.paths[a] in known else None
            for a, _, _ in val.pairs.pairs
        ]
        per_group = subgroup_verification(scores, labels, tags, val.pairs.fold_count)
    if len(per_group) >= 2:
        rep.subgroup_accuracies = per_group
        try:
            rep.subgroup_mean, rep.subgroup_std, rep.ser = subgroup_stats(per_group)
        except SerUndefined:
            rep.subgroup_mean = float(np.mean(list(per_group.values())))
            rep.subgroup_std = float(np.std(list(per_group.values())))
            logger.warning("SER undefined: best subgroup has zero error")

    if dataset is not None:
        g_idx, g_lab, p_idx, p_lab = identification_split(dataset)
        if p_idx:
            gallery = embed(model, load_batch(dataset, g_idx, size))
            probes = embed(model, load_batch(dataset, p_idx, size))
            rep.rank1 = rank_k(probes, p_lab, gallery, g_lab, 1)
            rep.rank5 = rank_k(probes, p_lab, gallery, g_lab, 5)
    print(rep.to_text())
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    rep = report(args.checkpoint)
    logger.info(
        "%s params (%s), %s, %.2f MB", format_count(rep.params), rep.arch.get("param_category"),
        format_flops(rep.flops), rep.size_mb,
    )
    print(rep.to_text())
    return EXIT_OK


def _cmd_sample(args: argparse.Namespace) -> int:
    ds = load_dataset_dir(args.data)
    subset = sample_subset(ds, SamplerConfig(args.num_ids, args.min, args.max, args.seed))
    write_dataset_dir(subset, args.out)
    logger.info("wrote %d images of %d identities to %s", len(subset), subset.num_identities, args.out)
    return EXIT_OK


def _cmd_synth(args: argparse.Namespace) -> int:
    ds = synth_dataset(args.ids, args.per_id, args.size, args.noise, args.seed)
    root = write_dataset_dir(ds, args.out)
    if args.pairs:
        pairs = make_pairs(ds, args.pairs, args.seed)
        write_pair_file(root / "pairs.txt", pairs, [r.relpath for r in ds.records])
    logger.info("wrote %d synthetic images of %d identities to %s", len(ds), ds.num_identities, root)
    return EXIT_OK


def _cmd_select(args: argparse.Namespace) -> int:
    scores = run_checkpoints(args.run)
    if not scores:
        logger.warning("no checkpoints in %s", args.run)
        print("[]")
        return EXIT_OK
    val_names = args.val or sorted(scores[-1].accuracies)
    best = select_best(scores, val_names, args.top_n)
    print(json.dumps(
        [{"checkpoint": b.path, "epoch": b.epoch, "mean_accuracy": b.mean_accuracy, **b.accuracies} for b in best],
        indent=2,
    ))
    return EXIT_OK


def _cmd_compare(args: argparse.Namespace) -> int:
    df = compare_runs(args.run)
    print(df.to_string(index=False))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lwfr", description="Lightweight face-recognition training and benchmarking")
    p.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ... (default: $LWFR_LOG_LEVEL or INFO)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a backbone on an identity dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="verification / TAR@FAR / rank-k on a pair file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--pairs", required=True)
    e.add_argument("--data", default=None, help="dataset the pair paths refer to")
    e.add_argument("--far-levels", type=float, nargs="+", default=list(FAR_LEVELS))
    e.add_argument("--degrade", type=float, default=None, help="downscale factor for the second image of each pair")
    e.add_argument("--subgroups", default=None, help="tag<TAB>accuracy file for bias statistics")
    e.set_defaults(func=_cmd_eval)

    r = sub.add_parser("report", help="static model statistics of a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.set_defaults(func=_cmd_report)

    s = sub.add_parser("sample", help="identity-subset sampling")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--num-ids", type=int, required=True)
    s.add_argument("--min", type=int, default=30)
    s.add_argument("--max", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_sample)

    y = sub.add_parser("synth", help="write a synthetic identity dataset")
    y.add_argument("--out", required=True)
    y.add_argument("--ids", type=int, required=True)
    y.add_argument("--per-id", type=int, required=True)
    y.add_argument("--size", type=int, default=112)
    y.add_argument("--noise", type=float, default=0.05)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--pairs", type=int, default=0, help="also write pairs.txt with this many pairs")
    y.set_defaults(func=_cmd_synth)

    b = sub.add_parser("select", help="rank a run's checkpoints by mean validation accuracy")
    b.add_argument("--run", required=True)
    b.add_argument("--top-n", type=int, default=2)
    b.add_argument("--val", nargs="+", default=None)
    b.set_defaults(func=_cmd_select)

    c = sub.add_parser("compare", help="tabulate several runs' metrics logs")
    c.add_argument("--run", action="append", required=True)
    c.set_defaults(func=_cmd_compare)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = (args.log_level or env_log_level()).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except LwfrError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
