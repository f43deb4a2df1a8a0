"""
trainer.py

Training orchestration and run bookkeeping.

- TrainConfig bundles architecture, optimizer, schedule, loss and run settings.
- train_run() trains a backbone plus margin classifier head, evaluating the
  validation pair sets and writing a checkpoint at every checkpoint epoch, and
  appends one JSON object per epoch to ``metrics.jsonl``.
- select_best() ranks checkpoints by mean validation accuracy.
- report() summarizes a checkpoint's static costs as an EvalReport.
- read_metrics() / compare_runs() tabulate metrics logs with pandas.
"""

from __future__ import annotations

import glob
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from checkpoint import HEAD_KEY, TrainState, load_checkpoint, read_metadata, save_checkpoint
from errors import (
    DivergedLoss,
    InsufficientIdentities,
    InvalidConfig,
    IoFailure,
    MissingMetrics,
)
from face_data import (
    IdentityDataset,
    decode_image,
    degrade_resolution,
    load_batch,
    preprocess,
    read_pair_file,
)
from face_eval import EvalReport, PairList, evaluate_pairs, verify_10fold
from margin_loss import ClassifierHead, MarginConfig, arcface_loss
from model_zoo import (
    PUBLISHED_WIDE_PARAMS,
    ArchConfig,
    Model,
    build_model,
    count_flops,
    count_params,
    model_size_mb,
    param_category,
)
from nn_core import TRAIN
from optim import OPTIM_KINDS, LrSchedule, SamConfig, SgdConfig, init_velocity, lr_at, sam_step, sgd_step

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_GLOB = "ckpt_epoch*.lwfr"
VAL_PREFIX = "val_"
HEAD_SEED_OFFSET = 7919

PathLike = Union[str, os.PathLike]


@dataclass
class TrainConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    optim_kind: str = "sam"
    sgd: SgdConfig = field(default_factory=SgdConfig)
    sam: SamConfig = field(default_factory=SamConfig)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    loss: MarginConfig = field(default_factory=MarginConfig)
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    # name -> pair file; resolved by load_val_set()
    val_pairs: Dict[str, str] = field(default_factory=dict)
    checkpoint_dir: Optional[str] = None
    # Completed-epoch counts; None means every 10th, 20, 50 and the last.
    checkpoint_epochs: Optional[List[int]] = None
    save_optimizer_state: bool = True

    def validate(self) -> None:
        if self.optim_kind not in OPTIM_KINDS:
            raise InvalidConfig(f"optim.kind must be one of {OPTIM_KINDS}, got {self.optim_kind!r}")
        self.sgd.validate()
        self.sam.validate()
        self.schedule.validate()
        self.loss.validate()
        if self.batch_size < 2:
            raise InvalidConfig(f"train.batch_size must be >= 2, got {self.batch_size}")
        if not 1 <= self.epochs <= self.schedule.total_epochs:
            raise InvalidConfig(f"train.epochs must lie in [1, {self.schedule.total_epochs}], got {self.epochs}")
        for e in self.checkpoint_epochs or []:
            if not 1 <= e <= self.epochs:
                raise InvalidConfig(f"checkpoint epoch {e} outside [1, {self.epochs}]")

    def resolved_checkpoint_epochs(self) -> List[int]:
        if self.checkpoint_epochs is not None:
            return sorted(set(self.checkpoint_epochs))
        marks = set(range(10, self.epochs + 1, 10)) | {e for e in self.schedule.stage_boundaries if e <= self.epochs}
        return sorted(marks | {self.epochs})

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "optim_kind": self.optim_kind,
            "sgd": asdict(self.sgd),
            "sam": asdict(self.sam),
            "schedule": asdict(self.schedule),
            "loss": asdict(self.loss),
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "val_pairs": dict(self.val_pairs),
            "checkpoint_epochs": self.resolved_checkpoint_epochs(),
            "save_optimizer_state": self.save_optimizer_state,
        }


@dataclass
class ValSet:
    """Preprocessed images plus the pairs that index into them."""

    name: str
    images: np.ndarray
    pairs: PairList
    paths: List[str] = field(default_factory=list)


@dataclass
class TrainResult:
    model: Model
    head: ClassifierHead
    metrics: List[Dict[str, float]]
    checkpoints: List[str]


def load_val_set(name: str, pair_path: PathLike, size: int, dataset: Optional[IdentityDataset] = None,
                 degrade: Optional[float] = None) -> ValSet:
    """Resolve a pair file: dataset-relative paths first, then paths relative to the pair file.

    With ``degrade`` the second image of every pair is degraded before
    preprocessing (cross-quality verification).
    """
    pairs, paths = read_pair_file(pair_path)
    known = dataset.by_relpath() if dataset is not None else {}
    base = Path(pair_path).parent
    raw = []
    for p in paths:
        if p in known:
            raw.append(dataset.records[known[p]].load())
        else:
            raw.append(decode_image(p if os.path.isabs(p) else base / p))
    if degrade is not None:
        second = {b for _, b, _ in pairs.pairs}
        raw = [degrade_resolution(img, degrade) if i in second else img for i, img in enumerate(raw)]
    images = np.stack([preprocess(img, size) for img in raw])
    return ValSet(name, images, pairs, paths)


def _class_labels(ds: IdentityDataset) -> np.ndarray:
    dense = {ident: k for k, ident in enumerate(ds.identities)}
    return np.array([dense[r.identity_id] for r in ds.records], dtype=np.int64)


def _write_metrics(path: Path, rows: Sequence[Mapping[str, float]], mode: str) -> None:
    try:
        with open(path, mode, encoding="utf-8", newline="\n") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write metrics log {path}: {exc}") from exc


def validation_accuracy(model: Model, val: ValSet) -> float:
    scores = evaluate_pairs(model, val.images, val.pairs)
    return verify_10fold(scores, val.pairs.labels, val.pairs.fold_count)[0]


def train_run(
    cfg: TrainConfig,
    dataset: IdentityDataset,
    val_sets: Sequence[ValSet] = (),
    resume: Optional[PathLike] = None,
) -> TrainResult:
    """Train for epochs [start, cfg.epochs); start is 0 or the resumed checkpoint's epoch."""
    cfg.validate()
    if dataset.num_identities < 2:
        raise InsufficientIdentities(f"training needs >= 2 identities, got {dataset.num_identities}")

    h, w = cfg.arch.input_size
    if h != w:
        raise InvalidConfig(f"training expects square inputs, got {h}x{w}")
    images = load_batch(dataset, range(len(dataset)), h)
    labels = _class_labels(dataset)
    n = len(dataset)

    start_epoch = 0
    metrics: List[Dict[str, float]] = []
    velocity = None
    if resume is not None:
        model, state = load_checkpoint(resume)
        if state.head is None:
            raise InvalidConfig(f"checkpoint {resume} carries no classifier head; cannot resume")
        head = state.head
        start_epoch, metrics, velocity = state.epoch, list(state.metrics), state.velocity
        if velocity is None:
            logger.warning("checkpoint %s has no optimizer state; momentum restarts at zero", resume)
        logger.info("resuming from %s at epoch %d", resume, start_epoch)
    else:
        model = build_model(cfg.arch, seed=cfg.seed)
        head = ClassifierHead.create(
            dataset.num_identities, cfg.arch.embedding_dim, np.random.default_rng([cfg.seed, HEAD_SEED_OFFSET])
        )
    if head.num_classes != dataset.num_identities:
        raise InvalidConfig(f"head has {head.num_classes} classes, dataset {dataset.num_identities} identities")

    params = {**model.named_params(), HEAD_KEY: head.class_weights}
    if velocity is None:
        velocity = init_velocity(params)

    out_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_metrics(out_dir / METRICS_FILE, metrics, "w")
    marks = set(cfg.resolved_checkpoint_epochs())
    checkpoints: List[str] = []

    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(cfg.schedule, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                logger.warning("epoch %d: skipping a batch of %d sample(s)", epoch, idx.size)
                continue
            xb, yb = images[idx], labels[idx]

            def loss_fn(update_stats: bool, xb=xb, yb=yb):
                model.set_update_stats(update_stats)
                emb = model.forward(xb, TRAIN)
                loss, g = arcface_loss(emb, head, yb, cfg.loss)
                model.backward(g.embeddings)
                return loss, {**model.named_grads(), HEAD_KEY: g.class_weights}

            if cfg.optim_kind == "sam":
                loss, _ = sam_step(params, loss_fn, velocity, lr, cfg.sam, cfg.sgd)
            else:
                loss, grads = loss_fn(True)
                sgd_step(params, grads, velocity, lr, cfg.sgd)
            if not np.isfinite(loss):
                raise DivergedLoss(f"epoch {epoch}: loss became {loss}")
            losses.append(loss)

        train_loss = float(np.mean(losses)) if losses else float("nan")
        row: Dict[str, float] = {"epoch": epoch, "lr": lr, "train_loss": train_loss}
        completed = epoch + 1
        if completed in marks:
            for val in val_sets:
                row[VAL_PREFIX + val.name] = validation_accuracy(model, val)
        metrics.append(row)
        if out_dir is not None:
            _write_metrics(out_dir / METRICS_FILE, [row], "a")
        logger.info(
            "epoch %d lr %.6g loss %.4f%s", epoch, lr, row["train_loss"],
            "".join(f" {k}={v:.2f}" for k, v in row.items() if k.startswith(VAL_PREFIX)),
        )

        if completed in marks and out_dir is not None:
            path = out_dir / f"ckpt_epoch{completed:03d}.lwfr"
            next_lr = lr_at(cfg.schedule, completed) if completed < cfg.schedule.total_epochs else None
            state = TrainState(
                epoch=completed,
                schedule={"lr": lr, "next_lr": next_lr},
                metrics=metrics,
                config=cfg.to_dict(),
                head=head,
                velocity=velocity if cfg.save_optimizer_state else None,
            )
            save_checkpoint(model, state, path)
            checkpoints.append(str(path))

    return TrainResult(model, head, metrics, checkpoints)


# ------------------------------
# Run bookkeeping
# ------------------------------
@dataclass(frozen=True)
class CheckpointScore:
    path: str
    epoch: int
    accuracies: Dict[str, float]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.accuracies.values())))


def select_best(checkpoints: Sequence[CheckpointScore], val_sets: Sequence[str], top_n: int = 2) -> List[CheckpointScore]:
    """Rank by unweighted mean accuracy over ``val_sets``, descending; earlier epoch wins ties."""
    if not checkpoints:
        return []
    for ck in checkpoints:
        missing = [v for v in val_sets if v not in ck.accuracies]
        if missing:
            raise MissingMetrics(f"{ck.path} has no accuracy for {missing}")
    df = pd.DataFrame(
        {
            "pos": range(len(checkpoints)),
            "epoch": [ck.epoch for ck in checkpoints],
            "mean": [float(np.mean([ck.accuracies[v] for v in val_sets])) for ck in checkpoints],
        }
    )
    ranked = df.sort_values(["mean", "epoch"], ascending=[False, True], kind="mergesort").head(top_n)
    return [
        CheckpointScore(checkpoints[p].path, checkpoints[p].epoch, {v: checkpoints[p].accuracies[v] for v in val_sets})
        for p in ranked["pos"]
    ]


def run_checkpoints(run_dir: PathLike) -> List[CheckpointScore]:
    """Validation accuracies recorded in each checkpoint of a run directory."""
    out = []
    for path in sorted(glob.glob(os.path.join(os.fspath(run_dir), CHECKPOINT_GLOB))):
        meta = read_metadata(path)
        rows = [r for r in meta.get("metrics", []) if r.get("epoch") == meta["epoch"] - 1]
        accs = {k[len(VAL_PREFIX):]: v for k, v in (rows[-1] if rows else {}).items() if k.startswith(VAL_PREFIX)}
        out.append(CheckpointScore(path, int(meta["epoch"]), accs))
    return out


def report(model_path: PathLike) -> EvalReport:
    """Static statistics of a stored model: params, FLOPs, size and an architecture summary."""
    model, state = load_checkpoint(model_path)
    params = count_params(model)
    arch = model.arch
    summary: Dict[str, object] = {
        "input_size": list(arch.input_size),
        "embedding_dim": arch.embedding_dim,
        "width_mult": arch.width_mult,
        "blocks": len(model.blocks),
        "param_category": param_category(params),
        "epoch": state.epoch,
    }
    if arch.width_mult > 1 or arch.per_stage_channel_override:
        gap = params - PUBLISHED_WIDE_PARAMS
        summary["published_wide_params_gap"] = gap
        logger.warning("widened model has %d params, %+d from the published %d", params, gap, PUBLISHED_WIDE_PARAMS)
    flops = count_flops(model) if model.blocks else 0
    return EvalReport(flops=flops, params=params, size_mb=model_size_mb(model), arch=summary)


def read_metrics(run_dir: PathLike) -> pd.DataFrame:
    path = Path(run_dir) / METRICS_FILE
    if not path.exists():
        raise IoFailure(f"no metrics log in {run_dir}")
    df = pd.read_json(path, lines=True)
    if df.empty:
        raise MissingMetrics(f"{path} is empty")
    return df


def summarize_run(run_dir: PathLike) -> Dict[str, float]:
    df = read_metrics(run_dir)
    val_cols = [c for c in df.columns if c.startswith(VAL_PREFIX)]
    best = df[val_cols].mean(axis=1).max() if val_cols else float("nan")
    return {
        "run": str(run_dir),
        "epochs": int(df["epoch"].max()) + 1,
        "initial_loss": float(df["train_loss"].iloc[0]),
        "final_loss": float(df["train_loss"].iloc[-1]),
        "best_mean_val": float(best),
    }


def compare_runs(run_dirs: Sequence[PathLike]) -> pd.DataFrame:
    """One row per run; ``gap_vs_first`` is the best-accuracy difference in points to the first run."""
    df = pd.DataFrame([summarize_run(d) for d in run_dirs])
    df["gap_vs_first"] = df["best_mean_val"] - df["best_mean_val"].iloc[0]
    return df
