"""Pure helpers extracted from app.py for unit testing without Streamlit.

Functions:
- _coerce_float(v)
- list_runs(root)
- lr_loss_frame(metrics)
- val_accuracy_long(metrics)
- checkpoint_table(run_dir)
"""
import os
from typing import Any, List, Optional

import pandas as pd

from checkpoint import read_metadata
from model_zoo import ArchConfig, layer_table, param_category
from trainer import METRICS_FILE, VAL_PREFIX, run_checkpoints

__all__ = [
    "_coerce_float",
    "list_runs",
    "lr_loss_frame",
    "val_accuracy_long",
    "checkpoint_table",
]


def _coerce_float(v: Any) -> Optional[float]:
    try:
        return float(v)
    except Exception:
        return None


def list_runs(root: str) -> List[str]:
    """Directories directly under root (root included) that hold a metrics log, sorted."""
    if not os.path.isdir(root):
        return []
    candidates = [root] + [os.path.join(root, d) for d in sorted(os.listdir(root))]
    return [d for d in candidates if os.path.isfile(os.path.join(d, METRICS_FILE))]


def lr_loss_frame(metrics: pd.DataFrame) -> pd.DataFrame:
    """epoch / lr / train_loss columns with non-numeric losses dropped."""
    df = metrics[["epoch", "lr", "train_loss"]].copy()
    df["train_loss"] = df["train_loss"].map(_coerce_float)
    return df.dropna(subset=["train_loss"]).reset_index(drop=True)


def val_accuracy_long(metrics: pd.DataFrame) -> pd.DataFrame:
    """Long format (epoch, val_set, accuracy) over rows that carry validation results."""
    cols = [c for c in metrics.columns if c.startswith(VAL_PREFIX)]
    if not cols:
        return pd.DataFrame(columns=["epoch", "val_set", "accuracy"])
    long = metrics.melt(id_vars=["epoch"], value_vars=cols, var_name="val_set", value_name="accuracy")
    long["val_set"] = long["val_set"].str[len(VAL_PREFIX):]
    return long.dropna(subset=["accuracy"]).reset_index(drop=True)


def checkpoint_table(run_dir: str) -> pd.DataFrame:
    """One row per checkpoint with its mean validation accuracy and static model costs.

    Costs come from the analytic layer table, so no weights are loaded.
    """
    rows = []
    for ck in run_checkpoints(run_dir):
        arch = ArchConfig.from_dict(read_metadata(ck.path)["arch"])
        table = layer_table(arch) if arch.stage_table else []
        params = sum(r.params for r in table)
        rows.append(
            {
                "checkpoint": os.path.basename(ck.path),
                "epoch": ck.epoch,
                "mean_val": ck.mean_accuracy if ck.accuracies else None,
                "params": params,
                "mflops": sum(r.flops for r in table) / 1e6,
                "category": param_category(params),
            }
        )
    return pd.DataFrame(rows, columns=["checkpoint", "epoch", "mean_val", "params", "mflops", "category"])
