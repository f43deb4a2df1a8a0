"""
utils.py

General-purpose formatting helpers used by the CLI and the dashboard.

Provided helpers:
- format_count(n): compact parameter counts ("1.20M", "27.9K").
- format_flops(flops): per-sample FLOPs in MFLOPs/GFLOPs.
- format_accuracy(mean, std): "99.12 ± 0.30 %".
- normalize_name(name): file names and labels to metric-safe keys.
- safe_float(value, default): coerce any input to float with a default fallback.
"""

from __future__ import annotations

import math
from typing import Any, Optional


def format_count(n: int) -> str:
    """Example: 1200512 -> "1.20M"."""
    if abs(n) >= 1_000_000:
        return f"{n / 1_000_000:.2f}M"
    if abs(n) >= 1_000:
        return f"{n / 1_000:.1f}K"
    return str(n)


def format_flops(flops: int) -> str:
    if flops >= 1e9:
        return f"{flops / 1e9:.2f} GFLOPs"
    return f"{flops / 1e6:.1f} MFLOPs"


def format_accuracy(mean: float, std: Optional[float] = None) -> str:
    if std is None:
        return f"{mean:.2f} %"
    return f"{mean:.2f} ± {std:.2f} %"


def normalize_name(name: str) -> str:
    """Normalize labels to lowercase keys.

    - Trim whitespace, lowercase
    - Replace spaces, dashes, dots and slashes with underscores
    - Collapse multiple underscores

    Example: "AgeDB-30 pairs.txt" -> "agedb_30_pairs_txt"
    """
    s = name.strip().lower()
    for ch in [" ", "-", ".", "/", "\\"]:
        s = s.replace(ch, "_")
    while "__" in s:
        s = s.replace("__", "_")
    return s.strip("_")


def safe_float(value: Any, default: float = 0.0) -> float:
    """Convert value to float, returning default for None, garbage or NaN."""
    try:
        v = float(value)
    except (TypeError, ValueError):
        return default
    return default if math.isnan(v) else v
