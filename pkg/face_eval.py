"""
face_eval.py

Face-recognition metric protocols.

- verify_10fold(): pair verification, threshold learned on 9 folds and
  applied to the held-out one (contiguous folds in pair order).
- tar_at_far(): conservative TAR at fixed FAR levels (FAR never exceeds the level).
- rank_k(): closed-set identification rate.
- subgroup_stats(): mean / population std of per-subgroup accuracy plus SER,
  the worst-to-best subgroup error ratio.
- EvalReport: everything above plus static model costs, rendered as JSON text.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics import roc_curve
from sklearn.model_selection import KFold

from errors import (
    DecodeError,
    InsufficientImpostors,
    InvalidConfig,
    InvalidParams,
    IoFailure,
    LabelNotInGallery,
    SerUndefined,
    TooFewPairs,
    ZeroVector,
)
from model_zoo import Model, embed
from nn_core import NORM_FLOOR, l2_normalize

if TYPE_CHECKING:
    from face_data import IdentityDataset

logger = logging.getLogger(__name__)

FAR_LEVELS = (1e-5, 1e-4, 1e-3, 1e-2)
FOLD_COUNT = 10


@dataclass
class PairList:
    pairs: List[Tuple[int, int, bool]]
    fold_count: int = FOLD_COUNT

    def __post_init__(self) -> None:
        if not self.pairs:
            raise TooFewPairs("pair list is empty")
        if self.fold_count < 2:
            raise InvalidConfig(f"fold_count must be >= 2, got {self.fold_count}")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([g for _, _, g in self.pairs], dtype=bool)

    def folds(self) -> List[np.ndarray]:
        """Contiguous test-fold index blocks; sizes differ by at most one."""
        if len(self.pairs) < self.fold_count:
            raise TooFewPairs(f"{len(self.pairs)} pairs cannot fill {self.fold_count} folds")
        kf = KFold(n_splits=self.fold_count, shuffle=False)
        return [test for _, test in kf.split(np.arange(len(self.pairs)))]


# -------------------------
# Similarity
# -------------------------
def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= NORM_FLOOR or nb <= NORM_FLOOR:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def pair_scores(emb_a: np.ndarray, emb_b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity of two (P, D) embedding arrays."""
    a = l2_normalize(np.asarray(emb_a, dtype=np.float64))
    b = l2_normalize(np.asarray(emb_b, dtype=np.float64))
    return np.clip(np.sum(a * b, axis=1), -1.0, 1.0)


# -------------------------
# Verification
# -------------------------
@dataclass(frozen=True)
class FoldResult:
    threshold: float
    accuracy: float


def _candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    u = np.unique(scores)
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def best_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Threshold with the highest accuracy (genuine iff score > t); ties go to the smallest.

    Midpoint candidates make the result invariant under positive scaling of the
    scores, not under every strictly increasing transform.
    """
    cands = _candidate_thresholds(scores)
    gen = np.sort(scores[labels])
    imp = np.sort(scores[~labels])
    correct = (gen.size - np.searchsorted(gen, cands, side="right")) + np.searchsorted(imp, cands, side="right")
    return float(cands[int(np.argmax(correct))])


def verify_folds(scores: Sequence[float], labels: Sequence[bool], fold_count: int = FOLD_COUNT) -> List[FoldResult]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise InvalidParams(f"{scores.size} scores for {labels.size} labels")
    if scores.size < fold_count:
        raise TooFewPairs(f"{scores.size} pairs cannot fill {fold_count} folds")
    results = []
    for train, test in KFold(n_splits=fold_count, shuffle=False).split(scores):
        t = best_threshold(scores[train], labels[train])
        acc = 100.0 * float(np.mean((scores[test] > t) == labels[test]))
        results.append(FoldResult(t, acc))
    return results


def verify_10fold(scores: Sequence[float], labels: Sequence[bool], fold_count: int = FOLD_COUNT) -> Tuple[float, float]:
    """Mean and population std (in %) of the held-out fold accuracies."""
    accs = np.array([f.accuracy for f in verify_folds(scores, labels, fold_count)])
    return float(accs.mean()), float(accs.std())


# -------------------------
# TAR @ FAR
# -------------------------
def tar_at_far(
    genuine: Sequence[float],
    impostor: Sequence[float],
    far_levels: Sequence[float] = FAR_LEVELS,
    skip_insufficient: bool = False,
) -> List[Tuple[float, float]]:
    """TAR (fraction) at the smallest threshold whose FAR does not exceed each level.

    A level needs at least 1/level impostor scores; otherwise it raises
    InsufficientImpostors, or is dropped with a warning when
    ``skip_insufficient`` is set.
    """
    gen = np.asarray(genuine, dtype=np.float64)
    imp = np.sort(np.asarray(impostor, dtype=np.float64))[::-1]
    if gen.size == 0:
        raise InvalidParams("no genuine scores")
    n_imp = imp.size
    out: List[Tuple[float, float]] = []
    for level in far_levels:
        if not 0.0 < level <= 1.0:
            raise InvalidParams(f"FAR level must lie in (0, 1], got {level}")
        if n_imp * level < 1.0 - 1e-12:
            if skip_insufficient:
                logger.warning("skipping FAR %g: only %d impostor scores", level, n_imp)
                continue
            raise InsufficientImpostors(level, n_imp)
        admitted = int(math.floor(level * n_imp))
        while (admitted + 1) / n_imp <= level:
            admitted += 1
        while admitted / n_imp > level:
            admitted -= 1
        threshold = imp[admitted] if admitted < n_imp else -np.inf
        out.append((float(level), float(np.mean(gen > threshold))))
    return out


def roc_points(genuine: Sequence[float], impostor: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Raw (FAR, TAR) operating points, one per distinct score, from (0, 0) to (1, 1)."""
    gen = np.asarray(genuine, dtype=np.float64)
    imp = np.asarray(impostor, dtype=np.float64)
    y = np.concatenate([np.ones(gen.size), np.zeros(imp.size)])
    far, tar, _ = roc_curve(y, np.concatenate([gen, imp]), drop_intermediate=False)
    return far, tar


# -------------------------
# Identification
# -------------------------
def rank_k(
    probes: np.ndarray,
    probe_labels: Sequence[int],
    gallery: np.ndarray,
    gallery_labels: Sequence[int],
    k: int,
) -> float:
    """Percentage of probes whose gallery identity is among the k most similar entries.

    Equal similarities rank the lower gallery index first.
    """
    gallery_labels = list(gallery_labels)
    if len(set(gallery_labels)) != len(gallery_labels):
        raise InvalidParams("gallery labels must be unique")
    if k < 1:
        raise InvalidParams(f"k must be >= 1, got {k}")
    slot = {lab: j for j, lab in enumerate(gallery_labels)}
    missing = [lab for lab in probe_labels if lab not in slot]
    if missing:
        raise LabelNotInGallery(f"probe labels not in gallery: {sorted(set(missing))[:5]}")
    if len(probe_labels) == 0:
        raise InvalidParams("no probes")

    sims = l2_normalize(np.asarray(probes, dtype=np.float64)) @ l2_normalize(np.asarray(gallery, dtype=np.float64)).T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    truth = np.array([slot[lab] for lab in probe_labels])
    hits = np.any(order == truth[:, None], axis=1)
    return 100.0 * int(hits.sum()) / len(probe_labels)


def identification_split(ds: "IdentityDataset") -> Tuple[List[int], List[int], List[int], List[int]]:
    """First image of each identity forms the gallery, the rest are probes.

    Returns (gallery_indices, gallery_labels, probe_indices, probe_labels).
    """
    g_idx, g_lab, p_idx, p_lab = [], [], [], []
    for ident in ds.identities:
        first, *rest = ds.identity_index[ident]
        g_idx.append(first)
        g_lab.append(ident)
        p_idx.extend(rest)
        p_lab.extend([ident] * len(rest))
    return g_idx, g_lab, p_idx, p_lab


# -------------------------
# Subgroups / bias
# -------------------------
def subgroup_stats(per_subgroup_accuracy: Mapping[str, float]) -> Tuple[float, float, float]:
    """(mean %, population std %, SER) with SER = (100 - min) / (100 - max)."""
    if len(per_subgroup_accuracy) < 2:
        raise InvalidParams("subgroup statistics need >= 2 subgroups")
    accs = np.array(list(per_subgroup_accuracy.values()), dtype=np.float64)
    if np.any(accs < 0) or np.any(accs > 100):
        raise InvalidParams(f"accuracies must lie in [0, 100]: {accs.tolist()}")
    best, worst = accs.max(), accs.min()
    if best >= 100.0:
        raise SerUndefined("best subgroup has zero error")
    return float(accs.mean()), float(accs.std()), float((100.0 - worst) / (100.0 - best))


def subgroup_verification(
    scores: Sequence[float],
    labels: Sequence[bool],
    tags: Sequence[Optional[str]],
    fold_count: int = FOLD_COUNT,
) -> Dict[str, float]:
    """Per-tag mean verification accuracy; tags with fewer than fold_count pairs are left out."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    tags_arr = np.array([t if t is not None else "" for t in tags], dtype=object)
    out: Dict[str, float] = {}
    for tag in sorted({t for t in tags if t is not None}):
        mask = tags_arr == tag
        if mask.sum() < fold_count:
            logger.warning("subgroup %s: %d pairs, need %d", tag, int(mask.sum()), fold_count)
            continue
        out[tag] = verify_10fold(scores[mask], labels[mask], fold_count)[0]
    return out


def read_subgroup_file(path: Union[str, os.PathLike]) -> Dict[str, float]:
    """``tag<TAB>accuracy`` lines."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    out: Dict[str, float] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            out[parts[0]] = float(parts[1])
        except (IndexError, ValueError):
            raise DecodeError(f"{path} line {lineno}: expected tag<TAB>accuracy") from None
    return out


# -------------------------
# Model scoring
# -------------------------
def evaluate_pairs(model: Model, images: Sequence[np.ndarray], pairs: PairList, batch_size: int = 64) -> np.ndarray:
    """Cosine scores of every pair; each image referenced by a pair is embedded once (infer mode)."""
    used = sorted({i for a, b, _ in pairs.pairs for i in (a, b)})
    emb: Dict[int, np.ndarray] = {}
    for start in range(0, len(used), batch_size):
        chunk = used[start:start + batch_size]
        out = embed(model, np.stack([images[i] for i in chunk]))
        emb.update(zip(chunk, out))
    a = np.stack([emb[i] for i, _, _ in pairs.pairs])
    b = np.stack([emb[j] for _, j, _ in pairs.pairs])
    return pair_scores(a, b)


# -------------------------
# Report
# -------------------------
@dataclass
class EvalReport:
    accuracy_mean: Optional[float] = None
    accuracy_std: Optional[float] = None
    tar_at_far: List[Tuple[float, float]] = field(default_factory=list)
    rank1: Optional[float] = None
    rank5: Optional[float] = None
    subgroup_accuracies: Dict[str, float] = field(default_factory=dict)
    subgroup_mean: Optional[float] = None
    subgroup_std: Optional[float] = None
    ser: Optional[float] = None
    flops: Optional[int] = None
    params: Optional[int] = None
    size_mb: Optional[float] = None
    arch: Dict[str, object] = field(default_factory=dict)

    def validate(self) -> None:
        pcts = [self.accuracy_mean, self.accuracy_std, self.rank1, self.rank5, self.subgroup_mean, self.subgroup_std]
        pcts += list(self.subgroup_accuracies.values())
        for v in pcts:
            if v is not None and not 0.0 <= v <= 100.0:
                raise InvalidParams(f"percentage out of range: {v}")
        if self.ser is not None and self.ser < 1.0:
            raise InvalidParams(f"SER must be >= 1, got {self.ser}")

    def to_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["tar_at_far"] = [{"far": lvl, "tar": tar} for lvl, tar in self.tar_at_far]
        return {k: v for k, v in d.items() if v not in (None, [], {})}

    def to_text(self) -> str:
        self.validate()
        return json.dumps(self.to_dict(), indent=2)
