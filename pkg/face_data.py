"""
face_data.py

Identity-labeled face datasets.

- IdentityDataset: immutable list of Records (one image each) with an
  identity index and optional subgroup tags.
- sample_subset(): seeded identity-subset sampler (N identities, K..M images each).
- preprocess(): decode, bilinear resize, (v - 127.5) / 128, channel-first.
- synth_dataset(): smooth random prototypes per identity plus noisy, jittered
  variants; a desk-scale stand-in for a real training pool.
- load_dataset_dir() / write_dataset_dir(): one directory per identity and an
  optional ``subgroups.tsv`` manifest (identity_id<TAB>tag, UTF-8, LF).
- make_pairs() / read_pair_file() / write_pair_file(): verification pairs.
"""

from __future__ import annotations

import io
import logging
import os
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from errors import (
    BadDimensions,
    DecodeError,
    InsufficientIdentities,
    InvalidConfig,
    InvalidParams,
    IoFailure,
)
from face_eval import PairList

logger = logging.getLogger(__name__)

INPUT_SIZE = 112
PIXEL_MEAN = 127.5
PIXEL_SCALE = 128.0
SYNTH_TAGS = ("A", "B", "C", "D")
MANIFEST_NAME = "subgroups.tsv"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

ImageLike = Union[np.ndarray, bytes, str, os.PathLike]


@dataclass(frozen=True, eq=False)
class Record:
    identity_id: int
    name: str
    path: Optional[str] = None
    pixels: Optional[np.ndarray] = None
    subgroup: Optional[str] = None

    @property
    def relpath(self) -> str:
        """Location inside a dataset directory written by write_dataset_dir."""
        return f"{self.identity_id:05d}/{self.name}"

    def load(self) -> np.ndarray:
        """H x W x 3 uint8 pixels."""
        if self.pixels is not None:
            return self.pixels
        return decode_image(self.path)


@dataclass
class IdentityDataset:
    records: List[Record]
    tags: Tuple[str, ...] = ()
    identity_index: Dict[int, List[int]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        index: Dict[int, List[int]] = {}
        for i, rec in enumerate(self.records):
            index.setdefault(rec.identity_id, []).append(i)
            if rec.subgroup is not None and rec.subgroup not in self.tags:
                raise InvalidParams(f"subgroup tag {rec.subgroup!r} not in declared tags {self.tags}")
        self.identity_index = index

    @property
    def identities(self) -> List[int]:
        return sorted(self.identity_index)

    @property
    def num_identities(self) -> int:
        return len(self.identity_index)

    def __len__(self) -> int:
        return len(self.records)

    def subgroup_of(self, identity_id: int) -> Optional[str]:
        return self.records[self.identity_index[identity_id][0]].subgroup

    def by_relpath(self) -> Dict[str, int]:
        return {rec.relpath: i for i, rec in enumerate(self.records)}


# -------------------------
# Sampling
# -------------------------
@dataclass(frozen=True)
class SamplerConfig:
    num_identities: int
    min_per_id: int = 30
    max_per_id: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.num_identities < 1:
            raise InvalidConfig("num_identities must be >= 1")
        if not 1 <= self.min_per_id <= self.max_per_id:
            raise InvalidConfig(f"need 1 <= min_per_id <= max_per_id, got {self.min_per_id}..{self.max_per_id}")


def sample_subset(ds: IdentityDataset, cfg: SamplerConfig) -> IdentityDataset:
    """Pick ``num_identities`` eligible identities and K..M images of each, re-indexed from 0."""
    cfg.validate()
    eligible = [i for i in ds.identities if len(ds.identity_index[i]) >= cfg.min_per_id]
    if len(eligible) < cfg.num_identities:
        raise InsufficientIdentities(
            f"{len(eligible)} identities own >= {cfg.min_per_id} images, {cfg.num_identities} requested"
        )
    rng = np.random.default_rng(cfg.seed)
    chosen = sorted(int(i) for i in rng.choice(eligible, size=cfg.num_identities, replace=False))

    records: List[Record] = []
    for new_id, old_id in enumerate(chosen):
        members = ds.identity_index[old_id]
        upper = min(cfg.max_per_id, len(members))
        keep = int(rng.integers(cfg.min_per_id, upper + 1))
        picks = sorted(rng.choice(len(members), size=keep, replace=False))
        records.extend(replace(ds.records[members[p]], identity_id=new_id) for p in picks)
    logger.info("sampled %d identities, %d images", cfg.num_identities, len(records))
    return IdentityDataset(records, ds.tags)


# -------------------------
# Images
# -------------------------
def decode_image(source: ImageLike) -> np.ndarray:
    """Decode encoded bytes or an image file into H x W x 3 uint8."""
    try:
        if isinstance(source, (bytes, bytearray)):
            img = Image.open(io.BytesIO(source))
        else:
            img = Image.open(source)
        with img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from exc


def _resize_bilinear(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    h, w = size
    channels = [
        np.asarray(Image.fromarray(image[:, :, c].astype(np.float32)).resize((w, h), Image.BILINEAR))
        for c in range(image.shape[2])
    ]
    return np.stack(channels, axis=2)


def preprocess(image: ImageLike, size: int = INPUT_SIZE) -> np.ndarray:
    """Float32 (3, size, size) tensor with values in [-0.99609375, 0.99609375]."""
    if isinstance(image, np.ndarray):
        arr = image
    else:
        arr = decode_image(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or min(arr.shape[:2]) < 1:
        raise BadDimensions(f"expected an H x W x 3 image, got shape {arr.shape}")
    arr = np.clip(arr.astype(np.float32), 0.0, 255.0)
    if arr.shape[:2] != (size, size):
        arr = np.clip(_resize_bilinear(arr, (size, size)), 0.0, 255.0)
    out = (arr - PIXEL_MEAN) / PIXEL_SCALE
    return np.ascontiguousarray(out.transpose(2, 0, 1), dtype=np.float32)


def load_batch(ds: IdentityDataset, indices: Sequence[int], size: int = INPUT_SIZE) -> np.ndarray:
    return np.stack([preprocess(ds.records[i].load(), size) for i in indices])


def degrade_resolution(image: np.ndarray, factor: float) -> np.ndarray:
    """Down- then up-sample (bilinear) to simulate a low-resolution capture."""
    if not factor >= 1:
        raise InvalidParams(f"degrade factor must be >= 1, got {factor}")
    if image.ndim != 3 or image.shape[2] != 3:
        raise BadDimensions(f"expected an H x W x 3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    small = _resize_bilinear(image.astype(np.float32), (max(1, round(h / factor)), max(1, round(w / factor))))
    back = _resize_bilinear(small, (h, w))
    return np.clip(np.rint(back), 0, 255).astype(np.uint8)


# -------------------------
# Synthetic identities
# -------------------------
def _prototype(rng: np.random.Generator, size: int) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(size / 8, size / 8, 0))
    lo, hi = field_.min(), field_.max()
    return 0.15 + 0.7 * (field_ - lo) / max(hi - lo, 1e-12)


def _jitter(proto: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = proto.shape[0]
    dy, dx = rng.uniform(-size / 16, size / 16, size=2)
    angle = rng.uniform(-5.0, 5.0)
    out = ndimage.shift(proto, (dy, dx, 0), order=1, mode="nearest")
    return ndimage.rotate(out, angle, axes=(0, 1), reshape=False, order=1, mode="nearest")


def synth_dataset(
    n_ids: int,
    imgs_per_id: int,
    size: int,
    noise_sigma: float,
    seed: int,
    jitter: bool = True,
) -> IdentityDataset:
    """Deterministic per seed; identity i carries subgroup tag SYNTH_TAGS[i % 4]."""
    if n_ids < 2 or imgs_per_id < 2:
        raise InvalidParams(f"need >= 2 identities and >= 2 images per identity, got {n_ids} x {imgs_per_id}")
    if size < 8:
        raise InvalidParams(f"image size must be >= 8, got {size}")
    if noise_sigma < 0:
        raise InvalidParams(f"noise_sigma must be >= 0, got {noise_sigma}")

    rng = np.random.default_rng(seed)
    records: List[Record] = []
    for ident in range(n_ids):
        proto = _prototype(rng, size)
        tag = SYNTH_TAGS[ident % len(SYNTH_TAGS)]
        for j in range(imgs_per_id):
            img = _jitter(proto, rng) if jitter else proto.copy()
            if noise_sigma > 0:
                img = img + rng.normal(0.0, noise_sigma, size=img.shape)
            pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
            records.append(Record(ident, f"{j:04d}.png", pixels=pixels, subgroup=tag))
    return IdentityDataset(records, SYNTH_TAGS)


# -------------------------
# On-disk layout
# -------------------------
def _read_manifest(path: Path) -> Dict[int, str]:
    tags: Dict[int, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").split("\n"), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip().isdigit() or not parts[1]:
            raise DecodeError(f"{path.name} line {lineno}: expected identity_id<TAB>tag")
        tags[int(parts[0])] = parts[1]
    return tags


def load_dataset_dir(root: Union[str, os.PathLike]) -> IdentityDataset:
    """Read one-directory-per-identity images; records sorted by identity id, then filename.

    Numeric directory names are the identity ids; otherwise ids follow the
    sorted directory order.
    """
    root = Path(root)
    if not root.is_dir():
        raise IoFailure(f"dataset directory not found: {root}")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    numeric = all(p.name.isdigit() for p in dirs)
    manifest = root / MANIFEST_NAME
    tags = _read_manifest(manifest) if manifest.exists() else {}

    records: List[Record] = []
    for pos, d in enumerate(dirs):
        ident = int(d.name) if numeric else pos
        files = sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            logger.warning("skipping %s: no images", d)
            continue
        records.extend(Record(ident, f.name, path=str(f), subgroup=tags.get(ident)) for f in files)
    records.sort(key=lambda r: (r.identity_id, r.name))
    if not records:
        raise InsufficientIdentities(f"no images found under {root}")
    return IdentityDataset(records, tuple(sorted(set(tags.values()))))


def write_dataset_dir(ds: IdentityDataset, root: Union[str, os.PathLike]) -> Path:
    """Write images as ``<identity:05d>/<name>`` plus subgroups.tsv when tags are present."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for rec in ds.records:
            target = root / rec.relpath
            target.parent.mkdir(exist_ok=True)
            if rec.pixels is not None:
                Image.fromarray(rec.pixels).save(target)
            else:
                shutil.copyfile(rec.path, target)
        tagged = [(i, ds.subgroup_of(i)) for i in ds.identities if ds.subgroup_of(i) is not None]
        if tagged:
            with open(root / MANIFEST_NAME, "w", encoding="utf-8", newline="\n") as fh:
                fh.writelines(f"{i}\t{tag}\n" for i, tag in tagged)
    except OSError as exc:
        raise IoFailure(f"cannot write dataset to {root}: {exc}") from exc
    return root


# -------------------------
# Verification pairs
# -------------------------
def make_pairs(ds: IdentityDataset, n_pairs: int, seed: int, fold_count: int = 10) -> PairList:
    """Alternating genuine/impostor pairs so every contiguous fold stays balanced."""
    if n_pairs < 1:
        raise InvalidParams("n_pairs must be >= 1")
    multi = [i for i in ds.identities if len(ds.identity_index[i]) >= 2]
    if not multi or ds.num_identities < 2:
        raise InsufficientIdentities("pairs need >= 2 identities and one with >= 2 images")
    rng = np.random.default_rng(seed)
    ids = ds.identities
    pairs: List[Tuple[int, int, bool]] = []
    for k in range(n_pairs):
        if k % 2 == 0:
            members = ds.identity_index[multi[int(rng.integers(len(multi)))]]
            a, b = rng.choice(len(members), size=2, replace=False)
            pairs.append((members[a], members[b], True))
        else:
            x, y = rng.choice(len(ids), size=2, replace=False)
            mx, my = ds.identity_index[ids[x]], ds.identity_index[ids[y]]
            pairs.append((mx[int(rng.integers(len(mx)))], my[int(rng.integers(len(my)))], False))
    return PairList(pairs, fold_count)


def write_pair_file(path: Union[str, os.PathLike], pairs: PairList, paths: Sequence[str]) -> None:
    """``path_a<TAB>path_b<TAB>{0|1}`` per line; ``paths`` maps pair indices to strings."""
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for a, b, genuine in pairs.pairs:
                fh.write(f"{paths[a]}\t{paths[b]}\t{int(genuine)}\n")
    except OSError as exc:
        raise IoFailure(f"cannot write pair file {path}: {exc}") from exc


def read_pair_file(path: Union[str, os.PathLike], fold_count: int = 10) -> Tuple[PairList, List[str]]:
    """Parse a pair file; returns the pairs over a list of unique paths in first-seen order."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read pair file {path}: {exc}") from exc
    paths: List[str] = []
    index: Dict[str, int] = {}
    pairs: List[Tuple[int, int, bool]] = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise DecodeError(f"{path} line {lineno}: expected path_a<TAB>path_b<TAB>0|1")
        ends = []
        for p in parts[:2]:
            if p not in index:
                index[p] = len(paths)
                paths.append(p)
            ends.append(index[p])
        pairs.append((ends[0], ends[1], parts[2] == "1"))
    return PairList(pairs, fold_count), paths
