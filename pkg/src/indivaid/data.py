"""Dataset ingestion, identity indexing, balanced batch planning, and augmentation.

The canonical on-disk layout is ``root/{train,gallery,query}/{identity}/{image}``.
Datasets that cannot be restructured can instead provide a CSV manifest with
header ``path,identity,split`` (paths relative to the manifest file).

Train identities are re-indexed to a contiguous ``0..N-1`` range; gallery and
query identities live in their own shared index space because re-identification
is open-set (test identities never overlap the train label space).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

SPLITS = ("train", "gallery", "query")
IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".webp", ".tif", ".tiff"}


class DatasetError(Exception):
    """Structural problem with a dataset tree or manifest."""


@dataclass(frozen=True)
class ImageRecord:
    """One labeled image: where it lives, who it shows, and which split owns it."""

    path: Path
    identity: int
    split: str
    source_id: str


@dataclass(frozen=True)
class IdentityIndex:
    """Bijection between string identity labels and contiguous integers."""

    forward: dict[str, int]
    backward: tuple[str, ...]

    def __post_init__(self):
        if len(self.forward) != len(self.backward):
            raise ValueError("forward and backward maps disagree in size")
        for i, sid in enumerate(self.backward):
            if self.forward.get(sid) != i:
                raise ValueError(f"identity index is not a bijection at {sid!r}")

    @property
    def n(self) -> int:
        return len(self.backward)

    @classmethod
    def from_source_ids(cls, source_ids) -> "IdentityIndex":
        ordered = tuple(sorted(set(source_ids)))
        return cls(forward={sid: i for i, sid in enumerate(ordered)}, backward=ordered)


@dataclass
class BatchPlan:
    """One epoch of identity-balanced batches over a list of train records.

    Every batch holds exactly ``I`` distinct identities with exactly ``K``
    record indices each; identities with fewer than ``K`` images are completed
    by sampling with replacement.
    """

    I: int
    K: int
    seed: int
    batches: list[list[int]] = field(default_factory=list)

    def save_json(self, path):
        payload = {"I": self.I, "K": self.K, "seed": self.seed, "batches": self.batches}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    @classmethod
    def load_json(cls, path) -> "BatchPlan":
        payload = json.loads(Path(path).read_text())
        return cls(
            I=payload["I"],
            K=payload["K"],
            seed=payload["seed"],
            batches=[list(b) for b in payload["batches"]],
        )


def _iter_split_tree(split_dir: Path, split: str):
    for identity_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        images = sorted(
            p
            for p in identity_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        skipped = [
            p
            for p in identity_dir.iterdir()
            if p.is_file() and p.suffix.lower() not in IMAGE_EXTENSIONS
        ]
        for p in skipped:
            logger.warning("skipping non-image file %s", p)
        if not images:
            logger.warning(
                "identity %r in split %r has no readable images, skipped",
                identity_dir.name,
                split,
            )
            continue
        yield identity_dir.name, images


def scan_dataset(root) -> tuple[list[ImageRecord], IdentityIndex]:
    """Enumerate a dataset tree (or CSV manifest) into records plus the train index.

    Returns records sorted lexicographically by path, so repeated scans of an
    unchanged tree are byte-for-byte identical.
    """
    root = Path(root)
    if root.is_file():
        entries = _read_manifest(root)
    elif root.is_dir():
        entries = []
        for split in SPLITS:
            split_dir = root / split
            if not split_dir.is_dir():
                raise DatasetError(
                    f"missing split directory: {split_dir} "
                    "(expected train/, gallery/ and query/, or a CSV manifest)"
                )
            for source_id, images in _iter_split_tree(split_dir, split):
                entries.extend((path, source_id, split) for path in images)
    else:
        raise DatasetError(f"dataset root does not exist: {root}")

    entries.sort(key=lambda e: str(e[0]))

    train_ids = {sid for _, sid, split in entries if split == "train"}
    if not train_ids:
        raise DatasetError("no train identities found")
    train_index = IdentityIndex.from_source_ids(train_ids)
    test_ids = {sid for _, sid, split in entries if split != "train"}
    test_index = IdentityIndex.from_source_ids(test_ids) if test_ids else None

    records = []
    for path, sid, split in entries:
        index = train_index if split == "train" else test_index
        records.append(
            ImageRecord(path=path, identity=index.forward[sid], split=split, source_id=sid)
        )
    return records, train_index


def _read_manifest(manifest_path: Path):
    base = manifest_path.parent
    entries = []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"path", "identity", "split"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DatasetError(
                f"manifest {manifest_path} must have header path,identity,split"
            )
        for row in reader:
            split = row["split"].strip()
            if split not in SPLITS:
                raise DatasetError(f"manifest row has unknown split {split!r}")
            path = (base / row["path"].strip()).resolve()
            if path.suffix.lower() not in IMAGE_EXTENSIONS:
                logger.warning("skipping non-image manifest entry %s", path)
                continue
            entries.append((path, row["identity"].strip(), split))
    return entries


def split_records(records, split: str) -> list[ImageRecord]:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return [r for r in records if r.split == split]


def make_batches(records, I: int, K: int, seed: int) -> BatchPlan:
    """Plan one epoch of I x K batches over train records.

    The plan is a pure function of ``(records, I, K, seed)``. Every identity
    appears in at least one batch; all of an identity's images are consumed
    (the last partial group of a batch is completed by re-sampling identities
    with replacement so batch shape never degrades).
    """
    if I < 2 or K < 2:
        raise ValueError(
            "identities per batch (I) and images per identity (K) must both be >= 2 "
            "so the triplet loss sees a positive and a negative per anchor"
        )
    by_identity: dict[int, list[int]] = {}
    for pos, record in enumerate(records):
        by_identity.setdefault(record.identity, []).append(pos)
    if len(by_identity) < I:
        raise ValueError(
            f"need at least I={I} train identities, found {len(by_identity)}"
        )

    rng = np.random.default_rng(seed)
    identity_order = sorted(by_identity)
    rank = {ident: r for r, ident in enumerate(rng.permutation(identity_order))}

    chunks: dict[int, list[list[int]]] = {}
    for ident in identity_order:
        positions = np.array(by_identity[ident])
        shuffled = positions[rng.permutation(len(positions))]
        target = math.ceil(len(shuffled) / K) * K
        if target > len(shuffled):
            pad = rng.choice(shuffled, size=target - len(shuffled), replace=True)
            shuffled = np.concatenate([shuffled, pad])
        chunks[ident] = [
            shuffled[i : i + K].tolist() for i in range(0, len(shuffled), K)
        ]

    batches: list[list[int]] = []
    covered: set[int] = set()
    remaining = {ident: list(cs) for ident, cs in chunks.items()}
    while remaining:
        available = sorted(
            remaining,
            key=lambda ident: (ident in covered, -len(remaining[ident]), rank[ident]),
        )
        chosen = available[:I]
        fillers: list[int] = []
        if len(chosen) < I:
            pool = sorted(
                (ident for ident in by_identity if ident not in chosen),
                key=lambda ident: rank[ident],
            )
            fillers = [int(x) for x in rng.choice(pool, size=I - len(chosen), replace=False)]
        batch: list[int] = []
        for ident in chosen:
            batch.extend(remaining[ident].pop(0))
            if not remaining[ident]:
                del remaining[ident]
        for ident in fillers:
            batch.extend(int(x) for x in rng.choice(by_identity[ident], size=K, replace=True))
        covered.update(chosen)
        covered.update(fillers)
        batches.append(batch)

    return BatchPlan(I=I, K=K, seed=seed, batches=batches)


@dataclass
class AugmentConfig:
    """Train-time augmentation knobs. Gallery, query and first-stage images skip all of this."""

    flip_prob: float = 0.5
    pad: int = 10
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.4)
    erase_aspect: tuple[float, float] = (0.3, 3.3)


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Flip, reflect-pad, random-crop back, and randomly erase one HxWx3 image.

    Output shape always equals input shape. With ``flip_prob=0``, ``pad=0`` and
    ``erase_prob=0`` the input is returned unchanged.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {image.shape}")
    h, w = image.shape[:2]

    if config.flip_prob > 0 and rng.random() < config.flip_prob:
        image = image[:, ::-1, :]

    if config.pad > 0:
        p = config.pad
        padded = np.pad(image, ((p, p), (p, p), (0, 0)), mode="reflect")
        top = int(rng.integers(0, 2 * p + 1))
        left = int(rng.integers(0, 2 * p + 1))
        image = padded[top : top + h, left : left + w, :]

    # Copy before erasing so the caller's array is never mutated.
    image = image.copy()

    if config.erase_prob > 0 and rng.random() < config.erase_prob:
        lo, hi = config.erase_aspect
        for _ in range(10):
            area = rng.uniform(*config.erase_area) * h * w
            aspect = math.exp(rng.uniform(math.log(lo), math.log(hi)))
            eh = int(round(math.sqrt(area * aspect)))
            ew = int(round(math.sqrt(area / aspect)))
            if 0 < eh < h and 0 < ew < w:
                top = int(rng.integers(0, h - eh + 1))
                left = int(rng.integers(0, w - ew + 1))
                fill = image.reshape(-1, 3).mean(axis=0)
                image[top : top + eh, left : left + ew, :] = fill
                break

    return image


def load_image(path, resolution: int) -> np.ndarray:
    """Decode an image file to a float32 HxWx3 array in [0, 1] at the given square resolution."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), Image.BILINEAR)
        return np.asarray(img, dtype=np.float32) / 255.0
