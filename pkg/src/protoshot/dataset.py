"""Labeled datasets, long-tail class partitioning, manifests and a synthetic generator."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from protoshot import binfmt
from protoshot._seeding import make_rng

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("source_id", "path", "label")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class DatasetError(ValueError):
    pass


class ManifestError(DatasetError):
    """Manifest problem tied to a specific CSV row (1-based, header is row 1)."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row
        self.message = message


@dataclass(frozen=True, eq=False)
class LabeledExample:
    """One example: an image (C x H x W in [0, 1]) or a raw feature vector (D,)."""

    data: np.ndarray
    label: str
    source_id: str

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32)
        if arr.ndim not in (1, 3):
            raise DatasetError(f"{self.source_id}: expected a (D,) vector or (C,H,W) image, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DatasetError(f"{self.source_id}: non-finite values")
        if arr.ndim == 3 and arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise DatasetError(f"{self.source_id}: image intensities outside [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def is_image(self) -> bool:
        return self.data.ndim == 3

    def __eq__(self, other):
        if not isinstance(other, LabeledExample):
            return NotImplemented
        return (
            self.source_id == other.source_id
            and self.label == other.label
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


class LongTailDataset:
    """Immutable collection of labeled examples indexed by class.

    Classes are ordered lexicographically; ``class_to_index`` gives the dense
    integer id used by heads and soft labels.
    """

    def __init__(self, examples: Iterable[LabeledExample]):
        self._examples: tuple[LabeledExample, ...] = tuple(examples)
        index: dict[str, list[int]] = {}
        seen: set[str] = set()
        shape = None
        for i, ex in enumerate(self._examples):
            if ex.source_id in seen:
                raise DatasetError(f"duplicate source_id: {ex.source_id}")
            seen.add(ex.source_id)
            if shape is None:
                shape = ex.data.shape
            elif ex.data.shape != shape:
                raise DatasetError(f"inconsistent shape for {ex.source_id}: {ex.data.shape} != {shape}")
            index.setdefault(ex.label, []).append(i)
        self._classes = tuple(sorted(index))
        self._class_index = {c: tuple(index[c]) for c in self._classes}
        self._shape = shape
        self._by_id = {ex.source_id: i for i, ex in enumerate(self._examples)}

    def __len__(self) -> int:
        return len(self._examples)

    def __iter__(self) -> Iterator[LabeledExample]:
        return iter(self._examples)

    def __getitem__(self, i: int) -> LabeledExample:
        return self._examples[i]

    def __eq__(self, other):
        if not isinstance(other, LongTailDataset):
            return NotImplemented
        if len(self) != len(other) or set(self._by_id) != set(other._by_id):
            return False
        return all(ex == other.by_id(ex.source_id) for ex in self._examples)

    __hash__ = None

    def __repr__(self) -> str:
        return f"LongTailDataset({len(self)} examples, {len(self._classes)} classes, shape={self._shape})"

    @property
    def examples(self) -> tuple[LabeledExample, ...]:
        return self._examples

    @property
    def classes(self) -> tuple[str, ...]:
        return self._classes

    @property
    def class_index(self) -> Mapping[str, tuple[int, ...]]:
        return self._class_index

    @property
    def input_shape(self) -> tuple[int, ...] | None:
        return self._shape

    @property
    def class_to_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self._classes)}

    def counts(self) -> dict[str, int]:
        return {c: len(ix) for c, ix in self._class_index.items()}

    def by_id(self, source_id: str) -> LabeledExample:
        return self._examples[self._by_id[source_id]]

    def has_id(self, source_id: str) -> bool:
        return source_id in self._by_id

    def subset(self, classes: Iterable[str]) -> LongTailDataset:
        keep = set(classes)
        unknown = keep - set(self._classes)
        if unknown:
            raise DatasetError(f"unknown classes: {sorted(unknown)}")
        return LongTailDataset(ex for ex in self._examples if ex.label in keep)

    def select_ids(self, source_ids: Iterable[str]) -> LongTailDataset:
        return LongTailDataset(self.by_id(s) for s in source_ids)

    def members(self, label: str) -> list[int]:
        """Indices of ``label``'s examples sorted by source_id (example-order independent)."""
        return sorted(self._class_index[label], key=lambda i: self._examples[i].source_id)

    def stack(self, indices: Sequence[int] | None = None) -> np.ndarray:
        idx = range(len(self)) if indices is None else indices
        return np.stack([self._examples[i].data for i in idx])


# --------------------------------------------------------------------------- partitions


@dataclass(frozen=True)
class ClassPartition:
    base_train: frozenset[str]
    base_val: frozenset[str]
    novel: frozenset[str]
    novel_max: int
    val_max: int
    excluded: frozenset[str] = frozenset()

    def __post_init__(self):
        for a, b in ((self.base_train, self.base_val), (self.base_train, self.novel), (self.base_val, self.novel)):
            if a & b:
                raise DatasetError(f"partition buckets overlap: {sorted(a & b)}")

    @property
    def base(self) -> frozenset[str]:
        return self.base_train | self.base_val

    def to_json(self) -> dict:
        return {
            "base_train": sorted(self.base_train),
            "base_val": sorted(self.base_val),
            "novel": sorted(self.novel),
            "excluded": sorted(self.excluded),
            "thresholds": {"novel_max": self.novel_max, "val_max": self.val_max},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> ClassPartition:
        th = obj["thresholds"]
        return cls(
            base_train=frozenset(obj["base_train"]),
            base_val=frozenset(obj["base_val"]),
            novel=frozenset(obj["novel"]),
            novel_max=int(th["novel_max"]),
            val_max=int(th["val_max"]),
            excluded=frozenset(obj.get("excluded", ())),
        )


def split_longtail(
    dataset: LongTailDataset,
    novel_max: int = 20,
    val_max: int = 30,
    exclude: Iterable[str] = (),
) -> ClassPartition:
    """Bucket classes by size: ``< novel_max`` novel, ``[novel_max, val_max]`` base-val, rest base-train."""
    if len(dataset) == 0:
        raise DatasetError("empty dataset")
    if not novel_max < val_max:
        raise DatasetError(f"novel_max ({novel_max}) must be < val_max ({val_max})")
    excluded = frozenset(exclude)
    train, val, novel = set(), set(), set()
    for label, n in dataset.counts().items():
        if label in excluded:
            continue
        if n < novel_max:
            novel.add(label)
        elif n <= val_max:
            val.add(label)
        else:
            train.add(label)
    for name, bucket in (("base_train", train), ("base_val", val), ("novel", novel)):
        if not bucket:
            log.warning("split_longtail: %s bucket is empty (thresholds %d/%d)", name, novel_max, val_max)
    return ClassPartition(
        frozenset(train), frozenset(val), frozenset(novel), novel_max, val_max, excluded & set(dataset.classes)
    )


@dataclass(frozen=True)
class FractionSplit:
    """Per-example stratified split of a dataset's classes into train and validation."""

    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    val_fraction: float
    seed: int

    def apply(self, dataset: LongTailDataset) -> tuple[LongTailDataset, LongTailDataset]:
        return dataset.select_ids(self.train_ids), dataset.select_ids(self.val_ids)


def split_fraction(dataset: LongTailDataset, val_fraction: float, seed: int) -> FractionSplit:
    if not 0.0 < val_fraction < 1.0:
        raise DatasetError(f"val_fraction must be in (0, 1), got {val_fraction}")
    train_ids: list[str] = []
    val_ids: list[str] = []
    for label in dataset.classes:
        ids = sorted(dataset[i].source_id for i in dataset.class_index[label])
        # never empties a training class
        n_val = min(math.ceil(val_fraction * len(ids)), len(ids) - 1)
        order = make_rng(seed, "split_fraction", label).permutation(len(ids))
        chosen = set(order[:n_val].tolist())
        for k, sid in enumerate(ids):
            (val_ids if k in chosen else train_ids).append(sid)
    return FractionSplit(tuple(sorted(train_ids)), tuple(sorted(val_ids)), val_fraction, seed)


# --------------------------------------------------------------------------- manifests


def _decode_payload(path: Path, source_id: str, tables: dict[Path, dict[str, np.ndarray]]) -> np.ndarray:
    suffix = path.suffix.lower()
    if suffix == ".npy":
        return np.load(path, allow_pickle=False)
    if suffix == ".psht":
        if path not in tables:
            tables[path] = binfmt.read_table(path)
        try:
            return tables[path][source_id]
        except KeyError:
            raise DatasetError(f"unknown source_id: {source_id} not in table {path.name}") from None
    if suffix in IMAGE_SUFFIXES:
        from PIL import Image

        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB") if img.mode not in ("L", "RGB") else img)
        arr = arr.astype(np.float32) / 255.0
        return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    raise DatasetError(f"unsupported payload format: {path.name}")


def load_manifest(path: str | Path) -> LongTailDataset:
    """Read a ``source_id,path,label`` CSV; payload paths are relative to the manifest."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    root = path.parent
    tables: dict[Path, dict[str, np.ndarray]] = {}
    examples: list[LabeledExample] = []
    seen: set[str] = set()
    shape = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(1, f"header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(row_no, f"expected 3 fields, got {len(row)}")
            source_id, rel, label = (f.strip() for f in row)
            if not source_id or not label:
                raise ManifestError(row_no, "empty source_id or label")
            if source_id in seen:
                raise ManifestError(row_no, f"duplicate source_id: {source_id}")
            seen.add(source_id)
            payload = root / rel
            if not payload.is_file():
                raise ManifestError(row_no, f"missing file: {rel}")
            try:
                data = _decode_payload(payload, source_id, tables)
                ex = LabeledExample(data, label, source_id)
            except (DatasetError, OSError, ValueError) as err:
                raise ManifestError(row_no, str(err)) from err
            if shape is None:
                shape = ex.data.shape
            elif ex.data.shape != shape:
                raise ManifestError(row_no, f"inconsistent tensor shape {ex.data.shape}, expected {shape}")
            examples.append(ex)
    return LongTailDataset(examples)


def _safe_name(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in s)


def save_manifest(dataset: LongTailDataset, path: str | Path) -> None:
    """Write payloads next to the manifest and the manifest itself.

    Images go to ``data/<label>/<source_id>.npy``; raw vectors go to one
    ``<manifest stem>.features.psht`` table keyed by source_id.
    """
    path = Path(path)
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    vectors = len(dataset) > 0 and not dataset[0].is_image
    if vectors:
        table_name = path.stem + ".features.psht"
        binfmt.write_table(root / table_name, {ex.source_id: ex.data for ex in dataset})
        rows = [(ex.source_id, table_name, ex.label) for ex in dataset]
    else:
        for ex in dataset:
            rel = Path("data") / _safe_name(ex.label) / (_safe_name(ex.source_id) + ".npy")
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            np.save(root / rel, ex.data)
            rows.append((ex.source_id, rel.as_posix(), ex.label))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(sorted(rows))


def import_class_folders(root: str | Path, manifest_path: str | Path) -> int:
    """Index a ``<root>/<label>/<file>`` tree into a manifest; returns the row count."""
    root = Path(root)
    manifest_path = Path(manifest_path)
    rows = []
    for label_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(label_dir.iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES + (".npy",):
                rel = Path(*f.relative_to(root).parts)
                source_id = f"{label_dir.name}/{f.stem}"
                rows.append((source_id, _relpath(root / rel, manifest_path.parent), label_dir.name))
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return len(rows)


def _relpath(target: Path, start: Path) -> str:
    import os

    return Path(os.path.relpath(target.resolve(), start.resolve())).as_posix()


# --------------------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian class clusters with geometric long-tail counts.

    ``count_c = max(floor(head * decay**c), tail_min)``. Class means sit on a
    sphere of radius ``class_separation`` inside a ``signal_dim``-dimensional
    subspace, so pairwise mean distance is at least ``class_separation``.
    Remaining dimensions carry ``nuisance_sigma`` noise only.

    Two specs sharing ``geometry_seed`` draw means from one sequence; use
    ``class_offset`` to give them disjoint, mutually separated classes in the
    same subspace (e.g. a source domain and a target domain).
    """

    num_classes: int
    head: int
    decay: float
    tail_min: int
    feature_dim: int
    class_separation: float
    noise_sigma: float
    seed: int
    signal_dim: int | None = None
    nuisance_sigma: float | None = None
    geometry_seed: int | None = None
    class_offset: int = 0
    prefix: str = "cls"

    def __post_init__(self):
        if self.num_classes < 1:
            raise DatasetError("num_classes must be >= 1")
        if not self.head >= self.tail_min >= 1:
            raise DatasetError(f"need head >= tail_min >= 1, got head={self.head}, tail_min={self.tail_min}")
        if not 0.0 < self.decay < 1.0:
            raise DatasetError(f"decay must be in (0, 1), got {self.decay}")
        if self.noise_sigma < 0 or (self.nuisance_sigma is not None and self.nuisance_sigma < 0):
            raise DatasetError("noise scales must be >= 0")
        if self.class_separation <= 0:
            raise DatasetError("class_separation must be > 0")
        if self.feature_dim < 1 or (self.signal_dim is not None and not 1 <= self.signal_dim <= self.feature_dim):
            raise DatasetError("need 1 <= signal_dim <= feature_dim")
        if self.class_offset < 0:
            raise DatasetError("class_offset must be >= 0")

    @property
    def counts(self) -> list[int]:
        return [max(math.floor(self.head * self.decay**c), self.tail_min) for c in range(self.num_classes)]

    def class_name(self, c: int) -> str:
        return f"{self.prefix}{self.class_offset + c:03d}"


_MAX_PLACEMENT_TRIES = 2000


def _class_geometry(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal basis (D x D, signal columns first) and the class means in signal coordinates."""
    d = spec.feature_dim
    s = spec.signal_dim or d
    rng = make_rng(spec.geometry_seed if spec.geometry_seed is not None else spec.seed, "geometry", d, s)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    basis = q * np.sign(np.diag(r))
    radius = spec.class_separation
    total = spec.class_offset + spec.num_classes
    points = np.empty((total, s))
    for c in range(total):
        for _ in range(_MAX_PLACEMENT_TRIES):
            u = rng.standard_normal(s)
            u *= radius / np.linalg.norm(u)
            if c == 0 or np.min(np.linalg.norm(points[:c] - u, axis=1)) >= spec.class_separation:
                points[c] = u
                break
        else:
            raise DatasetError(
                f"feature_dim too small: cannot place {total} class means at separation "
                f"{spec.class_separation} in {s} signal dimensions"
            )
    return basis, points[spec.class_offset :]


def class_means(spec: SyntheticSpec) -> np.ndarray:
    basis, coords = _class_geometry(spec)
    s = coords.shape[1]
    return (coords @ basis[:, :s].T).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec) -> LongTailDataset:
    basis, coords = _class_geometry(spec)
    s = coords.shape[1]
    nuisance = spec.noise_sigma if spec.nuisance_sigma is None else spec.nuisance_sigma
    scale = np.full(spec.feature_dim, nuisance)
    scale[:s] = spec.noise_sigma
    examples = []
    for c, n in enumerate(spec.counts):
        name = spec.class_name(c)
        mean = (coords[c] @ basis[:, :s].T).astype(np.float32)
        rng = make_rng(spec.seed, "samples", spec.class_offset + c)
        noise = (rng.standard_normal((n, spec.feature_dim)) * scale) @ basis.T
        values = mean + noise.astype(np.float32)
        for i in range(n):
            examples.append(LabeledExample(values[i], name, f"{name}-{i:04d}"))
    return LongTailDataset(examples)


def synthetic_images(
    num_classes: int,
    per_class: int,
    shape: tuple[int, int, int] = (3, 16, 16),
    noise_sigma: float = 0.1,
    seed: int = 0,
    prefix: str = "img",
) -> LongTailDataset:
    """Small image dataset: each class is a smooth random template plus clipped pixel noise."""
    c, h, w = shape
    rng = make_rng(seed, "images", shape)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    examples = []
    for k in range(num_classes):
        fx, fy, phase = rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0, 2 * np.pi, size=c)
        template = 0.5 + 0.35 * np.sin(2 * np.pi * (fx * xx[None] + fy * yy[None]) + phase[:, None, None])
        name = f"{prefix}{k:03d}"
        for i in range(per_class):
            img = np.clip(template + noise_sigma * rng.standard_normal(shape), 0.0, 1.0)
            examples.append(LabeledExample(img.astype(np.float32), name, f"{name}-{i:04d}"))
    return LongTailDataset(examples)


def write_partition(partition: ClassPartition, path: str | Path) -> None:
    Path(path).write_text(json.dumps(partition.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class BaseData:
    """Training-side view of a target domain: base-train examples plus optional base-val classes.

    Novel classes are deliberately not carried here.
    """

    train: LongTailDataset
    val: LongTailDataset | None = None
    classes: tuple[str, ...] = field(default=())

    @classmethod
    def from_partition(cls, dataset: LongTailDataset, partition: ClassPartition) -> BaseData:
        train = dataset.subset(partition.base_train)
        val = dataset.subset(partition.base_val) if partition.base_val else None
        return cls(train, val, tuple(sorted(partition.base)))
