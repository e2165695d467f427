"""Feature, label and split file formats, dataset container, synthetic benchmark.

Binary layouts (all little-endian):

* feature file: ``b"CFZ1"``, ``u32 rows``, ``u32 cols``, then ``rows*cols`` float32, row-major
* label file: ``b"CLZ1"``, ``u32 n``, then ``n`` u32 class ids

Split files are text::

    seen: 0,3,4
    unseen: 1,2
    test: 10,11,12
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ndcore import make_rng

FEATURE_MAGIC = b"CFZ1"
LABEL_MAGIC = b"CLZ1"
MAX_ELEMENTS = 2**32 - 1

# seen/unseen class counts and attribute widths of the standard benchmarks
PRESET_CLASSES = {"cub": (150, 50), "sun": (645, 72), "awa2": (40, 10)}
PRESET_ATTRIBUTE_DIMS = {"cub": 312, "sun": 102, "awa2": 85}


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class CountOverflowError(FormatError):
    pass


class EmptyMatrixError(FormatError):
    pass


class SplitError(ValueError):
    pass


# -- binary matrices -------------------------------------------------------------

def feature_bytes(matrix: np.ndarray) -> bytes:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    rows, cols = matrix.shape
    return FEATURE_MAGIC + struct.pack("<II", rows, cols) + np.ascontiguousarray(matrix, dtype="<f4").tobytes()


def save_feature_file(path, matrix: np.ndarray) -> None:
    Path(path).write_bytes(feature_bytes(matrix))


def parse_feature_bytes(raw: bytes) -> np.ndarray:
    if raw[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"bad feature-file magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}")
    if len(raw) < 12:
        raise TruncatedPayloadError("feature-file header shorter than 12 bytes")
    rows, cols = struct.unpack("<II", raw[4:12])
    if rows == 0 or cols == 0:
        raise EmptyMatrixError(f"feature file declares an empty matrix ({rows} x {cols})")
    count = rows * cols
    if count > MAX_ELEMENTS:
        raise CountOverflowError(f"{rows} x {cols} elements exceed the {MAX_ELEMENTS} limit")
    need = 12 + 4 * count
    if len(raw) < need:
        raise TruncatedPayloadError(f"feature payload has {len(raw) - 12} bytes, expected {4 * count}")
    if len(raw) > need:
        raise FormatError(f"{len(raw) - need} trailing bytes after feature payload")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=12).reshape(rows, cols).astype(np.float64)


def load_feature_file(path) -> np.ndarray:
    return parse_feature_bytes(Path(path).read_bytes())


def label_bytes(labels) -> bytes:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > MAX_ELEMENTS):
        raise ValueError("label ids must fit in u32")
    return LABEL_MAGIC + struct.pack("<I", labels.size) + labels.astype("<u4").tobytes()


def save_label_file(path, labels) -> None:
    Path(path).write_bytes(label_bytes(labels))


def parse_label_bytes(raw: bytes) -> np.ndarray:
    if raw[:4] != LABEL_MAGIC:
        raise BadMagicError(f"bad label-file magic {raw[:4]!r}, expected {LABEL_MAGIC!r}")
    if len(raw) < 8:
        raise TruncatedPayloadError("label-file header shorter than 8 bytes")
    (n,) = struct.unpack("<I", raw[4:8])
    if n == 0:
        raise EmptyMatrixError("label file declares zero labels")
    need = 8 + 4 * n
    if len(raw) < need:
        raise TruncatedPayloadError(f"label payload has {len(raw) - 8} bytes, expected {4 * n}")
    if len(raw) > need:
        raise FormatError(f"{len(raw) - need} trailing bytes after label payload")
    return np.frombuffer(raw, dtype="<u4", count=n, offset=8).astype(np.int64)


def load_label_file(path) -> np.ndarray:
    return parse_label_bytes(Path(path).read_bytes())


# -- splits ----------------------------------------------------------------------

@dataclass
class SplitSpec:
    seen: np.ndarray
    unseen: np.ndarray
    test_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.seen = np.asarray(self.seen, dtype=np.int64)
        self.unseen = np.asarray(self.unseen, dtype=np.int64)
        self.test_rows = np.asarray(self.test_rows, dtype=np.int64)

    def validate(self, n_classes: int | None = None, n_rows: int | None = None) -> "SplitSpec":
        both = np.intersect1d(self.seen, self.unseen)
        if both.size:
            raise SplitError(f"class ids listed as both seen and unseen: {both.tolist()}")
        for name, ids in (("seen", self.seen), ("unseen", self.unseen), ("test", self.test_rows)):
            if np.unique(ids).size != ids.size:
                raise SplitError(f"duplicate ids in {name} list")
            if ids.size and ids.min() < 0:
                raise SplitError(f"negative id in {name} list")
        if n_classes is not None:
            bad = np.concatenate([self.seen, self.unseen])
            bad = bad[bad >= n_classes]
            if bad.size:
                raise SplitError(f"unknown class ids {bad.tolist()} (only {n_classes} classes)")
        if n_rows is not None and self.test_rows.size and self.test_rows.max() >= n_rows:
            raise SplitError(f"test row {self.test_rows.max()} out of range for {n_rows} rows")
        return self

    def to_text(self) -> str:
        def fmt(ids):
            return ",".join(str(int(i)) for i in ids)
        return f"seen: {fmt(self.seen)}\nunseen: {fmt(self.unseen)}\ntest: {fmt(self.test_rows)}\n"


def parse_split(text: str, n_classes: int | None = None, n_rows: int | None = None) -> SplitSpec:
    found: dict[str, list[int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, rest = line.partition(":")
        key = key.strip()
        if not sep or key not in ("seen", "unseen", "test"):
            raise SplitError(f"line {lineno}: expected 'seen:', 'unseen:' or 'test:', got {line!r}")
        if key in found:
            raise SplitError(f"line {lineno}: {key!r} given twice")
        try:
            found[key] = [int(tok) for tok in re.split(r"[,\s]+", rest) if tok]
        except ValueError:
            raise SplitError(f"line {lineno}: non-integer id in {rest.strip()!r}") from None
    for key in ("seen", "unseen", "test"):
        if key not in found:
            raise SplitError(f"split is missing the {key!r} line")
    split = SplitSpec(found["seen"], found["unseen"], found["test"])
    return split.validate(n_classes, n_rows)


def load_split(path, n_classes: int | None = None, n_rows: int | None = None) -> SplitSpec:
    return parse_split(Path(path).read_text(), n_classes, n_rows)


def save_split(path, split: SplitSpec) -> None:
    Path(path).write_text(split.to_text())


def preset_split_stub(preset: str) -> str:
    """Split text with the class counts of a benchmark and consecutive ids."""
    if preset not in PRESET_CLASSES:
        raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESET_CLASSES)}")
    k_seen, k_unseen = PRESET_CLASSES[preset]
    return SplitSpec(np.arange(k_seen), np.arange(k_seen, k_seen + k_unseen)).to_text()


# -- dataset ---------------------------------------------------------------------

@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray
    split: SplitSpec

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    @property
    def n_classes(self) -> int:
        return self.attributes.shape[0]

    def validate(self) -> None:
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise ValueError(f"{self.labels.size} labels for {n} feature rows")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes}), got max {self.labels.max()}")
        self.split.validate(self.n_classes, n)
        bad = np.setdiff1d(self.labels[self.train_rows], self.split.seen)
        if bad.size:
            raise SplitError(f"training rows carry non-seen classes {bad.tolist()}")

    @property
    def train_rows(self) -> np.ndarray:
        mask = np.ones(self.features.shape[0], dtype=bool)
        mask[self.split.test_rows] = False
        return np.flatnonzero(mask)

    @property
    def test_seen_rows(self) -> np.ndarray:
        t = self.split.test_rows
        return t[np.isin(self.labels[t], self.split.seen)]

    @property
    def test_unseen_rows(self) -> np.ndarray:
        t = self.split.test_rows
        return t[np.isin(self.labels[t], self.split.unseen)]

    def save(self, directory) -> dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = dataset_paths(d)
        save_feature_file(paths["features"], self.features)
        save_label_file(paths["labels"], self.labels)
        save_feature_file(paths["attributes"], self.attributes)
        save_split(paths["split"], self.split)
        return paths


def dataset_paths(directory) -> dict[str, Path]:
    d = Path(directory)
    return {"features": d / "features.cfz", "labels": d / "labels.clz",
            "attributes": d / "attributes.cfz", "split": d / "split.txt"}


def load_dataset(directory) -> Dataset:
    paths = dataset_paths(directory)
    for p in paths.values():
        if not p.exists():
            raise FileNotFoundError(f"missing dataset file {p}")
    features = load_feature_file(paths["features"])
    labels = load_label_file(paths["labels"])
    attributes = load_feature_file(paths["attributes"])
    split = load_split(paths["split"], attributes.shape[0], features.shape[0])
    return Dataset(features, labels, attributes, split)


@dataclass
class SyntheticSpec:
    k_seen: int = 15
    k_unseen: int = 5
    d_a: int = 16
    d_f: int = 64
    samples_per_class: int = 100
    cluster_spread: float = 0.2
    overlap: float = 0.3
    nuisance_rank: int = 4
    nuisance_scale: float = 10.0
    test_fraction: float = 0.2
    seed: int = 7

    def validate(self) -> None:
        if self.k_seen < 1 or self.k_unseen < 1:
            raise ValueError("need at least one seen and one unseen class")
        if self.d_a < 1 or self.d_f < 1 or self.samples_per_class < 2:
            raise ValueError("dimensions must be >= 1 and samples_per_class >= 2")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError(f"overlap must lie in [0, 1], got {self.overlap}")
        if self.cluster_spread < 0 or self.nuisance_scale < 0:
            raise ValueError("cluster_spread and nuisance_scale must be >= 0")
        if not 0 <= self.nuisance_rank <= self.d_f:
            raise ValueError(f"nuisance_rank must lie in [0, d_f], got {self.nuisance_rank}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Attribute-conditioned Gaussian clusters.

    Class means are ``a_k @ A`` for a random non-negative linear map ``A``,
    pulled toward their global mean by ``overlap``. Within-class noise is
    ``cluster_spread`` times an isotropic normal plus a class-independent
    component along ``nuisance_rank`` random orthonormal directions, scaled by
    ``nuisance_scale``; it stands in for the pose/background variation that
    real image features share across classes. Seen classes contribute
    ``test_fraction`` of their rows to the test set; unseen rows are all test.
    Features are rounded to float32 so a save/load round trip is lossless.
    """
    spec.validate()
    rng = make_rng(spec.seed)
    k = spec.k_seen + spec.k_unseen
    attributes = rng.uniform(0.0, 1.0, size=(k, spec.d_a))
    lin = rng.uniform(0.0, 1.0, size=(spec.d_a, spec.d_f))
    means = attributes @ lin
    means = (1.0 - spec.overlap) * means + spec.overlap * means.mean(axis=0)
    labels = np.repeat(np.arange(k), spec.samples_per_class)
    noise = rng.standard_normal((labels.size, spec.d_f))
    if spec.nuisance_rank:
        basis = np.linalg.qr(rng.standard_normal((spec.d_f, spec.nuisance_rank)))[0].T
        noise += spec.nuisance_scale * rng.standard_normal((labels.size, spec.nuisance_rank)) @ basis
    features = means[labels] + spec.cluster_spread * noise
    order = rng.permutation(k)
    seen, unseen = np.sort(order[:spec.k_seen]), np.sort(order[spec.k_seen:])
    n_test = max(1, int(round(spec.test_fraction * spec.samples_per_class)))
    test = []
    for c in range(k):
        rows = np.flatnonzero(labels == c)
        test.append(rows if c in unseen else rng.permutation(rows)[:n_test])
    test_rows = np.sort(np.concatenate(test))
    return Dataset(features.astype(np.float32).astype(np.float64), labels,
                   attributes.astype(np.float32).astype(np.float64), SplitSpec(seen, unseen, test_rows))
