"""Dataset construction, ingestion, partitioning, and label-noise injection.

Datasets are immutable once built (arrays are frozen), so shards and the
public pool can be shared freely across client threads. Noise injection
keeps the clean labels alongside the corrupted ones; training only ever
sees the noisy vector while evaluation uses the clean one.
"""

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IngestError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

NOISE_KINDS = ("symmetric", "pairflip", "none")
PARTITION_SCHEMES = ("iid-equal", "iid-sized", "label-skew")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with integer class labels in [0, class_count)."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labels.ndim != 1 or feats.shape[0] != labels.size:
            raise ConfigError("features must be N x d with one label per row")
        if feats.shape[0] == 0:
            raise ConfigError("dataset must be non-empty")
        if not np.all(np.isfinite(feats)):
            raise ConfigError("features must be finite")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ConfigError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "features", _freeze(feats))
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def size(self) -> int:
        return self.labels.size

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx].copy(), self.labels[idx].copy(), self.class_count)


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    rate: float
    seed: object = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError(f"noise rate must lie in [0, 1], got {self.rate}")


@dataclass(frozen=True)
class NoisyDataset:
    """A dataset plus a corrupted label vector; clean labels stay hidden
    from training and are only consulted by evaluation code."""

    base: Dataset
    noisy_labels: np.ndarray
    spec: NoiseSpec
    flipped: np.ndarray
    flip_fraction: float

    def __post_init__(self):
        noisy = np.asarray(self.noisy_labels, dtype=np.int64)
        flipped = np.asarray(self.flipped, dtype=bool)
        if noisy.shape != self.base.labels.shape or flipped.shape != noisy.shape:
            raise ConfigError("noisy labels and flip mask must match the base dataset")
        if noisy.size and (noisy.min() < 0 or noisy.max() >= self.base.class_count):
            raise ConfigError("noisy labels out of class range")
        if not np.array_equal(noisy != self.base.labels, flipped):
            raise ConfigError("flip mask must mark exactly the changed records")
        object.__setattr__(self, "noisy_labels", _freeze(noisy))
        object.__setattr__(self, "flipped", _freeze(flipped))

    @property
    def size(self) -> int:
        return self.base.size


@dataclass(frozen=True)
class PartitionPlan:
    scheme: str
    client_count: int
    seed: object
    sizes: tuple | None = None
    concentration: float | None = None

    def __post_init__(self):
        if self.scheme not in PARTITION_SCHEMES:
            raise ConfigError(f"unknown partition scheme {self.scheme!r}")
        if self.client_count < 1:
            raise ConfigError("client_count must be at least 1")
        if self.sizes is not None:
            sizes = tuple(int(s) for s in self.sizes)
            if len(sizes) != self.client_count or any(s < 1 for s in sizes):
                raise ConfigError("sizes must give a positive size per client")
            object.__setattr__(self, "sizes", sizes)
        if self.scheme == "label-skew" and (
            self.concentration is None or self.concentration <= 0
        ):
            raise ConfigError("label-skew requires a positive concentration")


def gen_blobs(classes: int, dims: int, per_class: int, spread: float, seed) -> Dataset:
    """Gaussian clusters, one per class, on a deterministic layout.

    Centroids sit on the simplex vertices when dims >= classes, on the unit
    circle in the first two coordinates when dims >= 2, and evenly spaced
    on a line for dims == 1.
    """
    if classes < 2:
        raise ConfigError("need at least two classes")
    if per_class < 1 or dims < 1:
        raise ConfigError("per_class and dims must be positive")
    if spread < 0:
        raise ConfigError("spread must be non-negative")
    centroids = np.zeros((classes, dims))
    if dims >= classes:
        centroids[np.arange(classes), np.arange(classes)] = 1.0
    elif dims >= 2:
        angles = 2.0 * np.pi * np.arange(classes) / classes
        centroids[:, 0] = np.cos(angles)
        centroids[:, 1] = np.sin(angles)
    else:
        centroids[:, 0] = np.linspace(-1.0, 1.0, classes)
    rng = np.random.default_rng(seed)
    features = np.empty((classes * per_class, dims))
    labels = np.repeat(np.arange(classes), per_class)
    for c in range(classes):
        block = slice(c * per_class, (c + 1) * per_class)
        features[block] = centroids[c] + spread * rng.standard_normal((per_class, dims))
    return Dataset(features, labels, classes)


def _read_exact(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def load_idx(images_path: str, labels_path: str, class_count: int | None = None) -> Dataset:
    """Load a big-endian IDX image/label file pair; pixels scaled to [0, 1]."""
    raw = _read_exact(images_path)
    if len(raw) < 16:
        raise IngestError(f"{images_path}: truncated header at byte {len(raw)}")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise IngestError(f"{images_path}: bad magic 0x{magic:08x} at byte 0")
    expected = 16 + count * rows * cols
    if len(raw) < expected:
        raise IngestError(
            f"{images_path}: truncated payload at byte {len(raw)}, expected {expected}"
        )
    features = (
        np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
        .reshape(count, rows * cols)
        .astype(np.float64)
        / 255.0
    )

    raw_l = _read_exact(labels_path)
    if len(raw_l) < 8:
        raise IngestError(f"{labels_path}: truncated header at byte {len(raw_l)}")
    magic_l, count_l = struct.unpack(">II", raw_l[:8])
    if magic_l != IDX_LABEL_MAGIC:
        raise IngestError(f"{labels_path}: bad magic 0x{magic_l:08x} at byte 0")
    if len(raw_l) < 8 + count_l:
        raise IngestError(
            f"{labels_path}: truncated payload at byte {len(raw_l)}, expected {8 + count_l}"
        )
    labels = np.frombuffer(raw_l, dtype=np.uint8, count=count_l, offset=8).astype(np.int64)
    if count != count_l:
        raise IngestError(
            f"image count {count} does not match label count {count_l}"
        )
    c = int(labels.max()) + 1 if class_count is None else class_count
    bad = np.flatnonzero(labels >= c)
    if bad.size:
        raise IngestError(
            f"{labels_path}: label {labels[bad[0]]} >= {c} at item {bad[0]} "
            f"(byte {8 + bad[0]})"
        )
    return Dataset(features, labels, c)


@dataclass(frozen=True)
class CsvSchema:
    class_count: int
    feature_count: int | None = None


def load_csv(path: str, schema: CsvSchema) -> Dataset:
    """Load `label,f0,f1,...` rows; features min-max scaled per column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        width = schema.feature_count if schema.feature_count is not None else len(header) - 1
        expected = ["label"] + [f"f{i}" for i in range(width)]
        if [h.strip() for h in header] != expected:
            raise IngestError(f"{path}: line 1: header must be {','.join(expected)}")
        rows = []
        labels = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise IngestError(f"{path}: line {lineno}: expected {width + 1} fields")
            try:
                label = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise IngestError(f"{path}: line {lineno}: {exc}") from None
            if not 0 <= label < schema.class_count:
                raise IngestError(
                    f"{path}: line {lineno}: label {label} outside [0, {schema.class_count})"
                )
            labels.append(label)
            rows.append(values)
    if not rows:
        raise IngestError(f"{path}: no data rows")
    features = np.asarray(rows, dtype=np.float64)
    lo = features.min(axis=0)
    span = features.max(axis=0) - lo
    span[span == 0] = 1.0
    features = (features - lo) / span
    return Dataset(features, np.asarray(labels), schema.class_count)


def _partition_indices(ds: Dataset, plan: PartitionPlan) -> list[np.ndarray]:
    rng = np.random.default_rng(plan.seed)
    n = ds.size
    k = plan.client_count
    if plan.scheme == "iid-equal":
        if plan.sizes is not None and len(set(plan.sizes)) > 1:
            raise ConfigError("iid-equal shards must share one size")
        sizes = list(plan.sizes) if plan.sizes is not None else [n // k] * k
    else:
        if plan.sizes is None:
            raise ConfigError(f"{plan.scheme} partitioning requires explicit sizes")
        sizes = list(plan.sizes)
    if sum(sizes) > n:
        raise ConfigError(f"requested {sum(sizes)} samples but dataset has {n}")
    if any(s == 0 for s in sizes):
        raise ConfigError("every client needs at least one sample")

    if plan.scheme in ("iid-equal", "iid-sized"):
        perm = rng.permutation(n)
        shards = []
        offset = 0
        for s in sizes:
            shards.append(np.sort(perm[offset : offset + s]))
            offset += s
        return shards

    # label-skew: each client draws a Dirichlet class mix and fills its
    # quota from per-class pools, spilling to whatever classes remain.
    pools = [rng.permutation(np.flatnonzero(ds.labels == c)).tolist() for c in range(ds.class_count)]
    shards = []
    for size in sizes:
        mix = rng.dirichlet(np.full(ds.class_count, plan.concentration))
        want = np.floor(mix * size).astype(int)
        remainder = size - want.sum()
        if remainder:
            extra = np.argsort(-(mix * size - want), kind="mergesort")[:remainder]
            want[extra] += 1
        taken = []
        for c in range(ds.class_count):
            grab = min(want[c], len(pools[c]))
            taken.extend(pools[c][:grab])
            del pools[c][:grab]
        deficit = size - len(taken)
        while deficit > 0:
            richest = max(range(ds.class_count), key=lambda c: len(pools[c]))
            if not pools[richest]:
                raise ConfigError("not enough samples to honor the partition sizes")
            grab = min(deficit, len(pools[richest]))
            taken.extend(pools[richest][:grab])
            del pools[richest][:grab]
            deficit -= grab
        shards.append(np.sort(np.asarray(taken, dtype=np.int64)))
    return shards


def partition(ds: Dataset, plan: PartitionPlan) -> list[Dataset]:
    """Split a dataset into disjoint client shards according to the plan."""
    return [ds.subset(idx) for idx in _partition_indices(ds, plan)]


def inject_symmetric(ds: Dataset, mu: float, seed) -> NoisyDataset:
    """Flip each label with probability mu to a uniform other class."""
    if not 0.0 <= mu <= 1.0:
        raise ConfigError(f"noise rate must lie in [0, 1], got {mu}")
    if ds.class_count < 2:
        raise ConfigError("symmetric noise needs at least two classes")
    rng = np.random.default_rng(seed)
    flip = rng.random(ds.size) < mu
    offsets = rng.integers(1, ds.class_count, size=ds.size)
    noisy = np.where(flip, (ds.labels + offsets) % ds.class_count, ds.labels)
    return NoisyDataset(ds, noisy, NoiseSpec("symmetric", mu, seed), flip, float(flip.mean()))


def inject_pairflip(ds: Dataset, mu: float, seed) -> NoisyDataset:
    """Flip each label with probability mu to the next class (cyclic)."""
    if not 0.0 <= mu <= 1.0:
        raise ConfigError(f"noise rate must lie in [0, 1], got {mu}")
    if ds.class_count < 2:
        raise ConfigError("pairflip noise needs at least two classes")
    rng = np.random.default_rng(seed)
    flip = rng.random(ds.size) < mu
    noisy = np.where(flip, (ds.labels + 1) % ds.class_count, ds.labels)
    return NoisyDataset(ds, noisy, NoiseSpec("pairflip", mu, seed), flip, float(flip.mean()))


def apply_noise(ds: Dataset, spec: NoiseSpec) -> NoisyDataset:
    if spec.kind == "symmetric":
        return inject_symmetric(ds, spec.rate, spec.seed)
    if spec.kind == "pairflip":
        return inject_pairflip(ds, spec.rate, spec.seed)
    clean = ds.labels.copy()
    return NoisyDataset(ds, clean, spec, np.zeros(ds.size, dtype=bool), 0.0)


def random_split(ds: Dataset, take: int, seed) -> tuple[Dataset, Dataset | None]:
    """Uniform sample without replacement plus the disjoint remainder."""
    if take <= 0:
        raise ConfigError("split size must be positive")
    if take > ds.size:
        raise ConfigError(f"cannot take {take} samples from {ds.size}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.size)
    taken = ds.subset(perm[:take])
    rest = ds.subset(np.sort(perm[take:])) if take < ds.size else None
    return taken, rest


def sample_public(ds: Dataset, n_pub: int, seed) -> Dataset:
    """Uniform public sample; labels ride along but distillation ignores them."""
    return random_split(ds, n_pub, seed)[0]
