"""Datasets: MNIST IDX ingestion, synthetic blobs, and node partitioning."""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError, PartitionError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
BUNDLED_MNIST = Path(__file__).parent / "_data" / "mnist"


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    source: str = "synthetic"

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float32)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2:
            raise DataError(f"inputs must be (samples, features), got shape {x.shape}")
        if len(x) != len(y):
            raise DataError(f"{len(x)} inputs but {len(y)} labels")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def width(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.n_classes, self.source)

    def classes_present(self) -> np.ndarray:
        return np.unique(self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


# -- MNIST ---------------------------------------------------------------

def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    buf = _read_bytes(Path(path))
    if len(buf) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", len(buf))
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{path}: truncated dimension header", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    need = header + math.prod(dims)
    if len(buf) < need:
        raise FormatError(f"{path}: truncated payload, expected {need} bytes", len(buf))
    if len(buf) > need:
        raise FormatError(f"{path}: {len(buf) - need} unexpected trailing bytes", need)
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return _read_idx(Path(path), IDX_IMAGES_MAGIC)


def read_idx_labels(path) -> np.ndarray:
    return _read_idx(Path(path), IDX_LABELS_MAGIC)


def _find(directory: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    return None


def load_mnist(data_dir=None, split: str = "auto") -> LabeledDataset:
    """Load MNIST images and labels from a directory of IDX files.

    ``split`` is ``"train"``, ``"t10k"`` or ``"auto"`` (train if present, else
    t10k). With no directory the bundled 10,000-digit subset is used.
    """
    directory = Path(data_dir) if data_dir else BUNDLED_MNIST
    prefixes = ["train", "t10k"] if split == "auto" else [split]
    for prefix in prefixes:
        img = _find(directory, f"{prefix}-images-idx3-ubyte")
        lab = _find(directory, f"{prefix}-labels-idx1-ubyte")
        if img and lab:
            break
    else:
        raise FileNotFoundError(f"no MNIST IDX files ({'/'.join(prefixes)}) in {directory}")
    images = read_idx_images(img)
    labels = read_idx_labels(lab)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels in {directory}")
    x = images.reshape(len(images), -1).astype(np.float32) / 255.0
    return LabeledDataset(x, labels.astype(np.int64), 10, "mnist")


# -- synthetic -----------------------------------------------------------

def gen_blobs(n_classes: int, per_class: int, dim: int, spread: float, seed: int = 0) -> LabeledDataset:
    """Gaussian clusters around seeded centers, clipped into the unit cube."""
    if min(n_classes, per_class, dim) < 1:
        raise ParameterError("n_classes, per_class and dim must be positive")
    if spread < 0:
        raise ParameterError(f"spread must be non-negative, got {spread}")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.15, 0.85, (n_classes, dim))
    labels = np.repeat(np.arange(n_classes), per_class)
    x = centers[labels] + rng.normal(0.0, 1.0, (labels.size, dim)) * spread
    order = rng.permutation(labels.size)
    return LabeledDataset(np.clip(x[order], 0.0, 1.0), labels[order], n_classes, "synthetic")


# -- splits --------------------------------------------------------------

def _class_indices(labels: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    idx = np.nonzero(labels == c)[0]
    return idx[rng.permutation(idx.size)]


def split_global_test(ds: LabeledDataset, fraction: float = 0.10, seed: int = 0
                      ) -> tuple[LabeledDataset, LabeledDataset]:
    """Class-stratified split into ``(pool, global_test)``."""
    if not 0 < fraction < 1:
        raise ParameterError(f"test fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    test = []
    for c in ds.classes_present():
        idx = _class_indices(ds.labels, c, rng)
        if idx.size < 2:
            raise DataError(f"class {c} has {idx.size} sample(s); stratification needs at least 2")
        k = min(max(int(round(fraction * idx.size)), 1), idx.size - 1)
        test.append(idx[:k])
    test_idx = np.sort(np.concatenate(test))
    mask = np.ones(len(ds), dtype=bool)
    mask[test_idx] = False
    return ds.subset(np.nonzero(mask)[0]), ds.subset(test_idx)


def stratified_subset(ds: LabeledDataset, n: int, seed: int = 0) -> LabeledDataset:
    """Draw ``n`` samples keeping class proportions (largest-remainder rounding)."""
    if n >= len(ds):
        return ds
    rng = np.random.default_rng(seed)
    counts = ds.class_counts()
    quota = counts * n / len(ds)
    take = np.floor(quota).astype(int)
    for c in np.argsort(-(quota - take), kind="stable")[: n - take.sum()]:
        take[c] += 1
    idx = [_class_indices(ds.labels, c, rng)[: take[c]] for c in range(ds.n_classes) if take[c]]
    return ds.subset(np.sort(np.concatenate(idx)))


def train_test_split(ds: LabeledDataset, train_fraction: float = 0.8, seed: int = 0
                     ) -> tuple[LabeledDataset, LabeledDataset]:
    if not 0 < train_fraction <= 1:
        raise ParameterError(f"train fraction must lie in (0, 1], got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(ds))
    k = max(1, int(round(train_fraction * len(ds))))
    return ds.subset(np.sort(order[:k])), ds.subset(np.sort(order[k:]))


# -- partitioning --------------------------------------------------------

class Scheme(str, Enum):
    IID = "iid"
    CLASS_FRACTION = "classes"
    DIRICHLET = "dirichlet"


@dataclass(frozen=True)
class PartitionSpec:
    scheme: Scheme
    n_nodes: int
    seed: int = 0
    fraction: float | None = None
    alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.n_nodes < 1:
            raise ParameterError(f"need at least one node, got {self.n_nodes}")
        if self.scheme is Scheme.CLASS_FRACTION and not (self.fraction and 0 < self.fraction <= 1):
            raise ParameterError(f"class fraction must lie in (0, 1], got {self.fraction}")
        if self.scheme is Scheme.DIRICHLET and not (self.alpha and self.alpha > 0):
            raise ParameterError(f"Dirichlet alpha must be positive, got {self.alpha}")

    @classmethod
    def parse(cls, text: str, n_nodes: int, seed: int = 0) -> "PartitionSpec":
        """``iid``, ``classes:P`` or ``dirichlet:A``."""
        name, _, arg = text.partition(":")
        try:
            scheme = Scheme(name)
            if scheme is Scheme.IID:
                if arg:
                    raise ValueError
                return cls(scheme, n_nodes, seed)
            value = float(arg)
        except ValueError:
            raise ParameterError(f"bad partition {text!r}; use iid, classes:P or dirichlet:A") from None
        if scheme is Scheme.CLASS_FRACTION:
            return cls(scheme, n_nodes, seed, fraction=value)
        return cls(scheme, n_nodes, seed, alpha=value)

    def __str__(self) -> str:
        if self.scheme is Scheme.IID:
            return "iid"
        return f"{self.scheme.value}:{self.fraction if self.scheme is Scheme.CLASS_FRACTION else self.alpha}"


def classes_per_node(fraction: float, n_classes: int) -> int:
    # the epsilon keeps 0.6 * 10 == 6.000000000000001 from rounding up to 7
    return min(n_classes, max(1, math.ceil(fraction * n_classes - 1e-9)))


def class_assignment(n_nodes: int, n_classes: int, fraction: float) -> list[list[int]]:
    """Rotation schedule: node i holds ``{(i*k + m) mod n : m < k}``."""
    k = classes_per_node(fraction, n_classes)
    if n_nodes * k < n_classes:
        raise PartitionError(f"{n_nodes} nodes x {k} classes cannot cover {n_classes} classes")
    return [sorted({(i * k + m) % n_classes for m in range(k)}) for i in range(n_nodes)]


def dirichlet_proportions(seed: int, class_id: int, n_nodes: int, alpha: float) -> np.ndarray:
    """Per-node share of one class, from normalized Gamma(alpha, 1) draws."""
    g = np.random.default_rng([seed, class_id]).gamma(alpha, 1.0, n_nodes)
    total = g.sum()
    if not total > 0:
        raise PartitionError(f"degenerate Dirichlet draw for class {class_id} (alpha={alpha})")
    return g / total


def partition(pool: LabeledDataset, spec: PartitionSpec) -> list[LabeledDataset]:
    """Split ``pool`` into ``spec.n_nodes`` disjoint shards whose union is the pool."""
    n, N = pool.n_classes, spec.n_nodes
    present = set(pool.classes_present().tolist())
    if present != set(range(n)):
        raise PartitionError(f"pool lacks classes {sorted(set(range(n)) - present)}")
    shards: list[list[np.ndarray]] = [[] for _ in range(N)]

    if spec.scheme is Scheme.IID:
        rng = np.random.default_rng([spec.seed, 0])
        order = np.concatenate([_class_indices(pool.labels, c, rng) for c in range(n)])
        for i in range(N):
            shards[i].append(order[i::N])
    elif spec.scheme is Scheme.CLASS_FRACTION:
        assignment = class_assignment(N, n, spec.fraction)
        for c in range(n):
            holders = [i for i, cls in enumerate(assignment) if c in cls]
            idx = _class_indices(pool.labels, c, np.random.default_rng([spec.seed, c, 1]))
            for i, part in zip(holders, np.array_split(idx, len(holders))):
                shards[i].append(part)
    else:
        for c in range(n):
            props = dirichlet_proportions(spec.seed, c, N, spec.alpha)
            idx = _class_indices(pool.labels, c, np.random.default_rng([spec.seed, c, 1]))
            cuts = np.floor(np.cumsum(props)[:-1] * idx.size).astype(int)
            for i, part in enumerate(np.split(idx, cuts)):
                shards[i].append(part)

    out = []
    for i, parts in enumerate(shards):
        idx = np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.intp)
        if idx.size == 0:
            raise PartitionError(f"node {i} received no samples under {spec}")
        out.append(pool.subset(idx))
    return out
