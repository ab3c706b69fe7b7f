"""Class prototypes: local means, cross-node aggregation, nearest-prototype inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, DimensionError, ProtocolError, StateError
from .functional import LabelBatch, mse
from .model import forward_split
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class Prototype:
    class_id: int
    vector: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise DataError(f"prototype for class {self.class_id} has count {self.count}")
        vec = np.asarray(self.vector, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(vec)):
            raise DataError(f"prototype for class {self.class_id} is not finite")
        object.__setattr__(self, "vector", vec)

    def __eq__(self, other):
        return (isinstance(other, Prototype) and self.class_id == other.class_id
                and self.count == other.count and np.array_equal(self.vector, other.vector))


@dataclass(frozen=True)
class GlobalPrototype:
    vector: np.ndarray
    contributing_nodes: int
    total_count: int


class GlobalPrototypeTable:
    """Read-only mapping ``class_id -> GlobalPrototype``; may cover only some classes."""

    def __init__(self, entries: Mapping[int, GlobalPrototype] | None = None):
        self._entries = dict(sorted((entries or {}).items()))
        self.classes = np.fromiter(self._entries, dtype=np.int64, count=len(self._entries))
        if self._entries:
            self.matrix = np.stack([e.vector for e in self._entries.values()]).astype(np.float32)
            self.width = self.matrix.shape[1]
        else:
            self.matrix = np.zeros((0, 0), dtype=np.float32)
            self.width = None
        self._row = {c: i for i, c in enumerate(self._entries)}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, class_id) -> bool:
        return int(class_id) in self._entries

    def __getitem__(self, class_id) -> GlobalPrototype:
        return self._entries[int(class_id)]

    def items(self):
        return self._entries.items()

    def rows_for(self, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Sample indices whose label has a prototype, and the matching table rows."""
        known = np.isin(labels, self.classes)
        samples = np.nonzero(known)[0]
        return samples, np.array([self._row[int(c)] for c in labels[samples]], dtype=np.intp)

    def __repr__(self) -> str:
        return f"GlobalPrototypeTable(classes={self.classes.tolist()}, width={self.width})"


def compute_local_prototypes(model, inputs, labels, batch_size: int = 1024) -> list[Prototype]:
    """Mean representation per locally present class, in ascending class order."""
    inputs = np.asarray(inputs)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise DataError("cannot compute prototypes of an empty dataset")
    if len(inputs) != len(labels):
        raise DimensionError("input rows vs labels", len(labels), len(inputs))
    reprs = []
    with no_grad():
        for start in range(0, len(labels), batch_size):
            r, _ = forward_split(model, Tensor(inputs[start:start + batch_size]))
            reprs.append(r.data)
    reps = np.concatenate(reprs).astype(np.float64)
    protos = []
    for c in np.unique(labels):
        members = reps[labels == c]
        protos.append(Prototype(int(c), members.mean(axis=0), len(members)))
    return protos


def aggregate_global(prototype_sets: Iterable[tuple[int, Sequence[Prototype]]],
                     divide_protos_by_nodes: bool = False) -> GlobalPrototypeTable:
    """Count-weighted mean of each class's prototypes across nodes.

    With ``divide_protos_by_nodes`` the weighted mean is additionally divided by the number
    of contributing nodes.
    """
    submissions = sorted(prototype_sets, key=lambda s: s[0])
    ids = [node for node, _ in submissions]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate node submissions in {ids}")
    width = None
    per_class: dict[int, list[Prototype]] = {}
    for node, protos in submissions:
        seen = set()
        for p in protos:
            if p.class_id in seen:
                raise ProtocolError(f"node {node} sent class {p.class_id} twice")
            seen.add(p.class_id)
            if width is None:
                width = p.vector.size
            elif p.vector.size != width:
                raise DimensionError(f"prototype width from node {node}", width, p.vector.size)
            per_class.setdefault(p.class_id, []).append(p)

    entries = {}
    for c, protos in per_class.items():
        total = sum(p.count for p in protos)
        vec = np.zeros(width, dtype=np.float64)
        for p in protos:
            vec += (p.count / total) * p.vector.astype(np.float64)
        if divide_protos_by_nodes:
            vec /= len(protos)
        entries[c] = GlobalPrototype(vec.astype(np.float32), len(protos), total)
    return GlobalPrototypeTable(entries)


def _squared_distances(reprs: np.ndarray, table: GlobalPrototypeTable) -> np.ndarray:
    if len(table) == 0:
        raise StateError("nearest-prototype inference needs a non-empty prototype table")
    reprs = np.asarray(reprs, dtype=np.float64)
    if reprs.shape[-1] != table.width:
        raise DimensionError("representation width", table.width, reprs.shape[-1])
    diff = reprs[:, None, :] - table.matrix.astype(np.float64)[None, :, :]
    return np.einsum("bkd,bkd->bk", diff, diff)


def predict_nearest_batch(reprs, table: GlobalPrototypeTable) -> np.ndarray:
    """Class of the Euclidean-closest prototype for each row; ties go to the smaller class id."""
    if isinstance(reprs, Tensor):
        reprs = reprs.data
    reprs = np.asarray(reprs)
    if reprs.ndim != 2:
        raise DimensionError("representation batch", "(batch, width)", reprs.shape)
    # classes are sorted ascending and argmin returns the first minimum
    return table.classes[np.argmin(_squared_distances(reprs, table), axis=1)]


def predict_nearest(repr_vec, table: GlobalPrototypeTable) -> int:
    if isinstance(repr_vec, Tensor):
        repr_vec = repr_vec.data
    return int(predict_nearest_batch(np.asarray(repr_vec).reshape(1, -1), table)[0])


def proto_mse_term(repr_batch: Tensor, labels: LabelBatch, table: GlobalPrototypeTable) -> Tensor:
    """Mean squared distance between each sample's representation and its class prototype.

    Samples whose class has no prototype are left out; with none left the term is 0.
    """
    if len(table) and repr_batch.shape[-1] != table.width:
        raise DimensionError("representation width vs prototype width", table.width, repr_batch.shape[-1])
    samples, rows = table.rows_for(labels.labels) if len(table) else (np.zeros(0, np.intp), None)
    if samples.size == 0:
        return Tensor(0.0, dtype=repr_batch.dtype)
    target = Tensor(table.matrix[rows], dtype=repr_batch.dtype)
    return mse(repr_batch.take_rows(samples), target)
