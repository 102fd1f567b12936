"""Semantic vectors, the linear semantic encoder and distance relations."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from joem.errors import InvalidInput, InvalidParameter, UnknownClass


class SemanticTable:
    """Per-class semantic vectors (the word-embedding stand-in).

    All reads of vectors go through :meth:`matrix`, which makes it possible
    to audit which classes a piece of code looked at (see
    :class:`LoggedSemanticTable`).
    """

    def __init__(self, vectors: Mapping[int, np.ndarray], names: Mapping[int, str] | None = None):
        if not vectors:
            raise InvalidInput("semantic table needs at least one class")
        self._vectors: dict[int, np.ndarray] = {}
        dim = None
        for cid, vec in vectors.items():
            vec = np.array(vec, dtype=np.float64).reshape(-1)
            if dim is None:
                dim = vec.size
            if vec.size != dim or dim == 0:
                raise InvalidInput(
                    f"class {cid} has a {vec.size}-dim vector, expected {dim}")
            if not np.all(np.isfinite(vec)):
                raise InvalidInput(f"class {cid} has a non-finite semantic vector")
            vec.flags.writeable = False
            self._vectors[int(cid)] = vec
        self.dim = int(dim)
        names = dict(names or {})
        self.names = {cid: names.get(cid, f"class{cid}") for cid in self._vectors}

    @property
    def ids(self) -> list[int]:
        return sorted(self._vectors)

    def __contains__(self, class_id) -> bool:
        return int(class_id) in self._vectors

    def __len__(self) -> int:
        return len(self._vectors)

    def _record(self, ids: list[int]) -> None:
        pass

    def matrix(self, classes: Iterable[int]) -> np.ndarray:
        """Stack the vectors of ``classes`` (in the given order) into a (K, D) array."""
        ids = [int(c) for c in classes]
        for c in ids:
            if c not in self._vectors:
                raise UnknownClass(c)
        self._record(ids)
        if not ids:
            return np.zeros((0, self.dim))
        return np.stack([self._vectors[c] for c in ids])

    def vector(self, class_id: int) -> np.ndarray:
        return self.matrix([class_id])[0]

    def subset(self, classes: Iterable[int]) -> "SemanticTable":
        classes = [int(c) for c in classes]
        mat = self.matrix(classes)
        return SemanticTable(dict(zip(classes, mat)), {c: self.names[c] for c in classes})

    def save(self, path) -> None:
        save_table(self, path)


class LoggedSemanticTable(SemanticTable):
    """SemanticTable that remembers every class id whose vector was read."""

    def __init__(self, table: SemanticTable):
        super().__init__({c: table._vectors[c] for c in table.ids}, table.names)
        self.reads: list[int] = []

    def _record(self, ids):
        self.reads.extend(ids)

    @property
    def classes_read(self) -> set[int]:
        return set(self.reads)


def save_table(table: SemanticTable, path) -> None:
    """Write ``<name> <id> <v_1> ... <v_D>`` lines, ids ascending."""
    lines = []
    for cid in table.ids:
        name = table.names[cid]
        if not name or any(ch.isspace() for ch in name):
            raise InvalidInput(f"class name {name!r} must be a single non-empty token")
        vec = table._vectors[cid]
        lines.append(" ".join([name, str(cid)] + [repr(float(x)) for x in vec]))
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_table(path) -> SemanticTable:
    vectors, names = {}, {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise InvalidInput(f"{path}:{lineno}: expected '<name> <id> <v_1> ... <v_D>'")
            try:
                cid = int(parts[1])
                vec = np.array([float(x) for x in parts[2:]])
            except ValueError as exc:
                raise InvalidInput(f"{path}:{lineno}: {exc}") from None
            if cid in vectors:
                raise InvalidInput(f"{path}:{lineno}: duplicate class id {cid}")
            if vectors and vec.size != next(iter(vectors.values())).size:
                raise InvalidInput(
                    f"{path}:{lineno}: dimension {vec.size} differs from earlier lines")
            vectors[cid] = vec
            names[cid] = parts[0]
    return SemanticTable(vectors, names)


@dataclass
class SemanticEncoderParams:
    """Linear (1x1 convolution) semantic encoder: ``mu = weight.T @ s + bias``."""

    weight: np.ndarray  # (D, C)
    bias: np.ndarray  # (C,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise InvalidInput(
                f"encoder weight {self.weight.shape} and bias {self.bias.shape} are inconsistent")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "SemanticEncoderParams":
        bound = 1.0 / np.sqrt(in_dim)
        return cls(rng.uniform(-bound, bound, (in_dim, out_dim)), np.zeros(out_dim))

    def copy(self) -> "SemanticEncoderParams":
        return SemanticEncoderParams(self.weight.copy(), self.bias.copy())


def encode_semantic(params: SemanticEncoderParams, s) -> np.ndarray:
    """Map semantic vectors (last axis D) to prototypes (last axis C)."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 0 or s.shape[-1] != params.in_dim:
        raise InvalidInput(
            f"semantic vector has dimension {s.shape[-1] if s.ndim else 0}, encoder expects {params.in_dim}")
    return s @ params.weight + params.bias


@dataclass
class PrototypeSet:
    """Class prototypes in the joint space, rows ordered by ascending class id."""

    ids: np.ndarray
    vectors: np.ndarray  # (K, C)

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != ids.size:
            raise InvalidInput(
                f"{ids.size} prototype ids do not match vectors of shape {vectors.shape}")
        if len(np.unique(ids)) != ids.size:
            raise InvalidInput("duplicate class id in prototype set")
        order = np.argsort(ids, kind="stable")
        self.ids = ids[order]
        self.vectors = vectors[order]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, class_id) -> np.ndarray:
        hits = np.flatnonzero(self.ids == int(class_id))
        if not hits.size:
            raise UnknownClass(int(class_id))
        return self.vectors[hits[0]]

    def as_dict(self) -> dict[int, np.ndarray]:
        return {int(c): v for c, v in zip(self.ids, self.vectors)}

    def merge(self, other: "PrototypeSet") -> "PrototypeSet":
        return PrototypeSet(np.concatenate([self.ids, other.ids]),
                            np.concatenate([self.vectors, other.vectors]))


def encode_prototype_set(params: SemanticEncoderParams, table: SemanticTable,
                         classes: Iterable[int]) -> PrototypeSet:
    classes = sorted(int(c) for c in classes)
    if not classes:
        return PrototypeSet(np.zeros(0, dtype=np.int64), np.zeros((0, params.out_dim)))
    return PrototypeSet(np.array(classes), encode_semantic(params, table.matrix(classes)))


def euclidean(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInput(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.sqrt(np.sum(diff * diff)))


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    """Plain Euclidean distance matrix between the rows of ``x``."""
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def softmax_offdiag(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a square matrix with the diagonal excluded (set to 0)."""
    k = logits.shape[0]
    masked = np.where(np.eye(k, dtype=bool), -np.inf, logits)
    masked = masked - masked.max(axis=1, keepdims=True)
    e = np.exp(masked)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class RelationMatrix:
    ids: list[int]
    probs: np.ndarray  # (K, K), zero diagonal, rows sum to 1

    def row(self, class_id) -> dict[int, float]:
        i = self.ids.index(int(class_id))
        return {c: float(p) for j, (c, p) in enumerate(zip(self.ids, self.probs[i])) if j != i}


def relation_matrix(vectors: Mapping[int, np.ndarray], tau: float) -> RelationMatrix:
    """Softmax over the other classes of ``-tau * distance`` for each class."""
    if not tau > 0:
        raise InvalidParameter(f"temperature must be positive, got {tau}")
    ids = sorted(int(c) for c in vectors)
    if len(ids) < 2:
        raise InvalidInput("a relation matrix needs at least two classes")
    x = np.stack([np.asarray(vectors[c], dtype=np.float64) for c in ids])
    return RelationMatrix(ids, softmax_offdiag(-tau * pairwise_distances(x)))
