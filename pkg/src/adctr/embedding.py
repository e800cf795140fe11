"""The shared embedding table and the gather/sum that turns encoded ads into
dense per-group vectors, together with its exact adjoint (gradient scatter).

One table is shared by all ad groups: a feature index means the same thing
wherever it appears. A group's vector is the concatenation, in schema order,
of one K-dim segment per field; multivalent segments are the sum over the
field's index bag (an empty bag contributes a zero segment).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import Array, ContractViolation
from .schema import EncodedInstance, FieldKind, GroupSchema

INIT_SCALE = 0.01  # keeps initial logits near 0 so sigmoid starts around 0.5


@dataclass
class EmbeddingTable:
    e: Array  # (N, K)

    @property
    def n(self) -> int:
        return self.e.shape[0]

    @property
    def k(self) -> int:
        return self.e.shape[1]

    @classmethod
    def init(cls, vocab_size: int, k: int, rng: np.random.Generator) -> "EmbeddingTable":
        return cls(rng.uniform(-INIT_SCALE, INIT_SCALE, size=(vocab_size, k)))


@dataclass(frozen=True)
class InstanceEmbedding:
    """Dense vector for one ad; dim = K * number of fields in its group."""

    group: str
    vector: Array


def group_dim(schema: GroupSchema, k: int) -> int:
    return k * len(schema.fields)


def embed_instance(inst: EncodedInstance, table: EmbeddingTable,
                   group_schema: GroupSchema) -> InstanceEmbedding:
    """Gather-and-sum one instance into its group vector."""
    mat = embed_matrix([inst], table, group_schema)
    return InstanceEmbedding(group=inst.group, vector=mat[0])


def embed_gradient_scatter(inst: EncodedInstance, upstream: Array) -> list[tuple[int, Array]]:
    """Adjoint of embed_instance: route the upstream gradient back to rows.

    Returns (row, K-grad) pairs; rows referenced several times appear once per
    occurrence, and untouched rows do not appear at all.
    """
    k = upstream.shape[0] // len(inst.indices)
    if upstream.shape != (k * len(inst.indices),):
        raise ContractViolation("upstream gradient dim does not match the instance")
    out: list[tuple[int, Array]] = []
    for fi, idx_list in enumerate(inst.indices):
        seg = upstream[fi * k : (fi + 1) * k]
        for idx in idx_list:
            out.append((idx, seg))
    return out


def _check_bounds(indices: Array, n: int) -> None:
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise ContractViolation("feature index out of range for the embedding table")


def embed_matrix(instances: Sequence[EncodedInstance], table: EmbeddingTable,
                 group_schema: GroupSchema) -> Array:
    """Embed a batch of same-group instances into an (M, D_group) matrix."""
    m, k = len(instances), table.k
    out = np.zeros((m, group_dim(group_schema, k)))
    if m == 0:
        return out
    for fi, fs in enumerate(group_schema.fields):
        lo = fi * k
        if fs.kind == FieldKind.MULTIVALENT:
            flat = np.array([i for inst in instances for i in inst.indices[fi]], dtype=np.int64)
            if flat.size == 0:
                continue
            _check_bounds(flat, table.n)
            counts = np.array([len(inst.indices[fi]) for inst in instances], dtype=np.int64)
            owner = np.repeat(np.arange(m), counts)
            np.add.at(out[:, lo : lo + k], owner, table.e[flat])
        else:
            idx = np.array([inst.indices[fi][0] for inst in instances], dtype=np.int64)
            _check_bounds(idx, table.n)
            out[:, lo : lo + k] = table.e[idx]
    return out


class RowGradAccumulator:
    """Collects embedding-row gradients from scatter calls across a batch."""

    def __init__(self, n: int, k: int):
        self._dense = np.zeros((n, k))
        self._touched = np.zeros(n, dtype=bool)
        self.k = k

    def scatter_matrix(self, instances: Sequence[EncodedInstance], upstream: Array,
                       group_schema: GroupSchema) -> None:
        """Adjoint of embed_matrix for a batch of same-group instances."""
        m, k = len(instances), self.k
        if m == 0:
            return
        for fi, fs in enumerate(group_schema.fields):
            lo = fi * k
            seg = upstream[:, lo : lo + k]
            if fs.kind == FieldKind.MULTIVALENT:
                flat = np.array([i for inst in instances for i in inst.indices[fi]], dtype=np.int64)
                if flat.size == 0:
                    continue
                counts = np.array([len(inst.indices[fi]) for inst in instances], dtype=np.int64)
                owner = np.repeat(np.arange(m), counts)
                np.add.at(self._dense, flat, seg[owner])
                self._touched[flat] = True
            else:
                idx = np.array([inst.indices[fi][0] for inst in instances], dtype=np.int64)
                np.add.at(self._dense, idx, seg)
                self._touched[idx] = True

    def add_rows(self, rows: Array, grads: Array) -> None:
        np.add.at(self._dense, rows, grads)
        self._touched[rows] = True

    def finalize(self) -> tuple[Array, Array]:
        """(sorted unique touched rows, their summed gradients)."""
        rows = np.flatnonzero(self._touched)
        return rows, self._dense[rows]
