"""LIBSVM-format dataset loading and equisized federated partitioning."""

from __future__ import annotations

import gzip
import io
from dataclasses import dataclass, field

import numpy as np

from .rng import stream
from .shuffling import fisher_yates


class DatasetError(ValueError):
    """Malformed input file or invalid partitioning request."""


@dataclass
class SparseDataset:
    """Sparse binary-classification dataset with labels in {-1, +1}.

    Feature indices are stored 0-based; files use the 1-based LIBSVM
    convention.  ``rows[i]`` is a pair of aligned arrays (indices, values).
    """

    rows: list[tuple[np.ndarray, np.ndarray]]
    labels: np.ndarray
    dim: int

    @property
    def count(self) -> int:
        return len(self.rows)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.count, self.dim))
        for i, (idx, val) in enumerate(self.rows):
            out[i, idx] = val
        return out

    def to_libsvm_text(self) -> str:
        lines = []
        for (idx, val), y in zip(self.rows, self.labels):
            feats = " ".join(f"{i + 1}:{v:.17g}" for i, v in zip(idx, val))
            lines.append(f"{int(y):+d} {feats}".rstrip())
        return "\n".join(lines) + "\n"

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseDataset):
            return NotImplemented
        if self.dim != other.dim or self.count != other.count:
            return False
        if not np.array_equal(self.labels, other.labels):
            return False
        return all(
            np.array_equal(ia, ib) and np.array_equal(va, vb)
            for (ia, va), (ib, vb) in zip(self.rows, other.rows)
        )


@dataclass(frozen=True)
class FederatedPartition:
    """Assignment of dataset rows to M clients with exactly N rows each."""

    M: int
    N: int
    assignment: tuple[tuple[int, ...], ...] = field(repr=False)

    def client_rows(self, m: int) -> tuple[int, ...]:
        return self.assignment[m]


_LABEL_MAP = {"+1": 1.0, "1": 1.0, "-1": -1.0, "0": -1.0, "2": -1.0, "1.0": 1.0, "-1.0": -1.0, "0.0": -1.0, "2.0": -1.0}


def parse_libsvm(source) -> SparseDataset:
    """Parse LIBSVM text into a :class:`SparseDataset`.

    ``source`` may be a text string, bytes, or a readable binary/text stream.
    Gzip-compressed bytes are decompressed transparently.  Labels {0,1,2} are
    mapped onto {-1,+1} ({0,2} -> -1); anything else is rejected.
    """
    if isinstance(source, str):
        text = source
    else:
        data = source if isinstance(source, (bytes, bytearray)) else source.read()
        if isinstance(data, str):
            text = data
        else:
            if data[:2] == b"\x1f\x8b":
                data = gzip.decompress(data)
            text = data.decode("utf-8")

    rows: list[tuple[np.ndarray, np.ndarray]] = []
    labels: list[float] = []
    dim = 0
    for lineno, line in enumerate(io.StringIO(text), start=1):
        line = line.strip()
        if not line:
            continue
        tokens = line.split()
        raw_label = tokens[0]
        if raw_label not in _LABEL_MAP:
            raise DatasetError(f"line {lineno}: unsupported label {raw_label!r}")
        idx = np.empty(len(tokens) - 1, dtype=np.int64)
        val = np.empty(len(tokens) - 1, dtype=np.float64)
        prev = 0
        for pos, tok in enumerate(tokens[1:]):
            try:
                k, v = tok.split(":", 1)
                index = int(k)
                value = float(v)
            except ValueError as exc:
                raise DatasetError(f"line {lineno}: malformed feature {tok!r}") from exc
            if index <= prev:
                raise DatasetError(f"line {lineno}: feature indices must be strictly increasing")
            prev = index
            idx[pos] = index - 1
            val[pos] = value
        if len(idx):
            dim = max(dim, int(idx[-1]) + 1)
        rows.append((idx, val))
        labels.append(_LABEL_MAP[raw_label])
    return SparseDataset(rows=rows, labels=np.asarray(labels), dim=dim)


def load_libsvm_file(path) -> SparseDataset:
    with open(path, "rb") as fh:
        return parse_libsvm(fh)


def partition(dataset: SparseDataset, M: int, seed: int) -> FederatedPartition:
    """Shuffle row indices with a seeded stream and split into M blocks of N.

    N = floor(count / M); the ``count - M*N`` leftover rows are dropped so
    that every client holds exactly N samples.
    """
    if M < 1 or M > dataset.count:
        raise DatasetError(f"cannot split {dataset.count} rows into {M} clients")
    N = dataset.count // M
    rng = stream(seed, "partition", dataset.count, M)
    order = fisher_yates(dataset.count, rng)
    assignment = tuple(tuple(int(i) for i in order[m * N : (m + 1) * N]) for m in range(M))
    return FederatedPartition(M=M, N=N, assignment=assignment)


def synthetic_libsvm_like(
    count: int = 11055,
    dim: int = 68,
    seed: int = 2024,
    nnz_per_row: int = 30,
    feature_scale: float | None = None,
    signal: float = 1.0,
) -> SparseDataset:
    """Generate a sparse binary dataset shaped like a LIBSVM benchmark file.

    Rows get ``nnz_per_row`` active binary features; labels are drawn from a
    weak logistic teacher with strength ``signal``.  ``feature_scale``
    rescales values so the maximal squared row norm can be pinned (used to
    target a specific smoothness constant in downstream problems).
    """
    rng = stream(seed, "synthetic_dataset", count, dim, nnz_per_row)
    teacher = rng.normal(size=dim) * signal / np.sqrt(dim)
    if feature_scale is None:
        feature_scale = 1.0
    rows = []
    labels = np.empty(count)
    for i in range(count):
        k = int(rng.integers(max(1, nnz_per_row - 5), nnz_per_row + 6))
        idx = np.sort(rng.choice(dim, size=min(k, dim), replace=False)).astype(np.int64)
        val = np.full(idx.shape, feature_scale)
        z = float(val @ teacher[idx])
        p = 1.0 / (1.0 + np.exp(-z))
        labels[i] = 1.0 if rng.random() < p else -1.0
        rows.append((idx, val))
    return SparseDataset(rows=rows, labels=labels, dim=dim)
