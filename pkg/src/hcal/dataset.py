"""Logit-label datasets: validated containers, file I/O, row softmax, splitting.

Datasets hold pre-computed network logits; nothing here runs inference.
Two interchange formats are supported:

* CSV with header ``logit_0,...,logit_{L-1},label`` (one sample per line,
  UTF-8, '.' decimal separator).
* Binary: magic ``HCAL``, u32 version=1, u32 N, u32 L, N*L float32 logits
  row-major, N u32 labels.  Everything little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MAGIC = b"HCAL"
_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, N, L


class DatasetFormatError(ValueError):
    """Malformed dataset file (bad row, bad value, bad header)."""


@dataclass(frozen=True)
class LogitDataset:
    """Immutable N x L logit matrix with integer class labels.

    Invariants (checked on construction): all logits finite, every label a
    valid class index, N >= 1 and L >= 2.
    """

    logits: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        logits = np.ascontiguousarray(np.asarray(self.logits, dtype=np.float64))
        labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        if logits.ndim != 2:
            raise ValueError(f"logits must be 2-D, got shape {logits.shape}")
        n, l = logits.shape
        if n < 1:
            raise ValueError("dataset must contain at least one sample")
        if l < 2:
            raise ValueError(f"need at least 2 classes, got {l}")
        if labels.shape != (n,):
            raise ValueError(f"labels shape {labels.shape} does not match N={n}")
        if not np.all(np.isfinite(logits)):
            bad = int(np.argwhere(~np.isfinite(logits))[0][0])
            raise ValueError(f"non-finite logit at row {bad}")
        if labels.min() < 0 or labels.max() >= l:
            bad = int(np.argwhere((labels < 0) | (labels >= l))[0][0])
            raise ValueError(
                f"label out of range at row {bad}: {labels[bad]} not in [0, {l})"
            )
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return self.logits.shape[0]

    @property
    def n_classes(self) -> int:
        return self.logits.shape[1]


def check_prob_matrix(probs: np.ndarray, atol: float = 1e-9) -> None:
    """Validate a row-stochastic probability matrix; raises on violation."""
    probs = np.asarray(probs)
    if probs.ndim != 2:
        raise ValueError(f"probability matrix must be 2-D, got {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise ValueError("probability matrix contains non-finite entries")
    if probs.min() < -atol or probs.max() > 1 + atol:
        raise ValueError("probability entries outside [0, 1]")
    sums = probs.sum(axis=1)
    worst = float(np.abs(sums - 1.0).max())
    if worst > atol:
        raise ValueError(f"rows must sum to 1 within {atol}; worst deviation {worst:g}")


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Numerically stable row softmax (subtracts the row max first)."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _infer_format(path: Path) -> str:
    return "csv" if path.suffix.lower() == ".csv" else "binary"


def load_dataset(path: str | Path, format: str = "auto", name: str | None = None) -> LogitDataset:
    """Load a logit-label dataset from CSV or binary.

    ``format="auto"`` picks CSV for a ``.csv`` suffix and binary otherwise.
    Errors carry the offending row index.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    if format == "auto":
        format = _infer_format(path)
    if format == "csv":
        ds = _load_csv(path)
    elif format == "binary":
        ds = _load_binary(path)
    else:
        raise ValueError(f"unknown dataset format {format!r}")
    if name is not None:
        ds = LogitDataset(ds.logits, ds.labels, name=name)
    return ds


def _load_csv(path: Path) -> LogitDataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header:
            raise DatasetFormatError(f"{path}: empty file")
        cols = header.split(",")
        if len(cols) < 3 or cols[-1] != "label":
            raise DatasetFormatError(
                f"{path}: header must be 'logit_0,...,logit_{{L-1}},label', got {header!r}"
            )
        n_classes = len(cols) - 1
        expected = [f"logit_{i}" for i in range(n_classes)] + ["label"]
        if cols != expected:
            raise DatasetFormatError(f"{path}: unexpected header columns {cols}")
        logits, labels = [], []
        for row_idx, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != n_classes + 1:
                raise DatasetFormatError(
                    f"{path}: wrong column count at row {row_idx} "
                    f"(expected {n_classes + 1}, got {len(parts)})"
                )
            try:
                vals = [float(p) for p in parts[:-1]]
                lab = int(parts[-1])
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: unparseable value at row {row_idx}: {exc}") from None
            if not all(np.isfinite(vals)):
                raise DatasetFormatError(f"{path}: non-finite value at row {row_idx}")
            if not 0 <= lab < n_classes:
                raise DatasetFormatError(
                    f"{path}: label out of range at row {row_idx}: {lab} not in [0, {n_classes})"
                )
            logits.append(vals)
            labels.append(lab)
    if not logits:
        raise DatasetFormatError(f"{path}: no data rows")
    return LogitDataset(np.array(logits, dtype=np.float64), np.array(labels), name=path.stem)


def _load_binary(path: Path) -> LogitDataset:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, n, l = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    need = _HEADER.size + 4 * n * l + 4 * n
    if len(raw) != need:
        raise DatasetFormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    off = _HEADER.size
    logits = np.frombuffer(raw, dtype="<f4", count=n * l, offset=off).reshape(n, l)
    off += 4 * n * l
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off)
    if not np.all(np.isfinite(logits)):
        bad = int(np.argwhere(~np.isfinite(logits))[0][0])
        raise DatasetFormatError(f"{path}: non-finite value at row {bad}")
    if labels.max(initial=0) >= l:
        bad = int(np.argwhere(labels >= l)[0][0])
        raise DatasetFormatError(
            f"{path}: label out of range at row {bad}: {labels[bad]} not in [0, {l})"
        )
    return LogitDataset(logits.astype(np.float64), labels.astype(np.int64), name=path.stem)


def save_dataset(ds: LogitDataset, path: str | Path, format: str = "auto") -> None:
    """Write a dataset in CSV or binary form (binary round-trips bit-exactly)."""
    path = Path(path)
    if format == "auto":
        format = _infer_format(path)
    if format == "csv":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join([f"logit_{i}" for i in range(ds.n_classes)] + ["label"]) + "\n")
            for row, lab in zip(ds.logits, ds.labels):
                fh.write(",".join(repr(float(v)) for v in row) + f",{int(lab)}\n")
    elif format == "binary":
        n, l = ds.logits.shape
        parts = [
            _HEADER.pack(_MAGIC, _VERSION, n, l),
            ds.logits.astype("<f4").tobytes(),
            ds.labels.astype("<u4").tobytes(),
        ]
        Path(path).write_bytes(b"".join(parts))
    else:
        raise ValueError(f"unknown dataset format {format!r}")


def split_dataset(
    ds: LogitDataset, fraction: float, seed: int
) -> tuple[LogitDataset, LogitDataset]:
    """Deterministic seeded shuffle-split into (first, second) parts.

    The first part gets floor(N * fraction) samples; both parts must be
    non-empty.  Parts are disjoint and together contain every input row.
    """
    n = ds.n_samples
    n_first = int(np.floor(n * fraction))
    if n_first < 1 or n_first > n - 1:
        raise ValueError(
            f"fraction {fraction} leaves an empty side for N={n} "
            f"(first part would get {n_first} samples)"
        )
    perm = np.random.default_rng(seed).permutation(n)
    idx_a, idx_b = perm[:n_first], perm[n_first:]
    return (
        LogitDataset(ds.logits[idx_a], ds.labels[idx_a], name=f"{ds.name}-a"),
        LogitDataset(ds.logits[idx_b], ds.labels[idx_b], name=f"{ds.name}-b"),
    )
