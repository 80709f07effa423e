"""Synthetic datasets with planted binary factors, splits, and on-disk formats.

TDS layout (all little-endian)::

    b"TDS1"
    JSON header line: {"N": .., "D": .., "F": .., "ids": true|false}\\n
    features   N*D float32, row-major
    ids        N int64                   (only when "ids" is true; else 0..N-1)
    factors    F rows of ceil(N/8) bytes (np.packbits, little bit order)
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, DegenerateSplitError, FormatError, ParseError, SpecError
from .seeding import make_rng

TDS_MAGIC = b"TDS1"
MIXINGS = ("linear", "linear+tanh")


@dataclass(frozen=True)
class SyntheticSpec:
    N: int
    D: int
    F: int
    noise_sigma: float = 0.1
    mixing: str = "linear"

    def __post_init__(self):
        if self.F > self.D:
            raise SpecError(f"F={self.F} latent factors cannot exceed D={self.D}")
        if self.F < 0 or self.N < 2 * max(self.F, 1):
            raise SpecError(f"need N >= 2F (N={self.N}, F={self.F})")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be >= 0")
        if self.mixing not in MIXINGS:
            raise SpecError(f"mixing must be one of {MIXINGS}, got {self.mixing!r}")

    def to_dict(self):
        return {"N": self.N, "D": self.D, "F": self.F, "noise_sigma": self.noise_sigma,
                "mixing": self.mixing}


@dataclass(eq=False)
class Dataset:
    features: np.ndarray
    ids: np.ndarray = None
    planted: np.ndarray = None  # F x N, values in {0, 1}

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise SpecError(f"features must be N x D, got shape {self.features.shape}")
        n = self.features.shape[0]
        self.ids = np.arange(n, dtype=np.int64) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != (n,):
            raise SpecError("ids must have one entry per row")
        if len(np.unique(self.ids)) != n:
            raise SpecError("dataset ids must be unique")
        if self.planted is not None:
            self.planted = np.asarray(self.planted, dtype=np.uint8)
            if self.planted.ndim != 2 or self.planted.shape[1] != n:
                raise SpecError("planted factors must be an F x N array")
        self._pos = None

    @property
    def N(self):
        return self.features.shape[0]

    @property
    def D(self):
        return self.features.shape[1]

    @property
    def F(self):
        return 0 if self.planted is None else self.planted.shape[0]

    def positions(self, ids) -> np.ndarray:
        """Row positions of the given ids."""
        ids = np.asarray(ids, dtype=np.int64)
        if self._pos is None:
            order = np.argsort(self.ids, kind="stable")
            self._pos = (self.ids[order], order)
        sorted_ids, order = self._pos
        loc = np.searchsorted(sorted_ids, ids)
        loc = np.clip(loc, 0, len(sorted_ids) - 1)
        if ids.size and not np.array_equal(sorted_ids[loc], ids):
            raise KeyError("some ids are not in the dataset")
        return order[loc]

    def X(self, ids=None) -> np.ndarray:
        return self.features if ids is None else self.features[self.positions(ids)]

    def with_features(self, features):
        return Dataset(features, self.ids.copy(), None if self.planted is None else self.planted.copy())


@dataclass(eq=False)
class SplitSpec:
    train_ids: np.ndarray
    test_ids: np.ndarray
    provenance: str = "random"
    balance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train_ids = np.asarray(self.train_ids, dtype=np.int64)
        self.test_ids = np.asarray(self.test_ids, dtype=np.int64)
        if np.intersect1d(self.train_ids, self.test_ids).size:
            raise DegenerateSplitError("train and test ids overlap")

    @property
    def n_train(self):
        return len(self.train_ids)

    @property
    def n_test(self):
        return len(self.test_ids)

    def record_balance(self, task):
        """Store per-side class counts of ``task``."""
        self.balance = {
            "train": class_counts(task.labels_for(self.train_ids), task.K),
            "test": class_counts(task.labels_for(self.test_ids), task.K),
        }
        return self

    def to_dict(self):
        return {"train_ids": self.train_ids.tolist(), "test_ids": self.test_ids.tolist(),
                "provenance": self.provenance, "balance": self.balance}

    @classmethod
    def from_dict(cls, d):
        return cls(d["train_ids"], d["test_ids"], d.get("provenance", "random"),
                   d.get("balance") or {})


def class_counts(labels, K):
    return [int(c) for c in np.bincount(np.asarray(labels, dtype=np.int64), minlength=K)]


def balanced_binary(n, rng) -> np.ndarray:
    """Exactly floor(n/2) ones at random positions."""
    z = np.zeros(n, dtype=np.uint8)
    z[rng.permutation(n)[: n // 2]] = 1
    return z


def generate_synthetic(spec: SyntheticSpec, seed) -> Dataset:
    """Features = mixing(±1 factors) + gaussian noise.

    Factors are balanced by permutation. The linear map is an F x D standard
    normal matrix scaled by 1/sqrt(F) so each clean column has unit variance;
    ``linear+tanh`` squashes the mixed signal with tanh before adding noise.
    """
    rng = make_rng(seed, "synthetic")
    factors = np.stack([balanced_binary(spec.N, rng) for _ in range(spec.F)]) if spec.F else \
        np.zeros((0, spec.N), dtype=np.uint8)
    mix = rng.standard_normal((spec.F, spec.D))
    signs = 2.0 * factors.T.astype(np.float64) - 1.0
    signal = signs @ mix / np.sqrt(max(spec.F, 1))
    if spec.mixing == "linear+tanh":
        signal = np.tanh(signal)
    noise = rng.standard_normal((spec.N, spec.D)) * spec.noise_sigma
    return Dataset(signal + noise, np.arange(spec.N, dtype=np.int64), factors)


def split_dataset(dataset: Dataset, test_fraction: float, seed, task=None) -> SplitSpec:
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_test = int(round(dataset.N * test_fraction))
    if n_test == 0 or n_test == dataset.N:
        raise DegenerateSplitError(f"split of {dataset.N} points leaves an empty side")
    perm = make_rng(seed, "split").permutation(dataset.N)
    ids = dataset.ids
    split = SplitSpec(np.sort(ids[perm[n_test:]]), np.sort(ids[perm[:n_test]]), "random")
    return split.record_balance(task) if task is not None else split


# TDS binary format

def save_tds(dataset: Dataset, path) -> None:
    # default ids (0..N-1) are implied, not stored
    has_ids = not np.array_equal(dataset.ids, np.arange(dataset.N))
    header = {"N": dataset.N, "D": dataset.D, "F": dataset.F, "ids": has_ids}
    with open(path, "wb") as fh:
        fh.write(TDS_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        fh.write(dataset.features.astype("<f4").tobytes())
        if has_ids:
            fh.write(dataset.ids.astype("<i8").tobytes())
        for row in (dataset.planted if dataset.F else []):
            fh.write(np.packbits(row.astype(np.uint8), bitorder="little").tobytes())


def _read_tds_bytes(raw: bytes, where="<bytes>") -> Dataset:
    if raw[:4] != TDS_MAGIC:
        raise FormatError(f"{where}: bad magic {raw[:4]!r}, expected {TDS_MAGIC!r}")
    nl = raw.find(b"\n", 4)
    if nl < 0:
        raise CorruptionError(f"{where}: header is not newline-terminated")
    try:
        header = json.loads(raw[4:nl].decode("ascii"))
        n, d, f, has_ids = int(header["N"]), int(header["D"]), int(header["F"]), bool(header["ids"])
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"{where}: unreadable header ({exc})") from exc
    row_bytes = (n + 7) // 8
    expected = n * d * 4 + (n * 8 if has_ids else 0) + f * row_bytes
    body = memoryview(raw)[nl + 1:]
    if len(body) != expected:
        raise CorruptionError(f"{where}: payload has {len(body)} bytes, header implies {expected}")
    off = n * d * 4
    feats = np.frombuffer(body[:off], dtype="<f4").reshape(n, d).astype(np.float32)
    ids = None
    if has_ids:
        ids = np.frombuffer(body[off:off + n * 8], dtype="<i8").astype(np.int64)
        off += n * 8
    planted = None
    if f:
        rows = [np.unpackbits(np.frombuffer(body[off + i * row_bytes: off + (i + 1) * row_bytes],
                                            dtype=np.uint8), count=n, bitorder="little")
                for i in range(f)]
        planted = np.stack(rows)
    return Dataset(feats, ids, planted)


def load_tds(path) -> Dataset:
    return _read_tds_bytes(Path(path).read_bytes(), str(path))


def load_features(path, standardize=False, header=False) -> Dataset:
    """Read a feature matrix from a TDS file or a comma-separated table.

    Planted factors are dropped: loaded features carry no ground truth.
    With ``standardize`` each column is shifted to zero mean and scaled to
    unit variance (constant columns are only centered).
    """
    raw = Path(path).read_bytes()
    if raw[:4] == TDS_MAGIC:
        ds = _read_tds_bytes(raw, str(path))
        feats, ids = ds.features, ds.ids
    else:
        feats, ids = _parse_csv(raw.decode("utf-8"), header, str(path)), None
    if standardize:
        f64 = feats.astype(np.float64)
        mu = f64.mean(axis=0)
        sd = f64.std(axis=0)
        sd[sd == 0] = 1.0
        feats = (f64 - mu) / sd
    return Dataset(feats, ids, None)


def _parse_csv(text, header, where):
    rows, width = [], None
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if header and lineno == 1:
            continue
        if not row or all(not c.strip() for c in row):
            continue
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError(f"{where}:{lineno}: expected {width} columns, got {len(row)}", line=lineno)
        try:
            rows.append([float(c) for c in row])
        except ValueError as exc:
            raise ParseError(f"{where}:{lineno}: {exc}", line=lineno) from exc
    if not rows:
        raise ParseError(f"{where}: no data rows")
    return np.asarray(rows, dtype=np.float64)
