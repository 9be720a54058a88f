"""Mixed-type observations, covariate partitions and seeded random streams.

Covariates are addressed by a single global index over the concatenation
``[x_cont columns..., x_disc columns...]``; an index below ``d_x`` is a
continuous column, anything above is a discrete column.
"""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .errors import (
    DimensionMismatchError,
    IndexOutOfRangeError,
    NonFiniteValueError,
    OverlappingPartitionError,
)


def _as_2d(a, name: str) -> np.ndarray:
    if a is None:
        return np.zeros((0, 0))
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations split into continuous / discrete responses and covariates.

    Parameters
    ----------
    y_cont : array_like, shape (n, d_y) or (n,)
        Continuous responses. Pass ``None`` for a purely discrete response.
    x_cont : array_like, shape (n, d_x) or (n,)
        Continuous covariates.
    y_disc : array_like, shape (n,), optional
        Discrete response labels (numeric). Several discrete responses must
        be fused into one composite label beforehand.
    x_disc : array_like, shape (n, k) or (n,), optional
        Discrete covariate labels (numeric).
    """

    y_cont: np.ndarray | None = None
    x_cont: np.ndarray | None = None
    y_disc: np.ndarray | None = None
    x_disc: np.ndarray | None = None
    y_names: tuple[str, ...] = ()
    x_names: tuple[str, ...] = ()

    def __post_init__(self):
        n = _infer_n(self.y_cont, self.x_cont, self.y_disc, self.x_disc)
        y_cont = _as_2d(self.y_cont, "y_cont") if self.y_cont is not None else np.zeros((n, 0))
        x_cont = _as_2d(self.x_cont, "x_cont") if self.x_cont is not None else np.zeros((n, 0))
        x_disc = _as_2d(self.x_disc, "x_disc") if self.x_disc is not None else np.zeros((n, 0))
        y_disc = None
        if self.y_disc is not None:
            y_disc = np.asarray(self.y_disc, dtype=float)
            if y_disc.ndim != 1:
                raise DimensionMismatchError("y_disc must be a vector of composite labels")
        for a in (y_cont, x_cont, x_disc, y_disc):
            if a is not None:
                a.setflags(write=False)
        object.__setattr__(self, "y_cont", y_cont)
        object.__setattr__(self, "x_cont", x_cont)
        object.__setattr__(self, "x_disc", x_disc)
        object.__setattr__(self, "y_disc", y_disc)
        if not self.y_names:
            object.__setattr__(self, "y_names", tuple(f"y{j}" for j in range(y_cont.shape[1])))
        if not self.x_names:
            names = [f"x{j + 1}" for j in range(x_cont.shape[1] + x_disc.shape[1])]
            object.__setattr__(self, "x_names", tuple(names))

    @property
    def n(self) -> int:
        return self.y_cont.shape[0]

    @property
    def d_y(self) -> int:
        return self.y_cont.shape[1]

    @property
    def d_x(self) -> int:
        return self.x_cont.shape[1]

    @property
    def k_disc(self) -> int:
        return self.x_disc.shape[1]

    @property
    def p(self) -> int:
        """Total number of covariates (continuous + discrete)."""
        return self.d_x + self.k_disc

    @property
    def covariates(self) -> np.ndarray:
        """All covariates as one ``(n, p)`` float matrix, discrete columns last."""
        return np.hstack([self.x_cont, self.x_disc])

    def is_discrete(self, index: int) -> bool:
        return index >= self.d_x

    def with_responses(self, y_cont=None, y_disc=None) -> "Dataset":
        """Copy with replaced responses and identical covariates."""
        return replace(
            self,
            y_cont=self.y_cont if y_cont is None else y_cont,
            y_disc=self.y_disc if y_disc is None else y_disc,
        )

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return replace(
            self,
            y_cont=self.y_cont[rows],
            x_cont=self.x_cont[rows],
            x_disc=self.x_disc[rows],
            y_disc=None if self.y_disc is None else self.y_disc[rows],
        )


def _infer_n(*blocks) -> int:
    for b in blocks:
        if b is not None:
            return int(np.shape(b)[0])
    return 0


@dataclass(frozen=True)
class CovariatePartition:
    """Roles of the covariates: centering only, shared, conditioning only."""

    m_only: tuple[int, ...] = ()
    shared: tuple[int, ...] = ()
    g_only: tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("m_only", "shared", "g_only"):
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))

    @property
    def centering(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.m_only) | set(self.shared)))

    @property
    def conditioning(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.shared) | set(self.g_only)))

    @property
    def indices(self) -> tuple[int, ...]:
        return self.m_only + self.shared + self.g_only

    @classmethod
    def uncentered(cls, p: int) -> "CovariatePartition":
        return cls(g_only=tuple(range(p)))

    @classmethod
    def joint(cls, p: int) -> "CovariatePartition":
        return cls(shared=tuple(range(p)))

    @classmethod
    def homoscedastic(cls, p: int) -> "CovariatePartition":
        return cls(m_only=tuple(range(p)))


class Variant(str, enum.Enum):
    UNCENTERED = "Uncentered"
    HOMOSCEDASTIC = "Homoscedastic"
    JOINT = "Joint"
    GENERAL = "General"


def validate(dataset: Dataset, partition: CovariatePartition | None = None):
    """Check dataset and partition invariants; return the pair unchanged."""
    n = dataset.n
    if n < 1:
        raise DimensionMismatchError("dataset has no rows")
    blocks = {"y_cont": dataset.y_cont, "x_cont": dataset.x_cont, "x_disc": dataset.x_disc}
    if dataset.y_disc is not None:
        blocks["y_disc"] = dataset.y_disc[:, None]
    for name, block in blocks.items():
        if block.shape[0] != n:
            raise DimensionMismatchError(f"{name} has {block.shape[0]} rows, expected {n}")
        bad = np.argwhere(~np.isfinite(block))
        if bad.size:
            raise NonFiniteValueError(name, int(bad[0, 0]), int(bad[0, 1]))
    if dataset.d_y == 0 and dataset.y_disc is None:
        raise DimensionMismatchError("dataset has no response")
    if len(dataset.x_names) != dataset.p or len(dataset.y_names) != dataset.d_y:
        raise DimensionMismatchError("column names do not match the data blocks")
    if partition is not None:
        seen: set[int] = set()
        for name in ("m_only", "shared", "g_only"):
            for i in getattr(partition, name):
                if not 0 <= i < dataset.p:
                    raise IndexOutOfRangeError(f"{name} index {i} outside 0..{dataset.p - 1}")
                if i in seen:
                    raise OverlappingPartitionError(f"covariate {i} appears in more than one role")
                seen.add(i)
    return dataset, partition


def variant_of(partition: CovariatePartition, all_covariates: Iterable[int]) -> Variant:
    """Classify a partition into one of the four estimator variants."""
    all_covariates = set(all_covariates)
    if not set(partition.indices) <= all_covariates:
        raise IndexOutOfRangeError("partition refers to unknown covariates")
    if len(set(partition.indices)) != len(partition.indices):
        raise OverlappingPartitionError("partition roles overlap")
    if not partition.centering:
        return Variant.UNCENTERED
    if not partition.conditioning:
        return Variant.HOMOSCEDASTIC
    if not partition.m_only and not partition.g_only and set(partition.shared) == all_covariates:
        return Variant.JOINT
    return Variant.GENERAL


def fuse_labels(rows: np.ndarray, reference: np.ndarray | None = None):
    """Map discrete tuples to composite integer codes.

    Returns ``(codes, levels)`` where ``levels`` lists the distinct tuples of
    ``reference`` (defaults to ``rows``). Tuples of ``rows`` absent from the
    reference get code ``-1``.
    """
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    ref = rows if reference is None else np.asarray(reference, dtype=float).reshape(-1, rows.shape[1])
    if rows.shape[1] == 0:
        return np.zeros(rows.shape[0], dtype=np.intp), np.zeros((1, 0))
    levels, inverse = np.unique(ref, axis=0, return_inverse=True)
    if reference is None:
        return inverse.reshape(-1).astype(np.intp), levels
    lookup = {tuple(lv): k for k, lv in enumerate(levels)}
    codes = np.array([lookup.get(tuple(r), -1) for r in rows], dtype=np.intp)
    return codes, levels


def stable_key(tag) -> int:
    """Deterministic 32-bit integer for a string or int stream key."""
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


class RngStream:
    """Seeded generator keyed by ``(seed, stream)``.

    ``stream`` may be an int or a tuple of ints/strings; strings are hashed
    with CRC32 so keys such as ``(replication, "NED.c")`` are stable across
    runs and processes. Identical keys give identical draw sequences and
    distinct keys give independent streams (``SeedSequence`` spawn keys).
    """

    def __init__(self, seed: int, stream=()):
        if isinstance(stream, (int, np.integer, str)):
            stream = (stream,)
        self.seed = int(seed)
        self.stream = tuple(stable_key(s) for s in stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, *keys) -> "RngStream":
        return RngStream(self.seed, self.stream + tuple(stable_key(k) for k in keys))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
