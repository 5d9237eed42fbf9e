"""Dataset container, CSV ingestion, honest sample splitting and bandwidth restriction."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import (
    ArgumentError,
    DataError,
    ParseError,
    SchemaError,
    SplitError,
    SupportError,
    ValidationError,
)

SHARP = "sharp"
FUZZY = "fuzzy"
CONTINUOUS = "continuous"
BINARY = "binary"


@dataclass(frozen=True)
class Observation:
    y: float
    x: float
    z: tuple
    t: Optional[int] = None
    cluster: Optional[int] = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented RD sample.

    ``y`` outcome, ``x`` running variable, ``z`` an ``(N, K)`` feature matrix,
    ``t`` take-up (fuzzy designs only) and ``cluster`` optional integer ids.
    Arrays are made read-only on construction.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    cutoff: float
    design: str = SHARP
    t: Optional[np.ndarray] = None
    cluster: Optional[np.ndarray] = None
    feature_names: tuple = ()
    feature_kinds: tuple = ()
    column_names: dict = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float).ravel()
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        n = y.shape[0]
        if x.shape[0] != n or z.shape[0] != n:
            raise ValidationError("y, x and z must have the same number of rows")
        if z.shape[1] < 1:
            raise ValidationError("at least one feature is required")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            raise ValidationError("y, x and z must be finite (missing values are not allowed)")
        if self.design not in (SHARP, FUZZY):
            raise ValidationError(f"unknown design {self.design!r}")
        t = None
        if self.design == FUZZY:
            if self.t is None:
                raise ValidationError("fuzzy design requires take-up column t")
            t = np.asarray(self.t, dtype=float).ravel()
            if t.shape[0] != n:
                raise ValidationError("t must have one entry per row")
            if not np.all((t == 0) | (t == 1)):
                raise ValidationError("take-up t must be 0 or 1")
        elif self.t is not None:
            raise ValidationError("sharp design must not carry take-up t")
        cluster = None
        if self.cluster is not None:
            cluster = np.asarray(self.cluster)
            if cluster.shape[0] != n:
                raise ValidationError("cluster must have one entry per row")
            cluster = cluster.astype(np.int64)
        if n > 0 and not (np.any(x >= self.cutoff) and np.any(x < self.cutoff)):
            raise SupportError("need observations on both sides of the cutoff")

        k = z.shape[1]
        names = tuple(self.feature_names) or tuple(f"z{i + 1}" for i in range(k))
        kinds = tuple(self.feature_kinds) or tuple(infer_kind(z[:, i]) for i in range(k))
        if len(names) != k or len(kinds) != k:
            raise ValidationError("feature_names/feature_kinds must have one entry per feature")
        for kind in kinds:
            if kind not in (CONTINUOUS, BINARY):
                raise ValidationError(f"unknown feature kind {kind!r}")

        for arr in (y, x, z, t, cluster):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "cluster", cluster)
        object.__setattr__(self, "cutoff", float(self.cutoff))
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "feature_kinds", kinds)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.z.shape[1]

    @property
    def above(self) -> np.ndarray:
        return self.x >= self.cutoff

    def __len__(self):
        return self.n

    def observation(self, i: int) -> Observation:
        return Observation(
            y=float(self.y[i]),
            x=float(self.x[i]),
            z=tuple(float(v) for v in self.z[i]),
            t=None if self.t is None else int(self.t[i]),
            cluster=None if self.cluster is None else int(self.cluster[i]),
        )

    @property
    def rows(self) -> list:
        return [self.observation(i) for i in range(self.n)]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            y=self.y[idx],
            x=self.x[idx],
            z=self.z[idx],
            cutoff=self.cutoff,
            design=self.design,
            t=None if self.t is None else self.t[idx],
            cluster=None if self.cluster is None else self.cluster[idx],
            feature_names=self.feature_names,
            feature_kinds=self.feature_kinds,
            column_names=dict(self.column_names),
        )

    @classmethod
    def from_rows(cls, rows: Sequence[Observation], cutoff: float, design: str = SHARP, **kw) -> "Dataset":
        if not rows:
            raise ValidationError("no rows")
        arity = {len(r.z) for r in rows}
        if len(arity) != 1:
            raise ValidationError("rows have different feature arity")
        t = None
        if design == FUZZY:
            if any(r.t is None for r in rows):
                raise ValidationError("fuzzy design requires take-up on every row")
            t = [r.t for r in rows]
        cl = None
        if any(r.cluster is not None for r in rows):
            cl = [r.cluster for r in rows]
        return cls(
            y=[r.y for r in rows],
            x=[r.x for r in rows],
            z=[list(r.z) for r in rows],
            cutoff=cutoff,
            design=design,
            t=t,
            cluster=cl,
            **kw,
        )


def infer_kind(column: np.ndarray) -> str:
    """A column holding only the values 0 and 1 is binary; anything else is continuous."""
    values = np.unique(column)
    return BINARY if np.all((values == 0) | (values == 1)) else CONTINUOUS


@dataclass(frozen=True)
class Schema:
    """Column mapping for :func:`load_dataset`.

    ``features`` lists the feature columns in order; ``None`` means every column
    not claimed by y/x/t/cluster. ``kinds`` overrides inferred feature kinds.
    """

    y: str = "y"
    x: str = "x"
    features: Optional[tuple] = None
    t: Optional[str] = None
    cluster: Optional[str] = None
    kinds: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def coerce(cls, schema) -> "Schema":
        if schema is None:
            return cls()
        if isinstance(schema, Schema):
            return schema
        schema = dict(schema)
        if schema.get("features") is not None:
            feats = schema["features"]
            schema["features"] = tuple(feats.split(",")) if isinstance(feats, str) else tuple(feats)
        return cls(**schema)


def load_dataset(path, schema=None, design: str = SHARP, cutoff: float = 0.0) -> Dataset:
    """Read a headered CSV into a validated :class:`Dataset`."""
    schema = Schema.coerce(schema)
    if design == FUZZY and schema.t is None:
        schema = Schema(schema.y, schema.x, schema.features, "t", schema.cluster, schema.kinds)
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("empty file: no header row") from None
        body = list(reader)

    claimed = [schema.y, schema.x]
    if schema.t is not None:
        claimed.append(schema.t)
    if schema.cluster is not None:
        claimed.append(schema.cluster)
    features = schema.features
    if features is None:
        features = tuple(h for h in header if h not in claimed)
    for col in claimed + list(features):
        if col not in header:
            raise SchemaError(f"missing column {col}")
    if not features:
        raise SchemaError("no feature columns")
    pos = {h: i for i, h in enumerate(header)}

    def column(name, as_int=False):
        j = pos[name]
        out = []
        for r, row in enumerate(body, start=2):
            if len(row) != len(header):
                raise ParseError(f"row {r}: expected {len(header)} fields, got {len(row)}")
            cell = row[j].strip()
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"row {r}: non-numeric value {cell!r} in column {name}") from None
            if not math.isfinite(v):
                raise ParseError(f"row {r}: non-finite value {cell!r} in column {name}")
            if as_int:
                if v != int(v):
                    raise ParseError(f"row {r}: non-integer cluster id {cell!r}")
                v = int(v)
            out.append(v)
        return out

    z = np.column_stack([column(f) for f in features]) if body else np.empty((0, len(features)))
    kinds = []
    for i, f in enumerate(features):
        kind = schema.kinds.get(f)
        kinds.append(kind if kind is not None else infer_kind(z[:, i]))
    t = None
    if design == FUZZY:
        t = column(schema.t)
        bad = [v for v in t if v not in (0.0, 1.0)]
        if bad:
            raise ValidationError(f"take-up column {schema.t} must be 0/1, found {bad[0]!r}")
    names = {"y": schema.y, "x": schema.x, "t": schema.t, "cluster": schema.cluster}
    return Dataset(
        y=column(schema.y),
        x=column(schema.x),
        z=z,
        cutoff=cutoff,
        design=design,
        t=t,
        cluster=column(schema.cluster, as_int=True) if schema.cluster else None,
        feature_names=tuple(features),
        feature_kinds=tuple(kinds),
        column_names=names,
    )


def write_dataset(dataset: Dataset, path) -> None:
    """Write ``dataset`` as CSV: y, x, [t], features..., [cluster]. ``repr`` floats round-trip exactly."""
    cols = dataset.column_names or {}
    header = [cols.get("y") or "y", cols.get("x") or "x"]
    data = [dataset.y, dataset.x]
    if dataset.t is not None:
        header.append(cols.get("t") or "t")
        data.append(dataset.t)
    header.extend(dataset.feature_names)
    data.extend(dataset.z[:, i] for i in range(dataset.k))
    if dataset.cluster is not None:
        header.append(cols.get("cluster") or "cluster")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(dataset.n):
            row = [repr(float(col[i])) for col in data]
            if dataset.cluster is not None:
                row.append(str(int(dataset.cluster[i])))
            w.writerow(row)


@dataclass(frozen=True)
class SampleSplit:
    train: np.ndarray
    est: np.ndarray
    seed: int
    fraction: float


def honest_split(dataset, fraction: float = 0.5, seed: int = 0) -> SampleSplit:
    """Randomly partition row indices into a training and an estimation sample.

    ``round(fraction * N)`` rows go to training. Both index arrays are sorted.
    """
    if not 0.0 < fraction < 1.0:
        raise ArgumentError(f"fraction must be in (0, 1), got {fraction}")
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    if n == 0:
        raise SplitError("empty dataset")
    n_train = int(math.floor(fraction * n + 0.5))
    if n_train == 0 or n_train == n:
        raise SplitError(f"split of {n} rows at fraction {fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return SampleSplit(np.sort(perm[:n_train]), np.sort(perm[n_train:]), seed, fraction)


def restrict_bandwidth(dataset: Dataset, h: float) -> Dataset:
    """Keep rows with ``|x - c| <= h``."""
    if not h > 0:
        raise ArgumentError(f"bandwidth must be positive, got {h}")
    if math.isinf(h):
        return dataset
    keep = np.abs(dataset.x - dataset.cutoff) <= h
    if keep.all():
        return dataset
    x = dataset.x[keep]
    if not (np.any(x >= dataset.cutoff) and np.any(x < dataset.cutoff)):
        raise SupportError(f"bandwidth {h} leaves no data on one side of the cutoff")
    return dataset.subset(np.flatnonzero(keep))
