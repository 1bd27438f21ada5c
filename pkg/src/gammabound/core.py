"""Domain types, the columnar dataset container and deterministic RNG streams."""

from __future__ import annotations

import csv
import enum
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyDataset, EmptyResult, MissingStudyIndicator, SchemaError


class DatasetKind(str, enum.Enum):
    RCT = "rct"
    OBS = "obs"
    POOLED = "pooled"


class Target(str, enum.Enum):
    """Population over which the treatment effect is compared."""

    RCT = "rct"
    OBS_RESTRICTED = "obs_restricted"


def as_gamma(value: float) -> float:
    """Validate a confounding strength (must be a finite real >= 1)."""
    value = float(value)
    if not math.isfinite(value) or value < 1.0:
        raise ValueError(f"confounding strength must be >= 1, got {value}")
    return value


@dataclass(frozen=True)
class RngSpec:
    """A (seed, stream) pair naming one reproducible random sequence.

    Streams are hashed into the seed sequence, so two specs with the same seed
    but different labels give statistically independent generators.  PCG64
    output is platform independent.
    """

    seed: int
    stream: str = "main"

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def child(self, label: str) -> "RngSpec":
        return RngSpec(self.seed, f"{self.stream}/{label}")

    def generator(self) -> np.random.Generator:
        digest = hashlib.sha256(self.stream.encode("utf-8")).digest()
        words = np.frombuffer(digest, dtype="<u4").tolist()
        seed = int(self.seed)
        entropy = [seed & 0xFFFFFFFF, seed >> 32, *words]
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class UnitRecord:
    x: tuple[float, ...]
    t: int
    y: float
    u: tuple[float, ...] | None = None
    s: int | None = None


@dataclass(frozen=True)
class SensitivityInterval:
    """Estimated bounds on the treatment effect at one confounding strength.

    Standard errors are on the estimator scale (already divided by sqrt(n)).
    """

    gamma: float
    lower: float
    upper: float
    se_lower: float = 0.0
    se_upper: float = 0.0

    def __post_init__(self):
        if self.lower > self.upper + 1e-9:
            raise ValueError(f"lower bound {self.lower} exceeds upper bound {self.upper}")
        if self.se_lower < 0 or self.se_upper < 0:
            raise ValueError("standard errors must be non-negative")

    def with_se(self, se_lower: float, se_upper: float) -> "SensitivityInterval":
        return replace(self, se_lower=float(se_lower), se_upper=float(se_upper))

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


@dataclass(frozen=True)
class AteEstimate:
    value: float
    se: float
    target: Target

    def __post_init__(self):
        if not self.se >= 0:
            raise ValueError("standard error must be non-negative")


def _readonly(a: np.ndarray | None) -> np.ndarray | None:
    if a is not None:
        a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable columnar set of unit records.

    ``x`` has shape (n, d); ``u`` (hidden confounders, oracle data only) has
    shape (n, k) or is None; ``s`` is the study-membership indicator for
    pooled nested designs.  ``pi`` is the known assignment probability of a
    randomized trial.
    """

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    kind: DatasetKind = DatasetKind.OBS
    u: np.ndarray | None = None
    s: np.ndarray | None = None
    pi: float | None = None
    x_names: tuple[str, ...] = field(default=())
    u_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        n = y.shape[0]
        x = np.array(self.x, dtype=float)
        if x.size == 0:
            x = x.reshape(n, x.shape[-1] if x.ndim == 2 else 0)
        elif x.ndim == 1:
            x = x.reshape(n, -1)
        t = np.array(self.t).reshape(-1)
        if t.dtype.kind == "f" and np.all(np.isfinite(t)) and np.all(t == np.round(t)):
            t = t.astype(np.int64)
        u = None if self.u is None else np.array(self.u, dtype=float)
        if u is not None and u.ndim == 1:
            u = u.reshape(n, -1)
        s = None if self.s is None else np.array(self.s).reshape(-1)
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "t", _readonly(t))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "u", _readonly(u))
        object.__setattr__(self, "s", _readonly(s))
        object.__setattr__(self, "kind", DatasetKind(self.kind))
        if not self.x_names:
            object.__setattr__(self, "x_names", tuple(f"x{j}" for j in range(x.shape[1])))
        if u is not None and not self.u_names:
            object.__setattr__(self, "u_names", tuple(f"u{j}" for j in range(u.shape[1])))

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def d(self) -> int:
        return int(self.x.shape[1])

    def __len__(self) -> int:
        return self.n

    @property
    def records(self) -> list[UnitRecord]:
        out = []
        for i in range(self.n):
            out.append(
                UnitRecord(
                    x=tuple(float(v) for v in self.x[i]),
                    t=int(self.t[i]),
                    y=float(self.y[i]),
                    u=None if self.u is None else tuple(float(v) for v in self.u[i]),
                    s=None if self.s is None else int(self.s[i]),
                )
            )
        return out

    @classmethod
    def from_records(
        cls,
        records: Sequence[UnitRecord],
        kind: DatasetKind | str = DatasetKind.OBS,
        pi: float | None = None,
        x_names: Sequence[str] = (),
        u_names: Sequence[str] = (),
    ) -> "Dataset":
        """Build a dataset from row records, rejecting ragged shapes."""
        records = list(records)
        d = len(records[0].x) if records else len(x_names)
        if any(len(r.x) != d for r in records):
            raise SchemaError("covariate vectors have differing lengths")
        has_u = [r.u is not None for r in records]
        if any(has_u) and not all(has_u):
            raise SchemaError("hidden confounders present on some records only")
        u = None
        if records and all(has_u):
            k = len(records[0].u)
            if any(len(r.u) != k for r in records):
                raise SchemaError("hidden confounder vectors have differing lengths")
            u = np.array([r.u for r in records], dtype=float).reshape(len(records), k)
        s_vals = [r.s for r in records]
        s = None
        if any(v is not None for v in s_vals):
            if any(v is None for v in s_vals):
                raise MissingStudyIndicator("study indicator missing on some records")
            s = np.array(s_vals)
        return cls(
            x=np.array([r.x for r in records], dtype=float).reshape(len(records), d),
            t=np.array([r.t for r in records]),
            y=np.array([r.y for r in records], dtype=float),
            kind=kind,
            u=u,
            s=s,
            pi=pi,
            x_names=tuple(x_names),
            u_names=tuple(u_names),
        )

    def subset(self, index: np.ndarray, kind: DatasetKind | str | None = None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            x=self.x[index],
            t=self.t[index],
            y=self.y[index],
            kind=self.kind if kind is None else kind,
            u=None if self.u is None else self.u[index],
            s=None if self.s is None else self.s[index],
            pi=self.pi,
            x_names=self.x_names,
            u_names=self.u_names,
        )

    def analyst_view(self) -> "Dataset":
        """Copy with the hidden confounders stripped."""
        return replace(self, u=None, u_names=())

    def with_kind(self, kind: DatasetKind | str, pi: float | None = None) -> "Dataset":
        return replace(self, kind=DatasetKind(kind), pi=self.pi if pi is None else pi)


def concat(datasets: Iterable[Dataset], kind: DatasetKind | str = DatasetKind.POOLED) -> Dataset:
    parts = list(datasets)
    if not parts:
        raise EmptyDataset("nothing to concatenate")
    first = parts[0]

    def stack(attr):
        vals = [getattr(p, attr) for p in parts]
        if all(v is None for v in vals):
            return None
        if any(v is None for v in vals):
            raise SchemaError(f"column '{attr}' present in some datasets only")
        return np.concatenate(vals)

    return Dataset(
        x=np.vstack([p.x for p in parts]),
        t=np.concatenate([p.t for p in parts]),
        y=np.concatenate([p.y for p in parts]),
        kind=kind,
        u=stack("u"),
        s=stack("s"),
        pi=first.pi,
        x_names=first.x_names,
        u_names=first.u_names,
    )


def validate_dataset(d: Dataset) -> Dataset:
    """Return ``d`` unchanged if every record invariant holds.

    Raises:
        EmptyDataset: no records.
        SchemaError: ragged columns, non-binary ``t``/``s``, non-finite ``y``
            or covariates, or a trial without a valid assignment probability.
    """
    n = d.n
    if n == 0:
        raise EmptyDataset("dataset has no records")
    if d.x.ndim != 2 or d.x.shape[0] != n:
        raise SchemaError(f"covariate matrix has shape {d.x.shape}, expected ({n}, d)")
    if d.t.shape != (n,):
        raise SchemaError("treatment column length mismatch")
    if not np.all(np.isin(d.t, (0, 1))):
        raise SchemaError("treatment must be binary in {0, 1}")
    if not np.all(np.isfinite(d.y)):
        raise SchemaError("outcome contains non-finite values")
    if not np.all(np.isfinite(d.x)):
        raise SchemaError("covariates contain non-finite values")
    if d.s is not None:
        if d.s.shape != (n,) or not np.all(np.isin(d.s, (0, 1))):
            raise SchemaError("study indicator must be binary in {0, 1}")
    if d.u is not None and (d.u.ndim != 2 or d.u.shape[0] != n):
        raise SchemaError("hidden confounder matrix has wrong shape")
    if len(d.x_names) != d.d:
        raise SchemaError("covariate names do not match covariate dimension")
    if d.kind is DatasetKind.RCT:
        if d.pi is None or not 0.0 < d.pi < 1.0:
            raise SchemaError("randomized trial needs an assignment probability in (0, 1)")
    return d


def split_by_study(pooled: Dataset, pi: float | None = None) -> tuple[Dataset, Dataset]:
    """Partition a nested-design dataset into (trial, observational) parts.

    Either side may be empty; callers that need both should validate.
    """
    if pooled.s is None:
        raise MissingStudyIndicator("pooled dataset has no study indicator")
    in_trial = pooled.s == 1
    rct = pooled.subset(np.flatnonzero(in_trial), kind=DatasetKind.RCT)
    obs = pooled.subset(np.flatnonzero(~in_trial), kind=DatasetKind.OBS)
    if pi is not None:
        rct = rct.with_kind(DatasetKind.RCT, pi=pi)
    return rct, obs


Bounds = Mapping[int | str, tuple[float, float]] | Sequence[tuple[float, float] | None]


def _normalize_bounds(d: Dataset, bounds: Bounds) -> dict[int, tuple[float, float]]:
    if isinstance(bounds, Mapping):
        items = bounds.items()
    else:
        items = [(j, b) for j, b in enumerate(bounds) if b is not None]
    out = {}
    for key, (lo, hi) in items:
        j = d.x_names.index(key) if isinstance(key, str) else int(key)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError(f"support bounds for covariate {key} must be finite")
        out[j] = (float(lo), float(hi))
    return out


def support_mask(d: Dataset, bounds: Bounds) -> np.ndarray:
    """Boolean mask of records inside the closed hyper-rectangle."""
    mask = np.ones(d.n, dtype=bool)
    for j, (lo, hi) in _normalize_bounds(d, bounds).items():
        mask &= (d.x[:, j] >= lo) & (d.x[:, j] <= hi)
    return mask


def restrict_support(obs: Dataset, bounds: Bounds) -> Dataset:
    """Keep records whose covariates lie in per-coordinate closed intervals."""
    mask = support_mask(obs, bounds)
    if not mask.any():
        raise EmptyResult("no records inside the support bounds")
    return obs.subset(np.flatnonzero(mask))


# ---------------------------------------------------------------------------
# CSV ingestion


def read_csv(path: str | Path, kind: DatasetKind | str = DatasetKind.OBS, pi: float | None = None) -> Dataset:
    """Read a dataset with columns ``t``, ``y``, optional ``s``, ``x0..``, ``u0..``."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    for required in ("t", "y"):
        if required not in header:
            raise SchemaError(f"{path}: missing required column '{required}'")
    x_cols = _indexed_columns(header, "x")
    u_cols = _indexed_columns(header, "u")
    known = {"t", "y", "s", *x_cols, *u_cols}
    unknown = [h for h in header if h not in known]
    if unknown:
        raise SchemaError(f"{path}: unrecognised columns {unknown}")
    if any(len(r) != len(header) for r in rows):
        raise SchemaError(f"{path}: ragged rows")
    try:
        table = np.array(rows, dtype=float).reshape(len(rows), len(header))
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric value ({exc})") from None
    col = {h: j for j, h in enumerate(header)}
    t = table[:, col["t"]]
    if not np.all(np.isin(t, (0.0, 1.0))):
        raise SchemaError(f"{path}: treatment must be 0/1")
    d = Dataset(
        x=table[:, [col[c] for c in x_cols]],
        t=t.astype(np.int64),
        y=table[:, col["y"]],
        kind=kind,
        u=table[:, [col[c] for c in u_cols]] if u_cols else None,
        s=table[:, col["s"]].astype(np.int64) if "s" in col else None,
        pi=pi,
        x_names=tuple(x_cols),
        u_names=tuple(u_cols),
    )
    return validate_dataset(d)


def _indexed_columns(header: list[str], prefix: str) -> list[str]:
    cols = [h for h in header if h.startswith(prefix) and h[len(prefix):].isdigit()]
    cols.sort(key=lambda h: int(h[len(prefix):]))
    expected = [f"{prefix}{j}" for j in range(len(cols))]
    if cols != expected:
        raise SchemaError(f"columns {cols} are not a contiguous {prefix}0..{prefix}{len(cols) - 1} block")
    return cols


def write_csv(d: Dataset, path: str | Path, include_hidden: bool = True) -> None:
    header = ["t", "y"]
    cols = [d.t.astype(float).reshape(-1, 1), d.y.reshape(-1, 1)]
    if d.s is not None:
        header.append("s")
        cols.append(d.s.astype(float).reshape(-1, 1))
    header += [f"x{j}" for j in range(d.d)]
    cols.append(d.x)
    if include_hidden and d.u is not None:
        header += [f"u{j}" for j in range(d.u.shape[1])]
        cols.append(d.u)
    table = np.hstack(cols) if d.n else np.zeros((0, len(header)))
    int_cols = {"t", "s"}
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in table:
            w.writerow(
                str(int(v)) if h in int_cols else repr(float(v)) for h, v in zip(header, row)
            )
