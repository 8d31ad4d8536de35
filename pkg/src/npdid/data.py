"""Data containers, CSV ingestion, and stratified fold assignment.

Observations are quadruples (x, s, t, y): covariates, a binary state
indicator, a binary time indicator, and a real outcome.  Everything
downstream consumes the :class:`Dataset` built here.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

CELL_PAIRS = ((0, 0), (0, 1), (1, 0), (1, 1))


class DataError(ValueError):
    """Raised for malformed input files or invalid datasets."""


class StratificationError(ValueError):
    """Raised when folds cannot be stratified over the four (s, t) cells."""


def cell_index(s, t):
    """Map (s, t) indicator pairs to cell codes 0..3, ordered (0,0),(0,1),(1,0),(1,1)."""
    return 2 * np.asarray(s, dtype=int) + np.asarray(t, dtype=int)


@dataclass(frozen=True)
class Dataset:
    """Immutable container for one cross-sectional sample.

    Attributes
    ----------
    x : ndarray of shape (n, d)
        Real covariates.
    s : ndarray of shape (n,)
        Binary state indicator (1 = exposed state).
    t : ndarray of shape (n,)
        Binary time indicator (1 = post period).
    y : ndarray of shape (n,)
        Real outcome.
    """

    x: np.ndarray
    s: np.ndarray
    t: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        s = np.asarray(self.s)
        t = np.asarray(self.t)
        y = np.asarray(self.y, dtype=float)
        if x.shape[0] != y.shape[0] or s.shape[0] != y.shape[0] or t.shape[0] != y.shape[0]:
            raise DataError("x, s, t, y must have one row per observation")
        for name, ind in (("s", s), ("t", t)):
            if not np.isin(ind, (0, 1)).all():
                bad = int(np.flatnonzero(~np.isin(ind, (0, 1)))[0])
                raise DataError(f"{name} must be 0/1; found {ind[bad]!r} at row {bad + 1}")
        if not np.isfinite(x).all():
            raise DataError("non-finite value in covariates")
        if not np.isfinite(y).all():
            raise DataError("non-finite value in outcome")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "s", s.astype(int))
        object.__setattr__(self, "t", t.astype(int))
        object.__setattr__(self, "y", y)
        for arr in (self.x, self.s, self.t, self.y):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def w(self) -> np.ndarray:
        """Treatment indicator s*t."""
        return self.s * self.t

    def cells(self) -> np.ndarray:
        """Cell code 0..3 per observation."""
        return cell_index(self.s, self.t)

    def cell_counts(self) -> np.ndarray:
        """Observation counts for cells (0,0),(0,1),(1,0),(1,1)."""
        return np.bincount(self.cells(), minlength=4)

    def validate_for_estimation(self, min_n: int = 8) -> None:
        """Check the estimation-grade invariants: n >= min_n and no empty cell.

        Construction only enforces parse-level validity, so small or
        degenerate files can still be loaded and inspected; estimators
        call this before doing any work.
        """
        if self.n < min_n:
            raise DataError(f"need at least {min_n} observations, got {self.n}")
        counts = self.cell_counts()
        for (sv, tv), c in zip(CELL_PAIRS, counts):
            if c == 0:
                raise DataError(f"no observations with (s, t) = ({sv}, {tv}); overlap violated")

    def subset(self, mask: np.ndarray) -> "Dataset":
        mask = np.asarray(mask, dtype=bool)
        return Dataset(self.x[mask], self.s[mask], self.t[mask], self.y[mask])


@dataclass(frozen=True)
class FoldAssignment:
    """Stratified fold labels for cross-fitting.

    ``fold_of[i]`` is the held-out fold of observation i; models used to
    predict for i must be fit on the complement of that fold.
    """

    fold_of: np.ndarray
    k: int

    def __post_init__(self):
        fold_of = np.asarray(self.fold_of, dtype=int)
        if fold_of.min(initial=0) < 0 or (self.k and fold_of.max(initial=-1) >= self.k):
            raise ValueError("fold indices must lie in 0..k-1")
        object.__setattr__(self, "fold_of", fold_of)
        self.fold_of.setflags(write=False)

    @property
    def n(self) -> int:
        return self.fold_of.shape[0]

    def members(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.k)


def make_folds(n: int, k: int, seed: int, cells: np.ndarray) -> FoldAssignment:
    """Assign observations to k folds, stratified by (s, t) cell.

    Within each cell, observations are shuffled by a generator seeded
    from ``seed`` and dealt round-robin; the dealing pointer carries
    across cells so overall fold sizes differ by at most one.

    Raises
    ------
    StratificationError
        If any cell has fewer than k members.
    """
    cells = np.asarray(cells, dtype=int)
    if cells.shape[0] != n:
        raise ValueError("cells must have length n")
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    counts = np.bincount(cells, minlength=4)
    for (sv, tv), c in zip(CELL_PAIRS, counts):
        if c < k:
            raise StratificationError(
                f"cell (s, t) = ({sv}, {tv}) has {c} observations; "
                f"stratified {k}-fold split needs at least {k} per cell"
            )
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=int)
    ptr = 0
    for code in range(4):
        members = np.flatnonzero(cells == code)
        members = members[rng.permutation(members.shape[0])]
        for idx in members:
            fold_of[idx] = ptr % k
            ptr += 1
    return FoldAssignment(fold_of=fold_of, k=k)


class Method(str, enum.Enum):
    """Estimator identifiers used in reports and on the command line."""

    SAMPLE_MEANS = "sample_means"
    OLS = "ols"
    TR = "tr"
    HTE = "hte"
    AIPW = "aipw"
    IPW = "ipw"
    AMLE = "amle"
    ORACLE_TR = "oracle_tr"


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with normal-approximation confidence interval."""

    method: Method
    tau_hat: float
    std_err: float
    ci_low: float
    ci_high: float
    n_used: int
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def from_normal(cls, method, tau_hat, std_err, n_used, level=0.95, diagnostics=None):
        z = norm.ppf(0.5 + level / 2.0)
        half = z * std_err
        return cls(
            method=Method(method),
            tau_hat=float(tau_hat),
            std_err=float(std_err),
            ci_low=float(tau_hat - half),
            ci_high=float(tau_hat + half),
            n_used=int(n_used),
            diagnostics=dict(diagnostics or {}),
        )

    def to_json_dict(self) -> dict:
        return {
            "method": self.method.value,
            "tau_hat": self.tau_hat,
            "std_err": self.std_err,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_used": self.n_used,
            "diagnostics": {k: float(v) for k, v in self.diagnostics.items()},
        }


def load_csv(path, schema: dict, row_filter: tuple | None = None) -> Dataset:
    """Load a dataset from a CSV file with a header row.

    ``schema`` maps the roles ``outcome``, ``state``, ``time`` and
    ``covariates`` (a list of column names) to columns of the file.
    ``row_filter`` is an optional (column, value) pair keeping only
    matching rows; values compare as strings first, then numerically.
    Row numbers in error messages count data rows from 1.
    """
    for key in ("outcome", "state", "time", "covariates"):
        if key not in schema:
            raise DataError(f"schema is missing the {key!r} entry")
    cov_cols = list(schema["covariates"])
    if not cov_cols:
        raise DataError("schema must name at least one covariate column")
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        col_of = {name: i for i, name in enumerate(header)}
        needed = [schema["outcome"], schema["state"], schema["time"], *cov_cols]
        if row_filter is not None:
            needed = [*needed, row_filter[0]]
        for name in needed:
            if name not in col_of:
                raise DataError(f"column {name!r} not found in {path} (header: {header})")

        def keep(row):
            if row_filter is None:
                return True
            raw = row[col_of[row_filter[0]]].strip()
            want = str(row_filter[1]).strip()
            if raw == want:
                return True
            try:
                return float(raw) == float(want)
            except ValueError:
                return False

        def parse(row_no, row, name):
            raw = row[col_of[name]]
            try:
                return float(raw)
            except ValueError:
                raise DataError(
                    f"non-numeric value {raw!r} in row {row_no}, column {name!r}"
                ) from None

        xs, ss, ts, ys = [], [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"row {row_no} has {len(row)} fields, expected {len(header)}")
            if not keep(row):
                continue
            ys.append(parse(row_no, row, schema["outcome"]))
            for name, dest in ((schema["state"], ss), (schema["time"], ts)):
                val = parse(row_no, row, name)
                if val not in (0.0, 1.0):
                    raise DataError(
                        f"value {val!r} in row {row_no}, column {name!r} is not 0/1"
                    )
                dest.append(int(val))
            xs.append([parse(row_no, row, name) for name in cov_cols])
    if not ys:
        raise DataError(f"{path} contains no data rows")
    return Dataset(x=np.array(xs, dtype=float), s=np.array(ss), t=np.array(ts), y=np.array(ys))


def save_csv(dataset: Dataset, path, schema: dict | None = None) -> None:
    """Write a dataset in the format :func:`load_csv` reads.

    Floats are written with ``repr`` so a save/load round trip is exact.
    """
    if schema is None:
        schema = default_schema(dataset.d)
    cov_cols = list(schema["covariates"])
    if len(cov_cols) != dataset.d:
        raise DataError(f"schema names {len(cov_cols)} covariates, dataset has {dataset.d}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([schema["outcome"], schema["state"], schema["time"], *cov_cols])
        for i in range(dataset.n):
            writer.writerow(
                [
                    repr(float(dataset.y[i])),
                    int(dataset.s[i]),
                    int(dataset.t[i]),
                    *[repr(float(v)) for v in dataset.x[i]],
                ]
            )


def default_schema(d: int) -> dict:
    return {
        "outcome": "y",
        "state": "s",
        "time": "t",
        "covariates": [f"x{j + 1}" for j in range(d)],
    }
