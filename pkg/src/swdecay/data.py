"""Closed-cohort trial data in long format and its CSV wire format.

One record per ``(cluster, individual, period)`` with the cluster's treatment
indicator in that period and the observed outcome.  Periods are the integers
``1..T``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .exceptions import DatasetError

__all__ = ["CSV_COLUMNS", "TrialDataset", "ClusterStats", "read_dataset_csv", "write_dataset_csv"]

CSV_COLUMNS = ("cluster", "individual", "period", "treatment", "outcome")


@dataclass
class ClusterStats:
    """Per-cluster sufficient statistics for the proportional-decay fit.

    With a shared design row ``(I_T, X_i)`` for every individual in a cluster,
    the mean equations see only the cluster-period means; the correlation
    equations additionally need the within-cluster cross-product ``Y_i' Y_i``.
    """

    sizes: np.ndarray      # (I,) individuals per cluster
    X: np.ndarray          # (I, T) treatment paths
    ybar: np.ndarray       # (I, T) cluster-period means
    yty: np.ndarray        # (I, T, T) sum over individuals of y_ij y_ij'

    @property
    def n_clusters(self) -> int:
        return self.sizes.shape[0]

    @property
    def n_periods(self) -> int:
        return self.X.shape[1]

    @property
    def n_obs(self) -> int:
        return int(self.sizes.sum()) * self.n_periods


@dataclass
class TrialDataset:
    """Validated closed-cohort stepped wedge data.

    ``Y`` holds one ``(N_i, T)`` outcome matrix per cluster (individual-major,
    individuals in sorted id order) and ``X`` the ``(I, T)`` treatment paths.
    """

    Y: list
    X: np.ndarray
    cluster_ids: list = field(default_factory=list)
    individual_ids: list = field(default_factory=list)

    def __post_init__(self):
        X = np.asarray(self.X)
        if X.ndim != 2:
            raise DatasetError("X must be a 2-D (clusters x periods) array")
        if len(self.Y) != X.shape[0]:
            raise DatasetError(f"{len(self.Y)} outcome blocks for {X.shape[0]} clusters")
        if not np.isin(X, (0, 1)).all():
            raise DatasetError("treatment must be 0 or 1")
        X = X.astype(np.int64)
        for i, row in enumerate(X):
            if np.any(np.diff(row) < 0):
                label = self.cluster_ids[i] if self.cluster_ids else i
                raise DatasetError(
                    f"cluster {label}: treatment path {row.tolist()} is not zeros followed by ones "
                    "(staggered rollout violated)"
                )
        Y = []
        for i, block in enumerate(self.Y):
            block = np.asarray(block, dtype=float)
            if block.ndim != 2 or block.shape[1] != X.shape[1] or block.shape[0] < 1:
                raise DatasetError(f"cluster {i}: outcome block has shape {block.shape}, expected (N_i, {X.shape[1]})")
            if not np.isfinite(block).all():
                raise DatasetError(f"cluster {i}: non-finite outcome")
            Y.append(block)
        self.Y = Y
        self.X = X
        if not self.cluster_ids:
            self.cluster_ids = list(range(1, len(Y) + 1))
        if not self.individual_ids:
            self.individual_ids = [list(range(1, b.shape[0] + 1)) for b in Y]

    @property
    def n_clusters(self) -> int:
        return len(self.Y)

    @property
    def n_periods(self) -> int:
        return self.X.shape[1]

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.array([b.shape[0] for b in self.Y], dtype=np.int64)

    def stats(self) -> ClusterStats:
        ybar = np.vstack([b.mean(axis=0) for b in self.Y])
        yty = np.stack([b.T @ b for b in self.Y])
        return ClusterStats(self.cluster_sizes, self.X.astype(float), ybar, yty)

    # -- long format ---------------------------------------------------------

    def records(self) -> list[tuple]:
        out = []
        T = self.n_periods
        for cid, iids, block, x in zip(self.cluster_ids, self.individual_ids, self.Y, self.X):
            for jid, row in zip(iids, block):
                for t in range(T):
                    out.append((cid, jid, t + 1, int(x[t]), float(row[t])))
        return out

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """``(design, outcome)`` with design columns cluster, individual, period, treatment."""
        recs = self.records()
        design = np.array([r[:4] for r in recs], dtype=object)
        y = np.array([r[4] for r in recs], dtype=float)
        return design, y

    @classmethod
    def from_records(cls, records: Iterable[tuple], *, label: str = "record", start: int = 1) -> "TrialDataset":
        """Build from ``(cluster, individual, period, treatment, outcome)`` tuples.

        Raises :class:`DatasetError` for duplicate or missing measurements,
        treatment varying within a cluster-period, or a treatment path that
        switches back to control.
        """
        cells: dict = {}
        treat: dict = {}
        periods = set()
        for k, rec in enumerate(records, start=start):
            try:
                cid, iid, period, trt, y = rec
                period = int(period)
                trt = int(trt)
                y = float(y)
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"{label} {k}: cannot parse {rec!r} ({exc})") from None
            if trt not in (0, 1):
                raise DatasetError(f"{label} {k}: treatment must be 0 or 1, got {trt}")
            if period < 1:
                raise DatasetError(f"{label} {k}: period must be >= 1, got {period}")
            key = (cid, iid, period)
            if key in cells:
                raise DatasetError(f"{label} {k}: duplicate measurement for cluster {cid}, individual {iid}, period {period}")
            cells[key] = y
            prev = treat.setdefault((cid, period), (trt, k))
            if prev[0] != trt:
                raise DatasetError(
                    f"{label} {k}: treatment {trt} conflicts with {prev[0]} ({label} {prev[1]}) "
                    f"in cluster {cid}, period {period}"
                )
            periods.add(period)
        if not cells:
            raise DatasetError("dataset is empty")
        T = max(periods)
        missing_periods = sorted(set(range(1, T + 1)) - periods)
        if missing_periods:
            raise DatasetError(f"no measurements at all for period(s) {missing_periods}")
        members: dict = {}
        for cid, iid, _ in cells:
            members.setdefault(cid, set()).add(iid)
        cluster_ids = _sorted_ids(members)
        Y, X, ind_ids = [], [], []
        for cid in cluster_ids:
            iids = _sorted_ids(members[cid])
            block = np.empty((len(iids), T))
            for j, iid in enumerate(iids):
                for t in range(1, T + 1):
                    try:
                        block[j, t - 1] = cells[(cid, iid, t)]
                    except KeyError:
                        raise DatasetError(
                            f"incomplete trajectory: cluster {cid}, individual {iid} has no outcome in period {t}"
                        ) from None
            Y.append(block)
            X.append([treat[(cid, t)][0] for t in range(1, T + 1)])
            ind_ids.append(iids)
        return cls(Y, np.array(X), cluster_ids, ind_ids)

    @classmethod
    def from_arrays(cls, design, y) -> "TrialDataset":
        """Build from a ``(n, 4)`` design (cluster, individual, period, treatment) and outcomes."""
        if hasattr(design, "columns"):
            cols = [c for c in ("cluster", "individual", "period", "treatment") if c in design.columns]
            if len(cols) == 4:
                design = design[cols]
            design = design.to_numpy()
        design = np.asarray(design, dtype=object)
        y = np.asarray(y, dtype=float).ravel()
        if design.ndim != 2 or design.shape[1] != 4:
            raise DatasetError(f"design must have 4 columns (cluster, individual, period, treatment), got shape {design.shape}")
        if design.shape[0] != y.shape[0]:
            raise DatasetError(f"design has {design.shape[0]} rows but outcome has {y.shape[0]}")
        return cls.from_records((*row, yv) for row, yv in zip(design.tolist(), y.tolist()))


def _sorted_ids(ids) -> list:
    ids = list(ids)
    try:
        return sorted(ids)
    except TypeError:
        return sorted(ids, key=str)


def _coerce_id(value: str):
    try:
        return int(value)
    except ValueError:
        return value


def read_dataset_csv(path) -> TrialDataset:
    """Parse a long-format CSV with header ``cluster,individual,period,treatment,outcome``.

    Errors name the offending line number (header is line 1).
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise DatasetError(f"{path}: missing column(s) {missing}; expected header {','.join(CSV_COLUMNS)}")
        records = []
        for line, row in enumerate(reader, start=2):
            try:
                records.append((
                    _coerce_id(row["cluster"].strip()),
                    _coerce_id(row["individual"].strip()),
                    int(row["period"]),
                    int(row["treatment"]),
                    float(row["outcome"]),
                ))
            except (TypeError, ValueError, AttributeError):
                raise DatasetError(f"{path}: line {line}: cannot parse row {row}") from None
    return TrialDataset.from_records(records, label=f"{path}: line", start=2)


def write_dataset_csv(dataset: TrialDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for cid, iid, t, trt, y in dataset.records():
            writer.writerow([cid, iid, t, trt, repr(float(y))])
