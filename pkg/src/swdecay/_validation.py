"""Input checks shared by the estimator API."""

from __future__ import annotations

from .data import ClusterStats, TrialDataset
from .exceptions import DatasetError, ValidationError

ADJUSTMENTS = ("qls", "maqls")
_FLAVORS = ("mb", "bc0", "bc1", "bc2", "bc3")


def check_adjustment(adjustment: str) -> str:
    value = str(adjustment).lower()
    if value not in ADJUSTMENTS:
        raise ValidationError(f"adjustment must be one of {ADJUSTMENTS}, got {adjustment!r}")
    return value


def check_flavor(flavor: str) -> str:
    value = str(flavor).lower()
    if value not in _FLAVORS:
        raise ValidationError(f"covariance flavor must be one of {_FLAVORS}, got {flavor!r}")
    return value


def coerce_dataset(X, y=None) -> TrialDataset:
    """Accept a :class:`TrialDataset` or a ``(design, outcome)`` pair."""
    if isinstance(X, TrialDataset):
        if y is not None:
            raise DatasetError("y must be omitted when X is a TrialDataset")
        return X
    if y is None:
        raise DatasetError("outcomes y are required when X is a design array")
    return TrialDataset.from_arrays(X, y)


def as_cluster_stats(data) -> ClusterStats:
    if isinstance(data, ClusterStats):
        return data
    if isinstance(data, TrialDataset):
        return data.stats()
    raise DatasetError(f"expected TrialDataset or ClusterStats, got {type(data).__name__}")
