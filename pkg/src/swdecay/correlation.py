"""Structured within-cluster correlation matrices.

All cluster-level matrices use individual-major ordering: the ``T`` repeated
measurements of one individual are contiguous, so a cluster with ``n``
individuals is laid out as ``(y_11..y_1T, y_21..y_2T, ...)``.  Under that
ordering the proportional decay matrix is ``kron(G(tau), F(rho))`` with ``G``
exchangeable over individuals and ``F`` AR(1) over periods.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .exceptions import RegionError, SingularMatrixError

__all__ = [
    "BOUNDARY_GUARD",
    "CorrelationParams",
    "RegionCheck",
    "StructuredMatrix",
    "check_validity",
    "require_valid",
    "exchangeable",
    "exchangeable_inverse",
    "ar1",
    "ar1_inverse",
    "ar1_bases",
    "build_proportional_decay",
    "invert_proportional_decay",
    "log_determinant_proportional_decay",
    "build_exponential_decay",
]

# distance from the region boundary below which closed-form inverses are refused
BOUNDARY_GUARD = 1e-9


@dataclass(frozen=True)
class CorrelationParams:
    """Within-period correlation ``tau`` and AR(1) correlation ``rho``.

    The decay parameter used on sensitivity plots is ``d = 1 - rho``.
    """

    tau: float
    rho: float

    @property
    def decay(self) -> float:
        return 1.0 - self.rho


@dataclass(frozen=True)
class RegionCheck:
    valid: bool
    bound: str | None = None
    message: str = "inside region"

    def __bool__(self) -> bool:
        return self.valid


def tau_lower_bound(max_cluster_size: int) -> float:
    """Smallest admissible ``tau`` for clusters of at most ``max_cluster_size``."""
    if max_cluster_size <= 1:
        return -np.inf
    return -1.0 / (max_cluster_size - 1)


def check_validity(params: CorrelationParams, max_cluster_size: int, guard: float = 0.0) -> RegionCheck:
    """Locate ``params`` relative to the positive-definite region.

    The region is ``-1/(N_max - 1) < tau < 1`` and ``-1 < rho < 1``.  With
    ``guard > 0`` the region is shrunk by that margin on every side.
    """
    if max_cluster_size < 1:
        raise ValueError("max_cluster_size must be >= 1")
    tau, rho = float(params.tau), float(params.rho)
    lo = tau_lower_bound(max_cluster_size)
    if not np.isfinite(tau) or not np.isfinite(rho):
        return RegionCheck(False, "finite", f"non-finite correlation (tau={tau}, rho={rho})")
    if tau <= lo + guard:
        return RegionCheck(
            False, "tau_lower",
            f"tau={tau:g} violates lower bound -1/(N_max-1) = {lo:g} for N_max={max_cluster_size}",
        )
    if tau >= 1.0 - guard:
        return RegionCheck(False, "tau_upper", f"tau={tau:g} violates upper bound 1")
    if rho <= -1.0 + guard:
        return RegionCheck(False, "rho_lower", f"rho={rho:g} violates lower bound -1")
    if rho >= 1.0 - guard:
        return RegionCheck(False, "rho_upper", f"rho={rho:g} violates upper bound 1")
    return RegionCheck(True)


def require_valid(params: CorrelationParams, max_cluster_size: int, guard: float = BOUNDARY_GUARD) -> None:
    check = check_validity(params, max_cluster_size, guard=guard)
    if not check.valid:
        raise RegionError(check.message, bound=check.bound)


def exchangeable(n: int, tau: float) -> np.ndarray:
    return (1.0 - tau) * np.eye(n) + tau * np.ones((n, n))


def exchangeable_inverse(n: int, tau: float) -> np.ndarray:
    """Closed-form inverse ``I/(1-tau) - tau J / ((1-tau)(1+(n-1)tau))``."""
    a = 1.0 / (1.0 - tau)
    b = -tau / ((1.0 - tau) * (1.0 + (n - 1) * tau))
    return a * np.eye(n) + b * np.ones((n, n))


def ar1(t: int, rho: float) -> np.ndarray:
    idx = np.arange(t)
    lag = np.abs(idx[:, None] - idx[None, :])
    # 0**0 == 1 keeps the diagonal right when rho == 0
    return np.power(float(rho), lag)


def ar1_bases(t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(I, C2, C1)`` with ``F^{-1}(rho) = (I + rho^2 C2 - rho C1)/(1 - rho^2)``.

    ``C2 = diag(0, 1, ..., 1, 0)`` and ``C1`` has ones on the two first
    off-diagonals.
    """
    eye = np.eye(t)
    c2 = np.eye(t)
    c2[0, 0] = 0.0
    c2[-1, -1] = 0.0
    c1 = np.eye(t, k=1) + np.eye(t, k=-1)
    return eye, c2, c1


def ar1_inverse(t: int, rho: float) -> np.ndarray:
    eye, c2, c1 = ar1_bases(t)
    if t == 1:
        return eye.copy()
    return (eye + rho**2 * c2 - rho * c1) / (1.0 - rho**2)


@dataclass
class StructuredMatrix:
    """A materialized structured correlation matrix (or its inverse).

    ``kind`` is one of ``exchangeable``, ``ar1``, ``proportional_decay`` or
    ``exponential_decay``; ``inverse`` marks a matrix holding the inverse.
    """

    kind: str
    n: int
    t: int
    params: CorrelationParams
    dense: np.ndarray = field(repr=False)
    inverse: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.dense.shape

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.dense, dtype=dtype)


def _check_dims(n: int, t: int) -> None:
    if int(n) < 1 or int(t) < 1:
        raise ValueError(f"cluster size and period count must be >= 1 (got n={n}, t={t})")


def build_proportional_decay(params: CorrelationParams, n: int, t: int) -> StructuredMatrix:
    """``corr(y_ijt, y_ij't') = tau**[j != j'] * rho**|t - t'|`` as an ``nt x nt`` matrix."""
    _check_dims(n, t)
    check = check_validity(params, n)
    if not check.valid:
        raise RegionError(check.message, bound=check.bound)
    dense = np.kron(exchangeable(n, params.tau), ar1(t, params.rho))
    return StructuredMatrix("proportional_decay", n, t, params, dense)


def invert_proportional_decay(params: CorrelationParams, n: int, t: int) -> StructuredMatrix:
    """``G^{-1}(tau) kron F^{-1}(rho)`` from the two closed-form block inverses."""
    _check_dims(n, t)
    check = check_validity(params, n, guard=BOUNDARY_GUARD)
    if not check.valid:
        raise SingularMatrixError(f"proportional decay matrix is singular or ill-conditioned: {check.message}")
    dense = np.kron(exchangeable_inverse(n, params.tau), ar1_inverse(t, params.rho))
    return StructuredMatrix("proportional_decay", n, t, params, dense, inverse=True)


def log_determinant_proportional_decay(params: CorrelationParams, n: int, t: int) -> float:
    """``T(N-1) log(1-tau) + T log(1+(N-1)tau) + (T-1) N log(1-rho^2)``."""
    _check_dims(n, t)
    check = check_validity(params, n, guard=BOUNDARY_GUARD)
    if not check.valid:
        raise SingularMatrixError(f"log-determinant diverges to -inf: {check.message}")
    tau, rho = params.tau, params.rho
    return (
        t * (n - 1) * np.log1p(-tau)
        + t * np.log1p((n - 1) * tau)
        + (t - 1) * n * np.log1p(-(rho**2))
    )


def build_exponential_decay(params: CorrelationParams, n: int, t: int) -> StructuredMatrix:
    """Cross-sectional structure ``(1 - tau) I + tau kron(J_n, F(rho))``.

    Unlike proportional decay, two measurements in different periods are
    correlated ``tau * rho**|t-t'|`` whether or not they share an individual.
    Positive definiteness is checked by a Cholesky factorization.
    """
    _check_dims(n, t)
    tau, rho = float(params.tau), float(params.rho)
    dense = (1.0 - tau) * np.eye(n * t) + tau * np.kron(np.ones((n, n)), ar1(t, rho))
    try:
        linalg.cholesky(dense, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularMatrixError(
            f"exponential decay matrix is not positive definite (tau={tau:g}, rho={rho:g})"
        ) from exc
    return StructuredMatrix("exponential_decay", n, t, params, dense)
