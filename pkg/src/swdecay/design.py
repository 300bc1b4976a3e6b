"""Design-stage calculations for cohort stepped wedge trials.

Closed-form variance of the intervention effect under proportional decay,
power for Wald z and t tests, cohort-size and cluster-count searches, the
design effect relative to individual randomization, and comparisons with the
block-exchangeable and exponential-decay structures.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg, stats

from .correlation import (
    CorrelationParams,
    build_exponential_decay,
    check_validity,
)
from .exceptions import (
    InsufficientClustersError,
    NonIdentifiableDesignError,
    RegionError,
    ValidationError,
)

__all__ = [
    "DesignLayout",
    "DesignConstants",
    "PowerQuery",
    "BlockExchangeableParams",
    "SampleSizeResult",
    "ClusterCountResult",
    "EqualVarianceLine",
    "standard_layout",
    "general_layout",
    "design_constants",
    "variance_delta",
    "variance_delta_standard",
    "variance_limit",
    "design_effect",
    "de_maximizer",
    "decay_profile",
    "two_sample_variance",
    "clusters_from_design_effect",
    "resolve_dof",
    "power",
    "required_cohort_size",
    "required_clusters",
    "variance_block_exchangeable",
    "relative_variance",
    "relative_variance_h",
    "equal_variance_line",
    "variance_exponential_decay",
    "sensitivity_grid",
    "write_grid_csv",
    "attrition_inflate",
]


@dataclass(frozen=True)
class DesignLayout:
    """Binary ``I x T`` treatment matrix; ``X[i, t] == 1`` iff cluster ``i`` is treated in period ``t``."""

    X: np.ndarray
    cluster_labels: tuple | None = None
    period_labels: tuple | None = None

    def __post_init__(self):
        X = np.asarray(self.X)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValidationError(f"layout must be a non-empty 2-D matrix, got shape {X.shape}")
        if not np.isin(X, (0, 1)).all():
            raise ValidationError("layout entries must be 0 or 1")
        X = X.astype(np.int64)
        bad = np.flatnonzero((np.diff(X, axis=1) < 0).any(axis=1))
        if bad.size:
            raise ValidationError(
                f"cluster row {int(bad[0]) + 1} is not a run of zeros followed by ones (staggered rollout violated)"
            )
        X.setflags(write=False)
        object.__setattr__(self, "X", X)

    @property
    def n_clusters(self) -> int:
        return self.X.shape[0]

    @property
    def n_periods(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class DesignConstants:
    U: int
    W: int
    V: int
    Q: int


@dataclass(frozen=True)
class PowerQuery:
    """Effect size, marginal variance and test settings for a power calculation.

    ``dof_rule`` is ``"i-(t+1)"``, ``"i-2"`` or an explicit integer and is only
    used when ``test == "t"``.
    """

    delta: float
    phi: float = 1.0
    alpha: float = 0.05
    test: str = "t"
    dof_rule: str | int = "i-2"
    target_power: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.target_power < 1.0:
            raise ValidationError(f"target_power must lie in (0, 1), got {self.target_power}")
        if not self.phi > 0.0:
            raise ValidationError(f"phi must be positive, got {self.phi}")
        if self.test not in ("z", "t"):
            raise ValidationError(f"test must be 'z' or 't', got {self.test!r}")


@dataclass(frozen=True)
class BlockExchangeableParams:
    """Within-period ``tau``, between-period ``alpha1`` and within-individual ``alpha2``."""

    tau: float
    alpha1: float
    alpha2: float


@dataclass(frozen=True)
class SampleSizeResult:
    attainable: bool
    power: float
    n: int | None = None
    limit_power: float | None = None


@dataclass(frozen=True)
class ClusterCountResult:
    attainable: bool
    n_clusters: int | None
    power: float | None
    searched: tuple = field(default=(), repr=False)


@dataclass(frozen=True)
class EqualVarianceLine:
    """Roots ``eta`` of ``relative_variance == 1`` along ``(N-1) alpha1 + alpha2 = eta``."""

    etas: tuple
    h_range: tuple

    @property
    def exists(self) -> bool:
        return len(self.etas) > 0


# -- layouts -----------------------------------------------------------------


def general_layout(m: Sequence[int], b: int = 1, c: Sequence[int] | int = 1) -> DesignLayout:
    """Layout with ``m[s]`` clusters crossing at step ``s``, ``b`` baseline periods
    and ``c[s]`` measurements between step ``s`` and the next step.

    Rows are sorted by crossover step.
    """
    m = [int(v) for v in m]
    if isinstance(c, (int, np.integer)):
        c = [int(c)] * len(m)
    c = [int(v) for v in c]
    if not m:
        raise ValidationError("at least one step is required")
    if len(c) != len(m):
        raise ValidationError(f"m and c must have equal length (got {len(m)} and {len(c)})")
    if min(m) < 1 or min(c) < 1 or b < 1:
        raise ValidationError("m, c and b entries must all be >= 1")
    T = b + sum(c)
    rows = []
    start = b
    for ms, cs in zip(m, c):
        row = np.zeros(T, dtype=np.int64)
        row[start:] = 1
        rows.extend([row] * ms)
        start += cs
    return DesignLayout(np.vstack(rows))


def standard_layout(I: int, T: int) -> DesignLayout:
    """Standard design: one baseline period, ``I/(T-1)`` clusters cross at each of ``T-1`` steps."""
    if T < 3:
        raise ValidationError(f"a standard design needs T >= 3 periods, got T={T}")
    S = T - 1
    if I < 1 or I % S:
        raise ValidationError(f"I={I} clusters cannot be split evenly over S={S} steps")
    return general_layout([I // S] * S, b=1, c=1)


def design_constants(layout: DesignLayout) -> DesignConstants:
    X = layout.X
    col = X.sum(axis=0)
    U = int(X.sum())
    W = int((col**2).sum())
    V = int((X[:, :-1] * X[:, 1:]).sum())
    Q = int((col[:-1] * col[1:]).sum())
    return DesignConstants(U, W, V, Q)


# -- closed-form variances -----------------------------------------------------


def _require_region(params: CorrelationParams, n: int) -> None:
    check = check_validity(params, n)
    if not check.valid:
        raise RegionError(check.message, bound=check.bound)


def _information(layout: DesignLayout, rho: float) -> float:
    I = layout.n_clusters
    k = design_constants(layout)
    denom = (I * k.U - k.W) * (1.0 + rho**2) - 2.0 * (I * k.V - k.Q) * rho
    # AR(1) end-period terms; zero when every cluster starts in control and ends treated
    first, last = int(layout.X[:, 0].sum()), int(layout.X[:, -1].sum())
    denom -= rho**2 * (I * (first + last) - first**2 - last**2)
    if not denom > 0.0:
        raise NonIdentifiableDesignError(
            "layout does not identify the intervention effect given period effects "
            f"(design denominator {denom:g} <= 0)"
        )
    return denom


def variance_delta(layout: DesignLayout, N: int, params: CorrelationParams, phi: float = 1.0) -> float:
    """Model-based variance of the intervention effect under proportional decay.

    For layouts where every cluster is in control in the first period and
    treated in the last, this is
    ``(phi I / N)(1 - rho^2)(1 + (N-1) tau) / ((IU - W)(1 + rho^2) - 2(IV - Q) rho)``.
    Other layouts (never-treated or always-treated clusters) pick up an extra
    ``-rho^2 (I (c_1 + c_T) - c_1^2 - c_T^2)`` in the denominator, where
    ``c_t`` counts treated clusters in period ``t``.
    """
    if N < 1:
        raise ValidationError(f"cohort size must be >= 1, got {N}")
    _require_region(params, N)
    tau, rho = params.tau, params.rho
    I = layout.n_clusters
    denom = _information(layout, rho)
    return (phi * I / N) * (1.0 - rho**2) * (1.0 + (N - 1) * tau) / denom


def variance_delta_standard(I: int, T: int, N: int, params: CorrelationParams, phi: float = 1.0) -> float:
    """Simplified variance for the standard design (one cluster group per step, ``b = c = 1``)."""
    if T < 3:
        raise ValidationError(f"the standard-design variance needs T >= 3, got T={T}")
    if N < 1 or I < 1:
        raise ValidationError("I and N must be >= 1")
    _require_region(params, N)
    tau, rho = params.tau, params.rho
    num = 6.0 * (phi / N) * (T - 1) * (1.0 - rho**2) * (1.0 + (N - 1) * tau)
    den = I * (T - 2) * (T * (1.0 - rho) ** 2 + 6.0 * rho)
    return num / den


def variance_limit(layout: DesignLayout, params: CorrelationParams, phi: float = 1.0) -> float:
    """Limit of :func:`variance_delta` as the cohort size grows without bound."""
    if not params.tau > 0.0:
        raise ValidationError(f"the large-N limit requires tau > 0, got tau={params.tau}")
    if not -1.0 < params.rho < 1.0:
        raise RegionError(f"rho={params.rho:g} outside (-1, 1)", bound="rho")
    rho = params.rho
    denom = _information(layout, rho)
    return phi * layout.n_clusters * (1.0 - rho**2) * params.tau / denom


def decay_profile(rho: float, S: int, c: int) -> float:
    """``(1 - rho^2) / ((S+1) c (1-rho)^2 + 6 rho)``: the part of the design effect driven by ``rho``."""
    return (1.0 - rho**2) / ((S + 1) * c * (1.0 - rho) ** 2 + 6.0 * rho)


def design_effect(S: int, c: int, N: int, params: CorrelationParams) -> float:
    """Variance relative to a two-arm individually randomized trial with the same
    total number of measurements (``4 phi / (N S m)``).  Free of the number of
    baseline periods."""
    if S < 2 or c < 1 or N < 1:
        raise ValidationError(f"design effect needs S >= 2, c >= 1, N >= 1 (got S={S}, c={c}, N={N})")
    return 3.0 * S / (2.0 * (S - 1)) * decay_profile(params.rho, S, c) * (1.0 + (N - 1) * params.tau)


def two_sample_variance(N: int, S: int, m: int, phi: float = 1.0) -> float:
    return 4.0 * phi / (N * S * m)


def de_maximizer(S: int, c: int) -> float:
    """Value of ``rho`` maximizing :func:`decay_profile`.

    Stationarity reduces to ``(k-3) rho^2 - 2k rho + (k-3) = 0`` with
    ``k = (S+1)c``; the admissible root is written in the form that stays
    finite at ``k = 3``, where it is exactly zero.
    """
    k = (S + 1) * c
    if k < 3:
        raise ValidationError(f"(S+1)c must be >= 3, got {k}")
    return (k - 3.0) / (k + math.sqrt(3.0 * (2.0 * k - 3.0)))


def clusters_from_design_effect(n_individual: float, N: int, S: int, c: int, params: CorrelationParams) -> tuple[int, float]:
    """Design-effect route: total individuals ``ceil(n_individual * DE)`` and the implied cluster count."""
    de = design_effect(S, c, N, params)
    total = math.ceil(n_individual * de - 1e-9)
    return total, total / N


# -- power -------------------------------------------------------------------


def resolve_dof(dof_rule: str | int, I: int, T: int) -> int:
    if isinstance(dof_rule, (int, np.integer)):
        dof = int(dof_rule)
    else:
        rule = str(dof_rule).lower().replace(" ", "")
        if rule in ("i-(t+1)", "i-t-1"):
            dof = I - (T + 1)
        elif rule == "i-2":
            dof = I - 2
        else:
            try:
                dof = int(rule)
            except ValueError:
                raise ValidationError(f"unknown degrees-of-freedom rule {dof_rule!r}") from None
    if dof < 1:
        raise InsufficientClustersError(
            f"degrees of freedom {dof} < 1 under rule {dof_rule!r} with I={I}, T={T}"
            + (f" (needs at least T+2 = {T + 2} clusters)" if str(dof_rule).lower().startswith("i-(") else "")
        )
    return dof


def power(variance: float, query: PowerQuery, I: int, T: int) -> float:
    """Approximate power of the two-sided Wald test.

    The rejection probability is evaluated in both tails, so ``delta = 0``
    returns exactly ``alpha``; the far tail is negligible at usual powers.
    """
    if not variance > 0.0:
        raise ValidationError(f"variance must be positive, got {variance}")
    shift = abs(query.delta) / math.sqrt(variance)
    if query.test == "z":
        crit = stats.norm.ppf(1.0 - query.alpha / 2.0)
        return float(stats.norm.cdf(shift - crit) + stats.norm.cdf(-shift - crit))
    dof = resolve_dof(query.dof_rule, I, T)
    crit = stats.t.ppf(1.0 - query.alpha / 2.0, dof)
    return float(stats.t.cdf(shift - crit, dof) + stats.t.cdf(-shift - crit, dof))


def required_cohort_size(layout: DesignLayout, query: PowerQuery, params: CorrelationParams, n_max: int = 100_000) -> SampleSizeResult:
    """Smallest cohort size ``N`` reaching ``query.target_power``.

    Variance is bounded below by its large-``N`` limit, so when the limit power
    falls short of the target the search is skipped and the result is flagged
    unattainable with that limit power.
    """
    I, T = layout.n_clusters, layout.n_periods
    limit_power = None
    if params.tau > 0.0:
        limit_power = power(variance_limit(layout, params, query.phi), query, I, T)
        if limit_power < query.target_power:
            return SampleSizeResult(False, limit_power, None, limit_power)
    pw = float("nan")
    for N in range(1, n_max + 1):
        if not check_validity(params, N).valid:
            if N == 1:
                continue
            raise RegionError(f"tau={params.tau:g} is not valid for cohort size N={N}", bound="tau_lower")
        pw = power(variance_delta(layout, N, params, query.phi), query, I, T)
        if pw >= query.target_power:
            return SampleSizeResult(True, pw, N, limit_power)
    return SampleSizeResult(False, pw, None, limit_power)


def required_clusters(N: int, query: PowerQuery, params: CorrelationParams, T: int, I_max: int = 10_000) -> ClusterCountResult:
    """Smallest standard-design cluster count (a multiple of ``T-1``) reaching the target power."""
    S = T - 1
    searched = []
    for I in range(S, I_max + 1, S):
        try:
            pw = power(variance_delta(standard_layout(I, T), N, params, query.phi), query, I, T)
        except InsufficientClustersError:
            continue
        searched.append((I, pw))
        if pw >= query.target_power:
            return ClusterCountResult(True, I, pw, tuple(searched))
    return ClusterCountResult(False, None, None, tuple(searched))


# -- other structures ----------------------------------------------------------


def _be_eigenvalues(T: int, N: int, be: BlockExchangeableParams) -> tuple[float, float]:
    lam3 = 1.0 + (N - 1) * (be.tau - be.alpha1) - be.alpha2
    lam4 = 1.0 + (N - 1) * be.tau + (T - 1) * (N - 1) * be.alpha1 + (T - 1) * be.alpha2
    return lam3, lam4


def variance_block_exchangeable(I: int, T: int, N: int, be: BlockExchangeableParams, phi: float = 1.0) -> float:
    """Standard-design variance under constant between-period and within-individual correlations."""
    if T < 3:
        raise ValidationError(f"T must be >= 3, got {T}")
    lam3, lam4 = _be_eigenvalues(T, N, be)
    if not (lam3 > 0.0 and lam4 > 0.0):
        raise RegionError(
            f"block-exchangeable eigenvalues must be positive (lambda3={lam3:g}, lambda4={lam4:g})",
            bound="eigenvalue",
        )
    return 12.0 * (phi / N) * (T - 1) * lam3 * lam4 / (I * (T - 2) * ((T - 1) * lam3 + (T + 1) * lam4))


def _ratio_scale(T: int, rho: float) -> float:
    return (1.0 - rho**2) / (2.0 * (T * (1.0 - rho) ** 2 + 6.0 * rho))


def relative_variance_h(T: int, N: int, tau: float, rho: float, h: float | np.ndarray) -> float | np.ndarray:
    """Proportional-decay over block-exchangeable variance as a function of
    ``h = (N-1) alpha1 + alpha2``; the cluster count and ``phi`` cancel."""
    if not -1.0 <= rho <= 1.0:
        raise RegionError(f"rho={rho:g} outside [-1, 1]", bound="rho")
    lam = 1.0 + (N - 1) * tau
    h = np.asarray(h, dtype=float)
    out = _ratio_scale(T, rho) * ((T - 1) * lam / (lam + (T - 1) * h) + (T + 1) * lam / (lam - h))
    return float(out) if out.ndim == 0 else out


def relative_variance(I: int, T: int, N: int, pd: CorrelationParams, be: BlockExchangeableParams, phi: float = 1.0) -> float:
    """Variance ratio proportional decay / block exchangeable for a standard design.

    ``I`` and ``phi`` cancel; they are accepted so the call mirrors the two
    variance functions it compares.
    """
    if be.tau != pd.tau:
        raise ValidationError("both structures must share the within-period correlation tau")
    lam3, lam4 = _be_eigenvalues(T, N, be)
    if not (lam3 > 0.0 and lam4 > 0.0):
        raise RegionError("block-exchangeable eigenvalues must be positive", bound="eigenvalue")
    return relative_variance_h(T, N, pd.tau, pd.rho, (N - 1) * be.alpha1 + be.alpha2)


def equal_variance_line(T: int, N: int, tau: float, rho: float, h_range: tuple[float, float] | None = None) -> EqualVarianceLine:
    """Solve ``relative_variance_h(h) == 1`` for ``h``.

    Clearing denominators gives
    ``(T-1) h^2 + lam (k T (T-1) - (T-2)) h + lam^2 (2 k T - 1) = 0`` where
    ``lam = 1 + (N-1) tau`` and ``k`` is the ``rho``-only prefactor.  Roots are
    kept when they lie strictly inside ``h_range``, which defaults to the
    positive-definite range ``(-lam/(T-1), lam)``.
    """
    lam = 1.0 + (N - 1) * tau
    if h_range is None:
        h_range = (-lam / (T - 1), lam)
    k = _ratio_scale(T, rho)
    coeffs = [T - 1.0, lam * (k * T * (T - 1) - (T - 2)), lam**2 * (2.0 * k * T - 1.0)]
    roots = np.roots(coeffs)
    lo, hi = h_range
    keep = sorted(
        float(r.real) for r in roots
        if abs(r.imag) < 1e-12 and lo < r.real < hi
    )
    return EqualVarianceLine(tuple(keep), (float(lo), float(hi)))


def _cluster_design(x: np.ndarray, N: int) -> np.ndarray:
    T = x.shape[0]
    return np.kron(np.ones((N, 1)), np.column_stack([np.eye(T), x]))


def variance_exponential_decay(layout: DesignLayout, N: int, params: CorrelationParams, phi: float = 1.0) -> float:
    """Intervention-effect variance under exponential decay by dense GLS.

    No closed form exists, so ``phi (sum Z' L^{-1} Z)^{-1}`` is formed from a
    Cholesky factorization of the cluster correlation matrix.
    """
    if N < 1:
        raise ValidationError(f"cohort size must be >= 1, got {N}")
    T = layout.n_periods
    L = build_exponential_decay(params, N, T).dense
    factor = linalg.cho_factor(L, lower=True)
    info = np.zeros((T + 1, T + 1))
    cache = {}
    for x in layout.X:
        key = x.tobytes()
        if key not in cache:
            Z = _cluster_design(x.astype(float), N)
            cache[key] = Z.T @ linalg.cho_solve(factor, Z)
        info += cache[key]
    try:
        cov = phi * linalg.inv(info)
    except linalg.LinAlgError as exc:
        raise NonIdentifiableDesignError("layout does not identify the intervention effect") from exc
    if not cov[-1, -1] > 0.0 or np.linalg.cond(info) > 1e13:
        raise NonIdentifiableDesignError("layout does not identify the intervention effect")
    return float(cov[-1, -1])


# -- grids -------------------------------------------------------------------


def sensitivity_grid(
    layout: DesignLayout,
    N: int,
    query: PowerQuery,
    taus: Iterable[float],
    rhos: Iterable[float],
) -> list[tuple[float, float, float]]:
    """Power over a rectangular ``(tau, d = 1 - rho)`` grid, row-major in ``tau``."""
    I, T = layout.n_clusters, layout.n_periods
    rows = []
    for tau in taus:
        for rho in rhos:
            params = CorrelationParams(float(tau), float(rho))
            pw = power(variance_delta(layout, N, params, query.phi), query, I, T)
            rows.append((float(tau), 1.0 - float(rho), pw))
    return rows


def write_grid_csv(path_or_file, header: Sequence[str], rows: Iterable[Sequence[float]], digits: int = 6) -> None:
    """Write grid rows with ``digits`` significant digits."""

    def _emit(fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.{digits}g}" for v in row])

    if hasattr(path_or_file, "write"):
        _emit(path_or_file)
    else:
        with open(path_or_file, "w", newline="") as fh:
            _emit(fh)


def attrition_inflate(total_n: float, gamma: float) -> int:
    """Inflate a total sample size by ``1 / (1 - gamma)`` for anticipated attrition."""
    if not 0.0 <= gamma < 1.0:
        raise ValidationError(f"attrition rate must lie in [0, 1), got {gamma}")
    # tolerance absorbs representation error, e.g. 100 / (1 - 0.2)
    return math.ceil(total_n / (1.0 - gamma) - 1e-9)
