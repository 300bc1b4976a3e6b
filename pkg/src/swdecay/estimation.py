"""Quasi-least squares fitting of the marginal stepped wedge model.

The mean model is ``E[y_ijt] = beta_t + X_it * delta`` with identity link and
constant variance function, and the working correlation is proportional
decay, ``R_i = G_i(tau) kron F(rho)``.  Correlations are estimated by
two-stage QLS, optionally with the leverage-based matrix adjustment of the
residual cross-products (MAQLS).

Every cluster shares one design row ``B_i = (I_T, X_i)`` across its
individuals, so ``Z_i = 1_N kron B_i`` and the cluster leverage factorizes as
``H_i = P_N kron h_i`` with ``P_N = J_N / N`` and the ``T x T`` block
``h_i = w_i B_i Omega^{-1} B_i' F^{-1}``, ``w_i = 1' G_i^{-1} 1``.  All
computations below work on those ``T x T`` blocks and the per-cluster
sufficient statistics (cluster-period means and ``Y_i' Y_i``); the dense
``NT x NT`` forms are only materialized by :func:`cluster_leverage`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_cluster_stats, check_adjustment, check_flavor, coerce_dataset
from .correlation import ar1, ar1_bases, ar1_inverse
from .data import ClusterStats
from .design import resolve_dof
from .exceptions import DegenerateDataError, SingularMatrixError

__all__ = [
    "FLAVORS",
    "FitResult",
    "WaldTest",
    "LeverageSet",
    "Stage1Solution",
    "QuasiLeastSquares",
    "update_theta",
    "correlation_traces",
    "solve_stage1",
    "update_alpha_stage1",
    "stage1_objective",
    "stage1_gradient",
    "stage2_transform",
    "cluster_leverage",
    "dispersion_update",
    "covariance",
    "fit",
    "wald_test",
]

FLAVORS = ("mb", "bc0", "bc1", "bc2", "bc3")
# stage outputs are kept this far inside the validity region
CLAMP_MARGIN = 1e-6


@dataclass
class Stage1Solution:
    alpha0: float
    alpha1: float
    clamped: bool = False
    converged: bool = True
    iterations: int = 0


@dataclass
class LeverageSet:
    """Dense per-cluster leverage matrices and their ``T x T`` period blocks."""

    H: list
    blocks: np.ndarray

    def total_trace(self) -> float:
        return float(sum(np.trace(h) for h in self.H))


@dataclass
class WaldTest:
    statistic: float
    distribution: str
    dof: int | None
    p_value: float
    reject: bool
    flavor: str
    alpha: float


@dataclass
class FitResult:
    """Estimates, correlation parameters and covariance matrices from :func:`fit`.

    ``theta`` is ``(beta_1, ..., beta_T, delta)``.  ``covariances`` maps each
    flavor in :data:`FLAVORS` to a ``(T+1, T+1)`` matrix, or to ``None`` when
    the flavor could not be formed (the reason is kept in ``unavailable``).
    """

    theta: np.ndarray
    tau: float
    rho: float
    alpha0: float
    alpha1: float
    phi: float
    covariances: dict
    converged: bool
    iterations: int
    adjustment: str
    n_clusters: int
    n_periods: int
    cluster_sizes: np.ndarray
    clamped: bool = False
    unavailable: dict = field(default_factory=dict)
    theta_stage1: np.ndarray | None = None

    @property
    def delta(self) -> float:
        return float(self.theta[-1])

    @property
    def beta(self) -> np.ndarray:
        return self.theta[:-1]

    def variance(self, flavor: str = "bc1") -> float:
        cov = self.covariances.get(check_flavor(flavor))
        if cov is None:
            raise SingularMatrixError(f"{flavor} covariance unavailable: {self.unavailable.get(flavor)}")
        return float(cov[-1, -1])

    def se(self, flavor: str = "bc1") -> float:
        return math.sqrt(self.variance(flavor))

    def to_dict(self) -> dict:
        out = {
            "theta": self.theta.tolist(),
            "delta": self.delta,
            "tau": self.tau,
            "rho": self.rho,
            "alpha0": self.alpha0,
            "alpha1": self.alpha1,
            "phi": self.phi,
            "converged": bool(self.converged),
            "clamped": bool(self.clamped),
            "iterations": int(self.iterations),
            "adjustment": self.adjustment,
            "n_clusters": self.n_clusters,
            "n_periods": self.n_periods,
        }
        for flavor in FLAVORS:
            cov = self.covariances.get(flavor)
            out[f"cov_{flavor}"] = None if cov is None else cov.tolist()
        if self.unavailable:
            out["unavailable"] = dict(self.unavailable)
        return out


# -- building blocks -----------------------------------------------------------


def _design_blocks(X: np.ndarray) -> np.ndarray:
    """``B_i = (I_T, X_i)`` stacked to shape ``(I, T, T+1)``."""
    I, T = X.shape
    eye = np.broadcast_to(np.eye(T), (I, T, T))
    return np.concatenate([eye, X[:, :, None]], axis=2)


def _cluster_weights(sizes: np.ndarray, alpha0: float) -> np.ndarray:
    """``1' G_i^{-1}(alpha0) 1 = N_i / (1 + (N_i - 1) alpha0)``."""
    return sizes / (1.0 + (sizes - 1) * alpha0)


class _Working:
    """Information matrix pieces at one working correlation."""

    def __init__(self, st: ClusterStats, alpha0: float, alpha1: float):
        self.alpha1 = alpha1
        self.Finv = ar1_inverse(st.n_periods, alpha1)
        self.B = _design_blocks(st.X)
        self.w = _cluster_weights(st.sizes, alpha0)
        BtF = np.einsum("itp,ts->ips", self.B, self.Finv)
        self.BtF = BtF
        self.K = self.w[:, None, None] * np.einsum("ips,isq->ipq", BtF, self.B)
        self.omega = self.K.sum(axis=0)
        try:
            self.omega_inv = linalg.inv(self.omega)
        except linalg.LinAlgError as exc:
            raise SingularMatrixError("normal equations are singular (design not of full rank T+1)") from exc
        if np.linalg.cond(self.omega) > 1e12:
            raise SingularMatrixError("normal equations are numerically singular (design not of full rank T+1)")

    def solve(self, ybar: np.ndarray) -> np.ndarray:
        rhs = np.einsum("i,ips,is->p", self.w, self.BtF, ybar)
        return self.omega_inv @ rhs

    def leverage_blocks(self) -> np.ndarray:
        """``h_i = w_i B_i Omega^{-1} B_i' F^{-1}`` with shape ``(I, T, T)``."""
        return self.w[:, None, None] * np.einsum("itp,pq,iqs->its", self.B, self.omega_inv, self.BtF)

    def mean_equation(self, ybar: np.ndarray, theta: np.ndarray) -> np.ndarray:
        ebar = ybar - np.einsum("itp,p->it", self.B, theta)
        return np.einsum("i,ips,is->p", self.w, self.BtF, ebar)


def _residual_means(st: ClusterStats, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = theta[None, :-1] + st.X * theta[-1]
    return st.ybar - mu, mu


def _residual_crossproducts(st: ClusterStats, mu: np.ndarray) -> np.ndarray:
    """``E_i' E_i`` for ``E_i = Y_i - 1 mu_i'`` from the sufficient statistics."""
    n = st.sizes[:, None, None].astype(float)
    ymu = np.einsum("it,is->its", st.ybar, mu)
    return st.yty - n * (ymu + ymu.transpose(0, 2, 1)) + n * np.einsum("it,is->its", mu, mu)


def _basis_traces(M: np.ndarray) -> np.ndarray:
    """``tr(M_i C)`` for ``C`` in ``(I, C2, C1)``; shape ``(I, 3)``."""
    d = np.trace(M, axis1=1, axis2=2)
    ends = M[:, 0, 0] + M[:, -1, -1]
    off = np.trace(M, offset=1, axis1=1, axis2=2) + np.trace(M, offset=-1, axis1=1, axis2=2)
    return np.column_stack([d, d - ends, off])


def _adjusted_shift(ebar: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    """``((I - h_i)^{-1} - I) ebar_i``: the row shift turning ``E_i`` into ``(I - H_i)^{-1}`` applied to it."""
    T = ebar.shape[1]
    eye = np.eye(T)
    try:
        adj = np.linalg.solve(eye - blocks, ebar[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("I - H_i is singular for some cluster") from exc
    return adj - ebar


@dataclass
class _Traces:
    """Per-cluster traces against the AR(1) bases of ``M_i`` (``I`` part) and of
    ``(J kron .)`` applied to ``M_i`` (``J`` part), plus ``sum tr(r_i' u_i)``."""

    sizes: np.ndarray
    pI: np.ndarray   # (I, 3)
    pJ: np.ndarray   # (I, 3)
    quad: float      # sum_i r_i' (I - H_i)^{-1} r_i   (r_i' r_i without adjustment)

    def by_size(self):
        uniq, inv = np.unique(self.sizes, return_inverse=True)
        pI = np.zeros((uniq.size, 3))
        pJ = np.zeros((uniq.size, 3))
        np.add.at(pI, inv, self.pI)
        np.add.at(pJ, inv, self.pJ)
        return uniq.astype(float), pI, pJ


def correlation_traces(data, theta: np.ndarray, blocks: np.ndarray | None = None) -> _Traces:
    """Sufficient traces of the residual cross-product matrices ``M_i``.

    ``blocks`` holds the ``T x T`` leverage blocks ``h_i``.  ``None`` gives the
    plain QLS cross-products ``r_i r_i'``; otherwise ``M_i`` is
    ``(I - H_i)^{-1} r_i r_i'`` (the adjusted estimator up to the factor
    ``1/phi``, which does not move the roots of the stage-1 equations).
    """
    st = as_cluster_stats(data)
    ebar, mu = _residual_means(st, theta)
    S = _residual_crossproducts(st, mu)
    n = st.sizes.astype(float)
    tS = _basis_traces(S)
    if blocks is None:
        shift = np.zeros_like(ebar)
    else:
        shift = _adjusted_shift(ebar, blocks)
    cross = _basis_traces(np.einsum("it,is->its", ebar, shift))
    total = _basis_traces(np.einsum("it,is->its", ebar, ebar + shift))
    pI = tS + n[:, None] * cross
    pJ = (n**2)[:, None] * total
    quad = float(tS[:, 0].sum() + (n * cross[:, 0]).sum())
    return _Traces(st.sizes.copy(), pI, pJ, quad)


def _ar1_quad(p: np.ndarray, a1: float) -> np.ndarray:
    return (p[..., 0] + a1 * a1 * p[..., 1] - a1 * p[..., 2]) / (1.0 - a1 * a1)


def _ginv_coefs(n: np.ndarray, a0: float) -> tuple[np.ndarray, np.ndarray]:
    """``G^{-1}(a0) = a I + b J`` coefficients per cluster size."""
    a = np.full_like(n, 1.0 / (1.0 - a0))
    b = -a0 / ((1.0 - a0) * (1.0 + (n - 1.0) * a0))
    return a, b


def stage1_objective(traces: _Traces, alpha0: float, alpha1: float) -> float:
    """``sum_i tr{R_i^{-1}(alpha0, alpha1) M_i}``."""
    a, b = _ginv_coefs(traces.sizes.astype(float), alpha0)
    return float((a * _ar1_quad(traces.pI, alpha1) + b * _ar1_quad(traces.pJ, alpha1)).sum())


def stage1_gradient(traces: _Traces, alpha0: float, alpha1: float) -> tuple[float, float]:
    """Partial derivatives of :func:`stage1_objective` in ``alpha0`` and ``alpha1``."""
    n = traces.sizes.astype(float)
    k = n - 1.0
    a, b = _ginv_coefs(n, alpha0)
    da = 1.0 / (1.0 - alpha0) ** 2
    db = -(1.0 / (1.0 - alpha0) ** 2 + k / (1.0 + k * alpha0) ** 2) / n
    g0 = float((da * _ar1_quad(traces.pI, alpha1) + db * _ar1_quad(traces.pJ, alpha1)).sum())

    def dquad(p):
        u = 1.0 - alpha1 * alpha1
        return (2.0 * alpha1 * (p[..., 0] + p[..., 1]) - p[..., 2] * (1.0 + alpha1 * alpha1)) / (u * u)

    g1 = float((a * dquad(traces.pI) + b * dquad(traces.pJ)).sum())
    return g0, g1


def _solve_alpha1(A: float, B: float, C: float) -> tuple[float, bool]:
    """Root in ``(-1, 1)`` of ``C a^2 - 2(A+B) a + C``; the pair of roots has product 1."""
    s = A + B
    hi = 1.0 - CLAMP_MARGIN
    if C == 0.0:
        return 0.0, False
    disc = s * s - C * C
    if s <= 0.0 or disc <= 0.0:
        # no interior stationary point: objective monotone in the direction of C
        return math.copysign(hi, C), True
    root = C / (s + math.sqrt(disc))
    if abs(root) > hi:
        return math.copysign(hi, root), True
    return root, False


def _solve_alpha0(n: np.ndarray, PI: np.ndarray, PJ: np.ndarray, lo: float) -> tuple[float, bool]:
    """Root of the ``alpha0`` stationarity equation given AR(1)-weighted traces per cluster size."""
    hi = 1.0 - CLAMP_MARGIN
    lo_c = lo + CLAMP_MARGIN if np.isfinite(lo) else -1e6
    k = n - 1.0
    informative = k > 0
    if n.size == 1 or np.all(n == n[0]):
        # equal sizes: (1-a)^2/(1+ka)^2 = (N sum PI / sum PJ - 1)/k
        nn, kk = n[0], k[0]
        sPI, sPJ = PI.sum(), PJ.sum()
        if kk <= 0:
            raise DegenerateDataError("tau is undefined when every cluster has a single individual")
        if sPJ <= 0.0:
            return hi, True
        q = (nn * sPI / sPJ - 1.0) / kk
        if q <= 0.0:
            return hi, True
        r = math.sqrt(q)
        root = (1.0 - r) / (1.0 + kk * r)
        clamped = False
        if root > hi:
            root, clamped = hi, True
        if root < lo_c:
            root, clamped = lo_c, True
        return root, clamped
    if not informative.any():
        raise DegenerateDataError("tau is undefined when every cluster has a single individual")

    def g(a0):
        return float((PI - (PJ / n) * (1.0 + k * (1.0 - a0) ** 2 / (1.0 + k * a0) ** 2)).sum())

    g_lo, g_hi = g(lo_c), g(hi)
    if g_lo > 0.0 and g_hi > 0.0:
        return lo_c, True
    if g_lo < 0.0 and g_hi < 0.0:
        return hi, True
    return optimize.brentq(g, lo_c, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps), False


def solve_stage1(traces: _Traces, start: tuple[float, float] = (0.01, 0.01), tol: float = 1e-13, max_iter: int = 500) -> Stage1Solution:
    """Solve both stage-1 stationarity equations by alternating exact 1-D roots.

    For fixed ``alpha0`` the ``alpha1`` equation is a quadratic; for fixed
    ``alpha1`` the ``alpha0`` equation has a closed-form root when cluster
    sizes are equal and is otherwise bracketed and solved with Brent's method.
    Roots that would leave the region are clamped ``CLAMP_MARGIN`` inside it.
    """
    n, pI, pJ = traces.by_size()
    nmax = n.max()
    lo = -1.0 / (nmax - 1.0) if nmax > 1 else -np.inf
    a0, a1 = start
    clamped = False
    for it in range(1, max_iter + 1):
        a, b = _ginv_coefs(n, a0)
        A, B_, C = (a[:, None] * pI + b[:, None] * pJ).sum(axis=0)
        new_a1, c1 = _solve_alpha1(A, B_, C)
        new_a0, c0 = _solve_alpha0(n, _ar1_quad(pI, new_a1), _ar1_quad(pJ, new_a1), lo)
        change = max(abs(new_a0 - a0), abs(new_a1 - a1))
        a0, a1 = new_a0, new_a1
        clamped = c0 or c1
        if change < tol:
            return Stage1Solution(a0, a1, clamped, True, it)
    return Stage1Solution(a0, a1, clamped, False, max_iter)


def update_theta(data, alpha: tuple[float, float]) -> np.ndarray:
    """GLS solution of the mean estimating equations at working correlation ``alpha``.

    With identity link and unit variance function the equations are linear:
    ``theta = (sum Z_i' R_i^{-1} Z_i)^{-1} sum Z_i' R_i^{-1} y_i``.
    """
    st = as_cluster_stats(data)
    return _Working(st, *alpha).solve(st.ybar)


def update_alpha_stage1(data, theta: np.ndarray, adjustment: str = "maqls", alpha: tuple[float, float] = (0.01, 0.01)) -> Stage1Solution:
    """First-stage correlation estimates given ``theta``.

    For ``maqls`` the leverage is evaluated at the working correlation
    ``alpha``, which also seeds the root search.
    """
    st = as_cluster_stats(data)
    blocks = None
    if check_adjustment(adjustment) == "maqls":
        blocks = _Working(st, *alpha).leverage_blocks()
    return solve_stage1(correlation_traces(st, theta, blocks), start=alpha)


def stage2_transform(alpha0: float, alpha1: float, sizes) -> tuple[float, float]:
    """Map first-stage estimates to consistent estimates of ``(tau, rho)``."""
    n = np.asarray(sizes, dtype=float)
    n = n[n > 1]
    if n.size == 0:
        raise DegenerateDataError("tau is undefined when every cluster has a single individual")
    denom0 = (1.0 + (n - 1.0) * alpha0) ** 2
    num = (n * (n - 1.0) * alpha0 * (2.0 + (n - 2.0) * alpha0) / denom0).sum()
    den = (n * (n - 1.0) * (1.0 + (n - 1.0) * alpha0**2) / denom0).sum()
    return float(num / den), float(2.0 * alpha1 / (1.0 + alpha1**2))


def _clamp_region(tau: float, rho: float, nmax: int) -> tuple[float, float, bool]:
    lo = -1.0 / (nmax - 1) if nmax > 1 else -np.inf
    t = min(max(tau, lo + CLAMP_MARGIN), 1.0 - CLAMP_MARGIN)
    r = min(max(rho, -1.0 + CLAMP_MARGIN), 1.0 - CLAMP_MARGIN)
    return t, r, (t != tau or r != rho)


def cluster_leverage(data, theta: np.ndarray, alpha: tuple[float, float]) -> LeverageSet:
    """Cluster leverages ``H_i = D_i (sum_j D_j' V_j^{-1} D_j)^{-1} D_i' V_i^{-1}``.

    The inverse working covariance is used in both places.  With the
    identity link the leverage does not depend on ``theta``; the argument is
    kept so the call reads like the other update steps.
    """
    st = as_cluster_stats(data)
    blocks = _Working(st, *alpha).leverage_blocks()
    H = [np.kron(np.full((int(n), int(n)), 1.0 / n), h) for n, h in zip(st.sizes, blocks)]
    return LeverageSet(H, blocks)


def dispersion_update(phi: float, trace_sum: float, n_obs: int, n_params: int) -> float:
    """``phi * sum_i tr(R~_i) / (n_obs - n_params)``."""
    new = phi * trace_sum / (n_obs - n_params)
    if not new > 0.0 or not np.isfinite(new):
        raise DegenerateDataError(f"dispersion update is not positive ({new:g})")
    return new


def _inv_sqrt_sym(M: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(M)
    if np.any(vals <= 1e-12):
        raise SingularMatrixError("I - H_i is not positive definite")
    return np.einsum("itk,ik,isk->its", vecs, 1.0 / np.sqrt(vals), vecs)


def _kc_root(blocks: np.ndarray, rho: float, symmetric_part: bool = False) -> np.ndarray:
    """``(I - h_i)^{-1/2}`` for every cluster.

    ``h_i F`` is symmetric, so with ``F = L L'`` the matrix ``L^{-1} h_i L`` is
    symmetric and the principal root is ``L (I - L^{-1} h_i L)^{-1/2} L^{-1}``.
    With ``symmetric_part=True`` the root of ``I - (h_i + h_i')/2`` is used
    instead.
    """
    eye = np.eye(blocks.shape[1])
    if symmetric_part:
        return _inv_sqrt_sym(eye - 0.5 * (blocks + blocks.transpose(0, 2, 1)))
    L = np.linalg.cholesky(ar1(blocks.shape[1], rho))
    Linv = linalg.solve_triangular(L, eye, lower=True)
    S = Linv @ blocks @ L
    S = 0.5 * (S + S.transpose(0, 2, 1))
    return L @ _inv_sqrt_sym(eye - S) @ Linv


def _covariances(st: ClusterStats, work: _Working, theta: np.ndarray, phi: float, zeta: float, flavors=FLAVORS,
                 bc1_symmetric: bool = False):
    T = st.n_periods
    eye = np.eye(T)
    ebar, _ = _residual_means(st, theta)
    blocks = work.leverage_blocks()
    oi = work.omega_inv
    out, unavailable = {}, {}

    def sandwich(adj_ebar, scale=None):
        g = work.w[:, None] * np.einsum("ips,is->ip", work.BtF, adj_ebar)
        if scale is not None:
            g = g * scale
        meat = g.T @ g
        cov = oi @ meat @ oi
        return 0.5 * (cov + cov.T)

    for flavor in flavors:
        try:
            if flavor == "mb":
                cov = phi * oi
                out[flavor] = 0.5 * (cov + cov.T)
            elif flavor == "bc0":
                out[flavor] = sandwich(ebar)
            elif flavor == "bc1":
                root = _kc_root(blocks, work.alpha1, symmetric_part=bc1_symmetric)
                out[flavor] = sandwich(np.einsum("its,is->it", root, ebar))
            elif flavor == "bc2":
                if np.any(np.linalg.cond(eye - blocks) > 1e12):
                    raise SingularMatrixError("I - H_i is singular for some cluster")
                out[flavor] = sandwich(np.linalg.solve(eye - blocks, ebar[:, :, None])[:, :, 0])
            elif flavor == "bc3":
                lev = np.einsum("ipq,qp->ip", work.K, oi)  # diag(K_i Omega^{-1})
                scale = 1.0 / np.sqrt(1.0 - np.minimum(zeta, lev))
                out[flavor] = sandwich(ebar, scale)
        except (SingularMatrixError, np.linalg.LinAlgError) as exc:
            out[flavor] = None
            unavailable[flavor] = str(exc)
    return out, unavailable


def covariance(data, theta: np.ndarray, tau: float, rho: float, phi: float, flavor: str = "bc1", zeta: float = 0.75,
               bc1_symmetric: bool = False) -> np.ndarray:
    """One covariance flavor for ``theta`` at working correlation ``(tau, rho)``.

    ``mb`` is ``phi * Omega^{-1}``; the sandwich flavors are
    ``Omega_1^{-1} Omega_0 Omega_1^{-1}`` with the bias corrections of
    Kauermann-Carroll (``bc1``), Mancl-DeRouen (``bc2``) and Fay-Graubard
    (``bc3``, bound ``zeta``).  ``bc1`` applies the principal inverse square
    root of ``I - H_i``; ``bc1_symmetric=True`` uses the symmetric part of
    ``I - H_i`` instead, which can break the ordering ``bc0 <= bc1 <= bc2``.
    """
    flavor = check_flavor(flavor)
    st = as_cluster_stats(data)
    covs, unavailable = _covariances(st, _Working(st, tau, rho), np.asarray(theta, float), phi, zeta, (flavor,),
                                     bc1_symmetric)
    if covs[flavor] is None:
        raise SingularMatrixError(f"{flavor} unavailable: {unavailable[flavor]}")
    return covs[flavor]


def _check_not_degenerate(st: ClusterStats, theta: np.ndarray) -> None:
    _, mu = _residual_means(st, theta)
    rss = float(np.trace(_residual_crossproducts(st, mu), axis1=1, axis2=2).sum())
    grand = st.ybar.mean()
    n = st.sizes.astype(float)
    tss = float((np.trace(st.yty, axis1=1, axis2=2) - 2 * grand * n * st.ybar.sum(axis=1)).sum()
                + grand**2 * st.n_obs)
    if rss <= 1e-20 * max(tss, 1e-300):
        raise DegenerateDataError("outcomes have (numerically) zero residual variation about the fitted mean")


def fit(data, adjustment: str = "maqls", tol: float = 1e-8, max_iter: int = 200,
        init: tuple[float, float] = (0.01, 0.01), zeta: float = 0.75, bc1_symmetric: bool = False) -> FitResult:
    """Fit the marginal model by QLS or MAQLS.

    Stage 1 alternates the GLS update of ``theta``, the first-stage
    correlation equations and the dispersion update until the largest change
    in ``(theta, alpha0, alpha1, phi)`` falls below ``tol``.  Stage 2 maps
    ``(alpha0, alpha1)`` to ``(tau, rho)``; ``theta`` is then re-solved at
    ``(tau, rho)`` and all covariance flavors are evaluated there.
    ``bc1_symmetric`` selects the symmetric-part variant of ``bc1``.
    A fit that hits ``max_iter`` is returned with ``converged=False``.
    """
    adjustment = check_adjustment(adjustment)
    st = as_cluster_stats(data)
    if st.n_periods < 2:
        raise DegenerateDataError("at least two periods are required")
    n_obs, p = st.n_obs, st.n_periods + 1
    if n_obs <= p:
        raise DegenerateDataError(f"{n_obs} observations cannot support {p} mean parameters")
    nmax = int(st.sizes.max())
    if nmax < 2:
        raise DegenerateDataError("tau is undefined when every cluster has a single individual")

    theta = _Working(st, 0.0, 0.0).solve(st.ybar)
    _check_not_degenerate(st, theta)
    a0, a1 = init
    _, mu = _residual_means(st, theta)
    phi = float(np.trace(_residual_crossproducts(st, mu), axis1=1, axis2=2).sum()) / (n_obs - p)

    converged, clamped = False, False
    it = 0
    for it in range(1, max_iter + 1):
        work = _Working(st, a0, a1)
        new_theta = work.solve(st.ybar)
        blocks = work.leverage_blocks() if adjustment == "maqls" else None
        traces = correlation_traces(st, new_theta, blocks)
        sol = solve_stage1(traces, start=(a0, a1))
        new_phi = dispersion_update(phi, traces.quad / phi, n_obs, p)
        change = max(
            float(np.max(np.abs(new_theta - theta))),
            abs(sol.alpha0 - a0), abs(sol.alpha1 - a1), abs(new_phi - phi),
        )
        theta, a0, a1, phi = new_theta, sol.alpha0, sol.alpha1, new_phi
        clamped = sol.clamped
        if change < tol:
            converged = True
            break

    theta_stage1 = theta
    tau, rho = stage2_transform(a0, a1, st.sizes)
    tau, rho, c2 = _clamp_region(tau, rho, nmax)
    clamped = clamped or c2

    work = _Working(st, tau, rho)
    theta = work.solve(st.ybar)
    blocks = work.leverage_blocks() if adjustment == "maqls" else None
    final_traces = correlation_traces(st, theta, blocks)
    phi = dispersion_update(phi, final_traces.quad / phi, n_obs, p)
    covs, unavailable = _covariances(st, work, theta, phi, zeta, bc1_symmetric=bc1_symmetric)
    return FitResult(
        theta=theta, tau=tau, rho=rho, alpha0=a0, alpha1=a1, phi=phi,
        covariances=covs, converged=converged, iterations=it, adjustment=adjustment,
        n_clusters=st.n_clusters, n_periods=st.n_periods, cluster_sizes=st.sizes.copy(),
        clamped=clamped, unavailable=unavailable, theta_stage1=theta_stage1,
    )


def wald_test(result: FitResult, flavor: str = "bc1", test: str = "t", dof_rule: str | int = "i-2", alpha: float = 0.05) -> WaldTest:
    """Two-sided Wald test of ``delta = 0``."""
    var = result.variance(flavor)
    if not var > 0.0:
        raise SingularMatrixError(f"{flavor} variance of delta is not positive")
    stat = result.delta / math.sqrt(var)
    if test == "z":
        p = 2.0 * stats.norm.sf(abs(stat))
        dof = None
        dist = "normal"
    elif test == "t":
        dof = resolve_dof(dof_rule, result.n_clusters, result.n_periods)
        p = 2.0 * stats.t.sf(abs(stat), dof)
        dist = f"t({dof})"
    else:
        raise ValueError(f"test must be 'z' or 't', got {test!r}")
    p = float(min(1.0, max(0.0, p)))
    return WaldTest(float(stat), dist, dof, p, bool(p < alpha), flavor, alpha)


# -- estimator API -------------------------------------------------------------


class QuasiLeastSquares(RegressorMixin, BaseEstimator):
    """Stepped wedge marginal model with a proportional decay working correlation.

    Parameters
    ----------
    adjustment : {"maqls", "qls"}, default="maqls"
        ``maqls`` multiplies the residual cross-products in the first-stage
        correlation equations by ``(I - H_i)^{-1}``; ``qls`` uses them as is.
    tol : float, default=1e-8
        Convergence threshold on the largest change in ``(theta, alpha, phi)``.
    max_iter : int, default=200
        Maximum number of outer iterations.
    zeta : float, default=0.75
        Bound used by the Fay-Graubard (``bc3``) correction.
    init : tuple of float, default=(0.01, 0.01)
        Starting first-stage correlations.

    Attributes
    ----------
    result_ : FitResult
    theta_ : ndarray of shape (T + 1,)
        Period effects followed by the intervention effect.
    delta_, tau_, rho_, phi_ : float
    covariances_ : dict
        Covariance matrices keyed by ``mb``, ``bc0``, ``bc1``, ``bc2``, ``bc3``.
    converged_ : bool
    n_iter_ : int

    Examples
    --------
    >>> from swdecay import QuasiLeastSquares, SimScenario, generate_dataset
    >>> data = generate_dataset(SimScenario(I=12, N=8, T=5, tau=0.03, rho=0.8, delta=0.3), 0)
    >>> model = QuasiLeastSquares().fit(data)
    >>> round(model.delta_, 2) > 0
    True
    """

    def __init__(self, adjustment="maqls", tol=1e-8, max_iter=200, zeta=0.75, init=(0.01, 0.01)):
        self.adjustment = adjustment
        self.tol = tol
        self.max_iter = max_iter
        self.zeta = zeta
        self.init = init

    def fit(self, X, y=None):
        """Fit on a :class:`~swdecay.data.TrialDataset`, or a design with
        columns ``cluster, individual, period, treatment`` plus outcomes ``y``."""
        dataset = coerce_dataset(X, y)
        res = fit(dataset, adjustment=self.adjustment, tol=self.tol, max_iter=self.max_iter,
                  init=tuple(self.init), zeta=self.zeta)
        self.result_ = res
        self.theta_ = res.theta
        self.delta_ = res.delta
        self.tau_ = res.tau
        self.rho_ = res.rho
        self.phi_ = res.phi
        self.covariances_ = res.covariances
        self.converged_ = res.converged
        self.n_iter_ = res.iterations
        self.n_periods_ = res.n_periods
        return self

    def predict(self, X):
        """Marginal means ``beta_t + treatment * delta`` for each row of ``X``."""
        check_is_fitted(self, "theta_")
        if hasattr(X, "records"):
            design = np.array([r[:4] for r in X.records()], dtype=object)
        elif hasattr(X, "columns"):
            design = X[["cluster", "individual", "period", "treatment"]].to_numpy()
        else:
            design = np.asarray(X, dtype=object)
        period = design[:, 2].astype(int)
        treat = design[:, 3].astype(float)
        if period.min() < 1 or period.max() > self.n_periods_:
            raise ValueError(f"periods must lie in 1..{self.n_periods_}")
        return self.theta_[period - 1] + treat * self.theta_[-1]

    def wald_test(self, flavor="bc1", test="t", dof_rule="i-2", alpha=0.05) -> WaldTest:
        check_is_fitted(self, "result_")
        return wald_test(self.result_, flavor, test, dof_rule, alpha)
