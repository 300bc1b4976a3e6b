"""Monte Carlo evaluation of QLS and MAQLS on simulated cohort stepped wedge trials.

Outcomes are multivariate normal within clusters with mean
``beta_t + X_it * delta`` and covariance ``phi * kron(G(tau), F(rho))``.
Every replicate draws from its own generator seeded by
``(base_seed, crc32(scenario id), replicate index)``, so results do not
depend on the order in which replicates are run.
"""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .correlation import CorrelationParams, ar1, exchangeable, require_valid
from .data import TrialDataset
from .design import PowerQuery, power, resolve_dof, standard_layout, variance_delta
from .estimation import FLAVORS, fit, wald_test
from .exceptions import InsufficientClustersError, SwdecayError, ValidationError

__all__ = [
    "SimScenario",
    "AnalysisOptions",
    "RejectionRate",
    "SimSummary",
    "period_effects",
    "generate_dataset",
    "run_scenario",
    "percent_relative_bias",
    "empirical_rejection_rate",
    "load_scenario",
    "write_summary_csv",
    "write_summary_json",
]

TEST_FAMILIES = (("z", None), ("t", "i-2"), ("t", "i-(t+1)"))


def period_effects(T: int) -> np.ndarray:
    """``beta_1 = 0`` with increments ``beta_{t+1} - beta_t = 0.1 * 0.5**(t-1)``."""
    steps = 0.1 * 0.5 ** np.arange(T - 1)
    return np.concatenate([[0.0], np.cumsum(steps)])


@dataclass(frozen=True)
class SimScenario:
    """One simulation setting on a standard stepped wedge layout.

    ``period_effects`` is ``"default"`` for the geometric increments of
    :func:`period_effects` or an explicit length-``T`` sequence.
    """

    I: int
    N: int
    T: int
    tau: float
    rho: float
    delta: float = 0.0
    phi: float = 1.0
    period_effects: str | tuple = "default"
    reps: int = 2000
    base_seed: int = 20240601
    name: str | None = None

    def __post_init__(self):
        if self.reps < 1:
            raise ValidationError(f"reps must be >= 1, got {self.reps}")
        if self.T < 3 or self.I % (self.T - 1):
            raise ValidationError(f"standard layout needs T >= 3 and I divisible by T-1 (I={self.I}, T={self.T})")
        if self.N < 1:
            raise ValidationError(f"N must be >= 1, got {self.N}")
        if not self.phi > 0:
            raise ValidationError(f"phi must be positive, got {self.phi}")
        require_valid(CorrelationParams(self.tau, self.rho), self.N)
        if not isinstance(self.period_effects, str):
            beta = tuple(float(b) for b in self.period_effects)
            if len(beta) != self.T:
                raise ValidationError(f"period_effects has length {len(beta)}, expected T={self.T}")
            object.__setattr__(self, "period_effects", beta)
        elif self.period_effects != "default":
            raise ValidationError(f"unknown period_effects rule {self.period_effects!r}")

    @property
    def scenario_id(self) -> str:
        if self.name:
            return self.name
        return f"I{self.I}-N{self.N}-T{self.T}-tau{self.tau!r}-rho{self.rho!r}-delta{self.delta!r}-phi{self.phi!r}"

    @property
    def beta(self) -> np.ndarray:
        if self.period_effects == "default":
            return period_effects(self.T)
        return np.asarray(self.period_effects, dtype=float)

    def to_dict(self) -> dict:
        out = asdict(self)
        if not isinstance(out["period_effects"], str):
            out["period_effects"] = list(out["period_effects"])
        return out


@dataclass(frozen=True)
class AnalysisOptions:
    adjustments: tuple = ("qls", "maqls")
    alpha: float = 0.05
    zeta: float = 0.75
    tol: float = 1e-8
    max_iter: int = 200


@dataclass(frozen=True)
class RejectionRate:
    rate: float
    mcse: float | None
    n: int
    rejections: int


def _generator(scenario: SimScenario, replicate: int) -> np.random.Generator:
    key = zlib.crc32(scenario.scenario_id.encode("utf-8"))
    seq = np.random.SeedSequence([int(scenario.base_seed), key, int(replicate)])
    return np.random.Generator(np.random.PCG64(seq))


def generate_dataset(scenario: SimScenario, replicate: int) -> TrialDataset:
    """Draw replicate ``replicate`` of ``scenario``; identical inputs give identical data."""
    I, N, T = scenario.I, scenario.N, scenario.T
    X = standard_layout(I, T).X
    lg = linalg.cholesky(exchangeable(N, scenario.tau), lower=True)
    lf = linalg.cholesky(ar1(T, scenario.rho), lower=True)
    z = _generator(scenario, replicate).standard_normal((I, N, T))
    # (lg kron lf) vec_r(Z) = vec_r(lg Z lf')
    noise = np.einsum("jk,ikt,st->ijs", lg, z, lf)
    mu = scenario.beta[None, :] + X * scenario.delta
    Y = mu[:, None, :] + math.sqrt(scenario.phi) * noise
    return TrialDataset(list(Y), X)


def percent_relative_bias(estimates: Sequence[float], truth: float) -> tuple[float, bool]:
    """``100 * (mean - truth) / truth``; for ``truth == 0`` the absolute bias is returned and flagged."""
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ValidationError("no estimates to summarize")
    if truth == 0:
        return float(est.mean()), True
    return float(100.0 * (est.mean() - truth) / truth), False


def empirical_rejection_rate(rejections: Sequence[bool]) -> RejectionRate:
    """Rejection proportion with binomial Monte Carlo standard error (``None`` for a single replicate)."""
    r = np.asarray(rejections, dtype=bool)
    n = int(r.size)
    if n == 0:
        raise ValidationError("no converged replicates")
    p = float(r.mean())
    mcse = math.sqrt(p * (1.0 - p) / n) if n > 1 else None
    return RejectionRate(p, mcse, n, int(r.sum()))


@dataclass
class SimSummary:
    scenario: SimScenario
    methods: dict
    rejection: list
    predicted: dict
    failures: dict = field(default_factory=dict)

    def rate(self, method: str, test: str, flavor: str, dof_rule: str | None = "i-2") -> RejectionRate:
        for row in self.rejection:
            if row["method"] == method and row["test"] == test and row["flavor"] == flavor and row["dof_rule"] == dof_rule:
                return RejectionRate(row["rate"], row["mcse"], row["n"], row["rejections"])
        raise KeyError((method, test, flavor, dof_rule))

    def predicted_power(self, test: str = "t", dof_rule: str | None = "i-2") -> float | None:
        return self.predicted.get(_family_key(test, dof_rule))

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "methods": self.methods,
            "rejection": self.rejection,
            "predicted_power": self.predicted,
            "failures": self.failures,
        }


def _family_key(test: str, dof_rule: str | None) -> str:
    return "z" if test == "z" else f"t[{dof_rule}]"


def _predicted(scenario: SimScenario, alpha: float) -> dict:
    layout = standard_layout(scenario.I, scenario.T)
    var = variance_delta(layout, scenario.N, CorrelationParams(scenario.tau, scenario.rho), scenario.phi)
    out = {}
    for test, rule in TEST_FAMILIES:
        q = PowerQuery(delta=scenario.delta, phi=scenario.phi, alpha=alpha, test=test, dof_rule=rule or "i-2")
        try:
            out[_family_key(test, rule)] = power(var, q, scenario.I, scenario.T)
        except InsufficientClustersError:
            out[_family_key(test, rule)] = None
    return out


def _analyze_replicate(data: TrialDataset, method: str, options: AnalysisOptions, I: int, T: int):
    res = fit(data, adjustment=method, tol=options.tol, max_iter=options.max_iter, zeta=options.zeta)
    decisions = {}
    for test, rule in TEST_FAMILIES:
        if rule is not None:
            try:
                resolve_dof(rule, I, T)
            except InsufficientClustersError:
                continue
        for flavor in FLAVORS:
            if res.covariances.get(flavor) is None:
                continue
            wt = wald_test(res, flavor, test, rule or "i-2", options.alpha)
            decisions[(test, rule, flavor)] = wt.reject
    return res, decisions


def run_scenario(scenario: SimScenario, options: AnalysisOptions | None = None) -> SimSummary:
    """Fit every replicate with each adjustment and summarize.

    Bias and rejection rates use converged replicates only; replicate errors
    and non-convergence are counted, never raised.
    """
    options = options or AnalysisOptions()
    per_method = {m: {"tau": [], "rho": [], "delta": [], "converged": 0, "clamped": 0, "decisions": {}} for m in options.adjustments}
    failures: dict = {m: {} for m in options.adjustments}
    for rep in range(scenario.reps):
        data = generate_dataset(scenario, rep)
        for method in options.adjustments:
            acc = per_method[method]
            try:
                res, decisions = _analyze_replicate(data, method, options, scenario.I, scenario.T)
            except SwdecayError as exc:
                name = type(exc).__name__
                failures[method][name] = failures[method].get(name, 0) + 1
                continue
            if not res.converged:
                failures[method]["NotConverged"] = failures[method].get("NotConverged", 0) + 1
                continue
            acc["converged"] += 1
            acc["clamped"] += int(res.clamped)
            acc["tau"].append(res.tau)
            acc["rho"].append(res.rho)
            acc["delta"].append(res.delta)
            for key, reject in decisions.items():
                acc["decisions"].setdefault(key, []).append(reject)

    methods, rejection = {}, []
    for method in options.adjustments:
        acc = per_method[method]
        entry = {
            "replicates": scenario.reps,
            "converged": acc["converged"],
            "convergence_rate": acc["converged"] / scenario.reps,
            "clamped": acc["clamped"],
        }
        if acc["converged"]:
            tb, tflag = percent_relative_bias(acc["tau"], scenario.tau)
            rb, rflag = percent_relative_bias(acc["rho"], scenario.rho)
            db, dflag = percent_relative_bias(acc["delta"], scenario.delta)
            entry.update({
                "tau_mean": float(np.mean(acc["tau"])),
                "rho_mean": float(np.mean(acc["rho"])),
                "delta_mean": float(np.mean(acc["delta"])),
                "tau_bias": tb, "tau_bias_absolute": tflag,
                "rho_bias": rb, "rho_bias_absolute": rflag,
                "delta_bias": db, "delta_bias_absolute": dflag,
            })
        methods[method] = entry
        for (test, rule, flavor), decisions in sorted(acc["decisions"].items(), key=lambda kv: (kv[0][0], str(kv[0][1]), kv[0][2])):
            rr = empirical_rejection_rate(decisions)
            rejection.append({
                "method": method, "test": test, "dof_rule": rule, "flavor": flavor,
                "rate": rr.rate, "mcse": rr.mcse, "n": rr.n, "rejections": rr.rejections,
            })
    return SimSummary(scenario, methods, rejection, _predicted(scenario, options.alpha), failures)


# -- file I/O ------------------------------------------------------------------


def load_scenario(path) -> SimScenario:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: scenario must be a JSON object")
    allowed = set(SimScenario.__dataclass_fields__)
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ValidationError(f"{path}: unknown scenario field(s) {unknown}")
    missing = [k for k in ("I", "N", "T", "tau", "rho") if k not in doc]
    if missing:
        raise ValidationError(f"{path}: missing scenario field(s) {missing}")
    try:
        return SimScenario(**doc)
    except TypeError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_summary_csv(summary: SimSummary, path) -> None:
    """One row per (method, test, dof rule, flavor) with the predicted power alongside."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "test", "dof_rule", "flavor", "rate", "mcse", "n", "predicted",
                         "tau_bias", "rho_bias", "convergence_rate"])
        for row in summary.rejection:
            m = summary.methods[row["method"]]
            writer.writerow([
                row["method"], row["test"], row["dof_rule"] or "", row["flavor"],
                _fmt(row["rate"]), _fmt(row["mcse"]), row["n"],
                _fmt(summary.predicted.get(_family_key(row["test"], row["dof_rule"]))),
                _fmt(m.get("tau_bias")), _fmt(m.get("rho_bias")), _fmt(m["convergence_rate"]),
            ])


def round_floats(obj, digits: int = 10):
    """Recursively round floats to ``digits`` significant digits for stable JSON output."""
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None
        return float(f"{obj:.{digits}g}")
    if isinstance(obj, dict):
        return {str(k): round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v, digits) for v in obj]
    if isinstance(obj, np.generic):
        return round_floats(obj.item(), digits)
    return obj


def write_summary_json(summary: SimSummary, path) -> None:
    with open(path, "w") as fh:
        json.dump(round_floats(summary.to_dict()), fh, indent=2, sort_keys=True)
        fh.write("\n")
