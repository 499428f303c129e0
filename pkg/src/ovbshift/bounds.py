"""Worst-case bounds from omitted-variable sensitivity parameters.

The short doubly robust loss can miss the true target loss by at most
``s * sigma * nu`` where ``s = rho * C_Y * C_D``.  This module evaluates that
bound, recovers ``(C_Y, C_D, rho)`` when long nuisances are available,
infers ``s`` from observed test performance, and bootstraps intervals.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import glm
from .estimators import DRRows
from .nuisance import (
    ShiftDataset,
    fit_density_ratio,
    fit_outcome,
    predict_outcome,
    predict_ratio,
    split_folds,
)

REPORT_SCHEMA = 1


class SensitivityError(ValueError):
    pass


@dataclass(frozen=True)
class SensitivityBudget:
    """Budget ``(rho_max, cy_max, cd_max)`` or directly their product ``s``."""

    s: float
    rho_max: Optional[float] = None
    cy_max: Optional[float] = None
    cd_max: Optional[float] = None

    def __post_init__(self):
        if not np.isfinite(self.s) or self.s < 0:
            raise ValueError(f"sensitivity product must be finite and >= 0, got {self.s}")
        comps = (self.rho_max, self.cy_max, self.cd_max)
        if any(c is not None for c in comps):
            if any(c is None for c in comps):
                raise ValueError("give all three components or none")
            if not 0 <= self.rho_max <= 1:
                raise ValueError(f"rho_max must lie in [0, 1], got {self.rho_max}")
            if self.cy_max < 0 or self.cd_max < 0:
                raise ValueError("cy_max and cd_max must be >= 0")
            prod = self.rho_max * self.cy_max * self.cd_max
            if abs(prod - self.s) > 1e-12:
                raise ValueError(f"s={self.s} does not equal rho_max*cy_max*cd_max={prod}")

    @classmethod
    def from_components(cls, rho_max: float, cy_max: float, cd_max: float) -> "SensitivityBudget":
        return cls(rho_max * cy_max * cd_max, rho_max, cy_max, cd_max)

    @classmethod
    def from_product(cls, s: float) -> "SensitivityBudget":
        return cls(float(s))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SensitivityEstimate:
    cy: float
    cd: float
    rho: float
    source: str

    @property
    def s(self) -> float:
        return self.rho * self.cy * self.cd

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA, **asdict(self), "s": self.s}


@dataclass
class WorstCaseReport:
    L_dr_s: float
    bound_term: float
    worst_case: float
    best_case: float
    ci_low: float
    ci_high: float
    budget: SensitivityBudget

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = REPORT_SCHEMA
        return d


def ovb_bound(s: float, sigma: float, nu: float) -> float:
    """Largest omitted-variable bias compatible with sensitivity product ``s``."""
    if s < 0 or sigma < 0 or nu < 0:
        raise ValueError(f"s, sigma and nu must be >= 0, got {s}, {sigma}, {nu}")
    return float(s * sigma * nu)


def worst_case(L_dr_s: float, budget, sigma: float, nu: float, ci=None) -> WorstCaseReport:
    """Two-sided bound around the short DR loss.

    ``budget`` may be a :class:`SensitivityBudget` or a bare product ``s``.
    ``ci`` is an optional ``(low, high)`` interval on the worst case; without
    one the interval collapses to the point.
    """
    if not isinstance(budget, SensitivityBudget):
        budget = SensitivityBudget.from_product(budget)
    if not all(np.isfinite(v) for v in (L_dr_s, sigma, nu)):
        raise ValueError("worst_case needs finite L_dr_s, sigma and nu")
    term = ovb_bound(budget.s, sigma, nu)
    wc = L_dr_s + term
    lo, hi = (wc, wc) if ci is None else (min(ci[0], wc), max(ci[1], wc))
    return WorstCaseReport(float(L_dr_s), term, float(wc), float(L_dr_s - term), float(lo), float(hi), budget)


def _diff_stats(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a2 = a.reshape(len(a), -1)
    b2 = b.reshape(len(b), -1)
    ac = a2 - a2.mean(axis=0)
    bc = b2 - b2.mean(axis=0)
    cov = float(np.sum(ac * bc))
    va = float(np.sum(ac**2))
    vb = float(np.sum(bc**2))
    return cov, va, vb


def true_sensitivity(g_long_P, g_short_P, alpha_long_P, alpha_short_P, residual_targets_P, *, strict: bool = True) -> SensitivityEstimate:
    """Sensitivity parameters from long and short nuisances on source rows.

    ``cy**2 = mean[(gL - gS)**2] / mean[(t - gS)**2]``,
    ``cd**2 = (mean[aL**2] - mean[aS**2]) / mean[aS**2]`` and ``rho`` is the
    absolute Pearson correlation of ``gL - gS`` with ``aL - aS``.  Vector
    outcomes (multiclass) are summed over classes.  With ``strict=False`` a
    negative ``cd**2`` is clamped to 0 and an undefined correlation is
    reported as 0 instead of raising; sampled proxies need that.
    """
    gL = np.asarray(g_long_P, dtype=float)
    gS = np.asarray(g_short_P, dtype=float)
    aL = np.asarray(alpha_long_P, dtype=float)
    aS = np.asarray(alpha_short_P, dtype=float)
    t = np.asarray(residual_targets_P, dtype=float)
    if not (len(gL) == len(gS) == len(aL) == len(aS) == len(t)):
        raise ValueError("true_sensitivity inputs must have equal lengths")
    dg = (gL - gS).reshape(len(gL), -1)
    denom_y = float(np.mean(np.sum((t - gS).reshape(len(t), -1) ** 2, axis=1)))
    if denom_y <= 0:
        raise SensitivityError("short model is perfect: fidelity denominator is zero")
    cy = float(np.sqrt(np.mean(np.sum(dg**2, axis=1)) / denom_y))
    mL = float(np.mean(np.sum(aL.reshape(len(aL), -1) ** 2, axis=1)))
    mS = float(np.mean(np.sum(aS.reshape(len(aS), -1) ** 2, axis=1)))
    if mS <= 0:
        raise SensitivityError("short Riesz representer has zero second moment")
    if mL < mS:
        if strict:
            raise SensitivityError("long overlap smaller than short: inconsistent long/short representers")
        mL = mS
    cd = float(np.sqrt((mL - mS) / mS))
    cov, va, vb = _diff_stats(gL - gS, aL - aS)
    if va <= 0 or vb <= 0:
        if strict:
            raise SensitivityError("rho undefined: a long-minus-short difference has zero variance")
        rho = 0.0
    else:
        rho = abs(cov) / np.sqrt(va * vb)
    return SensitivityEstimate(cy, cd, float(min(rho, 1.0)), "oracle")


def infer_sensitivity(L_test: float, L_dr_s: float, sigma: float, nu: float) -> float:
    """Smallest ``s`` whose two-sided bound reaches the observed test loss."""
    gap = abs(L_test - L_dr_s)
    scale = sigma * nu
    if scale <= 0:
        if gap == 0:
            return 0.0
        raise SensitivityError("bound cannot reach test performance: sigma * nu is zero")
    return float(gap / scale)


# ------------------------------------------------------------ bootstrap ----


def _replicate_means(cols_P, cols_Q, seed, b):
    rng = np.random.default_rng([seed, b])
    iP = rng.integers(0, len(cols_P), len(cols_P))
    iQ = rng.integers(0, len(cols_Q), len(cols_Q))
    return cols_P[iP].mean(axis=0), cols_Q[iQ].mean(axis=0)


def bootstrap_replicates(rows: DRRows, B: int = 1000, seed: int = 0, n_jobs: int = 1) -> dict:
    """Percentile-bootstrap replicates of ``L_dr_s``, ``sigma`` and ``nu``.

    Source and target main-fold rows are resampled independently; nuisances
    stay fixed.  Replicate ``b`` draws from its own generator seeded with
    ``(seed, b)``, so results do not depend on ``n_jobs``.
    """
    if B < 100:
        raise ValueError(f"bootstrap needs B >= 100, got {B}")
    if len(rows.p_term) < 2 or len(rows.q_term) < 2:
        raise ValueError("main fold too small to resample")
    cols_P = np.column_stack([rows.p_term, rows.resid2_P, rows.alpha2_P])
    cols_Q = rows.q_term[:, None]
    if n_jobs == 1:
        out = [_replicate_means(cols_P, cols_Q, seed, b) for b in range(B)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            out = list(ex.map(lambda b: _replicate_means(cols_P, cols_Q, seed, b), range(B)))
    mP = np.array([o[0] for o in out])
    mQ = np.array([o[1][0] for o in out])
    return {
        "L_dr_s": mP[:, 0] + mQ,
        "sigma": np.sqrt(mP[:, 1]),
        "nu": np.sqrt(mP[:, 2]),
    }


def _percentile(x, level):
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(x, [a, 1.0 - a])
    return float(lo), float(hi)


@dataclass
class BootstrapCI:
    L_dr_s: tuple
    worst_case: tuple
    best_case: tuple
    level: float
    B: int


def bootstrap_ci(rows: DRRows, budget, B: int = 1000, seed: int = 0, level: float = 0.95, n_jobs: int = 1) -> BootstrapCI:
    """Percentile intervals for ``L_dr_s`` and for both edges of the bound."""
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    s = budget.s if isinstance(budget, SensitivityBudget) else float(budget)
    rep = bootstrap_replicates(rows, B, seed, n_jobs)
    term = s * rep["sigma"] * rep["nu"]
    return BootstrapCI(
        _percentile(rep["L_dr_s"], level),
        _percentile(rep["L_dr_s"] + term, level),
        _percentile(rep["L_dr_s"] - term, level),
        level,
        B,
    )


@dataclass
class SensitivityRange:
    s_point: float
    s_ci_low: float
    s_ci_high: float
    L_dr_s_ci: tuple

    def to_dict(self) -> dict:
        return asdict(self)


def infer_sensitivity_range(rows: DRRows, L_test: float, B: int = 1000, seed: int = 0, level: float = 0.95, n_jobs: int = 1) -> SensitivityRange:
    """Point value and interval for ``s`` from an observed test loss.

    The point value matches the bound to ``L_test`` on the full main fold.
    The interval collects every ``s`` that moves some point of the bootstrap
    interval of ``L_dr_s`` onto ``L_test`` (two-sided); its lower end is 0
    when ``L_test`` already lies inside that interval.
    """
    rep = report_from_rows(rows)
    sn = rep["sigma"] * rep["nu"]
    s_point = infer_sensitivity(L_test, rep["L_dr_s"], rep["sigma"], rep["nu"])
    boot = bootstrap_replicates(rows, B, seed, n_jobs)
    if np.ptp(boot["L_dr_s"]) == 0:
        raise SensitivityError("degenerate bootstrap: all resamples are identical")
    lo, hi = _percentile(boot["L_dr_s"], level)
    if lo <= L_test <= hi:
        near = 0.0
    else:
        near = min(abs(L_test - lo), abs(L_test - hi))
    far = max(abs(L_test - lo), abs(L_test - hi))
    if sn <= 0:
        raise SensitivityError("bound cannot reach test performance: sigma * nu is zero")
    return SensitivityRange(s_point, near / sn, far / sn, (lo, hi))


def report_from_rows(rows: DRRows) -> dict:
    return {
        "L_dr_s": rows.L_dr_s,
        "sigma": float(np.sqrt(np.mean(rows.resid2_P))),
        "nu": float(np.sqrt(np.mean(rows.alpha2_P))),
    }


# ---------------------------------------------------------- benchmarking ----


def benchmark_sensitivity(
    features_long: ShiftDataset,
    short_columns,
    *,
    family=None,
    form: str = "glm",
    eta_fn=None,
    kind: str = "ridge",
    holdout_frac: float = 0.3,
    clip=(0.01, 100.0),
    seed: int = 0,
) -> SensitivityEstimate:
    """Benchmark ``(C_Y, C_D, rho)`` with proxy long and short nuisances.

    ``features_long`` is a dataset on the long representation and
    ``short_columns`` indexes the columns kept by the short one.  Long and
    short nuisances are fit on a shared nuisance fold and the sensitivity
    formulas are evaluated on the main fold.  In GLM form the Riesz
    representers include ``eta`` (so ``eta_fn`` is needed, as it is in
    general form to build loss targets); ``eta_fn`` sees short features.
    """
    short_columns = sorted(int(c) for c in short_columns)
    d = features_long.d
    if any(c < 0 or c >= d for c in short_columns):
        raise ValueError("short columns must index the long feature set")
    if len(short_columns) == d:
        warnings.warn("long and short feature sets are identical; sensitivity is zero", stacklevel=2)
        return SensitivityEstimate(0.0, 0.0, 0.0, "benchmarked")
    family = family or glm.LossFamily.regression()
    if eta_fn is None:
        raise ValueError("benchmark_sensitivity needs the evaluated model eta_fn")
    ds = features_long
    plan = split_folds(ds, holdout_frac, seed)
    XPn, XQn = ds.source_features[plan.nuisance_P], ds.target_features[plan.nuisance_Q]
    XPm = ds.source_features[plan.main_P]
    yPn, yPm = ds.source_labels[plan.nuisance_P], ds.source_labels[plan.main_P]
    cols = short_columns

    eta_n = eta_fn(XPn[:, cols])
    eta_m = eta_fn(XPm[:, cols])
    if form == "glm":
        t_n, t_m = yPn, yPm
        mode = "predicts_label"
    else:
        t_n, t_m = glm.nll(family, eta_n, yPn), glm.nll(family, eta_m, yPm)
        mode = "predicts_loss"

    gL = fit_outcome(XPn, t_n, kind, seed, target_mode=mode, family=family)
    gS = fit_outcome(XPn[:, cols], t_n, kind, seed, target_mode=mode, family=family)
    wL = fit_density_ratio(XPn, XQn, seed, clip)
    wS = fit_density_ratio(XPn[:, cols], XQn[:, cols], seed, clip)

    gL_m = predict_outcome(gL, XPm)
    gS_m = predict_outcome(gS, XPm[:, cols])
    aL = predict_ratio(wL, XPm)
    aS = predict_ratio(wS, XPm[:, cols])
    if form == "glm":
        eta_m = np.asarray(eta_m, dtype=float)
        shape = (-1,) + (1,) * (eta_m.ndim - 1)
        aL, aS = aL.reshape(shape) * eta_m, aS.reshape(shape) * eta_m
    est = true_sensitivity(gL_m, gS_m, aL, aS, t_m, strict=False)
    est.source = "benchmarked"
    return est
