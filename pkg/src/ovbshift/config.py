"""Typed run and synthesis configs built from flat ``key = value`` files.

Every key has a default (see ``RUN_KEYS`` / ``SYNTH_KEYS``); unknown keys are
rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .bounds import SensitivityBudget
from .dataio import ConfigDoc, ConfigError
from .glm import LossFamily
from .robust import OptConfig
from .synth import SynthConfig

RUN_KEYS = {
    "family": ("regression", "regression | binary | multiclass"),
    "classes": ("", "number of classes K (multiclass only)"),
    "form": ("glm", "glm (outcome model predicts labels) | general (predicts the loss)"),
    "holdout_frac": ("0.3", "share of each domain used to fit nuisances"),
    "clip": ("0.01,100", "density-ratio clip bounds 'low,high', or 'none'"),
    "nuisance_kind": ("ridge", "outcome model: ridge | net"),
    "ridge_lambda": ("auto", "ridge penalty, or 'auto' (scaled to the feature trace)"),
    "net_width": ("100", "hidden width of the net outcome model"),
    "s": ("0", "sensitivity budget product rho*C_Y*C_D"),
    "rho_max": ("", "budget component; give rho_max, cy_max, cd_max together instead of s"),
    "cy_max": ("", "budget component"),
    "cd_max": ("", "budget component"),
    "s_grid": ("0", "sweep grid: comma list, or 'linspace:start:stop:num'"),
    "objective": ("dr", "optimize objective: unadjusted | dr | worst_case"),
    "step_size": ("1.0", "initial gradient step"),
    "max_iters": ("5000", "gradient-descent iteration cap"),
    "grad_tol": ("1e-8", "gradient-norm stopping tolerance"),
    "seed": ("0", "seed for fold splits, nuisances and bootstrap"),
    "bootstrap_B": ("1000", "bootstrap replicates (>= 100)"),
    "ci_level": ("0.95", "bootstrap interval level"),
    "n_jobs": ("1", "bootstrap threads"),
    "weights": ("", "evaluated model weights (comma list, row-major d x K for multiclass)"),
    "bias": ("", "evaluated model bias (scalar, or K values)"),
    "model": ("", "path to a model JSON written by 'optimize'"),
    "benchmark": ("", "path to a sensitivity JSON written by 'benchmark' (echoed by sweep)"),
}

SYNTH_KEYS = {
    "world": ("w1", "w1 | binary | gaussian"),
    "n": ("1000", "source sample size"),
    "m": ("1000", "target sample size"),
    "seed": ("0", "sampling seed"),
    "target_labels": ("true", "write target labels (needed for test losses)"),
    "emit_long": ("false", "also write source_long.csv / target_long.csv with hidden columns"),
    "d": ("10", "gaussian: feature dimension"),
    "k": ("10", "gaussian: number of label-relevant columns"),
    "coefficients": ("<required>", "gaussian: k comma-separated values, or 'random' for N(0,1) draws"),
    "omit_mask": ("random", "gaussian: hidden relevant columns (comma list), 'random' or 'none'"),
    "shift": ("0", "gaussian: scalar adverse shift, or d comma-separated mean shifts"),
    "noise_sd": ("0.5", "gaussian: label noise standard deviation"),
    "intercept": ("0", "gaussian: label intercept"),
}


def _check_keys(doc: ConfigDoc, allowed: dict):
    for key in doc:
        if key not in allowed:
            raise doc.error(key, f"unknown key (allowed: {', '.join(sorted(allowed))})")


def _raw(doc, key, table):
    return doc.get(key, table[key][0]).strip()


def _float(doc, key, table, lo=None, hi=None) -> float:
    raw = _raw(doc, key, table)
    try:
        v = float(raw)
    except ValueError:
        raise doc.error(key, f"expected a number, got {raw!r}") from None
    if not np.isfinite(v):
        raise doc.error(key, "must be finite")
    if lo is not None and v < lo:
        raise doc.error(key, f"must be >= {lo}, got {v}")
    if hi is not None and v > hi:
        raise doc.error(key, f"must be <= {hi}, got {v}")
    return v


def _int(doc, key, table, lo=None) -> int:
    raw = _raw(doc, key, table)
    try:
        v = int(raw)
    except ValueError:
        raise doc.error(key, f"expected an integer, got {raw!r}") from None
    if lo is not None and v < lo:
        raise doc.error(key, f"must be >= {lo}, got {v}")
    return v


def _choice(doc, key, table, options) -> str:
    v = _raw(doc, key, table)
    if v not in options:
        raise doc.error(key, f"must be one of {' | '.join(options)}, got {v!r}")
    return v


def _bool(doc, key, table) -> bool:
    v = _raw(doc, key, table).lower()
    if v in ("true", "yes", "1"):
        return True
    if v in ("false", "no", "0"):
        return False
    raise doc.error(key, f"expected true or false, got {v!r}")


def _floats(doc, key, raw) -> list:
    try:
        out = [float(p) for p in raw.split(",") if p.strip()]
    except ValueError:
        raise doc.error(key, f"expected comma-separated numbers, got {raw!r}") from None
    if not out:
        raise doc.error(key, "empty list")
    if not all(np.isfinite(out)):
        raise doc.error(key, "values must be finite")
    return out


def _path(doc, key, table) -> Optional[str]:
    raw = _raw(doc, key, table)
    if not raw:
        return None
    if not Path(raw).is_file():
        raise doc.error(key, f"file not found: {raw}")
    return raw


def parse_grid(doc, key, raw) -> list:
    if raw.startswith("linspace:"):
        parts = raw.split(":")
        if len(parts) != 4:
            raise doc.error(key, "linspace grid must be 'linspace:start:stop:num'")
        try:
            start, stop, num = float(parts[1]), float(parts[2]), int(parts[3])
        except ValueError:
            raise doc.error(key, f"bad linspace grid {raw!r}") from None
        if num < 1:
            raise doc.error(key, "grid needs at least one point")
        grid = np.linspace(start, stop, num).tolist()
    else:
        grid = _floats(doc, key, raw)
    if any(v < 0 for v in grid):
        raise doc.error(key, "grid values must be >= 0")
    return grid


@dataclass(frozen=True)
class RunConfig:
    family: LossFamily
    form: str
    holdout_frac: float
    clip: Optional[tuple]
    nuisance_kind: str
    ridge_lambda: Optional[float]
    net_width: int
    budget: SensitivityBudget
    s_grid: tuple
    opt: OptConfig
    seed: int
    bootstrap_B: int
    ci_level: float
    n_jobs: int
    weights: Optional[tuple]
    bias: Optional[tuple]
    model_path: Optional[str]
    benchmark_path: Optional[str]

    def outcome_kwargs(self) -> dict:
        if self.nuisance_kind == "ridge":
            return {} if self.ridge_lambda is None else {"lam": self.ridge_lambda}
        return {"width": self.net_width}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.to_dict()
        d["budget"] = self.budget.to_dict()
        d["opt"] = asdict(self.opt)
        return d


def run_config(doc: ConfigDoc, seed: Optional[int] = None) -> RunConfig:
    """Validate a run config; ``seed`` (from ``--seed``) overrides the file."""
    T = RUN_KEYS
    _check_keys(doc, T)
    kind = _choice(doc, "family", T, ("regression", "binary", "multiclass"))
    if kind == "multiclass":
        if not _raw(doc, "classes", T):
            raise doc.error("classes", "required when family = multiclass")
        family = LossFamily.multiclass(_int(doc, "classes", T, lo=2))
    else:
        family = LossFamily.regression() if kind == "regression" else LossFamily.binary()
    form = _choice(doc, "form", T, ("glm", "general"))
    holdout = _float(doc, "holdout_frac", T, lo=0.0, hi=1.0)
    if not 0 < holdout < 1:
        raise doc.error("holdout_frac", "must lie strictly between 0 and 1")
    clip_raw = _raw(doc, "clip", T)
    if clip_raw.lower() == "none":
        clip = None
    else:
        vals = _floats(doc, "clip", clip_raw)
        if len(vals) != 2 or not 0 < vals[0] < vals[1]:
            raise doc.error("clip", "expected 'low,high' with 0 < low < high, or 'none'")
        clip = tuple(vals)
    nk = _choice(doc, "nuisance_kind", T, ("ridge", "net"))
    lam_raw = _raw(doc, "ridge_lambda", T)
    lam = None if lam_raw == "auto" else _float(doc, "ridge_lambda", T, lo=0.0)

    comps = [_raw(doc, k, T) for k in ("rho_max", "cy_max", "cd_max")]
    if any(comps):
        if not all(comps):
            missing = [k for k, v in zip(("rho_max", "cy_max", "cd_max"), comps) if not v][0]
            raise doc.error(missing, "give rho_max, cy_max and cd_max together")
        if "s" in doc:
            raise doc.error("s", "give either s or its components, not both")
        rho = _float(doc, "rho_max", T, lo=0.0, hi=1.0)
        budget = SensitivityBudget.from_components(rho, _float(doc, "cy_max", T, lo=0.0), _float(doc, "cd_max", T, lo=0.0))
    else:
        budget = SensitivityBudget.from_product(_float(doc, "s", T, lo=0.0))

    grid = tuple(parse_grid(doc, "s_grid", _raw(doc, "s_grid", T)))
    run_seed = _int(doc, "seed", T) if seed is None else int(seed)
    objective = _choice(doc, "objective", T, ("unadjusted", "dr", "worst_case"))
    step = _float(doc, "step_size", T)
    if step <= 0:
        raise doc.error("step_size", "must be > 0")
    tol = _float(doc, "grad_tol", T)
    if tol <= 0:
        raise doc.error("grad_tol", "must be > 0")
    opt = OptConfig(step, _int(doc, "max_iters", T, lo=0), tol, run_seed, objective, budget.s if objective == "worst_case" else 0.0)

    level = _float(doc, "ci_level", T)
    if not 0 < level < 1:
        raise doc.error("ci_level", "must lie strictly between 0 and 1")

    weights = bias = None
    if _raw(doc, "weights", T):
        weights = tuple(_floats(doc, "weights", _raw(doc, "weights", T)))
        bias = tuple(_floats(doc, "bias", _raw(doc, "bias", T))) if _raw(doc, "bias", T) else None
    elif _raw(doc, "bias", T):
        raise doc.error("bias", "given without weights")
    model_path = _path(doc, "model", T)
    if model_path and weights is not None:
        raise doc.error("model", "give either a model file or weights, not both")

    return RunConfig(
        family=family,
        form=form,
        holdout_frac=holdout,
        clip=clip,
        nuisance_kind=nk,
        ridge_lambda=lam,
        net_width=_int(doc, "net_width", T, lo=1),
        budget=budget,
        s_grid=grid,
        opt=opt,
        seed=run_seed,
        bootstrap_B=_int(doc, "bootstrap_B", T, lo=100),
        ci_level=level,
        n_jobs=_int(doc, "n_jobs", T, lo=1),
        weights=weights,
        bias=bias,
        model_path=model_path,
        benchmark_path=_path(doc, "benchmark", T),
    )


@dataclass(frozen=True)
class SynthSpec:
    world: str
    n: int
    m: int
    seed: int
    target_labels: bool
    emit_long: bool
    gaussian: Optional[SynthConfig]

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "gaussian"}
        d["gaussian"] = None if self.gaussian is None else self.gaussian.to_dict()
        return d


def synth_spec(doc: ConfigDoc, seed: Optional[int] = None) -> SynthSpec:
    T = SYNTH_KEYS
    _check_keys(doc, T)
    world = _choice(doc, "world", T, ("w1", "binary", "gaussian"))
    n, m = _int(doc, "n", T, lo=2), _int(doc, "m", T, lo=2)
    run_seed = _int(doc, "seed", T) if seed is None else int(seed)
    gaussian_only = ("d", "k", "coefficients", "omit_mask", "shift", "noise_sd", "intercept")
    cfg = None
    if world == "gaussian":
        d, k = _int(doc, "d", T, lo=1), _int(doc, "k", T, lo=1)
        if k > d:
            raise doc.error("k", f"must be <= d={d}")
        if "coefficients" not in doc:
            raise doc.error("coefficients", "missing required field 'coefficients' (k values, or 'random')")
        raw = doc["coefficients"].strip()
        coef = None if raw == "random" else _floats(doc, "coefficients", raw)
        if coef is not None and len(coef) != k:
            raise doc.error("coefficients", f"expected k={k} values, got {len(coef)}")
        om_raw = _raw(doc, "omit_mask", T)
        if om_raw == "random":
            omit = None
        elif om_raw == "none":
            omit = []
        else:
            vals = _floats(doc, "omit_mask", om_raw)
            if any(v != int(v) or not 0 <= v < k for v in vals) or len(set(vals)) != len(vals):
                raise doc.error("omit_mask", f"must be distinct column indices in 0..{k - 1}")
            omit = [int(v) for v in vals]
        sh = _floats(doc, "shift", _raw(doc, "shift", T))
        if len(sh) == 1:
            shift = sh[0]
        elif len(sh) == d:
            shift = sh
        else:
            raise doc.error("shift", f"expected one value or d={d} values, got {len(sh)}")
        cfg = SynthConfig(
            d=d, k=k, coefficients=coef, omit_mask=omit, shift=shift,
            noise_sd=_float(doc, "noise_sd", T, lo=0.0), intercept=_float(doc, "intercept", T),
            n=n, m=m, seed=run_seed,
        )
    else:
        for key in gaussian_only:
            if key in doc:
                raise doc.error(key, f"only valid for world = gaussian (world is {world})")
    return SynthSpec(world, n, m, run_seed, _bool(doc, "target_labels", T), _bool(doc, "emit_long", T), cfg)


def describe_keys(table: dict) -> str:
    width = max(len(k) for k in table)
    return "\n".join(f"  {k:<{width}}  {table[k][1]} [default: {table[k][0] or 'unset'}]" for k in table)
