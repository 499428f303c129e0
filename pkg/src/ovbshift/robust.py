"""Training linear models against the worst-case generalization objective.

The objective is the GLM-form short doubly robust loss plus the bias budget
``s * sigma * nu(f)``.  In GLM form ``sigma`` does not depend on the model,
while ``nu(f)**2 = mean_P[w**2 * |eta|**2]`` does, so the penalty acts as a
data-weighted (non-squared) norm on the natural parameter.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import glm
from .bounds import SensitivityBudget
from .glm import LossFamily
from .nuisance import NuisanceSet, ShiftDataset, predict_outcome, predict_ratio

MODEL_SCHEMA = 1
OBJECTIVES = ("unadjusted", "dr", "worst_case")
DIVERGENCE_LIMIT = 1e150


class OptimizationError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass
class LinearModel:
    """``eta(x) = x @ weights + bias``.

    ``weights`` has shape ``(d, *family.event_shape)`` and ``bias`` has shape
    ``family.event_shape``.
    """

    weights: np.ndarray
    bias: np.ndarray
    family: LossFamily

    @classmethod
    def zeros(cls, d: int, family: LossFamily) -> "LinearModel":
        ev = family.event_shape
        return cls(np.zeros((d,) + ev), np.zeros(ev), family)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        ev = self.family.event_shape
        if self.weights.shape[1:] != ev or self.bias.shape != ev:
            raise glm.ShapeError(
                f"weights {self.weights.shape} / bias {self.bias.shape} do not fit event shape {ev}"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("model parameters must be finite")

    @property
    def d(self) -> int:
        return self.weights.shape[0]

    def eta(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.d:
            raise ValueError(f"model expects d={self.d} features, got {X.shape[1]}")
        return np.tensordot(X, self.weights, axes=(1, 0)) + self.bias

    __call__ = eta

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias.ravel()])

    def with_theta(self, theta) -> "LinearModel":
        nw = self.weights.size
        return LinearModel(
            np.asarray(theta[:nw]).reshape(self.weights.shape),
            np.asarray(theta[nw:]).reshape(self.bias.shape),
            self.family,
        )

    def to_dict(self, config_digest: Optional[str] = None) -> dict:
        return {
            "schema_version": MODEL_SCHEMA,
            "family": self.family.to_dict(),
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "config_digest": config_digest,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LinearModel":
        return cls(np.asarray(doc["weights"], dtype=float), np.asarray(doc["bias"], dtype=float), LossFamily.from_dict(doc["family"]))


@dataclass(frozen=True)
class OptConfig:
    step_size: float = 1.0
    max_iters: int = 5000
    grad_tol: float = 1e-8
    seed: int = 0
    objective: str = "dr"
    s: float = 0.0

    def __post_init__(self):
        if self.step_size <= 0 or self.grad_tol <= 0:
            raise ValueError("step_size and grad_tol must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.s < 0:
            raise ValueError(f"budget s must be >= 0, got {self.s}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class OptTrace:
    objective: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    status: str = "max_iters"

    def to_dict(self) -> dict:
        return {
            "iterations": len(self.objective),
            "initial_objective": self.objective[0] if self.objective else None,
            "final_objective": self.objective[-1] if self.objective else None,
            "final_grad_norm": self.grad_norm[-1] if self.grad_norm else None,
            "status": self.status,
        }


@dataclass
class ObjectiveData:
    """Main-fold arrays with nuisance predictions evaluated once."""

    family: LossFamily
    X_P: np.ndarray
    y_P: np.ndarray
    g_P: np.ndarray
    w_P: np.ndarray
    X_Q: np.ndarray
    g_Q: np.ndarray
    sigma: float
    lengths_P: Optional[np.ndarray] = None
    lengths_Q: Optional[np.ndarray] = None

    @classmethod
    def from_nuisances(cls, dataset: ShiftDataset, nuisances: NuisanceSet, lengths_P=None, lengths_Q=None) -> "ObjectiveData":
        if nuisances.form != "glm" or nuisances.outcome.target_mode != "predicts_label":
            raise ValueError("optimization needs GLM-form nuisances with a label-space outcome model")
        plan = nuisances.plan
        XP = dataset.source_features[plan.main_P]
        XQ = dataset.target_features[plan.main_Q]
        yP = dataset.source_labels[plan.main_P]
        gP = predict_outcome(nuisances.outcome, XP)
        r = (yP - gP).reshape(len(yP), -1)
        return cls(
            nuisances.family,
            XP,
            yP,
            gP,
            predict_ratio(nuisances.ratio, XP),
            XQ,
            predict_outcome(nuisances.outcome, XQ),
            float(np.sqrt(np.mean(np.sum(r**2, axis=1)))),
            None if lengths_P is None else np.asarray(lengths_P)[plan.main_P],
            None if lengths_Q is None else np.asarray(lengths_Q)[plan.main_Q],
        )


def _bcast(w, ndim):
    return w.reshape((-1,) + (1,) * (ndim - 1))


def _value_and_eta_grads(model: LinearModel, data: ObjectiveData, objective: str, s: float):
    fam = data.family
    eP = model.eta(data.X_P)
    n = len(eP)
    if objective == "unadjusted":
        val = float(np.mean(glm.nll(fam, eP, data.y_P, data.lengths_P)))
        return val, glm.grad_nll_eta(fam, eP, data.y_P, data.lengths_P) / n, None
    eQ = model.eta(data.X_Q)
    m = len(eQ)
    wP = _bcast(data.w_P, eP.ndim)
    p_term = -data.w_P * glm.inner(fam, eP, data.y_P - data.g_P, data.lengths_P)
    q_term = glm.log_partition(fam, eQ, data.lengths_Q) - glm.inner(fam, eQ, data.g_Q, data.lengths_Q)
    val = float(np.mean(p_term) + np.mean(q_term))
    dP = -wP * (data.y_P - data.g_P) / n
    dQ = (glm.mean_param(fam, eQ, data.lengths_Q) - data.g_Q) / m
    mask_P = glm.step_mask(fam, eP, data.lengths_P)
    mask_Q = glm.step_mask(fam, eQ, data.lengths_Q)
    if objective == "worst_case" and s > 0:
        a2 = data.w_P**2 * glm.sq_norm(fam, eP, data.lengths_P)
        nu = float(np.sqrt(np.mean(a2)))
        val = val + s * data.sigma * nu
        if nu > 0:
            # subgradient 0 at nu == 0 (eta identically zero)
            dP = dP + (s * data.sigma / (n * nu)) * wP**2 * eP
    if mask_P is not None:
        dP = np.where(mask_P[..., None], dP, 0.0)
    if mask_Q is not None:
        dQ = np.where(mask_Q[..., None], dQ, 0.0)
    return val, dP, dQ


def _chain(model: LinearModel, data: ObjectiveData, dP, dQ) -> np.ndarray:
    gW = np.tensordot(data.X_P, dP, axes=(0, 0))
    gb = dP.sum(axis=0)
    if dQ is not None:
        gW = gW + np.tensordot(data.X_Q, dQ, axes=(0, 0))
        gb = gb + dQ.sum(axis=0)
    return np.concatenate([np.ravel(gW), np.ravel(gb)])


def _objective_name(objective, budget):
    s = budget.s if isinstance(budget, SensitivityBudget) else float(budget or 0.0)
    if s < 0:
        raise ValueError(f"budget s must be >= 0, got {s}")
    return objective, s


def worst_case_objective(model: LinearModel, data: ObjectiveData, budget=0.0, objective: str = "worst_case") -> float:
    """``L_dr_s(f) + s * sigma * nu(f)`` on main-fold rows (``objective`` may also be ``dr`` or ``unadjusted``)."""
    objective, s = _objective_name(objective, budget)
    return _value_and_eta_grads(model, data, objective, s)[0]


def grad_objective(model: LinearModel, data: ObjectiveData, budget=0.0, objective: str = "worst_case") -> LinearModel:
    """Analytic gradient, returned as a :class:`LinearModel` of the same shape."""
    objective, s = _objective_name(objective, budget)
    _, dP, dQ = _value_and_eta_grads(model, data, objective, s)
    g = _chain(model, data, dP, dQ)
    if not np.all(np.isfinite(g)):
        raise OptimizationError("non-finite gradient")
    return model.with_theta(g)


def fit(data: ObjectiveData, config: OptConfig, init: Optional[LinearModel] = None):
    """Full-batch gradient descent from zeros with step halving on non-decrease.

    Returns ``(model, trace)``.  Stops when the gradient norm drops below
    ``grad_tol`` or after ``max_iters`` accepted steps.
    """
    model = init or LinearModel.zeros(data.X_P.shape[1], data.family)
    s = config.s if config.objective == "worst_case" else 0.0
    trace = OptTrace()
    step = config.step_size
    val, dP, dQ = _value_and_eta_grads(model, data, config.objective, s)
    theta = model.theta
    for _ in range(config.max_iters + 1):
        grad = _chain(model, data, dP, dQ)
        gnorm = float(np.linalg.norm(grad))
        trace.objective.append(val)
        trace.grad_norm.append(gnorm)
        if not (np.isfinite(val) and np.isfinite(gnorm)):
            trace.status = "diverged"
            raise OptimizationError("objective became non-finite", trace)
        if gnorm <= config.grad_tol:
            trace.status = "converged"
            break
        if len(trace.objective) > config.max_iters:
            break
        for _halving in range(60):
            cand_theta = theta - step * grad
            cand = model.with_theta(cand_theta) if np.all(np.isfinite(cand_theta)) else None
            if cand is not None:
                cval, cP, cQ = _value_and_eta_grads(cand, data, config.objective, s)
                if np.isfinite(cval) and cval < val:
                    break
            step *= 0.5
        else:
            trace.status = "stalled"
            break
        model, theta, val, dP, dQ = cand, cand_theta, cval, cP, cQ
        if abs(val) > DIVERGENCE_LIMIT or np.max(np.abs(theta)) > DIVERGENCE_LIMIT:
            trace.objective.append(val)
            trace.grad_norm.append(float("nan"))
            trace.status = "diverged"
            raise OptimizationError("objective is unbounded below along the descent path", trace)
    return model, trace


@dataclass
class SweepRow:
    s: float
    model: Optional[LinearModel]
    L_dr_s: Optional[float]
    sigma: Optional[float]
    nu: Optional[float]
    worst_case: Optional[float]
    best_case: Optional[float]
    worst_case_dr_model: Optional[float]
    test_loss: Optional[float]
    status: str
    error: Optional[str] = None


def sweep(
    data: ObjectiveData,
    s_grid,
    config: OptConfig,
    test_loss_fn: Optional[Callable[[LinearModel], float]] = None,
) -> list:
    """One worst-case fit per ``s`` in ``s_grid``.

    ``worst_case_dr_model`` evaluates the bound of the ``s = 0`` (DR) model at
    each ``s``, a column that is affine in ``s``.  Row failures are recorded
    and the sweep continues.
    """
    s_grid = [float(v) for v in s_grid]
    if not s_grid:
        raise ValueError("s_grid is empty")
    if any(v < 0 for v in s_grid):
        raise ValueError("s_grid values must be >= 0")
    dr_model, _ = fit(data, replace(config, objective="dr", s=0.0))
    dr_val = worst_case_objective(dr_model, data, 0.0, "dr")
    dr_nu = _nu(dr_model, data)
    rows = []
    for s in s_grid:
        try:
            if s == 0:
                model = dr_model
            else:
                model, _ = fit(data, replace(config, objective="worst_case", s=s))
            L = worst_case_objective(model, data, 0.0, "dr")
            nu = _nu(model, data)
            term = s * data.sigma * nu
            rows.append(
                SweepRow(
                    s, model, L, data.sigma, nu, L + term, L - term,
                    dr_val + s * data.sigma * dr_nu,
                    None if test_loss_fn is None else float(test_loss_fn(model)),
                    "ok",
                )
            )
        except (OptimizationError, FloatingPointError, ValueError) as exc:
            rows.append(SweepRow(s, None, None, None, None, None, None, None, None, "failed", str(exc)))
    return rows


def _nu(model: LinearModel, data: ObjectiveData) -> float:
    eP = model.eta(data.X_P)
    return float(np.sqrt(np.mean(data.w_P**2 * glm.sq_norm(data.family, eP, data.lengths_P))))


def target_test_loss(model: LinearModel, dataset: ShiftDataset, rows=None, lengths=None) -> float:
    """Mean target-sample loss; needs target labels."""
    if dataset.target_labels is None:
        raise ValueError("dataset has no target labels")
    X = dataset.target_features if rows is None else dataset.target_features[rows]
    y = dataset.target_labels if rows is None else dataset.target_labels[rows]
    return float(np.mean(glm.nll(model.family, model.eta(X), y, lengths)))
