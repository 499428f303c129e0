"""Loss estimators under covariate shift and the identifiable bound ingredients."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from . import glm
from .glm import LossFamily
from .nuisance import NuisanceSet, ShiftDataset, predict_outcome, predict_ratio

REPORT_SCHEMA = 1


def _vec(x, name):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if x.size == 0:
        raise ValueError(f"{name} is empty")
    return x


def _same_len(a, b, na, nb):
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {na} has {len(a)} rows, {nb} has {len(b)}")


def _positive(w):
    if np.any(w <= 0):
        raise ValueError("importance weights must be strictly positive")


def unadjusted_loss(losses_P) -> float:
    return float(np.mean(_vec(losses_P, "losses_P")))


def ipw_loss(losses_P, weights) -> float:
    """Importance-weighted source loss ``mean(w * loss)``."""
    losses = _vec(losses_P, "losses_P")
    w = _vec(weights, "weights")
    _same_len(losses, w, "losses_P", "weights")
    _positive(w)
    return float(np.mean(w * losses))


def dr_general(losses_P, g_P, weights, g_Q) -> float:
    """Doubly robust loss with an outcome model that predicts the loss.

    ``mean_P[w * (loss - g)] + mean_Q[g]``.
    """
    losses = _vec(losses_P, "losses_P")
    gP = _vec(g_P, "g_P")
    w = _vec(weights, "weights")
    gQ = _vec(g_Q, "g_Q")
    _same_len(losses, gP, "losses_P", "g_P")
    _same_len(losses, w, "losses_P", "weights")
    _positive(w)
    return float(np.mean(w * (losses - gP)) + np.mean(gQ))


def _check_label_space(family: LossFamily, g, name):
    if family.kind == "binary":
        if np.any(g < -1e-9) or np.any(g > 1 + 1e-9):
            raise ValueError(f"{name}: binary outcome predictions must lie in [0, 1]")
    elif family.vector_valued:
        if np.any(g < -1e-9) or np.any(g > 1 + 1e-9):
            raise ValueError(f"{name}: class probabilities must lie in [0, 1]")
        if np.any(g.sum(axis=-1) > 1 + 1e-6):
            raise ValueError(f"{name}: class probabilities sum to more than 1")


def dr_glm_terms(family: LossFamily, eta_P, eta_Q, y_P, g_P, g_Q, weights, lengths_P=None, lengths_Q=None):
    """Per-row pieces of the GLM doubly robust loss.

    Returns ``(p_term, q_term)`` with ``p_term = -w <eta, y - g>`` on source
    rows and ``q_term = b(eta) - <eta, g>`` on target rows.
    """
    eta_P = glm._check_eta(family, eta_P)
    eta_Q = glm._check_eta(family, eta_Q)
    y_P = np.asarray(y_P, dtype=float)
    g_P = np.asarray(g_P, dtype=float)
    g_Q = np.asarray(g_Q, dtype=float)
    w = _vec(weights, "weights")
    for arr, ref, name in ((y_P, eta_P, "y_P"), (g_P, eta_P, "g_P"), (g_Q, eta_Q, "g_Q")):
        if arr.shape != ref.shape:
            raise glm.ShapeError(f"{name} has shape {arr.shape}, expected {ref.shape}")
    if len(w) != len(eta_P):
        raise ValueError(f"length mismatch: {len(w)} weights for {len(eta_P)} source rows")
    _positive(w)
    _check_label_space(family, g_P, "g_P")
    _check_label_space(family, g_Q, "g_Q")
    p_term = -w * glm.inner(family, eta_P, y_P - g_P, lengths_P)
    q_term = glm.log_partition(family, eta_Q, lengths_Q) - glm.inner(family, eta_Q, g_Q, lengths_Q)
    return p_term, q_term


def dr_glm(family: LossFamily, eta_P, eta_Q, y_P, g_P, g_Q, weights, lengths_P=None, lengths_Q=None) -> float:
    """Doubly robust loss for GLM log-likelihoods with a label-space outcome model.

    ``mean_Q[b(eta) - <eta, g>] - mean_P[w <eta, y - g>]``; sums over classes
    (and realised steps for seqgen) are taken inside the inner products.
    """
    p, q = dr_glm_terms(family, eta_P, eta_Q, y_P, g_P, g_Q, weights, lengths_P, lengths_Q)
    return float(np.mean(p) + np.mean(q))


def fidelity(residual_targets, g_preds) -> float:
    """Mean squared residual of the short outcome model (summed over classes)."""
    t = np.asarray(residual_targets, dtype=float)
    g = np.asarray(g_preds, dtype=float)
    if t.shape != g.shape:
        raise ValueError(f"length mismatch: targets {t.shape} vs predictions {g.shape}")
    if t.size == 0:
        raise ValueError("fidelity of an empty sample")
    r2 = (t - g) ** 2
    return float(np.mean(r2.reshape(len(r2), -1).sum(axis=1)))


def overlap(alphas_P) -> float:
    """Second moment ``mean(alpha**2)`` of the short Riesz representer."""
    a = _vec(alphas_P, "alphas_P")
    return float(np.mean(a**2))


def overlap_loss_based(w_Q, w_P) -> float:
    """``2 mean_Q[w] - mean_P[w**2]``: an estimate of ``E_P[w**2]`` that can go negative."""
    return float(2.0 * np.mean(_vec(w_Q, "w_Q")) - np.mean(_vec(w_P, "w_P") ** 2))


@dataclass
class EvalReport:
    L_unadjusted: float
    L_ipw: float
    L_dr_s: float
    sigma2: float
    nu2: float
    n_main_P: int
    m_main_Q: int
    form: str
    nu2_loss_based: Optional[float] = None
    n_clipped: int = 0
    test_loss: Optional[float] = None

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.sigma2))

    @property
    def nu(self) -> float:
        return float(np.sqrt(self.nu2))

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA, **asdict(self)}


@dataclass
class DRRows:
    """Row-level contributions behind an :class:`EvalReport`.

    Every reported quantity is a mean of one of these arrays, which lets the
    bootstrap resample rows with the nuisances held fixed.
    """

    p_term: np.ndarray
    q_term: np.ndarray
    loss_P: np.ndarray
    w_P: np.ndarray
    resid2_P: np.ndarray
    alpha2_P: np.ndarray
    w_Q: np.ndarray
    form: str
    n_clipped: int = 0
    loss_Q: Optional[np.ndarray] = None

    @property
    def L_dr_s(self) -> float:
        return float(np.mean(self.p_term) + np.mean(self.q_term))

    def report(self) -> EvalReport:
        return EvalReport(
            L_unadjusted=unadjusted_loss(self.loss_P),
            L_ipw=ipw_loss(self.loss_P, self.w_P),
            L_dr_s=self.L_dr_s,
            sigma2=float(np.mean(self.resid2_P)),
            nu2=float(np.mean(self.alpha2_P)),
            n_main_P=len(self.p_term),
            m_main_Q=len(self.q_term),
            form=self.form,
            nu2_loss_based=overlap_loss_based(self.w_Q, self.w_P),
            n_clipped=self.n_clipped,
            test_loss=None if self.loss_Q is None else float(np.mean(self.loss_Q)),
        )


def score_rows(
    dataset: ShiftDataset,
    nuisances: NuisanceSet,
    eta_fn: Callable[[np.ndarray], np.ndarray],
    *,
    lengths_P=None,
    lengths_Q=None,
) -> DRRows:
    """Evaluate the model ``eta_fn`` on the main folds with frozen nuisances."""
    fam = nuisances.family
    plan = nuisances.plan
    XP = dataset.source_features[plan.main_P]
    yP = dataset.source_labels[plan.main_P]
    XQ = dataset.target_features[plan.main_Q]
    if lengths_P is not None:
        lengths_P = np.asarray(lengths_P)[plan.main_P]
    if lengths_Q is not None:
        lengths_Q = np.asarray(lengths_Q)[plan.main_Q]
    eta_P = eta_fn(XP)
    eta_Q = eta_fn(XQ)
    wP, clipped_P = predict_ratio(nuisances.ratio, XP, return_clipped=True)
    wQ, clipped_Q = predict_ratio(nuisances.ratio, XQ, return_clipped=True)
    gP = predict_outcome(nuisances.outcome, XP)
    gQ = predict_outcome(nuisances.outcome, XQ)
    loss_P = glm.nll(fam, eta_P, yP, lengths_P)
    loss_Q = None
    if dataset.target_labels is not None:
        loss_Q = glm.nll(fam, eta_Q, dataset.target_labels[plan.main_Q], lengths_Q)

    if nuisances.form == "general":
        if nuisances.outcome.target_mode != "predicts_loss":
            raise ValueError("general form needs an outcome model in predicts_loss mode")
        p_term = wP * (loss_P - gP)
        q_term = np.asarray(gQ, dtype=float)
        resid2 = (loss_P - gP) ** 2
        alpha2 = wP**2
    else:
        if nuisances.outcome.target_mode != "predicts_label":
            raise ValueError("GLM form needs an outcome model in predicts_label mode")
        p_term, q_term = dr_glm_terms(fam, eta_P, eta_Q, yP, gP, gQ, wP, lengths_P, lengths_Q)
        resid = yP - gP
        resid2 = resid.reshape(len(resid), -1) ** 2
        resid2 = resid2.sum(axis=1)
        alpha2 = wP**2 * glm.sq_norm(fam, eta_P, lengths_P)
    return DRRows(
        p_term=np.asarray(p_term, dtype=float),
        q_term=np.asarray(q_term, dtype=float),
        loss_P=np.asarray(loss_P, dtype=float),
        w_P=wP,
        resid2_P=np.asarray(resid2, dtype=float),
        alpha2_P=np.asarray(alpha2, dtype=float),
        w_Q=wQ,
        form=nuisances.form,
        n_clipped=clipped_P + clipped_Q,
        loss_Q=None if loss_Q is None else np.asarray(loss_Q, dtype=float),
    )


def evaluate(dataset: ShiftDataset, nuisances: NuisanceSet, eta_fn, **kwargs) -> EvalReport:
    return score_rows(dataset, nuisances, eta_fn, **kwargs).report()
