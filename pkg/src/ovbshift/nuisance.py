"""Nuisance models: short outcome regression and density ratio weights.

Both nuisances are fit on a held-out fold (see :func:`split_folds`) and then
frozen.  Fitted models are plain dataclasses of numpy arrays, so they are
immutable in practice, shareable across threads and JSON-serialisable.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.linear_model import LogisticRegression

from .glm import LossFamily

DEFAULT_CLIP = (0.01, 100.0)
DEFAULT_HOLDOUT = 0.30
NUISANCE_SCHEMA = 1


class SingularFitError(np.linalg.LinAlgError):
    pass


class OverlapWarning(UserWarning):
    """Source and target samples are perfectly separable by the domain classifier."""


@dataclass
class ShiftDataset:
    """Labeled source sample and unlabeled target sample on one feature space.

    ``source_labels`` holds labels (regression/binary: ``(n,)``; multiclass:
    one-hot ``(n, K)``).  ``target_labels`` is optional and only used to
    score true test performance.
    """

    source_features: np.ndarray
    source_labels: np.ndarray
    target_features: np.ndarray
    target_labels: Optional[np.ndarray] = None
    feature_names: Optional[list] = None

    def __post_init__(self):
        self.source_features = np.atleast_2d(np.asarray(self.source_features, dtype=float))
        self.target_features = np.atleast_2d(np.asarray(self.target_features, dtype=float))
        self.source_labels = np.asarray(self.source_labels, dtype=float)
        if self.target_labels is not None:
            self.target_labels = np.asarray(self.target_labels, dtype=float)
        n, d = self.source_features.shape
        m, d_q = self.target_features.shape
        if d != d_q:
            raise ValueError(f"feature dimension mismatch: source d={d}, target d={d_q}")
        if n < 2 or m < 2:
            raise ValueError(f"need at least 2 source and 2 target rows, got n={n}, m={m}")
        if len(self.source_labels) != n:
            raise ValueError(f"{len(self.source_labels)} source labels for {n} source rows")
        if self.target_labels is not None and len(self.target_labels) != m:
            raise ValueError(f"{len(self.target_labels)} target labels for {m} target rows")
        for name in ("source_features", "target_features", "source_labels"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")
        if self.feature_names is None:
            self.feature_names = [f"feature_{j}" for j in range(d)]

    @property
    def n(self) -> int:
        return self.source_features.shape[0]

    @property
    def m(self) -> int:
        return self.target_features.shape[0]

    @property
    def d(self) -> int:
        return self.source_features.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.source_features, self.source_labels, self.target_features):
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        return h.hexdigest()[:16]

    def subset(self, source_idx, target_idx) -> "ShiftDataset":
        return ShiftDataset(
            self.source_features[source_idx],
            self.source_labels[source_idx],
            self.target_features[target_idx],
            None if self.target_labels is None else self.target_labels[target_idx],
            list(self.feature_names),
        )

    def select_columns(self, cols) -> "ShiftDataset":
        cols = list(cols)
        return ShiftDataset(
            self.source_features[:, cols],
            self.source_labels,
            self.target_features[:, cols],
            self.target_labels,
            [self.feature_names[c] for c in cols],
        )


@dataclass(frozen=True)
class FoldPlan:
    nuisance_P: np.ndarray
    main_P: np.ndarray
    nuisance_Q: np.ndarray
    main_Q: np.ndarray
    seed: int


def _split(n, frac, rng, which):
    n_nuis = int(round(frac * n))
    if n_nuis < 2 or n - n_nuis < 2:
        raise ValueError(
            f"{which}: holdout_frac={frac} on {n} rows leaves {n_nuis} nuisance "
            f"and {n - n_nuis} main rows; each fold needs at least 2"
        )
    perm = rng.permutation(n)
    return np.sort(perm[:n_nuis]), np.sort(perm[n_nuis:])


def split_folds(dataset: ShiftDataset, holdout_frac: float = DEFAULT_HOLDOUT, seed: int = 0) -> FoldPlan:
    """Partition source and target rows into nuisance and main folds.

    The nuisance fold of each sample holds ``round(holdout_frac * rows)``
    rows.  Deterministic given ``seed``.
    """
    if not 0.0 < holdout_frac < 1.0:
        raise ValueError(f"holdout_frac must lie in (0, 1), got {holdout_frac}")
    rng = np.random.default_rng(seed)
    nP, mP = _split(dataset.n, holdout_frac, rng, "source")
    nQ, mQ = _split(dataset.m, holdout_frac, rng, "target")
    return FoldPlan(nP, mP, nQ, mQ, seed)


# ---------------------------------------------------------------- outcome ----


@dataclass
class OutcomeModel:
    """Fitted short outcome model.

    ``kind`` is ``"ridge"`` or ``"net"``.  ``params`` maps names to arrays.
    ``target_mode`` is ``"predicts_label"`` (GLM form) or ``"predicts_loss"``
    (general form).  When ``family`` is binary or multiclass and the model
    predicts labels, outputs are projected onto valid probabilities.
    """

    kind: str
    params: dict
    target_mode: str = "predicts_label"
    family: Optional[LossFamily] = None
    seed: int = 0
    d: int = 0

    def to_dict(self) -> dict:
        return {
            "schema_version": NUISANCE_SCHEMA,
            "type": "outcome",
            "kind": self.kind,
            "target_mode": self.target_mode,
            "family": None if self.family is None else self.family.to_dict(),
            "seed": self.seed,
            "d": self.d,
            "params": {k: np.asarray(v).tolist() for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "OutcomeModel":
        fam = doc.get("family")
        return cls(
            kind=doc["kind"],
            params={k: np.asarray(v, dtype=float) for k, v in doc["params"].items()},
            target_mode=doc["target_mode"],
            family=None if fam is None else LossFamily.from_dict(fam),
            seed=doc["seed"],
            d=doc["d"],
        )


def default_ridge_penalty(X: np.ndarray) -> float:
    Xc = X - X.mean(axis=0)
    tr = float(np.einsum("ij,ij->", Xc, Xc))
    return 1e-3 * tr / X.shape[1] if tr > 0 else 1e-3


def _fit_ridge(X, Y, lam):
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    A = Xc.T @ Xc
    d = X.shape[1]
    if lam == 0 and np.linalg.matrix_rank(A) < d:
        raise SingularFitError("feature matrix is rank deficient and ridge penalty is 0")
    coef = np.linalg.solve(A + lam * np.eye(d), Xc.T @ (Y - y_mean))
    intercept = y_mean - x_mean @ coef
    return {"coef": coef, "intercept": np.asarray(intercept), "lam": np.asarray(lam)}


def _fit_net(X, Y, width, seed, step, max_iter, tol):
    # one tanh hidden layer, full-batch gradient descent on standardised data;
    # zero readout init and step halving whenever the loss would increase
    rng = np.random.default_rng(seed)
    n, d = X.shape
    x_mu, x_sd = X.mean(axis=0), X.std(axis=0)
    x_sd = np.where(x_sd > 0, x_sd, 1.0)
    y_mu, y_sd = Y.mean(axis=0), Y.std(axis=0)
    y_sd = np.where(y_sd > 0, y_sd, 1.0)
    Xs = (X - x_mu) / x_sd
    Ys = (Y - y_mu) / y_sd
    k = Ys.shape[1]
    params = [
        rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, width)),
        np.zeros(width),
        np.zeros((width, k)),
        np.zeros(k),
    ]

    def loss_and_grads(W1, b1, W2, b2):
        H = np.tanh(Xs @ W1 + b1)
        R = H @ W2 + b2 - Ys
        dO = R / n
        dH = (dO @ W2.T) * (1.0 - H**2)
        grads = [Xs.T @ dH, dH.sum(axis=0), H.T @ dO, dO.sum(axis=0)]
        return 0.5 * np.mean(np.sum(R**2, axis=1)), grads

    loss, grads = loss_and_grads(*params)
    for _ in range(max_iter):
        while step > 1e-12:
            cand = [p - step * g for p, g in zip(params, grads)]
            c_loss, c_grads = loss_and_grads(*cand)
            if np.isfinite(c_loss) and c_loss <= loss:
                break
            step *= 0.5
        else:
            break
        done = loss - c_loss < tol * max(1.0, loss)
        params, loss, grads = cand, c_loss, c_grads
        if done:
            break
    W1, b1, W2, b2 = params
    return {
        "W1": W1, "b1": b1, "W2": W2, "b2": b2,
        "x_mu": x_mu, "x_sd": x_sd, "y_mu": y_mu, "y_sd": y_sd,
    }


def fit_outcome(
    features,
    targets,
    kind: str = "ridge",
    seed: int = 0,
    *,
    lam: Optional[float] = None,
    width: int = 100,
    step: float = 0.5,
    max_iter: int = 2000,
    tol: float = 1e-10,
    target_mode: str = "predicts_label",
    family: Optional[LossFamily] = None,
) -> OutcomeModel:
    """Fit the short outcome model ``g`` on nuisance-fold rows.

    ``kind="ridge"`` solves ``(Xc'Xc + lam I) beta = Xc'(y - ybar)`` with an
    unpenalised intercept; ``lam`` defaults to ``1e-3 * trace(Xc'Xc) / d``.
    ``kind="net"`` trains a one-hidden-layer tanh network of the given width
    by full-batch gradient descent.  Targets may be ``(n,)`` or ``(n, k)``.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    Y = np.asarray(targets, dtype=float)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"{X.shape[0]} feature rows but {Y.shape[0]} targets")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows to fit an outcome model")
    if target_mode not in ("predicts_label", "predicts_loss"):
        raise ValueError(f"unknown target_mode {target_mode!r}")
    Y2 = Y.reshape(Y.shape[0], -1)
    if kind == "ridge":
        if lam is None:
            lam = default_ridge_penalty(X)
        params = _fit_ridge(X, Y2, float(lam))
    elif kind == "net":
        params = _fit_net(X, Y2, width, seed, step, max_iter, tol)
    else:
        raise ValueError(f"unknown outcome model kind {kind!r}")
    params["out_ndim"] = np.asarray(Y.ndim)
    return OutcomeModel(kind, params, target_mode, family, seed, X.shape[1])


def predict_outcome(model: OutcomeModel, features) -> np.ndarray:
    X = np.atleast_2d(np.asarray(features, dtype=float))
    if X.shape[1] != model.d:
        raise ValueError(f"outcome model expects d={model.d}, got {X.shape[1]}")
    p = model.params
    if model.kind == "ridge":
        out = X @ p["coef"] + p["intercept"]
    else:
        H = np.tanh(((X - p["x_mu"]) / p["x_sd"]) @ p["W1"] + p["b1"])
        out = (H @ p["W2"] + p["b2"]) * p["y_sd"] + p["y_mu"]
    if int(p["out_ndim"]) == 1:
        out = out[:, 0]
    fam = model.family
    if model.target_mode == "predicts_label" and fam is not None:
        if fam.kind == "binary":
            out = np.clip(out, 0.0, 1.0)
        elif fam.kind == "multiclass":
            out = np.clip(out, 0.0, None)
            s = out.sum(axis=1, keepdims=True)
            out = np.where(s > 0, out / np.where(s > 0, s, 1.0), 1.0 / fam.K)
    return out


# ---------------------------------------------------------- density ratio ----


@dataclass
class DensityRatioModel:
    """Domain-classifier density ratio ``w(x) = odds(Q | x) * n_P / n_Q``."""

    coef: np.ndarray
    intercept: float
    x_mu: np.ndarray
    x_sd: np.ndarray
    prior_correction: float
    clip_bounds: Optional[tuple] = DEFAULT_CLIP
    separable: bool = False
    seed: int = 0

    @property
    def d(self) -> int:
        return len(self.coef)

    def to_dict(self) -> dict:
        return {
            "schema_version": NUISANCE_SCHEMA,
            "type": "density_ratio",
            "coef": self.coef.tolist(),
            "intercept": self.intercept,
            "x_mu": self.x_mu.tolist(),
            "x_sd": self.x_sd.tolist(),
            "prior_correction": self.prior_correction,
            "clip_bounds": None if self.clip_bounds is None else list(self.clip_bounds),
            "separable": self.separable,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DensityRatioModel":
        clip = doc.get("clip_bounds")
        return cls(
            np.asarray(doc["coef"], dtype=float),
            float(doc["intercept"]),
            np.asarray(doc["x_mu"], dtype=float),
            np.asarray(doc["x_sd"], dtype=float),
            float(doc["prior_correction"]),
            None if clip is None else tuple(clip),
            bool(doc["separable"]),
            int(doc["seed"]),
        )


def fit_density_ratio(features_P, features_Q, seed: int = 0, clip=DEFAULT_CLIP, C: float = 1.0) -> DensityRatioModel:
    """Fit ``Pr(domain = Q | x)`` by logistic regression on standardised features.

    Sets ``separable`` (and warns when ``clip`` is None) if the classifier
    perfectly separates the two training samples, which signals an overlap
    violation.
    """
    XP = np.atleast_2d(np.asarray(features_P, dtype=float))
    XQ = np.atleast_2d(np.asarray(features_Q, dtype=float))
    if len(XP) == 0 or len(XQ) == 0:
        raise ValueError("density ratio needs non-empty source and target samples")
    if XP.shape[1] != XQ.shape[1]:
        raise ValueError(f"feature dimension mismatch: {XP.shape[1]} vs {XQ.shape[1]}")
    if clip is not None:
        lo, hi = clip
        if not 0 < lo <= hi:
            raise ValueError(f"clip bounds must satisfy 0 < lo <= hi, got {clip}")
        clip = (float(lo), float(hi))
    X = np.vstack([XP, XQ])
    y = np.r_[np.zeros(len(XP)), np.ones(len(XQ))]
    x_mu = X.mean(axis=0)
    x_sd = X.std(axis=0)
    x_sd = np.where(x_sd > 0, x_sd, 1.0)
    clf = LogisticRegression(C=C, max_iter=1000, tol=1e-10, random_state=seed)
    clf.fit((X - x_mu) / x_sd, y)
    coef = clf.coef_[0].astype(float)
    intercept = float(clf.intercept_[0])
    scores_P = ((XP - x_mu) / x_sd) @ coef
    scores_Q = ((XQ - x_mu) / x_sd) @ coef
    separable = bool(scores_P.max() < scores_Q.min() or scores_Q.max() < scores_P.min())
    if separable and clip is None:
        warnings.warn(
            "source and target are perfectly separable; density ratios are unbounded",
            OverlapWarning,
            stacklevel=2,
        )
    return DensityRatioModel(coef, intercept, x_mu, x_sd, len(XP) / len(XQ), clip, separable, seed)


def predict_ratio(model: DensityRatioModel, features, *, clip: bool = True, return_clipped: bool = False):
    X = np.atleast_2d(np.asarray(features, dtype=float))
    if X.shape[1] != model.d:
        raise ValueError(f"density ratio model expects d={model.d}, got {X.shape[1]}")
    logit = ((X - model.x_mu) / model.x_sd) @ model.coef + model.intercept
    w = np.exp(logit) * model.prior_correction
    n_clipped = 0
    if clip and model.clip_bounds is not None:
        lo, hi = model.clip_bounds
        n_clipped = int(np.count_nonzero((w < lo) | (w > hi)))
        w = np.clip(w, lo, hi)
    if return_clipped:
        return w, n_clipped
    return w


# ---------------------------------------------------------- nuisance set ----


@dataclass
class NuisanceSet:
    """Frozen nuisances plus the fold plan they were fit on."""

    plan: FoldPlan
    outcome: OutcomeModel
    ratio: DensityRatioModel
    form: str
    family: LossFamily
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": NUISANCE_SCHEMA,
            "form": self.form,
            "family": self.family.to_dict(),
            "fold_seed": self.plan.seed,
            "outcome": self.outcome.to_dict(),
            "ratio": self.ratio.to_dict(),
            "meta": self.meta,
        }


def fit_nuisances(
    dataset: ShiftDataset,
    family: LossFamily,
    *,
    form: str = "glm",
    eta_fn=None,
    kind: str = "ridge",
    holdout_frac: float = DEFAULT_HOLDOUT,
    clip=DEFAULT_CLIP,
    seed: int = 0,
    plan: Optional[FoldPlan] = None,
    **outcome_kwargs,
) -> NuisanceSet:
    """Split folds and fit ``g`` and ``w`` on the nuisance fold.

    In GLM form ``g`` regresses labels on features.  In general form it
    regresses the per-row loss of the model ``eta_fn`` (required) and is only
    valid for that model.  Both nuisances share one nuisance fold.
    """
    from .glm import nll

    if form not in ("glm", "general"):
        raise ValueError(f"form must be 'glm' or 'general', got {form!r}")
    if plan is None:
        plan = split_folds(dataset, holdout_frac, seed)
    XP = dataset.source_features[plan.nuisance_P]
    yP = dataset.source_labels[plan.nuisance_P]
    if form == "glm":
        targets = yP
        mode = "predicts_label"
    else:
        if eta_fn is None:
            raise ValueError("general form needs the evaluated model to build loss targets")
        targets = nll(family, eta_fn(XP), yP)
        mode = "predicts_loss"
    outcome = fit_outcome(XP, targets, kind, seed, target_mode=mode, family=family, **outcome_kwargs)
    ratio = fit_density_ratio(XP, dataset.target_features[plan.nuisance_Q], seed, clip)
    meta = {"data_digest": dataset.digest(), "holdout_frac": holdout_frac, "seed": seed}
    return NuisanceSet(plan, outcome, ratio, form, family, meta)
