"""GLM negative log-likelihood losses on the natural-parameter scale.

Every function is vectorised over leading batch dimensions: ``eta`` has shape
``(*batch, *family.event_shape)`` and per-sample quantities come back with
shape ``batch``.  The additive constant ``c(Y)`` of the log-likelihood is
dropped everywhere, so regression losses differ from half the squared error by
``y**2 / 2``; compare loss *differences* when that matters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, logsumexp, softmax

KINDS = ("regression", "binary", "multiclass", "seqgen")


class ShapeError(ValueError):
    """Natural parameter, label or mask does not conform to the family."""


@dataclass(frozen=True)
class LossFamily:
    """Task descriptor: canonical link, log-partition and label shape.

    Parameters
    ----------
    kind : {"regression", "binary", "multiclass", "seqgen"}
    K : int, optional
        Class count (multiclass) or vocabulary size (seqgen).
    T : int, optional
        Maximum sequence length (seqgen only).
    """

    kind: str
    K: Optional[int] = None
    T: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("multiclass", "seqgen"):
            if self.K is None or self.K < 2:
                raise ValueError(f"{self.kind} needs K >= 2, got {self.K}")
        if self.kind == "seqgen" and (self.T is None or self.T < 1):
            raise ValueError(f"seqgen needs T >= 1, got {self.T}")

    @classmethod
    def regression(cls) -> "LossFamily":
        return cls("regression")

    @classmethod
    def binary(cls) -> "LossFamily":
        return cls("binary")

    @classmethod
    def multiclass(cls, K: int) -> "LossFamily":
        return cls("multiclass", K=K)

    @classmethod
    def seqgen(cls, K: int, T: int) -> "LossFamily":
        return cls("seqgen", K=K, T=T)

    @property
    def event_shape(self) -> tuple:
        if self.kind in ("regression", "binary"):
            return ()
        if self.kind == "multiclass":
            return (self.K,)
        return (self.T, self.K)

    @property
    def vector_valued(self) -> bool:
        return self.kind in ("multiclass", "seqgen")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "K": self.K, "T": self.T}

    @classmethod
    def from_dict(cls, d: dict) -> "LossFamily":
        return cls(d["kind"], K=d.get("K"), T=d.get("T"))


def _check_eta(family: LossFamily, eta) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    ev = family.event_shape
    if ev and eta.shape[eta.ndim - len(ev):] != ev:
        raise ShapeError(
            f"{family.kind} expects trailing shape {ev}, got array of shape {eta.shape}"
        )
    if eta.ndim < len(ev):
        raise ShapeError(f"{family.kind} expects trailing shape {ev}, got {eta.shape}")
    return eta


def _batch_shape(family: LossFamily, eta: np.ndarray) -> tuple:
    return eta.shape[: eta.ndim - len(family.event_shape)]


def step_mask(family: LossFamily, eta: np.ndarray, lengths=None) -> Optional[np.ndarray]:
    """Boolean ``(*batch, T)`` mask of realised steps for seqgen, else None."""
    if family.kind != "seqgen" or lengths is None:
        return None
    lengths = np.asarray(lengths)
    batch = _batch_shape(family, eta)
    if lengths.shape != batch:
        raise ShapeError(f"lengths shape {lengths.shape} does not match batch shape {batch}")
    if np.any(lengths < 0) or np.any(lengths > family.T):
        raise ShapeError(f"sequence lengths must lie in [0, {family.T}]")
    return np.arange(family.T) < lengths[..., None]


def _reduce_steps(family, values, mask):
    # values: (*batch, T) per-step quantities
    if mask is not None:
        values = np.where(mask, values, 0.0)
    return values.sum(axis=-1)


def log_partition(family: LossFamily, eta, lengths=None):
    """Log-partition ``b(eta)`` per sample."""
    eta = _check_eta(family, eta)
    if family.kind == "regression":
        return 0.5 * eta**2
    if family.kind == "binary":
        return np.logaddexp(0.0, eta)
    if family.kind == "multiclass":
        return logsumexp(eta, axis=-1)
    per_step = logsumexp(eta, axis=-1)
    return _reduce_steps(family, per_step, step_mask(family, eta, lengths))


def mean_param(family: LossFamily, eta, lengths=None):
    """Mean parameter ``b'(eta)``: identity, sigmoid, or row-wise softmax.

    Masked seqgen steps are returned as zeros.
    """
    eta = _check_eta(family, eta)
    if family.kind == "regression":
        return eta.copy()
    if family.kind == "binary":
        return expit(eta)
    p = softmax(eta, axis=-1)
    mask = step_mask(family, eta, lengths)
    if mask is not None:
        p = np.where(mask[..., None], p, 0.0)
    return p


def inner(family: LossFamily, a, b, lengths=None):
    """Per-sample ``<a, b>`` summed over the event dimensions (masked for seqgen)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    prod = a * b
    if family.kind in ("regression", "binary"):
        return prod
    if family.kind == "multiclass":
        return prod.sum(axis=-1)
    per_step = prod.sum(axis=-1)
    mask = step_mask(family, np.asarray(a), lengths)
    return _reduce_steps(family, per_step, mask)


def sq_norm(family: LossFamily, a, lengths=None):
    return inner(family, a, a, lengths)


def _check_label(family, eta, y):
    y = np.asarray(y, dtype=float)
    if y.shape != eta.shape:
        raise ShapeError(f"label shape {y.shape} does not match natural parameter {eta.shape}")
    return y


def nll(family: LossFamily, eta, y, lengths=None):
    """Negative log-likelihood ``-(<y, eta> - b(eta))`` with ``c(y) = 0``."""
    eta = _check_eta(family, eta)
    y = _check_label(family, eta, y)
    return log_partition(family, eta, lengths) - inner(family, y, eta, lengths)


def grad_nll_eta(family: LossFamily, eta, y, lengths=None):
    """Score of :func:`nll` with respect to ``eta``: ``mean_param(eta) - y``."""
    eta = _check_eta(family, eta)
    y = _check_label(family, eta, y)
    g = mean_param(family, eta, lengths) - y
    mask = step_mask(family, eta, lengths)
    if mask is not None:
        g = np.where(mask[..., None], g, 0.0)
    return g


def one_hot(labels, K: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"class labels must lie in [0, {K})")
    if np.any(labels != np.round(labels)):
        raise ValueError("class labels must be integers")
    return np.eye(K)[labels.astype(int)]


def validate_labels(family: LossFamily, y) -> np.ndarray:
    """Check label values against the family (binary in {0,1}, rows one-hot)."""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("labels contain non-finite values")
    if family.kind == "binary" and not np.all((y == 0) | (y == 1)):
        raise ValueError("binary labels must be 0 or 1")
    if family.vector_valued:
        if y.shape[-1] != family.K:
            raise ShapeError(f"one-hot labels need trailing size {family.K}, got {y.shape}")
        if not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=-1) == 1):
            raise ValueError("one-hot label rows must contain a single 1")
    return y
