"""Controlled distribution-shift worlds with closed-form truths.

Two families are provided:

* :class:`OracleWorld` -- a finite table of ``(x, z, y)`` cells with source and
  target probabilities.  :func:`enumerate_truth` computes every population
  quantity exactly by summing over cells, and is the reference that sampled
  estimates are checked against.
* :class:`SynthConfig` -- a Gaussian mean-shift family with a linear label in
  ``k`` relevant features, some of which are hidden from the model.

``z`` (and the omitted Gaussian columns) is returned only through the
``*_long`` fields of :class:`WorldDraw`; estimators never receive it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import glm
from .glm import LossFamily
from .nuisance import ShiftDataset


@dataclass
class OracleWorld:
    """Discrete joint law of ``(x, z, y)`` under source P and target Q.

    ``x`` and ``z`` are tuples of numbers (the short representation is ``x``;
    the long one is ``(x, z)``).  ``p_P``/``p_Q`` give cell probabilities.
    The label rule ``Pr(y | x, z)`` must be the same under P and Q.
    """

    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    p_P: np.ndarray
    p_Q: np.ndarray
    family: LossFamily = field(default_factory=LossFamily.regression)
    name: str = "world"

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if self.x.shape[0] == 1 and len(self.p_P) > 1:
            self.x = self.x.T
        self.z = np.atleast_2d(np.asarray(self.z, dtype=float))
        if self.z.shape[0] == 1 and len(self.p_P) > 1:
            self.z = self.z.T
        self.y = np.asarray(self.y, dtype=float)
        self.p_P = np.asarray(self.p_P, dtype=float)
        self.p_Q = np.asarray(self.p_Q, dtype=float)
        self.validate()

    @property
    def long(self) -> np.ndarray:
        return np.hstack([self.x, self.z])

    def validate(self):
        c = len(self.p_P)
        if not (len(self.x) == len(self.z) == len(self.y) == len(self.p_Q) == c):
            raise ValueError("world arrays must all have one entry per cell")
        for name in ("p_P", "p_Q"):
            p = getattr(self, name)
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError(f"{name} must be a probability vector summing to 1")
        keys_long = _group_keys(self.long)
        mass_P = _group_sum(keys_long, self.p_P)
        mass_Q = _group_sum(keys_long, self.p_Q)
        if np.any((mass_Q > 0) & (mass_P == 0)):
            raise ValueError("overlap violated: a target cell has zero source probability")
        # identical label law given (x, z)
        ok = mass_P > 0
        condP = np.where(ok, self.p_P / np.where(ok, mass_P, 1), 0)
        condQ = np.where(mass_Q > 0, self.p_Q / np.where(mass_Q > 0, mass_Q, 1), condP)
        if np.any(np.abs(condP - condQ) > 1e-12):
            raise ValueError("covariate shift violated: Pr(y | x, z) differs between P and Q")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "family": self.family.to_dict(),
            "x": self.x.tolist(),
            "z": self.z.tolist(),
            "y": self.y.tolist(),
            "p_P": self.p_P.tolist(),
            "p_Q": self.p_Q.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OracleWorld":
        return cls(d["x"], d["z"], d["y"], d["p_P"], d["p_Q"], LossFamily.from_dict(d["family"]), d.get("name", "world"))


def _group_keys(cols: np.ndarray) -> np.ndarray:
    _, inv = np.unique(cols, axis=0, return_inverse=True)
    return inv.ravel()


def _group_sum(keys, values):
    # per-cell sum of `values` over the cell's group
    tot = np.zeros(keys.max() + 1)
    np.add.at(tot, keys, values)
    return tot[keys]


def _cond_mean(keys, p, t):
    mass = _group_sum(keys, p)
    tp = t * p if t.ndim == 1 else t * p[:, None]
    num = np.zeros((keys.max() + 1,) + t.shape[1:])
    np.add.at(num, keys, tp)
    num = num[keys]
    safe = np.where(mass > 0, mass, 1.0)
    return num / (safe if t.ndim == 1 else safe[:, None])


def oracle_w1() -> OracleWorld:
    """The canonical 4-cell regression world.

    ``x`` uniform on {0, 1} under P and Q; ``z`` independent of ``x`` with
    ``Pr(z = 1) = 0.5`` under P and ``0.8`` under Q; ``y = x + z``.  The
    evaluation model is ``f(x) = x`` (see :func:`w1_model`).
    """
    cells = [(x, z) for x in (0, 1) for z in (0, 1)]
    x = [c[0] for c in cells]
    z = [c[1] for c in cells]
    y = [c[0] + c[1] for c in cells]
    pz_P = {0: 0.5, 1: 0.5}
    pz_Q = {0: 0.2, 1: 0.8}
    p_P = [0.5 * pz_P[c[1]] for c in cells]
    p_Q = [0.5 * pz_Q[c[1]] for c in cells]
    return OracleWorld(x, z, y, p_P, p_Q, LossFamily.regression(), "w1")


def w1_model(X) -> np.ndarray:
    """``eta(x) = x`` on the single short feature."""
    return np.asarray(X, dtype=float)[:, 0]


def oracle_binary() -> OracleWorld:
    """Binary analogue of W1 with a stochastic label.

    Same ``(x, z)`` law as W1; ``Pr(y = 1 | x, z) = 0.2 + 0.3 x + 0.4 z``.
    Pair it with :func:`binary_model`.
    """
    xs, zs, ys, pP, pQ = [], [], [], [], []
    for x in (0, 1):
        for z in (0, 1):
            p1 = 0.2 + 0.3 * x + 0.4 * z
            for y, py in ((0, 1 - p1), (1, p1)):
                xs.append(x)
                zs.append(z)
                ys.append(y)
                pP.append(0.5 * 0.5 * py)
                pQ.append(0.5 * (0.8 if z else 0.2) * py)
    return OracleWorld(xs, zs, ys, pP, pQ, LossFamily.binary(), "binary")


def binary_model(X) -> np.ndarray:
    """Logit ``1.5 x - 0.5``."""
    return 1.5 * np.asarray(X, dtype=float)[:, 0] - 0.5


def oracle_no_shift(world: OracleWorld) -> OracleWorld:
    """Copy of ``world`` with the target law replaced by the source law."""
    return OracleWorld(world.x, world.z, world.y, world.p_P, world.p_P.copy(), world.family, world.name + "-noshift")


@dataclass
class OracleTruth:
    """Exact population quantities of an :class:`OracleWorld` for one model."""

    E_P_loss: float
    E_Q_loss: float
    L_dr_s: float
    L_dr: float
    ovb: float
    sigma2: float
    nu2: float
    cy: float
    cd: float
    rho: float
    g_long: np.ndarray
    g_short: np.ndarray
    alpha_long: np.ndarray
    alpha_short: np.ndarray
    w_long: np.ndarray
    w_short: np.ndarray
    form: str

    @property
    def s(self) -> float:
        return self.rho * self.cy * self.cd

    @property
    def bound(self) -> float:
        return self.s * np.sqrt(self.sigma2) * np.sqrt(self.nu2)


def _wmean(p, v):
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return float(np.sum(p * v))
    return float(np.sum(p[:, None] * v))


def _wcorr(p, a, b):
    ma, mb = _wmean(p, a), _wmean(p, b)
    va = _wmean(p, (a - ma) ** 2)
    vb = _wmean(p, (b - mb) ** 2)
    if va <= 1e-300 or vb <= 1e-300:
        return 0.0
    return _wmean(p, (a - ma) * (b - mb)) / np.sqrt(va * vb)


def enumerate_truth(world: OracleWorld, eta_fn: Callable, form: str = "general") -> OracleTruth:
    """Exact population values of every estimand for the model ``eta_fn``.

    ``form="general"`` uses loss-space outcome models; ``form="glm"`` uses
    label-space outcome models and folds ``eta`` into the Riesz representer.
    Conventions at degenerate points: ``cy = 0`` when the long and short
    outcome models coincide, and ``rho = 0`` when either difference is
    constant (the bound is then zero anyway).  Scalar-label families only.
    """
    if form not in ("general", "glm"):
        raise ValueError(f"unknown form {form!r}")
    fam = world.family
    if fam.vector_valued:
        raise ValueError("enumerate_truth supports scalar-label families only")
    pP, pQ = world.p_P, world.p_Q
    if abs(pP.sum() - 1) > 1e-12 or abs(pQ.sum() - 1) > 1e-12:
        raise ValueError("world is not normalised")
    eta = np.asarray(eta_fn(world.x), dtype=float)
    loss = glm.nll(fam, eta, world.y)
    key_long = _group_keys(world.long)
    key_short = _group_keys(world.x)
    mP_long = _group_sum(key_long, pP)
    mQ_long = _group_sum(key_long, pQ)
    mP_short = _group_sum(key_short, pP)
    mQ_short = _group_sum(key_short, pQ)
    w_long = np.where(mP_long > 0, mQ_long / np.where(mP_long > 0, mP_long, 1), 0.0)
    w_short = np.where(mP_short > 0, mQ_short / np.where(mP_short > 0, mP_short, 1), 0.0)

    target = loss if form == "general" else world.y
    g_long = _cond_mean(key_long, pP, target)
    g_short = _cond_mean(key_short, pP, target)
    if form == "general":
        a_long, a_short = w_long, w_short
        L_dr_s = _wmean(pP, w_short * (loss - g_short)) + _wmean(pQ, g_short)
        L_dr = _wmean(pP, w_long * (loss - g_long)) + _wmean(pQ, g_long)
    else:
        a_long, a_short = w_long * eta, w_short * eta
        b = glm.log_partition(fam, eta)
        L_dr_s = _wmean(pQ, b - eta * g_short) - _wmean(pP, a_short * (world.y - g_short))
        L_dr = _wmean(pQ, b - eta * g_long) - _wmean(pP, a_long * (world.y - g_long))

    sigma2 = _wmean(pP, (target - g_short) ** 2)
    nu2 = _wmean(pP, a_short**2)
    dg = g_long - g_short
    da = a_long - a_short
    num_y = _wmean(pP, dg**2)
    cy = 0.0 if num_y <= 1e-300 else float(np.sqrt(num_y / sigma2))
    cd2 = (_wmean(pP, a_long**2) - nu2) / nu2 if nu2 > 0 else 0.0
    cd = float(np.sqrt(max(cd2, 0.0)))
    rho = abs(_wcorr(pP, dg, da))
    return OracleTruth(
        E_P_loss=_wmean(pP, loss),
        E_Q_loss=_wmean(pQ, loss),
        L_dr_s=L_dr_s,
        L_dr=L_dr,
        ovb=L_dr_s - L_dr,
        sigma2=sigma2,
        nu2=nu2,
        cy=cy,
        cd=cd,
        rho=rho,
        g_long=g_long,
        g_short=g_short,
        alpha_long=a_long,
        alpha_short=a_short,
        w_long=w_long,
        w_short=w_short,
        form=form,
    )


@dataclass
class WorldDraw:
    """A sampled dataset plus the hidden long features.

    ``source_long``/``target_long`` contain the omitted columns and are meant
    only for oracle checks and sensitivity benchmarking.
    """

    dataset: ShiftDataset
    source_long: np.ndarray
    target_long: np.ndarray
    long_names: list
    short_columns: list
    source_cells: Optional[np.ndarray] = None
    target_cells: Optional[np.ndarray] = None

    @property
    def long_dataset(self) -> ShiftDataset:
        ds = self.dataset
        return ShiftDataset(self.source_long, ds.source_labels, self.target_long, ds.target_labels, list(self.long_names))


def sample_world(world: OracleWorld, n: int, m: int, seed: int = 0) -> WorldDraw:
    """I.i.d. source and target draws from an oracle world (with target labels)."""
    if n < 2 or m < 2:
        raise ValueError(f"need n, m >= 2, got n={n}, m={m}")
    rng = np.random.default_rng(seed)
    cP = rng.choice(len(world.p_P), size=n, p=world.p_P)
    cQ = rng.choice(len(world.p_Q), size=m, p=world.p_Q)
    dx, dz = world.x.shape[1], world.z.shape[1]
    names = [f"feature_{j}" for j in range(dx + dz)]
    ds = ShiftDataset(world.x[cP], world.y[cP], world.x[cQ], world.y[cQ], names[:dx])
    return WorldDraw(ds, world.long[cP], world.long[cQ], names, list(range(dx)), cP, cQ)


# ------------------------------------------------------------- Gaussian ----


@dataclass
class SynthConfig:
    """Gaussian mean-shift world with a linear label.

    Features: ``x ~ N(0, I_d)`` under P and ``N(shift, I_d)`` under Q.  The
    label is ``intercept + <coefficients, x[:k]> + N(0, noise_sd**2)``.
    Columns listed in ``omit_mask`` (a subset of ``range(k)``) are hidden from
    the model.  ``coefficients=None`` draws them from ``N(0, 1)`` and
    ``omit_mask=None`` omits a uniformly random number in ``{1, ..., k-1}`` of
    uniformly random relevant columns; both draws use ``seed``.
    ``shift`` may be a length-``d`` vector, or a scalar applied as
    ``-shift * sign(coefficients)`` on relevant columns and 0 elsewhere (a
    shift that lowers the label in every relevant direction).
    """

    d: int = 10
    k: int = 10
    coefficients: Optional[Sequence[float]] = None
    omit_mask: Optional[Sequence[int]] = None
    shift: object = 0.0
    noise_sd: float = 0.5
    intercept: float = 0.0
    n: int = 1000
    m: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.k > self.d:
            raise ValueError(f"need 1 <= k <= d, got k={self.k}, d={self.d}")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if self.coefficients is not None and len(self.coefficients) != self.k:
            raise ValueError(f"coefficients must have length k={self.k}")
        if self.omit_mask is not None:
            om = list(self.omit_mask)
            if any(j < 0 or j >= self.k for j in om):
                raise ValueError("omit_mask must be a subset of the label-relevant columns 0..k-1")
            if len(set(om)) != len(om):
                raise ValueError("omit_mask has duplicate columns")
        if np.ndim(self.shift) == 1 and len(self.shift) != self.d:
            raise ValueError(f"shift vector must have length d={self.d}")

    def resolved(self) -> "ResolvedConfig":
        rng = np.random.default_rng([self.seed, 0x5EED])
        coef = rng.normal(size=self.k) if self.coefficients is None else np.asarray(self.coefficients, dtype=float)
        if self.omit_mask is None:
            n_omit = int(rng.integers(1, self.k)) if self.k > 1 else 0
            omit = np.sort(rng.choice(self.k, size=n_omit, replace=False))
        else:
            omit = np.sort(np.asarray(self.omit_mask, dtype=int))
        if np.ndim(self.shift) == 0:
            mu = np.zeros(self.d)
            mu[: self.k] = -float(self.shift) * np.sign(coef)
        else:
            mu = np.asarray(self.shift, dtype=float)
        beta = np.zeros(self.d)
        beta[: self.k] = coef
        observed = np.array([j for j in range(self.d) if j not in set(omit.tolist())], dtype=int)
        return ResolvedConfig(self, beta, omit, observed, mu)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("coefficients", "omit_mask", "shift"):
            if d[key] is not None and np.ndim(d[key]) > 0:
                d[key] = [float(v) for v in d[key]]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class ResolvedConfig:
    config: SynthConfig
    beta: np.ndarray
    omit: np.ndarray
    observed: np.ndarray
    shift: np.ndarray

    def g_long(self, X_long) -> np.ndarray:
        return self.config.intercept + np.asarray(X_long) @ self.beta

    def g_short(self, X_short) -> np.ndarray:
        # E_P[y | observed]: omitted columns have P-mean zero and are independent
        return self.config.intercept + np.asarray(X_short) @ self.beta[self.observed]

    def w_long(self, X_long) -> np.ndarray:
        return gaussian_ratio(self.shift, X_long)

    def w_short(self, X_short) -> np.ndarray:
        return gaussian_ratio(self.shift[self.observed], X_short)

    def test_loss(self, weights, bias) -> float:
        """Exact target regression loss ``E_Q[eta**2 / 2 - y eta]`` of a linear model on short features."""
        b = np.asarray(weights, dtype=float)
        mu_obs = self.shift[self.observed]
        mean_eta = float(bias) + float(b @ mu_obs)
        e_eta2 = mean_eta**2 + float(b @ b)
        mean_y = self.config.intercept + float(self.beta @ self.shift)
        e_y_eta = mean_y * mean_eta + float(self.beta[self.observed] @ b)
        return 0.5 * e_eta2 - e_y_eta

    def sensitivity(self, weights, bias) -> dict:
        """Exact GLM-form sensitivity parameters for a linear regression model on short features.

        Uses ``E_P[w(x)**2 h(x)] = exp(|mu|**2) E_{N(2 mu, I)}[h(x)]`` for the
        Gaussian ratio ``w`` with shift ``mu``.
        """
        b = np.asarray(weights, dtype=float).ravel()
        mu_o = self.shift[self.observed]
        mu_om = self.shift[self.omit]
        beta_om = self.beta[self.omit]
        var_dg = float(beta_om @ beta_om)
        sigma2 = var_dg + self.config.noise_sd**2
        # E_P[w_S^2 eta^2]
        nu2 = float(np.exp(mu_o @ mu_o) * ((float(bias) + 2 * b @ mu_o) ** 2 + b @ b))
        inflate = float(np.expm1(mu_om @ mu_om))
        var_da = nu2 * inflate
        cov = (float(bias) + float(b @ mu_o)) * float(beta_om @ mu_om)
        cy = np.sqrt(var_dg / sigma2) if sigma2 > 0 else 0.0
        cd = np.sqrt(inflate)
        rho = abs(cov) / np.sqrt(var_dg * var_da) if var_dg > 0 and var_da > 0 else 0.0
        return {
            "cy": float(cy), "cd": float(cd), "rho": float(rho), "s": float(rho * cy * cd),
            "sigma2": sigma2, "nu2": nu2, "ovb": cov,
        }


def gaussian_ratio(shift, X) -> np.ndarray:
    """``N(shift, I) / N(0, I)`` density ratio: ``exp(<shift, x> - |shift|**2 / 2)``."""
    mu = np.asarray(shift, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.exp(X @ mu - 0.5 * float(mu @ mu))


def true_density_ratio(config: SynthConfig, x_long) -> np.ndarray:
    return gaussian_ratio(config.resolved().shift, x_long)


def sample_gaussian(config: SynthConfig, seed: Optional[int] = None) -> WorldDraw:
    """Draw source/target samples (target labels included) from a Gaussian world."""
    if config.n < 2 or config.m < 2:
        raise ValueError(f"need n, m >= 2, got n={config.n}, m={config.m}")
    r = config.resolved()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    XP = rng.normal(size=(config.n, config.d))
    XQ = rng.normal(size=(config.m, config.d)) + r.shift
    yP = r.g_long(XP) + config.noise_sd * rng.normal(size=config.n)
    yQ = r.g_long(XQ) + config.noise_sd * rng.normal(size=config.m)
    names = [f"feature_{j}" for j in range(config.d)]
    obs = r.observed.tolist()
    ds = ShiftDataset(XP[:, obs], yP, XQ[:, obs], yQ, [names[j] for j in obs])
    return WorldDraw(ds, XP, XQ, names, obs)


def sample(world, n: Optional[int] = None, m: Optional[int] = None, seed: Optional[int] = None) -> WorldDraw:
    """Sample from either an :class:`OracleWorld` or a :class:`SynthConfig`."""
    if isinstance(world, SynthConfig):
        return sample_gaussian(world, seed)
    return sample_world(world, n, m, 0 if seed is None else seed)
