"""Stratum-level causal estimators.

Covers the unbiased trial estimator (difference in means with its sampling
covariance), the weighted observational estimator (stabilized inverse
probability weighting in Hajek form), and a family of shrinkage estimators
that pull the trial estimates toward the observational ones.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import DiagonalCovariance, StratumMoments, as_diag


class EstimationError(RuntimeError):
    """Estimation is infeasible on the provided data (e.g. an empty arm)."""


class ShrinkageFamily(str, Enum):
    """Closed set of supported estimators.

    ``unbiased`` is the identity (no shrinkage) reference.  ``kappa2``
    shrinks each component toward the observational estimate by a factor
    proportional to its sampling variance; ``kappa1`` applies one common
    shrinkage factor; ``delta1``/``delta2`` are the classical precision-
    weighted James-Stein forms.  The ``*_plus`` variants clamp the
    coefficient on the trial-minus-observational difference at zero so the
    observational estimate never receives negative weight.
    """

    UNBIASED = "unbiased"
    KAPPA2 = "kappa2"
    KAPPA2_PLUS = "kappa2_plus"
    KAPPA1 = "kappa1"
    KAPPA1_PLUS = "kappa1_plus"
    DELTA1 = "delta1"
    DELTA1_PLUS = "delta1_plus"
    DELTA2 = "delta2"
    DELTA2_PLUS = "delta2_plus"


_POSITIVE_PART = {
    ShrinkageFamily.KAPPA2_PLUS: ShrinkageFamily.KAPPA2,
    ShrinkageFamily.KAPPA1_PLUS: ShrinkageFamily.KAPPA1,
    ShrinkageFamily.DELTA1_PLUS: ShrinkageFamily.DELTA1,
    ShrinkageFamily.DELTA2_PLUS: ShrinkageFamily.DELTA2,
}


def is_positive_part(family: ShrinkageFamily) -> bool:
    return family in _POSITIVE_PART


def base_family(family: ShrinkageFamily) -> ShrinkageFamily:
    """Strip the positive-part clamp, mapping e.g. kappa2_plus -> kappa2."""
    return _POSITIVE_PART.get(family, family)


@dataclass(frozen=True, eq=False)
class UnitData:
    """Column-oriented unit records: covariates, treatment, outcome, stratum."""

    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    stratum: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        w = np.asarray(self.w, dtype=np.int8)
        y = np.asarray(self.y, dtype=np.int8)
        stratum = np.asarray(self.stratum, dtype=np.int64)
        n = x.shape[0]
        if w.shape != (n,) or y.shape != (n,) or stratum.shape != (n,):
            raise ValueError("x, w, y, stratum must agree on the number of units")
        if not np.isin(w, (0, 1)).all():
            raise ValueError("w must be binary")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("y must be binary")
        if n and stratum.min() < 1:
            raise ValueError("stratum labels start at 1")
        for name, arr in (("x", x), ("w", w), ("y", y), ("stratum", stratum)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]

    @property
    def n_strata(self) -> int:
        return int(self.stratum.max()) if self.n else 0

    def to_csv(self, path) -> None:
        p = self.n_covariates
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["unit_id"] + [f"x{j+1}" for j in range(p)] + ["w", "y", "stratum"])
            for i in range(self.n):
                writer.writerow(
                    [i + 1]
                    + [repr(float(v)) for v in self.x[i]]
                    + [int(self.w[i]), int(self.y[i]), int(self.stratum[i])]
                )

    @classmethod
    def from_csv(cls, path) -> "UnitData":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            xcols = sorted((c for c in header if c.startswith("x") and c[1:].isdigit()),
                           key=lambda c: int(c[1:]))
            missing = [c for c in ("w", "y", "stratum") if c not in header]
            if missing:
                raise ValueError(f"{path}: missing required columns: {', '.join(missing)}")
            if not xcols:
                raise ValueError(f"{path}: no covariate columns x1..xp found")
            rows = list(reader)
        if not rows:
            raise ValueError(f"{path}: no data rows")
        x = np.array([[float(r[c]) for c in xcols] for r in rows])
        return cls(
            x=x,
            w=np.array([int(r["w"]) for r in rows]),
            y=np.array([int(r["y"]) for r in rows]),
            stratum=np.array([int(r["stratum"]) for r in rows]),
        )


def difference_in_means(data: UnitData, n_strata: int | None = None):
    """Per-stratum difference in means and its estimated covariance diagonal.

    Uses unbiased (n-1) sample variances, so each arm of each stratum must
    contain at least two units.  Strata where the outcome shows no
    within-arm variation legitimately yield a zero variance entry; the
    returned covariance is built with ``allow_zero=True`` and flags itself
    via ``is_degenerate``.

    Returns
    -------
    (estimates, covariance) : (ndarray of shape (K,), DiagonalCovariance)
    """
    k = n_strata or data.n_strata
    est = np.empty(k)
    var = np.empty(k)
    for s in range(1, k + 1):
        in_stratum = data.stratum == s
        yt = data.y[in_stratum & (data.w == 1)]
        yc = data.y[in_stratum & (data.w == 0)]
        if yt.size < 2 or yc.size < 2:
            raise EstimationError(
                f"stratum {s}: needs >= 2 treated and >= 2 control units "
                f"(got {yt.size} treated, {yc.size} control)"
            )
        est[s - 1] = yt.mean() - yc.mean()
        var[s - 1] = yt.var(ddof=1) / yt.size + yc.var(ddof=1) / yc.size
    return est, DiagonalCovariance(var, allow_zero=True)


@dataclass(frozen=True)
class PropensityModel:
    """Logistic treatment model with clipped predictions."""

    intercept: float
    coef: tuple[float, ...]
    clip: float = 0.01
    converged: bool = True
    separation_warning: bool = False

    def linear_predictor(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.intercept + x @ np.asarray(self.coef)

    def predict(self, x) -> np.ndarray:
        """Treatment probabilities, clipped to [clip, 1 - clip]."""
        p = 1.0 / (1.0 + np.exp(-self.linear_predictor(x)))
        return np.clip(p, self.clip, 1.0 - self.clip)

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "coef": list(self.coef),
            "clip": self.clip,
            "converged": self.converged,
            "separation_warning": self.separation_warning,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PropensityModel":
        return cls(
            intercept=float(d["intercept"]),
            coef=tuple(float(v) for v in d["coef"]),
            clip=float(d.get("clip", 0.01)),
            converged=bool(d.get("converged", True)),
            separation_warning=bool(d.get("separation_warning", False)),
        )


# IRLS blows up under complete separation; coefficients this large mean the
# fitted probabilities have saturated well past the clipping bounds.
_SEPARATION_COEF = 20.0


def fit_propensity(
    data: UnitData,
    *,
    ridge: float = 1e-6,
    clip: float = 0.01,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> PropensityModel:
    """Fit the treatment propensity by ridge-penalized IRLS.

    Convergence is declared when the largest coefficient update falls below
    ``tol``.  Under complete separation the ridge keeps the solve finite but
    coefficients drift very large; the returned model then carries
    ``separation_warning=True`` and its predictions are clipped as usual.
    """
    x = data.x
    w = data.w.astype(float)
    if w.sum() < 1 or (1 - w).sum() < 1:
        raise EstimationError("propensity fit needs at least one treated and one control unit")
    n, p = x.shape
    design = np.column_stack([np.ones(n), x])
    beta = np.zeros(p + 1)
    penalty = ridge * np.eye(p + 1)
    converged = False
    for _ in range(max_iter):
        eta = design @ beta
        prob = 1.0 / (1.0 + np.exp(-eta))
        weight = np.clip(prob * (1.0 - prob), 1e-10, None)
        hessian = (design * weight[:, None]).T @ design + penalty
        gradient = design.T @ (w - prob) - ridge * beta
        step = np.linalg.solve(hessian, gradient)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    separation = bool(np.max(np.abs(beta)) > _SEPARATION_COEF or not converged)
    if separation:
        warnings.warn("possible separation in propensity fit; predictions are clipped",
                      RuntimeWarning, stacklevel=2)
    return PropensityModel(
        intercept=float(beta[0]),
        coef=tuple(float(v) for v in beta[1:]),
        clip=clip,
        converged=converged,
        separation_warning=separation,
    )


def sipw_arm_means(data: UnitData, model: PropensityModel, n_strata: int | None = None):
    """Stabilized inverse-probability (Hajek) arm means per stratum.

    Returns
    -------
    (mu_t, mu_c) : pair of ndarrays of shape (K,)
    """
    k = n_strata or data.n_strata
    e = model.predict(data.x)
    mu_t = np.empty(k)
    mu_c = np.empty(k)
    for s in range(1, k + 1):
        in_stratum = data.stratum == s
        treated = in_stratum & (data.w == 1)
        control = in_stratum & (data.w == 0)
        if not treated.any() or not control.any():
            raise EstimationError(f"stratum {s}: an arm is empty in the observational data")
        wt = 1.0 / e[treated]
        wc = 1.0 / (1.0 - e[control])
        mu_t[s - 1] = np.sum(wt * data.y[treated]) / np.sum(wt)
        mu_c[s - 1] = np.sum(wc * data.y[control]) / np.sum(wc)
    return mu_t, mu_c


def sipw_estimates(data: UnitData, model: PropensityModel, n_strata: int | None = None) -> np.ndarray:
    """Per-stratum treatment effect estimates from the weighted arm means."""
    mu_t, mu_c = sipw_arm_means(data, model, n_strata)
    return mu_t - mu_c


def sipw_moments(data: UnitData, model: PropensityModel, n_strata: int | None = None) -> StratumMoments:
    """Binary-consistent stratum moments implied by the weighted arm means."""
    mu_t, mu_c = sipw_arm_means(data, model, n_strata)
    return StratumMoments.from_means(mu_t, mu_c)


@dataclass(frozen=True)
class ShrinkResult:
    """Shrinkage output with the per-stratum coefficients actually applied."""

    values: np.ndarray
    coefficients: np.ndarray
    degenerate: bool


def shrink(family, tau_r, tau_o, sigma) -> np.ndarray:
    """Apply a shrinkage family componentwise.

    ``sigma`` is the covariance diagonal of ``tau_r`` (zero entries are
    tolerated for the kappa families, whose coefficients then leave those
    components untouched).  When the trial and observational estimates agree
    exactly the shrinkage direction is undefined and the observational
    vector is returned unchanged; use :func:`shrink_details` to observe the
    degeneracy flag.
    """
    return shrink_details(family, tau_r, tau_o, sigma).values


def shrink_details(family, tau_r, tau_o, sigma) -> ShrinkResult:
    family = ShrinkageFamily(family)
    tau_r = np.asarray(tau_r, dtype=float)
    tau_o = np.asarray(tau_o, dtype=float)
    diag = as_diag(sigma)
    if tau_r.shape != tau_o.shape or tau_r.shape != diag.shape:
        raise ValueError("tau_r, tau_o and sigma must share one length")
    values, coef, degenerate = _shrink_batch(family, tau_r[None, :], tau_o, diag, with_details=True)
    return ShrinkResult(values[0], coef[0], bool(degenerate[0]))


def _shrink_batch(family, tau_r, tau_o, diag, with_details=False):
    """Vectorized shrinkage over rows of ``tau_r`` (shape (n, K)).

    Returns the estimates, and with ``with_details`` also the coefficient
    matrix rows and per-row degeneracy flags.
    """
    k = diag.shape[0]
    delta = tau_r - tau_o[None, :]
    if family is ShrinkageFamily.UNBIASED:
        coef = np.ones_like(delta)
        degenerate = np.zeros(delta.shape[0], dtype=bool)
        out = tau_r.copy()
        return (out, coef, degenerate) if with_details else out

    base = base_family(family)
    if base in (ShrinkageFamily.DELTA1, ShrinkageFamily.DELTA2):
        if k < 3:
            raise ValueError(f"{family.value} requires K >= 3")
        if np.any(diag == 0):
            raise ValueError(f"{family.value} requires a strictly positive covariance diagonal")

    if base is ShrinkageFamily.KAPPA2:
        denom = delta**2 @ diag**2
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = 1.0 - (np.sum(diag**2) * diag)[None, :] / denom[:, None]
    elif base is ShrinkageFamily.KAPPA1:
        denom = np.sum(delta**2, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = 1.0 - (np.sum(diag) / denom)[:, None] * np.ones((1, k))
    elif base is ShrinkageFamily.DELTA1:
        denom = delta**2 @ (1.0 / diag)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = 1.0 - ((k - 2) / denom)[:, None] * np.ones((1, k))
    elif base is ShrinkageFamily.DELTA2:
        denom = delta**2 @ (1.0 / diag**2)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = 1.0 - ((k - 2) / denom)[:, None] / diag[None, :]
    else:  # pragma: no cover - the enum is closed
        raise ValueError(f"unknown family {family}")

    if is_positive_part(family):
        coef = np.maximum(coef, 0.0)

    degenerate = denom == 0
    out = tau_o[None, :] + coef * delta
    if np.any(degenerate):
        out[degenerate] = tau_o
        coef = coef.copy()
        coef[degenerate] = 0.0
    return (out, coef, degenerate) if with_details else out


def dominance_condition(sigma) -> bool:
    """Whether shrinkage is guaranteed to beat the trial-only estimator.

    True iff 4 * max_k sigma_k^4 < sum_k sigma_k^4 (strict).
    """
    diag = as_diag(sigma)
    fourth = diag**2
    return bool(4.0 * fourth.max() < fourth.sum())
