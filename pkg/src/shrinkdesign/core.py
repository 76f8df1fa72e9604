"""Shared domain vocabulary: designs, stratum moments, diagonal covariances.

Strata are labelled 1..K; per-stratum arrays are ordered by label, so index
``k - 1`` holds stratum ``k``.  Treatment arms are labelled ``"t"`` and
``"c"`` and always appear in that order when cells are flattened.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

ARMS = ("t", "c")


class DegenerateDesignError(ValueError):
    """A design has an empty (stratum, arm) cell where a positive count is required."""


class DegenerateMomentsError(ValueError):
    """Supplied moments imply a zero sampling variance in some stratum."""


class InfeasibleDesignError(ValueError):
    """No allocation can satisfy the requested totals and floors."""


def _frozen_array(values, dtype=float) -> np.ndarray:
    out = np.array(values, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Design:
    """Integer allocation of trial units to (stratum, arm) cells.

    Parameters
    ----------
    treated, control : tuple of int
        Per-stratum treated and control counts, stratum 1 first.
    """

    treated: tuple[int, ...]
    control: tuple[int, ...]

    def __post_init__(self):
        treated = tuple(int(v) for v in self.treated)
        control = tuple(int(v) for v in self.control)
        object.__setattr__(self, "treated", treated)
        object.__setattr__(self, "control", control)
        if len(treated) != len(control):
            raise ValueError("treated and control must cover the same strata")
        if len(treated) == 0:
            raise ValueError("a design needs at least one stratum")
        if any(v < 0 for v in treated + control):
            raise ValueError("allocation counts must be nonnegative")

    @property
    def n_strata(self) -> int:
        return len(self.treated)

    @property
    def n_total(self) -> int:
        return sum(self.treated) + sum(self.control)

    @property
    def min_cell(self) -> int:
        return min(self.treated + self.control)

    def counts(self) -> np.ndarray:
        """Cell counts as a (K, 2) integer array, arm order (t, c)."""
        return np.column_stack([self.treated, self.control])

    def cell(self, stratum: int, arm: str) -> int:
        values = self.treated if arm == "t" else self.control
        return values[stratum - 1]

    @classmethod
    def from_counts(cls, counts) -> "Design":
        counts = np.asarray(counts)
        return cls(tuple(int(v) for v in counts[:, 0]), tuple(int(v) for v in counts[:, 1]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stratum", "n_treated", "n_control"])
            for k, (nt, nc) in enumerate(zip(self.treated, self.control), start=1):
                writer.writerow([k, nt, nc])

    @classmethod
    def from_csv(cls, path) -> "Design":
        rows = _read_csv_rows(path, ["stratum", "n_treated", "n_control"])
        rows.sort(key=lambda r: int(r["stratum"]))
        _check_contiguous_strata([int(r["stratum"]) for r in rows], path)
        return cls(
            tuple(int(r["n_treated"]) for r in rows),
            tuple(int(r["n_control"]) for r in rows),
        )


@dataclass(frozen=True, eq=False)
class StratumMoments:
    """Per-stratum, per-arm potential-outcome means and variances.

    Means are probabilities of a binary outcome; variances therefore live in
    [0, 0.25].  ``from_means`` builds the binary-consistent variant where
    every variance equals mu * (1 - mu) exactly.
    """

    mu_t: np.ndarray
    mu_c: np.ndarray
    var_t: np.ndarray
    var_c: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("mu_t", "mu_c", "var_t", "var_c"):
            arr = _frozen_array(getattr(self, name))
            if arr.ndim != 1:
                raise ValueError(f"{name} must be one-dimensional")
            arrays[name] = arr
            object.__setattr__(self, name, arr)
        k = arrays["mu_t"].shape[0]
        if any(a.shape[0] != k for a in arrays.values()):
            raise ValueError("moment arrays must share one length")
        for name in ("mu_t", "mu_c"):
            a = arrays[name]
            if not np.all(np.isfinite(a)) or np.any(a < 0) or np.any(a > 1):
                raise ValueError(f"{name} entries must be probabilities in [0, 1]")
        for name in ("var_t", "var_c"):
            a = arrays[name]
            if not np.all(np.isfinite(a)) or np.any(a < 0) or np.any(a > 0.25 + 1e-12):
                raise ValueError(f"{name} entries must lie in [0, 0.25]")

    @property
    def n_strata(self) -> int:
        return self.mu_t.shape[0]

    @property
    def is_binary_consistent(self) -> bool:
        return bool(
            np.allclose(self.var_t, self.mu_t * (1 - self.mu_t), atol=1e-12)
            and np.allclose(self.var_c, self.mu_c * (1 - self.mu_c), atol=1e-12)
        )

    @classmethod
    def from_means(cls, mu_t, mu_c) -> "StratumMoments":
        mu_t = np.asarray(mu_t, dtype=float)
        mu_c = np.asarray(mu_c, dtype=float)
        return cls(mu_t, mu_c, mu_t * (1 - mu_t), mu_c * (1 - mu_c))

    def variances(self) -> np.ndarray:
        """Variances as a (K, 2) array, arm order (t, c)."""
        return np.column_stack([self.var_t, self.var_c])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stratum", "mu_t", "mu_c", "var_t", "var_c"])
            for k in range(self.n_strata):
                writer.writerow(
                    [k + 1]
                    + [repr(float(v)) for v in (self.mu_t[k], self.mu_c[k], self.var_t[k], self.var_c[k])]
                )

    @classmethod
    def from_csv(cls, path) -> "StratumMoments":
        rows = _read_csv_rows(path, ["stratum", "mu_t", "mu_c", "var_t", "var_c"])
        rows.sort(key=lambda r: int(r["stratum"]))
        _check_contiguous_strata([int(r["stratum"]) for r in rows], path)
        cols = {name: [float(r[name]) for r in rows] for name in ("mu_t", "mu_c", "var_t", "var_c")}
        return cls(**cols)


@dataclass(frozen=True, eq=False)
class DiagonalCovariance:
    """Diagonal covariance of the per-stratum trial estimates.

    Entries must be positive and finite.  Estimation from small binary
    samples can legitimately produce zero sample variances; construct those
    with ``allow_zero=True`` and check ``is_degenerate`` before handing the
    covariance to the risk engine, which rejects degenerate inputs.
    """

    diag: np.ndarray
    allow_zero: bool = field(default=False, compare=False)

    def __post_init__(self):
        diag = _frozen_array(self.diag)
        object.__setattr__(self, "diag", diag)
        if diag.ndim != 1 or diag.shape[0] == 0:
            raise ValueError("diag must be a nonempty vector")
        if not np.all(np.isfinite(diag)):
            raise ValueError("covariance entries must be finite")
        if np.any(diag < 0):
            raise ValueError("covariance entries must be nonnegative")
        if not self.allow_zero and np.any(diag == 0):
            raise DegenerateMomentsError("covariance entries must be strictly positive")

    @property
    def n_strata(self) -> int:
        return self.diag.shape[0]

    @property
    def is_degenerate(self) -> bool:
        return bool(np.any(self.diag == 0))


def as_diag(sigma) -> np.ndarray:
    """Coerce a DiagonalCovariance or plain vector to a float array."""
    if isinstance(sigma, DiagonalCovariance):
        return sigma.diag
    arr = np.asarray(sigma, dtype=float)
    if arr.ndim != 1:
        raise ValueError("expected a one-dimensional covariance diagonal")
    return arr


@dataclass(frozen=True)
class GuardrailConfig:
    """Switches and tolerances for design guardrails.

    ``ss_min`` is the floor applied to every (stratum, arm) cell.  ``delta_d``
    bounds how much a candidate design may inflate the trial-only risk
    relative to the baseline design before it is rejected.  The two
    ``"robust"`` modes additionally require sensitivity bounds.
    """

    ss_min: int = 1
    delta_d: float = 2.0
    detachability: str = "off"
    risk_reduction: str = "off"
    baseline_rule: str = "neyman"

    def __post_init__(self):
        if int(self.ss_min) != self.ss_min or self.ss_min < 1:
            raise ValueError("ss_min must be an integer >= 1")
        object.__setattr__(self, "ss_min", int(self.ss_min))
        if not (np.isfinite(self.delta_d) and self.delta_d >= 1):
            raise ValueError("delta_d must be a finite real >= 1")
        for name in ("detachability", "risk_reduction"):
            if getattr(self, name) not in ("off", "point", "robust"):
                raise ValueError(f"{name} must be one of off|point|robust")
        if self.baseline_rule not in ("equal", "neyman"):
            raise ValueError("baseline_rule must be equal|neyman")


def design_covariance(design: Design, moments: StratumMoments) -> DiagonalCovariance:
    """Sampling covariance diagonal of the stratified difference-in-means.

    Entry k equals var_t[k] / n_treated[k] + var_c[k] / n_control[k].

    Raises
    ------
    DegenerateDesignError
        If any cell count is zero.
    DegenerateMomentsError
        If both arm variances vanish in some stratum, which would make the
        corresponding diagonal entry zero.
    """
    if design.n_strata != moments.n_strata:
        raise ValueError("design and moments cover different numbers of strata")
    nt = np.asarray(design.treated, dtype=float)
    nc = np.asarray(design.control, dtype=float)
    if np.any(nt < 1) or np.any(nc < 1):
        raise DegenerateDesignError("risk evaluation needs every cell count >= 1")
    diag = moments.var_t / nt + moments.var_c / nc
    return DiagonalCovariance(diag)


def l2_risk_of_unbiased(sigma) -> float:
    """Per-stratum-normalized risk of the unbiased trial estimator, tr(cov)/K."""
    diag = as_diag(sigma)
    return float(diag.mean())


def _read_csv_rows(path, required: list[str]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise ValueError(f"{path}: missing required columns: {', '.join(missing)}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows


def _check_contiguous_strata(labels: list[int], path) -> None:
    if labels != list(range(1, len(labels) + 1)):
        raise ValueError(f"{path}: stratum labels must be contiguous 1..K")
