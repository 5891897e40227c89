"""Constrained, row-sparse least squares for the one-step traffic model.

Solves

    minimize    1/2 ||Y - W X||_F^2 + rho * sum_i ||W[i, :]||_2
    subject to  W[eq_mask] = 0,  W[sign_mask > 0] >= 0,  W[sign_mask < 0] <= 0

for W = [A B] (4 x 8) by ADMM on the split W = Z. The W-step is a ridge-type
linear solve; the Z-step is the exact proximal map of the row penalty plus the
mask constraints, which for coordinate-wise constraints is the entrywise
projection followed by row shrinkage.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import (
    N_INPUTS,
    N_STATES,
    STATE_NAMES,
    ConvergenceError,
    DynamicsModel,
    InsufficientDataError,
    InvalidParameterError,
    NoiseModel,
    default_eq_mask,
    default_sign_mask,
)
from .ingest import RegressionDataset

N_FEATURES = N_STATES + N_INPUTS
RIDGE = 1e-8
PERCENTILES = np.arange(1, 100)

# Histogram edges per state: flows in 5-vehicle bins over +/-100, speeds in
# 0.5 km/h bins over +/-15.
FLOW_EDGES = np.linspace(-100.0, 100.0, 41)
SPEED_EDGES = np.linspace(-15.0, 15.0, 61)
HIST_EDGES = (FLOW_EDGES, SPEED_EDGES, FLOW_EDGES, SPEED_EDGES)


def row_group_prox(row: np.ndarray, threshold: float) -> np.ndarray:
    """Proximal map of ``threshold * ||.||_2``: shrink the whole row toward zero."""
    if threshold < 0:
        raise InvalidParameterError("threshold must be non-negative")
    row = np.asarray(row, dtype=float)
    norm = np.linalg.norm(row)
    if norm <= threshold:
        return np.zeros_like(row)
    return (1.0 - threshold / norm) * row


def project_masks(w: np.ndarray, eq_mask: np.ndarray, sign_mask: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the mask constraints (entrywise, exact)."""
    out = np.array(w, dtype=float, copy=True)
    out[eq_mask] = 0.0
    pos = sign_mask > 0
    neg = sign_mask < 0
    out[pos] = np.maximum(out[pos], 0.0)
    out[neg] = np.minimum(out[neg], 0.0)
    return out


def objective(w: np.ndarray, x: np.ndarray, y: np.ndarray, rho: float) -> float:
    resid = y - w @ x
    return 0.5 * float(np.sum(resid * resid)) + rho * float(np.linalg.norm(w, axis=1).sum())


@dataclass(frozen=True, eq=False)
class FitConfig:
    rho: float = 0.1
    max_iters: int = 5000
    abs_tol: float = 1e-6
    rel_tol: float = 1e-4
    admm_penalty: float = 1.0
    eq_mask: np.ndarray = field(default_factory=default_eq_mask)
    sign_mask: np.ndarray = field(default_factory=default_sign_mask)

    def __post_init__(self) -> None:
        if not self.rho >= 0:
            raise InvalidParameterError(f"rho must be non-negative, got {self.rho!r}")
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise InvalidParameterError("tolerances must be positive")
        if not self.admm_penalty > 0:
            raise InvalidParameterError("admm_penalty must be positive")
        if self.max_iters < 1:
            raise InvalidParameterError("max_iters must be at least 1")
        eq = np.asarray(self.eq_mask, dtype=bool)
        sign = np.asarray(self.sign_mask, dtype=np.int8)
        if eq.shape != (N_STATES, N_FEATURES) or sign.shape != (N_STATES, N_FEATURES):
            raise InvalidParameterError("masks must be 4 x 8")
        object.__setattr__(self, "eq_mask", eq)
        object.__setattr__(self, "sign_mask", sign)

    @classmethod
    def unconstrained(cls, **kwargs: Any) -> "FitConfig":
        return cls(
            eq_mask=np.zeros((N_STATES, N_FEATURES), dtype=bool),
            sign_mask=np.zeros((N_STATES, N_FEATURES), dtype=np.int8),
            **kwargs,
        )


@dataclass(frozen=True)
class AdmmResult:
    w: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float
    initial_objective: float
    final_objective: float
    objective_trace: tuple[float, ...] = ()


def _prox(v: np.ndarray, threshold: float, eq_mask: np.ndarray, sign_mask: np.ndarray) -> np.ndarray:
    # exact prox of threshold * l2,1 plus the mask indicator: project, then shrink rows
    return np.vstack([row_group_prox(row, threshold) for row in project_masks(v, eq_mask, sign_mask)])


def admm_fit(x: np.ndarray, y: np.ndarray, config: FitConfig, trace: bool = False) -> AdmmResult:
    """ADMM iterations on column-major data: ``x`` is 8 x N, ``y`` is 4 x N.

    Stops on the usual primal/dual residual test, or as soon as the feasible
    iterate ``z`` passes an optimality test of its own (its proximal-gradient
    step moves it by less than the dual tolerance). The second test matters
    when the fixed penalty is badly scaled for the data: ``z`` can be optimal
    long before ``w`` catches up with it.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n_features, n = x.shape
    if n < n_features:
        raise InsufficientDataError(f"need at least {n_features} columns, got {n}")
    gram = x @ x.T
    if np.linalg.matrix_rank(x) < n_features:
        warnings.warn("regression data are rank deficient; adding a ridge term", RuntimeWarning, stacklevel=2)
        gram = gram + RIDGE * np.eye(n_features)
    cross = y @ x.T
    mu = config.admm_penalty
    system = gram + mu * np.eye(n_features)
    threshold = config.rho / mu
    eq, sign = config.eq_mask, config.sign_mask
    step = 1.0 / max(float(np.linalg.eigvalsh(gram)[-1]), RIDGE)

    w = np.zeros((y.shape[0], n_features))
    z = np.zeros_like(w)
    u = np.zeros_like(w)
    scale = np.sqrt(w.size)
    initial = objective(z, x, y, config.rho)
    history = [initial] if trace else []
    r_norm = s_norm = np.inf
    for it in range(1, config.max_iters + 1):
        w = np.linalg.solve(system, (cross + mu * (z - u)).T).T
        z_old = z
        z = _prox(w + u, threshold, eq, sign)
        u = u + w - z
        r_norm = float(np.linalg.norm(w - z))
        s_norm = float(mu * np.linalg.norm(z - z_old))
        if trace:
            history.append(objective(z, x, y, config.rho))
        eps_pri = scale * config.abs_tol + config.rel_tol * max(np.linalg.norm(w), np.linalg.norm(z))
        eps_dual = scale * config.abs_tol + config.rel_tol * mu * np.linalg.norm(u)
        if r_norm <= eps_pri and s_norm <= eps_dual:
            break
        grad = z @ gram - cross
        kkt = float(np.linalg.norm(z - _prox(z - step * grad, step * config.rho, eq, sign))) / step
        if kkt <= eps_dual:
            break
    else:
        raise ConvergenceError(
            f"ADMM did not converge in {config.max_iters} iterations "
            f"(primal {r_norm:.3g}, dual {s_norm:.3g})",
            r_norm,
            s_norm,
            config.max_iters,
        )
    # z is feasible by construction; the final projection pins masked entries to exact zeros
    z = project_masks(z, eq, sign)
    return AdmmResult(z, it, r_norm, s_norm, initial, objective(z, x, y, config.rho), tuple(history))


class GroupSparseDynamicsRegressor(RegressorMixin, BaseEstimator):
    """Multi-output linear regressor ``y = coef_ @ x`` with an l2,1 row penalty
    and entrywise structural masks.

    Follows the scikit-learn layout: ``X`` is (n_samples, 8) with columns
    (df, ds, af, as, td, ta, dv, av) and ``y`` is (n_samples, 4). ``coef_`` is
    (4, 8), i.e. ``[A B]``. Masks default to the package's traffic masks; pass
    all-zero arrays to fit without constraints.
    """

    def __init__(
        self,
        rho: float = 0.1,
        max_iters: int = 5000,
        abs_tol: float = 1e-6,
        rel_tol: float = 1e-4,
        admm_penalty: float = 1.0,
        eq_mask: np.ndarray | None = None,
        sign_mask: np.ndarray | None = None,
    ):
        self.rho = rho
        self.max_iters = max_iters
        self.abs_tol = abs_tol
        self.rel_tol = rel_tol
        self.admm_penalty = admm_penalty
        self.eq_mask = eq_mask
        self.sign_mask = sign_mask

    def _config(self) -> FitConfig:
        return FitConfig(
            rho=self.rho,
            max_iters=self.max_iters,
            abs_tol=self.abs_tol,
            rel_tol=self.rel_tol,
            admm_penalty=self.admm_penalty,
            eq_mask=default_eq_mask() if self.eq_mask is None else self.eq_mask,
            sign_mask=default_sign_mask() if self.sign_mask is None else self.sign_mask,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        if X.shape[1] != N_FEATURES or y.ndim != 2 or y.shape[1] != N_STATES:
            raise InvalidParameterError(f"expected X with {N_FEATURES} columns and y with {N_STATES}")
        result = admm_fit(X.T, y.T, self._config())
        self.coef_ = result.w
        self.n_iter_ = result.iterations
        self.primal_residual_ = result.primal_residual
        self.dual_residual_ = result.dual_residual
        self.objective_ = result.final_objective
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_array(X)
        return X @ self.coef_.T


@dataclass(frozen=True, eq=False)
class FitReport:
    """Validation error statistics plus solver diagnostics.

    ``percentiles`` has one row per percentile in ``PERCENTILES`` (1..99) and one
    column per state.
    """

    mae: tuple[float, ...] = ()
    rmse: tuple[float, ...] = ()
    hist_edges: tuple[tuple[float, ...], ...] = ()
    hist_counts: tuple[tuple[int, ...], ...] = ()
    hist_outside: tuple[int, ...] = ()
    percentiles: np.ndarray | None = None
    n_validation: int = 0
    iterations: int = 0
    primal_residual: float = float("nan")
    dual_residual: float = float("nan")

    def percentile(self, pct: float) -> np.ndarray:
        if self.percentiles is None:
            raise InvalidParameterError("report carries no residual percentiles")
        matches = np.flatnonzero(PERCENTILES == pct)
        if len(matches) == 0:
            raise InvalidParameterError(f"percentile {pct} not tabulated; use an integer in 1..99")
        return self.percentiles[matches[0]]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "iterations": self.iterations,
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "n_validation": self.n_validation,
        }
        if self.mae:
            out["mae"] = dict(zip(STATE_NAMES, self.mae))
            out["rmse"] = dict(zip(STATE_NAMES, self.rmse))
            out["histograms"] = {
                name: {"edges": list(edges), "counts": list(counts), "outside": outside}
                for name, edges, counts, outside in zip(STATE_NAMES, self.hist_edges, self.hist_counts, self.hist_outside)
            }
        if self.percentiles is not None:
            out["percentiles"] = {
                "levels": PERCENTILES.tolist(),
                **{name: self.percentiles[:, i].tolist() for i, name in enumerate(STATE_NAMES)},
            }
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FitReport":
        def residual(key: str) -> float:
            # JSON stores an unknown residual as null
            value = data.get(key)
            return float("nan") if value is None else float(value)

        kwargs: dict[str, Any] = {
            "iterations": int(data.get("iterations", 0)),
            "primal_residual": residual("primal_residual"),
            "dual_residual": residual("dual_residual"),
            "n_validation": int(data.get("n_validation", 0)),
        }
        if "mae" in data:
            kwargs["mae"] = tuple(float(data["mae"][n]) for n in STATE_NAMES)
            kwargs["rmse"] = tuple(float(data["rmse"][n]) for n in STATE_NAMES)
            hist = data["histograms"]
            kwargs["hist_edges"] = tuple(tuple(hist[n]["edges"]) for n in STATE_NAMES)
            kwargs["hist_counts"] = tuple(tuple(hist[n]["counts"]) for n in STATE_NAMES)
            kwargs["hist_outside"] = tuple(int(hist[n]["outside"]) for n in STATE_NAMES)
        if "percentiles" in data:
            kwargs["percentiles"] = np.column_stack([data["percentiles"][n] for n in STATE_NAMES])
        return cls(**kwargs)


def fit(train: RegressionDataset, config: FitConfig | None = None) -> DynamicsModel:
    """Estimate ``[A B]`` from the training transitions."""
    config = config or FitConfig()
    result = admm_fit(train.x_prime, train.y, config)
    report = FitReport(
        iterations=result.iterations,
        primal_residual=result.primal_residual,
        dual_residual=result.dual_residual,
    )
    return DynamicsModel(
        a=result.w[:, :N_STATES],
        b=result.w[:, N_STATES:],
        eq_mask=config.eq_mask,
        sign_mask=config.sign_mask,
        volume_scale=train.volume_scale,
        fit_report=report,
    )


def residual_report(residuals: np.ndarray, base: FitReport | None = None) -> FitReport:
    """Error statistics of a (4, N) residual matrix."""
    residuals = np.asarray(residuals, dtype=float).reshape(N_STATES, -1)
    if residuals.shape[1] == 0:
        raise InsufficientDataError("no residuals to summarize")
    counts, outside = [], []
    for i in range(N_STATES):
        c, _ = np.histogram(residuals[i], bins=HIST_EDGES[i])
        counts.append(tuple(int(v) for v in c))
        outside.append(int(residuals.shape[1] - c.sum()))
    base = base or FitReport()
    return replace(
        base,
        mae=tuple(float(v) for v in np.mean(np.abs(residuals), axis=1)),
        rmse=tuple(float(v) for v in np.sqrt(np.mean(residuals * residuals, axis=1))),
        hist_edges=tuple(tuple(float(e) for e in edges) for edges in HIST_EDGES),
        hist_counts=tuple(counts),
        hist_outside=tuple(outside),
        percentiles=np.percentile(residuals, PERCENTILES, axis=1),
        n_validation=residuals.shape[1],
    )


def evaluate(model: DynamicsModel, validation: RegressionDataset) -> FitReport:
    """One-step prediction errors ``y - [A B] x'`` on held-out transitions."""
    if len(validation) == 0:
        raise InsufficientDataError("validation set is empty")
    residuals = validation.y - model.a_prime @ validation.x_prime
    base = model.fit_report if isinstance(model.fit_report, FitReport) else None
    return residual_report(residuals, base)


def calibrate_noise(report: FitReport, low_pct: float = 10, high_pct: float = 90, seed: int = 0) -> NoiseModel:
    """Uniform noise bounds from a pair of residual percentiles."""
    if not low_pct < high_pct:
        raise InvalidParameterError("low_pct must be below high_pct")
    lo = report.percentile(low_pct)
    hi = report.percentile(high_pct)
    for name, l, h in zip(STATE_NAMES, lo, hi):
        if l > 0 or h < 0:
            raise CalibrationError(f"{name} residuals do not straddle zero: ({l:.4g}, {h:.4g})")
    return NoiseModel(tuple(float(v) for v in lo), tuple(float(v) for v in hi), seed)


class CalibrationError(InvalidParameterError):
    pass
