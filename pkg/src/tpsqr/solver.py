"""l1-penalized Poisson pseudo-likelihood: proximal Newton with coordinate descent.

The minimized objective is

    F(b, w) + lam * |w|_1,   F = (1/M) sum_r [ -eta_r y_r + exp(eta_r) ],
    eta_r = b[g_r] + X_r . w,

with one unpenalized intercept ``b`` per row group. Intercepts are profiled
in closed form, ``b_g = log(sum_g y / sum_g exp(X w))``; a group whose
responses are all zero has ``b_g = -inf`` and drops out of the objective.
The linear predictor is clamped to ``[-ETA_CLAMP, ETA_CLAMP]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from ._cd import cd_sweeps
from .design import DesignProblem, lambda_max
from .event_data import LagWindows
from .template import Template

log = logging.getLogger(__name__)

ETA_CLAMP = 30.0


class NonConvergenceError(RuntimeError):
    """Raised when the solver cannot make progress; ``iterate`` holds the last (b, w)."""

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


@dataclass(frozen=True)
class FitConfig:
    lam: float = 0.0
    tol: float = 1e-7
    max_outer: int = 100
    max_inner: int = 1000
    penalize_intercepts: bool = False

    def __post_init__(self):
        if self.lam < 0 or not np.isfinite(self.lam):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.penalize_intercepts:
            raise ValueError("intercepts are never penalized")


@dataclass
class FitResult:
    lam: float
    intercepts: np.ndarray
    coef: np.ndarray
    objective: float
    loglik: float
    aic: float
    n_params: int
    iterations: int
    converged: bool
    kkt_residual: float
    problem_meta: dict = field(default_factory=dict, repr=False)

    @property
    def active_set(self) -> np.ndarray:
        return np.flatnonzero(self.coef)

    @property
    def template(self) -> Template:
        """Coefficients as a :class:`Template` (temporal problems only).

        With fixed effects the per-(subject, type) intercepts stay in
        ``intercepts`` and ``omega`` is reported as zeros.
        """
        meta = self.problem_meta
        if "thresholds" not in meta:
            raise ValueError("not a temporal problem")
        windows = LagWindows(tuple(meta["thresholds"]))
        omega = np.zeros(meta["p"]) if meta.get("fixed_effects") else self.intercepts
        return Template.from_flat(windows, omega, self.coef)

    def report(self) -> dict:
        return {
            "lambda": self.lam,
            "loglik": self.loglik,
            "aic": self.aic,
            "n_params": self.n_params,
            "active_set_size": int(self.active_set.size),
            "iterations": self.iterations,
            "converged": self.converged,
            "kkt_residual": self.kkt_residual,
        }


@dataclass
class PathResult:
    lambdas: np.ndarray
    fits: list
    aic: np.ndarray

    def __len__(self) -> int:
        return len(self.fits)

    def report(self) -> dict:
        return {
            "lambdas": [float(v) for v in self.lambdas],
            "aic": [float(v) for v in self.aic],
            "fits": [f.report() for f in self.fits],
        }


# ---------------------------------------------------------------------------
# objective pieces


def _alive_rows(problem: DesignProblem, intercepts: np.ndarray) -> np.ndarray:
    return np.isfinite(intercepts)[problem.groups]


def _linear_predictor(problem, intercepts, coef):
    alive = _alive_rows(problem, intercepts)
    eta = np.where(alive, intercepts[problem.groups], 0.0) + problem.X @ coef + problem.row_offset
    return eta, alive


def objective_and_gradient(problem: DesignProblem, intercepts, coef):
    """Value of F and its gradient with respect to ``(intercepts, coef)``.

    Returns ``(value, grad_intercepts, grad_coef)``. Rows of groups with a
    ``-inf`` intercept contribute nothing. Rows whose linear predictor is
    clamped contribute a constant, so their gradient is zero.
    """
    intercepts = np.asarray(intercepts, dtype=float)
    coef = np.asarray(coef, dtype=float)
    eta, alive = _linear_predictor(problem, intercepts, coef)
    clamped = np.abs(eta) > ETA_CLAMP
    eta = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    mu = np.exp(eta)
    M = problem.M
    value = float(np.sum(np.where(alive, mu - eta * problem.y, 0.0)) / M)
    resid = np.where(alive & ~clamped, mu - problem.y, 0.0)
    grad_b = np.bincount(problem.groups, weights=resid, minlength=problem.n_groups) / M
    grad_w = (problem.X.T @ resid) / M
    return value, grad_b, np.asarray(grad_w).ravel()


def profile_intercepts(problem: DesignProblem, coef) -> np.ndarray:
    """Closed-form optimal group intercepts for fixed coefficients."""
    u = problem.X @ coef + problem.row_offset
    G = problem.n_groups
    ysum = np.bincount(problem.groups, weights=problem.y, minlength=G)
    umax = np.full(G, -np.inf)
    np.maximum.at(umax, problem.groups, u)
    umax[~np.isfinite(umax)] = 0.0
    esum = np.bincount(problem.groups, weights=np.exp(u - umax[problem.groups]), minlength=G)
    out = np.full(G, -np.inf)
    pos = ysum > 0
    out[pos] = np.log(ysum[pos]) - umax[pos] - np.log(esum[pos])
    return out


def poisson_loglik(problem: DesignProblem, intercepts, coef) -> float:
    """Full Poisson log pseudo-likelihood, ``sum y eta - exp(eta) - log y!``."""
    eta, alive = _linear_predictor(problem, intercepts, coef)
    eta = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    y = problem.y
    terms = y * eta - np.exp(eta) - gammaln(y + 1.0)
    return float(np.sum(terms[alive]))


def kkt_residual(problem: DesignProblem, intercepts, coef, lam: float) -> float:
    """Largest violation of the lasso optimality conditions.

    Active coefficients need ``grad_c = -lam * sign(w_c)``, inactive ones
    ``|grad_c| <= lam``; intercept gradients must vanish.
    """
    _, gb, gw = objective_and_gradient(problem, intercepts, coef)
    active = coef != 0
    viol = np.zeros_like(gw)
    viol[active] = np.abs(gw[active] + lam * np.sign(coef[active]))
    viol[~active] = np.maximum(np.abs(gw[~active]) - lam, 0.0)
    worst = float(viol.max()) if viol.size else 0.0
    finite = np.isfinite(intercepts)
    if finite.any():
        worst = max(worst, float(np.abs(gb[finite]).max()))
    return worst


def _n_params(problem: DesignProblem, coef) -> int:
    present = np.unique(problem.groups).size
    return int(np.count_nonzero(coef)) + int(present)


def _result(problem, lam, b, w, iterations, converged) -> FitResult:
    value, _, _ = objective_and_gradient(problem, b, w)
    ll = poisson_loglik(problem, b, w)
    k = _n_params(problem, w)
    return FitResult(
        lam=float(lam),
        intercepts=b,
        coef=w,
        objective=value + lam * float(np.abs(w).sum()),
        loglik=ll,
        aic=2.0 * k - 2.0 * ll,
        n_params=k,
        iterations=iterations,
        converged=converged,
        kkt_residual=kkt_residual(problem, b, w, lam),
        problem_meta=dict(problem.meta),
    )


def null_fit(problem: DesignProblem, lam: float) -> FitResult:
    """Solution for ``lam >= lambda_max``: zero coefficients, log group means."""
    w = np.zeros(problem.n_coef)
    return _result(problem, lam, problem.null_intercepts(), w, 0, True)


# ---------------------------------------------------------------------------
# solver


def fit(problem: DesignProblem, config: FitConfig, warm_start=None, lam_max: float | None = None) -> FitResult:
    """Minimize the penalized Poisson pseudo-likelihood at ``config.lam``.

    Parameters
    ----------
    problem : DesignProblem
    config : FitConfig
    warm_start : FitResult, Template or array, optional
        Starting coefficients. Intercepts are always re-profiled.
    lam_max : float, optional
        Precomputed :func:`lambda_max`, to skip recomputing it along a path.

    Raises
    ------
    NonConvergenceError
        If no step along the Newton direction decreases the objective.
    """
    lam = config.lam
    if problem.M == 0:
        raise ValueError("empty design problem")
    if lam_max is None:
        lam_max = lambda_max(problem)
    if lam >= lam_max:
        return null_fit(problem, lam)

    P = problem.n_coef
    if warm_start is None:
        w = np.zeros(P)
    elif isinstance(warm_start, FitResult):
        w = warm_start.coef.copy()
    elif isinstance(warm_start, Template):
        w = warm_start.coef.copy()
    else:
        w = np.asarray(warm_start, dtype=float).copy()
    if w.shape != (P,):
        raise ValueError(f"warm start has shape {w.shape}, expected ({P},)")

    X = problem.X
    indptr = X.indptr.astype(np.int64)
    indices = X.indices.astype(np.int64)
    data = X.data.astype(np.float64)
    groups = problem.groups
    G = problem.n_groups
    M = problem.M
    y = problem.y

    def penalized(b_, w_):
        return objective_and_gradient(problem, b_, w_)[0] + lam * float(np.abs(w_).sum())

    b = profile_intercepts(problem, w)
    f_old = penalized(b, w)
    inner_tol = (0.1 * config.tol) ** 2
    converged = False
    it = 0
    for it in range(1, config.max_outer + 1):
        eta, alive = _linear_predictor(problem, b, w)
        eta = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
        mu = np.exp(eta)
        v = np.where(alive, mu / M, 0.0)
        resid = np.where(alive, (y - mu) / mu, 0.0)
        dw = np.zeros(P)
        db = np.zeros(G)
        cd_sweeps(indptr, indices, data, groups, G, v, resid, w, dw, db, lam, config.max_inner, inner_tol)
        db[~np.isfinite(b)] = 0.0

        step = 1.0
        for _ in range(40):
            w_new = w + step * dw
            b_new = b + step * db
            f_new = penalized(b_new, w_new)
            if np.isfinite(f_new) and f_new <= f_old + 1e-15 * abs(f_old):
                break
            step *= 0.5
        else:
            if np.max(np.abs(dw), initial=0.0) < config.tol:
                converged = True
                break
            raise NonConvergenceError(
                f"no decrease along the Newton direction at lambda={lam:g} (iteration {it})",
                iterate=(b, w),
            )
        b_new = profile_intercepts(problem, w_new)
        f_new = penalized(b_new, w_new)
        max_change = np.max(np.abs(w_new - w) / (1.0 + np.abs(w_new)), initial=0.0)
        rel = abs(f_old - f_new) / max(abs(f_new), 1.0)
        b, w, f_old = b_new, w_new, f_new
        if rel < config.tol and max_change < config.tol:
            converged = True
            break
    if not converged:
        log.warning("fit at lambda=%g stopped after %d iterations without converging", lam, it)
    return _result(problem, lam, b, w, it, converged)


def lambda_grid(lam_max: float, n_lambdas: int, lambda_min_ratio: float) -> np.ndarray:
    if n_lambdas < 2:
        raise ValueError("n_lambdas must be >= 2")
    if not 0 < lambda_min_ratio < 1:
        raise ValueError("lambda_min_ratio must lie in (0, 1)")
    return lam_max * np.logspace(0.0, np.log10(lambda_min_ratio), n_lambdas)


def fit_path(
    problem: DesignProblem,
    n_lambdas: int = 50,
    lambda_min_ratio: float = 1e-3,
    config: FitConfig = FitConfig(),
) -> PathResult:
    """Warm-started fits on a log-spaced grid from ``lambda_max`` downwards."""
    lam_max = lambda_max(problem)
    if lam_max <= 0:
        raise ValueError("lambda_max is zero: nothing to penalize on this problem")
    lambdas = lambda_grid(lam_max, n_lambdas, lambda_min_ratio)
    fits = []
    prev = None
    for i, lam in enumerate(lambdas):
        cfg = FitConfig(lam=float(lam), tol=config.tol, max_outer=config.max_outer, max_inner=config.max_inner)
        try:
            res = fit(problem, cfg, warm_start=prev, lam_max=lam_max)
        except NonConvergenceError as exc:
            raise NonConvergenceError(f"path point {i} (lambda={lam:g}): {exc}", exc.iterate) from exc
        fits.append(res)
        prev = res
    return PathResult(lambdas=lambdas, fits=fits, aic=np.array([f.aic for f in fits]))


def select_aic(path: PathResult) -> FitResult:
    """Fit with the smallest AIC; ties go to the larger lambda."""
    if not path.fits:
        raise ValueError("empty path")
    aic = np.asarray(path.aic)
    best = np.flatnonzero(aic == aic.min())
    # lambdas decrease along the path, so the first tie is the sparsest
    return path.fits[int(best[0])]
