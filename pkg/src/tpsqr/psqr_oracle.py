"""Exact (truncated) Poisson square root graphical models and a Gibbs sampler.

A PSQR over ``x in N^p`` with symmetric parameter matrix ``theta`` has

    log P(x) = sum_j theta_jj sqrt(x_j) + sum_{j<k} theta_jk sqrt(x_j x_k)
               - sum_j log(x_j!) - A(theta).

All sums over ``N^p`` are truncated to ``{0..x_max}^p``; the mass on the
outermost shell is measured and must stay below a tolerance, so the
truncation error is certified rather than assumed.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit
from scipy.special import gammaln, logsumexp

MAX_STATES = 10**7


class TailMassError(ArithmeticError):
    """Probability mass at the truncation boundary exceeds the tolerance."""


@dataclass(frozen=True)
class TruncationConfig:
    """Support ``{0..x_max}`` per coordinate.

    ``tail_tol`` bounds the mass fraction allowed on the outermost shell;
    ``None`` treats the truncated distribution as the exact object and skips
    the check (used for deliberately small enumerable supports).
    """

    x_max: int = 30
    tail_tol: float | None = 1e-10

    def __post_init__(self):
        if self.x_max < 1:
            raise ValueError("x_max must be >= 1")


class PsqrModel:
    """Symmetric PSQR parameter matrix with a construction-time tail check.

    The check bounds every conditional's natural parameter from above by
    ``theta_jj + sqrt(x_max) * sum_k max(theta_jk, 0)`` and requires the
    conditional at that bound to put less than ``tail_tol`` on ``x_max``.
    Since the boundary mass grows with the natural parameter, this covers
    every conditional the sampler can meet.
    """

    def __init__(self, theta, x_max: int = 30, tail_tol: float | None = 1e-12):
        theta = np.array(theta, dtype=float)
        if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
            raise ValueError(f"theta must be square, got shape {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        if not np.array_equal(theta, theta.T):
            raise ValueError("theta must be symmetric")
        theta.setflags(write=False)
        self.theta = theta
        if tail_tol is not None:
            worst = self.worst_tail_mass(x_max)
            if worst >= tail_tol:
                raise TailMassError(
                    f"conditional mass at x_max={x_max} can reach {worst:.3g} (tolerance {tail_tol:g})"
                )

    @property
    def p(self) -> int:
        return self.theta.shape[0]

    def worst_tail_mass(self, x_max: int) -> float:
        off = self.theta - np.diag(np.diag(self.theta))
        eta = np.diag(self.theta) + np.sqrt(x_max) * np.clip(off, 0.0, None).sum(axis=1)
        return float(max(_boundary_mass(e, x_max) for e in eta))

    def to_dict(self) -> dict:
        return {"p": self.p, "theta": self.theta.tolist()}

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path, **kwargs) -> "PsqrModel":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh)["theta"], **kwargs)

    def edges(self) -> set[tuple[int, int]]:
        p = self.p
        return {(a, b) for a in range(p) for b in range(a + 1, p) if self.theta[a, b] != 0}


def _log_weights(eta: float, x_max: int) -> np.ndarray:
    x = np.arange(x_max + 1)
    return eta * np.sqrt(x) - gammaln(x + 1.0)


def _boundary_mass(eta: float, x_max: int) -> float:
    lw = _log_weights(eta, x_max)
    return float(np.exp(lw[-1] - logsumexp(lw)))


def _energies(theta: np.ndarray, states: np.ndarray) -> np.ndarray:
    s = np.sqrt(states)
    diag = np.diag(theta)
    off = theta - np.diag(diag)
    return s @ diag + 0.5 * np.einsum("ij,jk,ik->i", s, off, s) - gammaln(states + 1.0).sum(axis=1)


def _state_chunks(p: int, x_max: int, chunk: int = 200_000):
    """Yield blocks of the enumerated support ``{0..x_max}^p`` in lexicographic order."""
    total = (x_max + 1) ** p
    base = x_max + 1
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        digits = np.empty((idx.size, p), dtype=np.int64)
        rem = idx
        for j in range(p - 1, -1, -1):
            rem, digits[:, j] = np.divmod(rem, base)
        yield digits


def _check_states(p: int, x_max: int) -> None:
    if (x_max + 1) ** p > MAX_STATES:
        raise ValueError(f"(x_max+1)^p = {(x_max + 1) ** p} states exceeds the guard {MAX_STATES}")


def log_partition(model: PsqrModel, trunc: TruncationConfig = TruncationConfig()) -> float:
    """Log-normalizer of the truncated joint.

    Raises
    ------
    TailMassError
        If the states with some coordinate at ``x_max`` carry a mass fraction
        of at least ``trunc.tail_tol``.
    """
    p, x_max = model.p, trunc.x_max
    _check_states(p, x_max)
    total_parts, shell_parts = [], []
    for states in _state_chunks(p, x_max):
        e = _energies(model.theta, states)
        total_parts.append(logsumexp(e))
        on_shell = (states == x_max).any(axis=1)
        if on_shell.any():
            shell_parts.append(logsumexp(e[on_shell]))
    log_z = float(logsumexp(total_parts))
    if trunc.tail_tol is not None and shell_parts:
        frac = float(np.exp(logsumexp(shell_parts) - log_z))
        if frac >= trunc.tail_tol:
            raise TailMassError(f"outer-shell mass fraction {frac:.3g} >= {trunc.tail_tol:g} at x_max={x_max}")
    return log_z


def joint_pmf(model: PsqrModel, trunc: TruncationConfig = TruncationConfig()) -> np.ndarray:
    """Full table of the truncated joint, shape ``(x_max+1,) * p``."""
    p, x_max = model.p, trunc.x_max
    _check_states(p, x_max)
    log_z = log_partition(model, trunc)
    e = np.concatenate([_energies(model.theta, s) for s in _state_chunks(p, x_max)])
    return np.exp(e - log_z).reshape((x_max + 1,) * p)


def conditional_pmf(
    model: PsqrModel, j: int, x_others, trunc: TruncationConfig = TruncationConfig()
) -> np.ndarray:
    """``P(x_j = . | x_-j)`` over ``{0..x_max}``.

    ``x_others`` lists the remaining coordinates in their natural order
    (length ``p - 1``). The conditional is an exponential family in
    ``sqrt(x_j)`` with natural parameter ``theta_jj + theta_j,-j . sqrt(x_-j)``.
    """
    p = model.p
    x_others = np.asarray(x_others, dtype=float)
    if x_others.shape != (p - 1,):
        raise ValueError(f"x_others must have length {p - 1}")
    if np.any(x_others < 0):
        raise ValueError("counts must be nonnegative")
    others = np.delete(np.arange(p), j)
    eta = model.theta[j, j] + model.theta[j, others] @ np.sqrt(x_others)
    lw = _log_weights(eta, trunc.x_max)
    probs = np.exp(lw - logsumexp(lw))
    if trunc.tail_tol is not None and probs[-1] >= trunc.tail_tol:
        raise TailMassError(
            f"conditional of coordinate {j} puts {probs[-1]:.3g} on x_max={trunc.x_max}"
        )
    return probs


@njit(cache=True)
def _gibbs_kernel(theta, x_max, n_keep, burn_in, thin, uniforms, tail_tol):
    p = theta.shape[0]
    K = x_max + 1
    sq = np.sqrt(np.arange(K).astype(np.float64))
    lfact = np.zeros(K)
    for k in range(1, K):
        lfact[k] = lfact[k - 1] + np.log(k)
    x = np.zeros(p, dtype=np.int64)
    out = np.zeros((n_keep, p), dtype=np.int64)
    lw = np.zeros(K)
    cdf = np.zeros(K)
    u_pos = 0
    total_sweeps = burn_in + n_keep * thin
    kept = 0
    for sweep in range(total_sweeps):
        for j in range(p):
            eta = theta[j, j]
            for k in range(p):
                if k != j:
                    eta += theta[j, k] * sq[x[k]]
            m = -np.inf
            for v in range(K):
                lw[v] = eta * sq[v] - lfact[v]
                if lw[v] > m:
                    m = lw[v]
            acc = 0.0
            for v in range(K):
                acc += np.exp(lw[v] - m)
                cdf[v] = acc
            if tail_tol > 0.0 and (cdf[K - 1] - cdf[K - 2]) / acc >= tail_tol:
                return out, sweep, j
            target = uniforms[u_pos] * acc
            u_pos += 1
            v = 0
            while v < K - 1 and cdf[v] <= target:
                v += 1
            x[j] = v
        if sweep >= burn_in and (sweep - burn_in) % thin == thin - 1:
            out[kept, :] = x
            kept += 1
    return out, -1, -1


def gibbs_sample(
    model: PsqrModel,
    n_samples: int,
    burn_in: int = 500,
    thin: int = 1,
    trunc: TruncationConfig = TruncationConfig(),
    seed: int = 0,
) -> np.ndarray:
    """Systematic-scan Gibbs draws from the truncated PSQR.

    Starts at the zero vector, discards ``burn_in`` sweeps, then keeps every
    ``thin``-th sweep. Returns an ``(n_samples, p)`` integer array; identical
    seeds give identical arrays.
    """
    if n_samples < 0 or burn_in < 0 or thin < 1:
        raise ValueError("need n_samples >= 0, burn_in >= 0, thin >= 1")
    rng = np.random.default_rng(seed)
    total = (burn_in + n_samples * thin) * model.p
    uniforms = rng.random(total)
    tail = -1.0 if trunc.tail_tol is None else float(trunc.tail_tol)
    out, bad_sweep, bad_j = _gibbs_kernel(
        np.ascontiguousarray(model.theta), trunc.x_max, n_samples, burn_in, thin, uniforms, tail
    )
    if bad_sweep >= 0:
        raise TailMassError(
            f"Gibbs sweep {bad_sweep}: conditional of coordinate {bad_j} exceeds tail tolerance at x_max={trunc.x_max}"
        )
    return out


def autocorrelation(samples: np.ndarray, lags=(1, 5, 10)) -> dict[int, list[float]]:
    """Lag-k autocorrelation of each coordinate (mixing diagnostic, not a test)."""
    samples = np.asarray(samples, dtype=float)
    centered = samples - samples.mean(axis=0)
    var = (centered**2).mean(axis=0)
    out = {}
    for k in lags:
        if k >= samples.shape[0]:
            continue
        cov = (centered[:-k] * centered[k:]).mean(axis=0)
        out[int(k)] = [float(c / v) if v > 0 else 0.0 for c, v in zip(cov, var)]
    return out


def random_sparse_model(
    p: int,
    edge_count: int,
    rng: np.random.Generator,
    magnitude=(0.2, 0.5),
    diagonal=(-0.5, 0.5),
    x_max: int = 30,
    max_tries: int = 1000,
) -> PsqrModel:
    """Random sparse symmetric model: ``edge_count`` edges with magnitudes in
    ``magnitude`` and random signs, diagonal uniform on ``diagonal``.

    Draws failing the tail check are rejected and redrawn.
    """
    pairs = list(itertools.combinations(range(p), 2))
    if not 0 <= edge_count <= len(pairs):
        raise ValueError(f"edge_count must lie in 0..{len(pairs)}")
    for _ in range(max_tries):
        theta = np.diag(rng.uniform(*diagonal, size=p))
        chosen = rng.choice(len(pairs), size=edge_count, replace=False)
        for e in np.sort(chosen):
            a, b = pairs[e]
            v = rng.uniform(*magnitude) * rng.choice((-1.0, 1.0))
            theta[a, b] = theta[b, a] = v
        try:
            return PsqrModel(theta, x_max=x_max)
        except TailMassError:
            continue
    raise TailMassError(f"no admissible model after {max_tries} draws")


def write_samples_csv(path: str | Path, samples: np.ndarray) -> None:
    samples = np.asarray(samples)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(f"x{j + 1}" for j in range(samples.shape[1])) + "\n")
        for row in samples:
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def read_samples_csv(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
