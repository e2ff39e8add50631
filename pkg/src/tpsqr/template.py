"""Template parameterization: type intercepts plus directed pair x lag-window coefficients.

Coefficients are flattened row-major over (source type, target type, lag
window), so ``pair_index(k, k2, l)`` is ``((k-1)*p + (k2-1))*L + (l-1)``.
This ordinal is what the design matrix columns and the JSON dump use.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .event_data import LagWindows, SubjectSequence


def pair_index(k: int, k2: int, l: int, p: int, L: int) -> int:
    """Column ordinal of the coefficient for source ``k``, target ``k2``, window ``l`` (all 1-based)."""
    if not (1 <= k <= p and 1 <= k2 <= p):
        raise IndexError(f"event types ({k}, {k2}) outside 1..{p}")
    if not 1 <= l <= L:
        raise IndexError(f"lag window {l} outside 1..{L}")
    return ((k - 1) * p + (k2 - 1)) * L + (l - 1)


def pair_from_index(idx: int, p: int, L: int) -> tuple[int, int, int]:
    """Inverse of :func:`pair_index`."""
    if not 0 <= idx < p * p * L:
        raise IndexError(f"ordinal {idx} outside 0..{p * p * L - 1}")
    pair, l0 = divmod(idx, L)
    k0, k20 = divmod(pair, p)
    return k0 + 1, k20 + 1, l0 + 1


@dataclass(frozen=True)
class Template:
    """Shared parameters from which every subject's PSQR is built.

    Attributes
    ----------
    windows : LagWindows
    omega : ndarray, shape (p,)
        Per-type intercepts. ``-inf`` marks a type whose responses are all zero.
    w : ndarray, shape (p, p, L)
        ``w[k-1, k2-1, l-1]`` is the effect of a type-``k`` span on a later
        type-``k2`` span whose lag falls in window ``l``.
    """

    windows: LagWindows
    omega: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        w = np.asarray(self.w, dtype=float)
        p = omega.shape[0]
        if omega.ndim != 1 or w.shape != (p, p, self.windows.L):
            raise ValueError(
                f"template dimensions inconsistent: omega {omega.shape}, w {w.shape}, L={self.windows.L}"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("coefficients must be finite")
        if np.any(np.isnan(omega)) or np.any(omega == np.inf):
            raise ValueError("intercepts must be finite or -inf")
        omega.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "w", w)

    @classmethod
    def zeros(cls, p: int, windows: LagWindows) -> "Template":
        return cls(windows, np.zeros(p), np.zeros((p, p, windows.L)))

    @classmethod
    def from_flat(cls, windows: LagWindows, omega, coef) -> "Template":
        p = len(omega)
        return cls(windows, omega, np.asarray(coef, dtype=float).reshape(p, p, windows.L))

    @property
    def p(self) -> int:
        return self.omega.shape[0]

    @property
    def L(self) -> int:
        return self.windows.L

    @property
    def coef(self) -> np.ndarray:
        """Flattened coefficients in :func:`pair_index` order."""
        return self.w.reshape(-1)

    def active_set(self) -> list[tuple[int, int, int]]:
        return [pair_from_index(int(i), self.p, self.L) for i in np.flatnonzero(self.coef)]

    def to_dict(self) -> dict:
        entries = [
            [k, k2, l, float(self.w[k - 1, k2 - 1, l - 1])] for k, k2, l in self.active_set()
        ]
        return {
            "p": self.p,
            "L": self.L,
            "thresholds": list(self.windows.thresholds),
            "omega": [float(v) if math.isfinite(v) else None for v in self.omega],
            "w": entries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Template":
        p, L = int(d["p"]), int(d["L"])
        windows = LagWindows(tuple(d["thresholds"]))
        if windows.L != L:
            raise ValueError(f"L={L} disagrees with {len(d['thresholds'])} thresholds")
        omega = np.array([-np.inf if v is None else float(v) for v in d["omega"]])
        if omega.shape != (p,):
            raise ValueError(f"omega has {omega.shape[0]} entries, expected p={p}")
        w = np.zeros((p, p, L))
        for k, k2, l, value in d["w"]:
            pair_index(int(k), int(k2), int(l), p, L)
            w[int(k) - 1, int(k2) - 1, int(l) - 1] = float(value)
        return cls(windows, omega, w)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "Template":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def build_theta(
    template: Template, seq: SubjectSequence, windows: LagWindows | None = None
) -> np.ndarray:
    """Symmetric parameter matrix of one subject's PSQR.

    The diagonal holds the intercept of each span's type; entry ``(j, j2)``
    for ``j < j2`` is ``w[o_j, o_j2] . phi(t_j2 - t_j)``, mirrored below the
    diagonal.
    """
    windows = template.windows if windows is None else windows
    if windows.L != template.L:
        raise ValueError(f"windows have L={windows.L}, template has L={template.L}")
    n = len(seq)
    types = seq.types
    if n and (types.min() < 1 or types.max() > template.p):
        raise ValueError(f"subject {seq.subject_id}: event type outside 1..{template.p}")
    times = seq.times
    theta = np.zeros((n, n))
    theta[np.arange(n), np.arange(n)] = template.omega[types - 1]
    for j in range(n):
        for j2 in range(j + 1, n):
            l = windows.window_of(abs(times[j2] - times[j]))
            if l >= 0:
                v = template.w[types[j] - 1, types[j2] - 1, l]
                theta[j, j2] = v
                theta[j2, j] = v
    return theta
