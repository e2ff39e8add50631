"""Stacked sparse Poisson-regression problems.

Every (subject, span) becomes one row whose response is the span's count and
whose covariates are the counts of the subject's other spans, routed into the
coefficient column of the (earlier type, later type, lag window) triple. A
pair of spans therefore feeds the same column from both of its rows, which is
how the symmetric per-subject parameter matrix ties the two conditionals.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .event_data import LagWindows, SubjectSequence
from .template import pair_from_index

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiscountConfig:
    """Down-weighting of covariates contributed by later spans.

    ``lambda1`` scales the lag thresholds used for later spans, ``lambda2``
    multiplies their covariate values, ``count_offset`` is added to every
    count (response and covariate) when the design is built.
    """

    lambda1: float = 1.0
    lambda2: float = 1.0
    count_offset: int = 0

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.count_offset < 0 or int(self.count_offset) != self.count_offset:
            raise ValueError(f"count_offset must be a nonnegative integer, got {self.count_offset}")


ADR_DISCOUNT = DiscountConfig(lambda1=0.1, lambda2=0.1, count_offset=1)


@dataclass(frozen=True)
class DesignProblem:
    """Rows of a Poisson regression with one unpenalized intercept per row group.

    Attributes
    ----------
    X : scipy.sparse.csc_matrix, shape (M, P)
        Nonnegative covariates; column ``c`` is penalized coefficient ``c``.
    y : ndarray, shape (M,)
    groups : ndarray of int, shape (M,)
        Intercept group of each row.
    group_labels : list
        Label per group: the 1-based event type, or ``(subject_id, type)``
        with fixed effects, or the node index for graph problems.
    kind : {"temporal", "graph"}
    meta : dict
        Build settings (p, L, thresholds, discount, ...).
    offset : ndarray, shape (M,), optional
        Known log-exposure added to every row's linear predictor.
    """

    X: sp.csc_matrix
    y: np.ndarray
    groups: np.ndarray
    group_labels: list
    kind: str = "temporal"
    meta: dict = field(default_factory=dict)
    offset: np.ndarray | None = None

    def __post_init__(self):
        M = self.y.shape[0]
        if self.X.shape[0] != M or self.groups.shape != (M,):
            raise ValueError("row dimensions of X, y and groups disagree")
        if self.offset is not None and np.shape(self.offset) != (M,):
            raise ValueError("offset must have one entry per row")
        if M and (self.groups.min() < 0 or self.groups.max() >= len(self.group_labels)):
            raise ValueError("group ids out of range")

    @property
    def M(self) -> int:
        return self.y.shape[0]

    @property
    def n_coef(self) -> int:
        return self.X.shape[1]

    @property
    def n_groups(self) -> int:
        return len(self.group_labels)

    @property
    def fixed_effects(self) -> bool:
        return bool(self.meta.get("fixed_effects", False))

    def column_label(self, c: int):
        if self.kind == "temporal":
            return pair_from_index(c, self.meta["p"], self.meta["L"])
        return tuple(self.meta["edges"][c])

    def null_intercepts(self) -> np.ndarray:
        """Group intercepts of the model with every coefficient at zero (log group means)."""
        sums = np.bincount(self.groups, weights=self.y, minlength=self.n_groups)
        exposure = np.bincount(self.groups, weights=np.exp(self.row_offset), minlength=self.n_groups)
        out = np.full(self.n_groups, -np.inf)
        pos = sums > 0
        out[pos] = np.log(sums[pos] / exposure[pos])
        return out

    @property
    def row_offset(self) -> np.ndarray:
        return np.zeros(self.M) if self.offset is None else np.asarray(self.offset, dtype=float)

    def with_offset(self, offset) -> "DesignProblem":
        return replace(self, offset=np.asarray(offset, dtype=float))

    def dump_triplets(self, path: str | Path) -> None:
        """Write nonzero covariates as ``row col value`` lines (0-based)."""
        coo = self.X.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with open(path, "w", encoding="utf-8") as fh:
            for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
                fh.write(f"{int(r)} {int(c)} {float(v)!r}\n")


def _window_index(lags: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """0-based left-closed window of each lag, -1 beyond the last threshold."""
    idx = np.searchsorted(thresholds, lags, side="right") - 1
    idx[lags >= thresholds[-1]] = -1
    return idx


def build_design(
    sequences: Sequence[SubjectSequence],
    windows: LagWindows,
    p: int,
    discount: DiscountConfig = DiscountConfig(),
    fixed_effects: bool = False,
    include_self_pairs: bool = True,
) -> DesignProblem:
    """Compile aggregated sequences into a :class:`DesignProblem`.

    For each pair of spans ``a < b`` of one subject, with ``k = o_a`` and
    ``k2 = o_b``:

    * row ``b`` gets ``x_a + offset`` in column ``(k, k2, window(t_b - t_a))``;
    * row ``a`` gets ``lambda2 * (x_b + offset)`` in column
      ``(k, k2, window'(t_b - t_a))`` where ``window'`` uses thresholds
      scaled by ``lambda1``.

    Rows are ordered by subject (input order) then span. Intercept groups are
    event types, or (subject, event type) pairs when ``fixed_effects`` is set.
    """
    L = windows.L
    th = np.asarray(windows.thresholds)
    th_future = th * discount.lambda1
    use_future = discount.lambda1 > 0 and discount.lambda2 > 0
    c = discount.count_offset

    rows_r, rows_c, rows_v = [], [], []
    ys, groups = [], []
    group_labels: list = list(range(1, p + 1)) if not fixed_effects else []
    fe_ids: dict = {}
    offset = 0
    for seq in sequences:
        n = len(seq)
        if n == 0:
            continue
        t, o, x = seq.times, seq.types, seq.counts.astype(float) + c
        if o.min() < 1 or o.max() > p:
            raise ValueError(f"subject {seq.subject_id}: event type outside 1..{p}")
        ys.append(x)
        if fixed_effects:
            g = np.empty(n, dtype=np.int64)
            for j in range(n):
                key = (seq.subject_id, int(o[j]))
                if key not in fe_ids:
                    fe_ids[key] = len(group_labels)
                    group_labels.append(key)
                g[j] = fe_ids[key]
            groups.append(g)
        else:
            groups.append(o - 1)

        a, b = np.triu_indices(n, k=1)
        if a.size:
            if not include_self_pairs:
                keep = o[a] != o[b]
                a, b = a[keep], b[keep]
            lag = t[b] - t[a]
            pair_base = ((o[a] - 1) * p + (o[b] - 1)) * L

            l_past = _window_index(lag, th)
            m = l_past >= 0
            rows_r.append(offset + b[m])
            rows_c.append(pair_base[m] + l_past[m])
            rows_v.append(x[a[m]])

            if use_future:
                l_fut = _window_index(lag, th_future)
                m = l_fut >= 0
                rows_r.append(offset + a[m])
                rows_c.append(pair_base[m] + l_fut[m])
                rows_v.append(discount.lambda2 * x[b[m]])
        offset += n

    M = offset
    P = p * p * L
    if rows_r:
        r = np.concatenate(rows_r)
        cc = np.concatenate(rows_c)
        v = np.concatenate(rows_v)
    else:
        r = cc = np.zeros(0, dtype=np.int64)
        v = np.zeros(0)
    X = sp.coo_matrix((v, (r, cc)), shape=(M, P)).tocsc()
    X.sum_duplicates()
    X.eliminate_zeros()
    X.sort_indices()
    y = np.concatenate(ys) if ys else np.zeros(0)
    g = np.concatenate(groups).astype(np.int64) if groups else np.zeros(0, dtype=np.int64)
    meta = {
        "p": p,
        "L": L,
        "thresholds": list(windows.thresholds),
        "discount": {
            "lambda1": discount.lambda1,
            "lambda2": discount.lambda2,
            "count_offset": discount.count_offset,
        },
        "fixed_effects": fixed_effects,
        "include_self_pairs": include_self_pairs,
    }
    return DesignProblem(X, y, g, group_labels, kind="temporal", meta=meta)


def build_graph_design(samples: np.ndarray) -> DesignProblem:
    """Node-wise Poisson regressions of i.i.d. count vectors with tied edge coefficients.

    Row ``j * n + s`` regresses ``samples[s, j]`` on the other coordinates of
    sample ``s``. Column ``e`` belongs to the unordered pair ``edges[e] = (a, b)``
    (0-based, ``a < b``) and appears in both node ``a``'s and node ``b``'s rows,
    so one coefficient serves both conditionals.
    """
    samples = np.asarray(samples)
    n, p = samples.shape
    edges = [(a, b) for a in range(p) for b in range(a + 1, p)]
    xs = samples.astype(float)
    rows_r, rows_c, rows_v = [], [], []
    s_idx = np.arange(n)
    for e, (a, b) in enumerate(edges):
        rows_r += [a * n + s_idx, b * n + s_idx]
        rows_c += [np.full(n, e), np.full(n, e)]
        rows_v += [xs[:, b], xs[:, a]]
    M = n * p
    if edges:
        X = sp.coo_matrix(
            (np.concatenate(rows_v), (np.concatenate(rows_r), np.concatenate(rows_c))),
            shape=(M, len(edges)),
        ).tocsc()
    else:
        X = sp.csc_matrix((M, 0))
    X.sum_duplicates()
    X.eliminate_zeros()
    X.sort_indices()
    y = xs.T.reshape(-1)
    groups = np.repeat(np.arange(p, dtype=np.int64), n)
    return DesignProblem(
        X, y, groups, list(range(p)), kind="graph", meta={"p": p, "n": n, "edges": edges}
    )


def lambda_max(problem: DesignProblem) -> float:
    """Smallest penalty at which every coefficient of the lasso solution is zero.

    With the intercepts at their null-model values, this is
    ``max_c |X[:, c] . (y - mu_null)| / M``.
    """
    if problem.M == 0:
        raise ValueError("empty design problem")
    if not np.any(problem.y > 0):
        log.warning("all responses are zero; lambda_max is 0")
        return 0.0
    b = problem.null_intercepts()
    with np.errstate(over="ignore"):
        mu = np.exp(b[problem.groups] + problem.row_offset)
    score = problem.X.T @ (problem.y - mu)
    if score.size == 0:
        return 0.0
    return float(np.max(np.abs(score)) / problem.M)
