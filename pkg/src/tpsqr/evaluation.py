"""Edge recovery, pair scoring, AUC, and the two synthetic experiments.

Sparsistency experiment
    Random sparse PSQR (see :func:`psqr_oracle.random_sparse_model`), Gibbs
    samples, tied node-wise Poisson regressions, 50-point path, AIC pick. An
    edge counts as recovered iff its tied coefficient is nonzero.

LED benchmark generator
    ``n_drugs`` drug types (1..D) and ``n_conditions`` condition types
    (D+1..D+C) per subject on ``[0, horizon]``, continuous time. Each subject
    draws a frailty ``f ~ Gamma(shape, 1/shape)`` that multiplies every rate,
    so sicker subjects have more of everything. A subject takes each drug with
    probability ``p_exposed``; prescriptions are a Poisson process with rate
    ``f * drug_rate``. Conditions have baseline rate ``f * condition_rate``.
    For a planted (drug, condition) pair, each prescription of the drug adds
    ``Poisson(excess * f * condition_rate * risk_window)`` extra condition
    events, uniform on the following ``risk_window``, i.e. the condition
    intensity is multiplied by ``1 + excess`` while exposed. The candidate set
    is every (drug, condition) pair, ``n_positive`` of them planted.
"""

from __future__ import annotations

import itertools
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .design import ADR_DISCOUNT, DiscountConfig, build_design, build_graph_design
from .event_data import EventRecord, LagWindows, SubjectSequence, aggregate
from .psqr_oracle import TruncationConfig, gibbs_sample, random_sparse_model
from .solver import FitConfig, fit_path, select_aic
from .template import Template


@dataclass(frozen=True)
class EdgeRecoveryReport:
    true_edges: frozenset
    recovered_edges: frozenset
    precision: float
    recall: float
    f1: float
    exact_structure_match: bool

    def to_dict(self) -> dict:
        return {
            "true_edges": sorted(list(e) for e in self.true_edges),
            "recovered_edges": sorted(list(e) for e in self.recovered_edges),
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "exact_structure_match": self.exact_structure_match,
        }


def _unordered(edges) -> frozenset:
    return frozenset(tuple(sorted(e)) for e in edges)


def edge_recovery(true_edges, recovered_edges) -> EdgeRecoveryReport:
    """Precision/recall/F1 over unordered pairs.

    An empty recovered set has precision 1; an empty true set has recall 1,
    so recovering nothing from a null graph scores F1 = 1.
    """
    t, r = _unordered(true_edges), _unordered(recovered_edges)
    tp = len(t & r)
    precision = tp / len(r) if r else 1.0
    recall = tp / len(t) if t else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return EdgeRecoveryReport(t, r, precision, recall, f1, t == r)


@dataclass
class PairScoreTable:
    """``scores[k-1, k2-1]`` is the mean of ``w[k, k2, :]`` over lag windows."""

    scores: np.ndarray
    labels: dict = field(default_factory=dict)

    def score(self, k: int, k2: int) -> float:
        return float(self.scores[k - 1, k2 - 1])

    def evaluate(self, pairs, labels=None) -> tuple[np.ndarray, np.ndarray]:
        """Scores and labels for the given ordered 1-based pairs."""
        labels = self.labels if labels is None else labels
        s = np.array([self.score(k, k2) for k, k2 in pairs])
        y = np.array([bool(labels[(k, k2)]) for k, k2 in pairs])
        return s, y


def score_pairs(template: Template, labels: dict | None = None) -> PairScoreTable:
    return PairScoreTable(template.w.mean(axis=2), dict(labels or {}))


def auc(scores, labels) -> float:
    """Area under the ROC curve as ``P(s+ > s-) + P(s+ = s-) / 2`` over all pairs."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0:
        raise ValueError("no positive labels")
    if neg.size == 0:
        raise ValueError("no negative labels")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


# ---------------------------------------------------------------------------
# sparsistency


def recover_graph(samples: np.ndarray, n_lambdas: int = 50, lambda_min_ratio: float = 1e-3, config=FitConfig()):
    """Fit the tied node-wise path on ``samples`` and return ``(path, selected, problem)``."""
    problem = build_graph_design(samples)
    path = fit_path(problem, n_lambdas, lambda_min_ratio, config)
    return path, select_aic(path), problem


def _edges_of(problem, fit_result) -> set:
    return {tuple(problem.meta["edges"][c]) for c in fit_result.active_set}


def sparsistency_trial(
    p: int,
    edge_count: int,
    n: int,
    seed: int,
    n_lambdas: int = 50,
    lambda_min_ratio: float = 1e-3,
    burn_in: int = 500,
    thin: int = 5,
    x_max: int = 30,
) -> dict:
    """One draw of model and data; returns the AIC report plus the best F1 on the path."""
    rng = np.random.default_rng([seed, p, edge_count])
    model = random_sparse_model(p, edge_count, rng, x_max=x_max)
    samples = gibbs_sample(model, n, burn_in=burn_in, thin=thin, trunc=TruncationConfig(x_max), seed=seed)
    path, chosen, problem = recover_graph(samples, n_lambdas, lambda_min_ratio)
    truth = model.edges()
    report = edge_recovery(truth, _edges_of(problem, chosen))
    best = max(edge_recovery(truth, _edges_of(problem, f)).f1 for f in path.fits)
    return {
        "n": n,
        "seed": seed,
        "report": report,
        "best_path_f1": best,
        "selected_lambda": chosen.lam,
    }


def _quantiles(values) -> dict:
    q = np.quantile(np.asarray(values, dtype=float), [0.1, 0.25, 0.5, 0.75, 0.9])
    return dict(zip(["q10", "q25", "median", "q75", "q90"], (float(v) for v in q)))


def sparsistency_experiment(
    p: int,
    edge_count: int,
    sample_sizes,
    trials: int,
    seed: int = 0,
    workers: int = 1,
    **trial_kwargs,
) -> dict:
    """Edge-recovery statistics for each sample size.

    Trial ``t`` uses seed ``seed + t`` for every sample size, so the same
    ground-truth models are reused across ``n``. With ``workers > 1`` trials
    run in a process pool; results are collected in trial order, so the
    report does not depend on the worker count.
    """
    per_n = {}
    rows = []
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for n in sample_sizes:
            start = time.perf_counter()
            run = partial(_trial_at, p, edge_count, n, trial_kwargs)
            seeds = [seed + t for t in range(trials)]
            trials_n = list(pool.map(run, seeds)) if pool else [run(s) for s in seeds]
            elapsed = time.perf_counter() - start
            per_n[int(n)], new_rows = _summarize(trials_n, elapsed)
            rows.extend(new_rows)
    finally:
        if pool is not None:
            pool.shutdown()
    return {"p": p, "edge_count": edge_count, "trials": trials, "seed": seed, "per_n": per_n, "rows": rows}


def _trial_at(p, edge_count, n, kwargs, seed):
    return sparsistency_trial(p, edge_count, n, seed, **kwargs)


def _summarize(trials_n, elapsed):
    reps = [t["report"] for t in trials_n]
    summary = {
        "precision": _quantiles([r.precision for r in reps]),
        "recall": _quantiles([r.recall for r in reps]),
        "f1": _quantiles([r.f1 for r in reps]),
        "best_path_f1": _quantiles([t["best_path_f1"] for t in trials_n]),
        "exact_match_rate": float(np.mean([r.exact_structure_match for r in reps])),
        "empty_rate": float(np.mean([len(r.recovered_edges) == 0 for r in reps])),
        "wall_clock_seconds": elapsed,
    }
    rows = []
    for t in trials_n:
        r = t["report"]
        rows.append(
            {
                "n": t["n"],
                "seed": t["seed"],
                "precision": r.precision,
                "recall": r.recall,
                "f1": r.f1,
                "exact_match": r.exact_structure_match,
                "n_recovered": len(r.recovered_edges),
                "best_path_f1": t["best_path_f1"],
                "selected_lambda": t["selected_lambda"],
            }
        )
    return summary, rows


# ---------------------------------------------------------------------------
# planted temporal benchmark


@dataclass(frozen=True)
class LedBenchmark:
    events: dict  # subject_id -> list[EventRecord]
    p: int
    n_drugs: int
    n_conditions: int
    positives: tuple  # planted (drug, condition) pairs, 1-based types
    windows: LagWindows

    @property
    def candidate_pairs(self) -> list[tuple[int, int]]:
        D, C = self.n_drugs, self.n_conditions
        return [(d, D + c) for d in range(1, D + 1) for c in range(1, C + 1)]

    @property
    def labels(self) -> dict:
        pos = set(self.positives)
        return {pair: pair in pos for pair in self.candidate_pairs}


def simulate_led_benchmark(
    n_subjects: int = 400,
    n_drugs: int = 10,
    n_conditions: int = 5,
    n_positive: int = 5,
    seed: int = 0,
    horizon: float = 1000.0,
    p_exposed: float = 0.3,
    drug_rate: float = 0.01,
    condition_rate: float = 0.004,
    excess: float = 2.0,
    risk_window: float = 60.0,
    frailty_shape: float = 2.0,
    thresholds=(0.0, 30.0, 90.0, 180.0),
) -> LedBenchmark:
    """Synthetic drug/condition event data with planted excitatory pairs (see module docstring)."""
    rng = np.random.default_rng(seed)
    D, C = n_drugs, n_conditions
    candidates = [(d, D + c) for d in range(1, D + 1) for c in range(1, C + 1)]
    pick = rng.choice(len(candidates), size=n_positive, replace=False)
    positives = tuple(sorted(candidates[i] for i in pick))
    causes: dict[int, list[int]] = {}
    for d, c in positives:
        causes.setdefault(d, []).append(c)

    events: dict[str, list[EventRecord]] = {}
    width = len(str(n_subjects - 1))
    for i in range(n_subjects):
        sid = f"s{i:0{width}d}"
        f = rng.gamma(frailty_shape, 1.0 / frailty_shape)
        times: list[float] = []
        types: list[int] = []
        for d in range(1, D + 1):
            if rng.random() >= p_exposed:
                continue
            k = rng.poisson(f * drug_rate * horizon)
            rx = rng.uniform(0.0, horizon, size=k)
            times.extend(rx)
            types.extend([d] * k)
            for c in causes.get(d, ()):
                for s in rx:
                    extra = rng.poisson(excess * f * condition_rate * risk_window)
                    t_extra = s + rng.uniform(0.0, risk_window, size=extra)
                    t_extra = t_extra[t_extra < horizon]
                    times.extend(t_extra)
                    types.extend([c] * t_extra.size)
        for c in range(D + 1, D + C + 1):
            k = rng.poisson(f * condition_rate * horizon)
            times.extend(rng.uniform(0.0, horizon, size=k))
            types.extend([c] * k)
        order = np.argsort(times, kind="stable")
        events[sid] = [EventRecord(sid, float(times[j]), int(types[j])) for j in order]
    return LedBenchmark(events, D + C, D, C, positives, LagWindows(tuple(thresholds)))


def run_led_benchmark(
    bench: LedBenchmark,
    discount: DiscountConfig = ADR_DISCOUNT,
    fixed_effects: bool = True,
    t_ambiguity: float = 0.0,
    n_lambdas: int = 50,
    lambda_min_ratio: float = 1e-3,
    config: FitConfig = FitConfig(),
) -> dict:
    """Aggregate, fit the path, select by AIC and score the candidate pairs."""
    seqs: list[SubjectSequence] = [aggregate(ev, t_ambiguity, sid) for sid, ev in bench.events.items()]
    problem = build_design(seqs, bench.windows, bench.p, discount, fixed_effects=fixed_effects)
    path = fit_path(problem, n_lambdas, lambda_min_ratio, config)
    chosen = select_aic(path)
    table = score_pairs(chosen.template, bench.labels)
    s, y = table.evaluate(bench.candidate_pairs)
    path_aucs = []
    for f in path.fits:
        st = score_pairs(f.template)
        si, _ = st.evaluate(bench.candidate_pairs, bench.labels)
        path_aucs.append(auc(si, y) if np.any(si != si[0]) else 0.5)
    return {
        "auc": auc(s, y),
        "selected_lambda": chosen.lam,
        "selected_index": int(path.fits.index(chosen)),
        "active_set_size": int(chosen.active_set.size),
        "path_auc": path_aucs,
        "rows": problem.M,
        "positives": [list(pr) for pr in bench.positives],
        "scores": {f"{k}->{k2}": float(v) for (k, k2), v in zip(bench.candidate_pairs, s)},
    }


def all_pairs(p: int):
    return list(itertools.permutations(range(1, p + 1), 2))
