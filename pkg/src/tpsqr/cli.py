"""Command-line entry point: ``tpsqr {aggregate,fit,path,select,simulate,evaluate}``.

Every command resolves one JSON configuration (defaults, then an optional
preset, then ``--config``, then flags), writes its outputs into ``out`` and
finishes with ``manifest.json`` holding the resolved config, its hash, the
seed, library versions and a hash of every output file. Nothing time- or
host-dependent is written, so reruns produce identical bytes.

Exit codes: 0 success, 2 invalid input or config, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import platform
import sys
from contextlib import contextmanager
from pathlib import Path

import numba
import numpy as np
import scipy

from . import __version__
from .design import DiscountConfig, build_design, build_graph_design, lambda_max
from .evaluation import (
    auc,
    edge_recovery,
    recover_graph,
    run_led_benchmark,
    score_pairs,
    simulate_led_benchmark,
    sparsistency_experiment,
)
from .event_data import (
    EventDataError,
    LagWindows,
    SubjectSequence,
    aggregate,
    read_events_csv,
    read_header,
    read_sequences_csv,
    validate_types,
    write_events_csv,
    write_header,
    write_sequences_csv,
)
from .psqr_oracle import (
    PsqrModel,
    TailMassError,
    TruncationConfig,
    autocorrelation,
    gibbs_sample,
    random_sparse_model,
    read_samples_csv,
    write_samples_csv,
)
from .solver import FitConfig, NonConvergenceError, fit, fit_path, select_aic
from .template import Template

log = logging.getLogger("tpsqr")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

DEFAULTS = {
    "events": None,
    "header": None,
    "sequences": None,
    "samples": None,
    "p": None,
    "thresholds": [0, 30, 90, 180],
    "t_ambiguity": 0.0,
    "min_duration": 0.0,
    "discount": {"lambda1": 1.0, "lambda2": 1.0, "count_offset": 0},
    "fixed_effects": False,
    "include_self_pairs": True,
    "lam": None,
    "lam_ratio": 0.1,
    "n_lambdas": 50,
    "lambda_min_ratio": 1e-3,
    "tol": 1e-7,
    "max_outer": 100,
    "max_inner": 1000,
    "seed": 0,
    "workers": 1,
    "out": "tpsqr_out",
    "preset": None,
    "simulate": {
        "kind": "psqr",
        "model": None,
        "p": 8,
        "edge_count": 8,
        "n_samples": 1000,
        "burn_in": 500,
        "thin": 5,
        "x_max": 30,
        "n_subjects": 400,
        "n_drugs": 10,
        "n_conditions": 5,
        "n_positive": 5,
    },
    "evaluate": {
        "kind": "sparsistency",
        "p": 8,
        "edge_count": 8,
        "sample_sizes": [250, 1000, 4000],
        "trials": 20,
        "scores": None,
        "template": None,
        "labels": None,
        "truth": None,
        "n_subjects": 1000,
    },
}

# time unit is whatever the input data uses; these are the published values as given
PRESETS = {
    "adr": {
        "discount": {"lambda1": 0.1, "lambda2": 0.1, "count_offset": 1},
        "fixed_effects": True,
        "t_ambiguity": 175.0,
        "min_duration": 1000.0,
        "thresholds": [0, 500, 1000, 1500],
    },
}

INPUT_KEYS = ("events", "header", "sequences", "samples")


class ConfigError(ValueError):
    pass


class StageError(Exception):
    """Failure inside a named pipeline stage; ``cause`` keeps the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (ValueError, ArithmeticError, RuntimeError, OSError, KeyError) as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(out[key], dict) and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _set_dotted(overrides: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = overrides
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def _parse_set(item: str):
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then preset, then the config file, then flags."""
    file_cfg = {}
    if args.config is not None:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{args.config}: top level must be an object")

    overrides: dict = {}
    for key in ("seed", "workers", "out", "preset", "events", "header", "sequences", "samples", "p", "lam",
                "n_lambdas", "lambda_min_ratio", "t_ambiguity", "min_duration", "fixed_effects"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.thresholds is not None:
        try:
            overrides["thresholds"] = [float(v) for v in args.thresholds.split(",")]
        except ValueError:
            raise ConfigError(f"--thresholds must be comma-separated numbers, got {args.thresholds!r}") from None
    for item in args.set or ():
        key, value = _parse_set(item)
        _set_dotted(overrides, key, value)

    preset = overrides.get("preset", file_cfg.get("preset"))
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = _merge(cfg, PRESETS[preset])
    cfg = _merge(cfg, file_cfg)
    cfg = _merge(cfg, overrides)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    for key in INPUT_KEYS:
        if cfg[key] is not None and not Path(cfg[key]).is_file():
            raise ConfigError(f"{key} file does not exist: {cfg[key]}")
    for key in ("scores", "template", "labels", "truth"):
        path = cfg["evaluate"][key]
        if path is not None and not Path(path).is_file():
            raise ConfigError(f"evaluate.{key} file does not exist: {path}")
    if cfg["simulate"]["model"] is not None and not Path(cfg["simulate"]["model"]).is_file():
        raise ConfigError(f"simulate.model file does not exist: {cfg['simulate']['model']}")
    try:
        LagWindows(tuple(float(v) for v in cfg["thresholds"]))
        DiscountConfig(**cfg["discount"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise ConfigError("workers must be a positive integer")
    if cfg["t_ambiguity"] < 0 or cfg["min_duration"] < 0:
        raise ConfigError("t_ambiguity and min_duration must be >= 0")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# output helpers


class Outputs:
    """Collects files written by a command so the manifest can hash them."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.root / name

    def json(self, name: str, obj) -> None:
        with open(self.path(name), "w", encoding="utf-8") as fh:
            json.dump(_plain(obj), fh, indent=2)
            fh.write("\n")

    def manifest(self, command: str, cfg: dict) -> None:
        hashes = {}
        for name in self.files:
            hashes[name] = hashlib.sha256((self.root / name).read_bytes()).hexdigest()
        # the output location does not affect content, so it stays out of the record
        recorded = {k: v for k, v in cfg.items() if k != "out"}
        manifest = {
            "command": command,
            "config": recorded,
            "config_hash": config_hash(recorded),
            "seed": cfg["seed"],
            "versions": {
                "tpsqr": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "numba": numba.__version__,
            },
            "outputs": hashes,
        }
        with open(self.root / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(_plain(manifest), fh, indent=2)
            fh.write("\n")


def _plain(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# shared pipeline stages


def _windows(cfg) -> LagWindows:
    return LagWindows(tuple(float(v) for v in cfg["thresholds"]))


def load_sequences(cfg) -> tuple[list[SubjectSequence], int, dict]:
    """Aggregated sequences, type count and a summary, from events or a sequences CSV."""
    if cfg["events"] is not None:
        with stage("read events"):
            subjects = read_events_csv(cfg["events"])
        excluded = []
        seqs = []
        with stage("aggregate"):
            for sid in sorted(subjects):
                events = subjects[sid]
                times = [e.timestamp for e in events]
                if events and max(times) - min(times) < cfg["min_duration"]:
                    excluded.append(sid)
                    continue
                seqs.append(aggregate(events, cfg["t_ambiguity"], sid))
    elif cfg["sequences"] is not None:
        with stage("read sequences"):
            seqs = read_sequences_csv(cfg["sequences"])
        excluded = []
        if cfg["min_duration"] > 0:
            keep = [s for s in seqs if s.duration >= cfg["min_duration"]]
            excluded = [s.subject_id for s in seqs if s.duration < cfg["min_duration"]]
            seqs = keep
    else:
        raise ConfigError("no input: set 'events' or 'sequences'")

    p = cfg["p"]
    if p is None and cfg["header"] is not None:
        with stage("read header"):
            p = read_header(cfg["header"])["p"]
    if p is None:
        p = max((int(s.types.max()) for s in seqs if len(s)), default=0)
    if seqs:
        with stage("validate types"):
            validate_types(seqs, p)
    summary = {
        "n_subjects": len(seqs),
        "n_spans": int(sum(len(s) for s in seqs)),
        "n_events": int(sum(int(s.counts.sum()) + len(s) for s in seqs)),
        "p": int(p),
        "excluded_subjects": len(excluded),
    }
    return seqs, int(p), summary


def build_problem(cfg):
    if cfg["samples"] is not None:
        with stage("read samples"):
            samples = read_samples_csv(cfg["samples"])
        with stage("design"):
            return build_graph_design(samples), {"kind": "graph", "n": int(samples.shape[0]), "p": int(samples.shape[1])}
    seqs, p, summary = load_sequences(cfg)
    with stage("design"):
        problem = build_design(
            seqs,
            _windows(cfg),
            p,
            DiscountConfig(**cfg["discount"]),
            fixed_effects=cfg["fixed_effects"],
            include_self_pairs=cfg["include_self_pairs"],
        )
    return problem, summary


def _fit_config(cfg, lam=0.0) -> FitConfig:
    return FitConfig(lam=lam, tol=cfg["tol"], max_outer=cfg["max_outer"], max_inner=cfg["max_inner"])


def _write_fit(out: Outputs, problem, result, prefix: str) -> None:
    out.json(f"{prefix}_report.json", result.report())
    if problem.kind == "temporal":
        result.template.save(out.path("template.json"))
        if problem.fixed_effects:
            with open(out.path("fixed_effects.csv"), "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["subject_id", "type", "intercept"])
                for (sid, k), b in zip(problem.group_labels, result.intercepts):
                    w.writerow([sid, k, repr(float(b))])
    else:
        edges = problem.meta["edges"]
        out.json(
            "edges.json",
            {
                "p": problem.meta["p"],
                "intercepts": result.intercepts,
                "edges": [[a, b, result.coef[c]] for c, (a, b) in enumerate(edges) if result.coef[c] != 0],
            },
        )


# ---------------------------------------------------------------------------
# commands


def cmd_aggregate(cfg, out: Outputs) -> dict:
    seqs, _, summary = load_sequences(cfg)
    write_sequences_csv(out.path("aggregated.csv"), seqs)
    out.json("summary.json", summary)
    return summary


def cmd_fit(cfg, out: Outputs) -> dict:
    problem, summary = build_problem(cfg)
    with stage("solver"):
        lam = cfg["lam"]
        if lam is None:
            lam = cfg["lam_ratio"] * lambda_max(problem)
        result = fit(problem, _fit_config(cfg, float(lam)))
    _write_fit(out, problem, result, "fit")
    return {**summary, **result.report()}


def _path(cfg, problem):
    with stage("solver"):
        return fit_path(problem, cfg["n_lambdas"], cfg["lambda_min_ratio"], _fit_config(cfg))


def cmd_path(cfg, out: Outputs) -> dict:
    problem, summary = build_problem(cfg)
    path = _path(cfg, problem)
    out.json("path_report.json", path.report())
    return {**summary, "n_lambdas": len(path)}


def cmd_select(cfg, out: Outputs) -> dict:
    problem, summary = build_problem(cfg)
    path = _path(cfg, problem)
    chosen = select_aic(path)
    out.json("path_report.json", path.report())
    _write_fit(out, problem, chosen, "selected")
    return {**summary, "selected_index": path.fits.index(chosen), **chosen.report()}


def cmd_simulate(cfg, out: Outputs) -> dict:
    sim = cfg["simulate"]
    seed = cfg["seed"]
    if sim["kind"] == "psqr":
        with stage("model"):
            if sim["model"] is not None:
                model = PsqrModel.load(sim["model"], x_max=sim["x_max"])
            else:
                model = random_sparse_model(sim["p"], sim["edge_count"], np.random.default_rng(seed), x_max=sim["x_max"])
        with stage("gibbs"):
            samples = gibbs_sample(
                model, sim["n_samples"], sim["burn_in"], sim["thin"], TruncationConfig(sim["x_max"]), seed=seed
            )
        write_samples_csv(out.path("samples.csv"), samples)
        model.save(out.path("model.json"))
        report = {
            "n_samples": int(samples.shape[0]),
            "p": model.p,
            "edges": sorted(model.edges()),
            "mean": samples.mean(axis=0),
            "autocorrelation": autocorrelation(samples),
        }
        out.json("simulate_report.json", report)
        return {"kind": "psqr", "n_samples": report["n_samples"], "p": model.p}
    if sim["kind"] == "led":
        with stage("simulate"):
            bench = simulate_led_benchmark(
                n_subjects=sim["n_subjects"],
                n_drugs=sim["n_drugs"],
                n_conditions=sim["n_conditions"],
                n_positive=sim["n_positive"],
                seed=seed,
                thresholds=tuple(cfg["thresholds"]),
            )
        write_events_csv(out.path("events.csv"), [e for sid in sorted(bench.events) for e in bench.events[sid]])
        write_header(out.path("header.json"), bench.p)
        out.json(
            "truth.json",
            {"labels": [[k, k2, bench.labels[(k, k2)]] for k, k2 in bench.candidate_pairs]},
        )
        return {"kind": "led", "n_subjects": len(bench.events), "p": bench.p}
    raise ConfigError(f"simulate.kind must be 'psqr' or 'led', got {sim['kind']!r}")


def _read_labels(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        rows = json.load(fh)["labels"]
    return {(int(k), int(k2)): bool(v) for k, k2, v in rows}


def cmd_evaluate(cfg, out: Outputs) -> dict:
    ev = cfg["evaluate"]
    seed = cfg["seed"]
    kind = ev["kind"]
    if kind == "sparsistency":
        with stage("sparsistency"):
            res = sparsistency_experiment(
                ev["p"], ev["edge_count"], ev["sample_sizes"], ev["trials"], seed=seed, workers=cfg["workers"],
                n_lambdas=cfg["n_lambdas"], lambda_min_ratio=cfg["lambda_min_ratio"],
            )
        for n, stats in res["per_n"].items():
            log.info("n=%d: %.1f s", n, stats.pop("wall_clock_seconds"))
        rows = res.pop("rows")
        out.json("sparsistency.json", res)
        with open(out.path("sparsistency_rows.csv"), "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["n"], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        return {"kind": kind, "median_f1": {n: s["f1"]["median"] for n, s in res["per_n"].items()}}
    if kind == "led":
        with stage("led benchmark"):
            bench = simulate_led_benchmark(n_subjects=ev["n_subjects"], seed=seed, thresholds=tuple(cfg["thresholds"]))
            res = run_led_benchmark(
                bench,
                DiscountConfig(**cfg["discount"]),
                fixed_effects=cfg["fixed_effects"],
                t_ambiguity=cfg["t_ambiguity"],
                n_lambdas=cfg["n_lambdas"],
                lambda_min_ratio=cfg["lambda_min_ratio"],
                config=_fit_config(cfg),
            )
        out.json("led_report.json", res)
        return {"kind": kind, "auc": res["auc"]}
    if kind == "auc":
        with stage("auc"):
            if ev["scores"] is not None:
                data = np.loadtxt(ev["scores"], delimiter=",", skiprows=1, ndmin=2)
                value = auc(data[:, 0], data[:, 1] != 0)
                n = data.shape[0]
            elif ev["template"] is not None and ev["labels"] is not None:
                labels = _read_labels(ev["labels"])
                table = score_pairs(Template.load(ev["template"]), labels)
                s, y = table.evaluate(sorted(labels))
                value = auc(s, y)
                n = len(labels)
            else:
                raise ConfigError("evaluate.kind='auc' needs evaluate.scores, or evaluate.template and evaluate.labels")
        out.json("auc.json", {"auc": value, "n": n})
        return {"kind": kind, "auc": value}
    if kind == "recovery":
        if cfg["samples"] is None or ev["truth"] is None:
            raise ConfigError("evaluate.kind='recovery' needs samples and evaluate.truth (a model JSON)")
        with stage("recovery"):
            samples = read_samples_csv(cfg["samples"])
            truth = PsqrModel.load(ev["truth"], tail_tol=None)
            path, chosen, problem = recover_graph(
                samples, cfg["n_lambdas"], cfg["lambda_min_ratio"], _fit_config(cfg)
            )
            found = {tuple(problem.meta["edges"][c]) for c in chosen.active_set}
            report = edge_recovery(truth.edges(), found)
        out.json("recovery.json", report.to_dict())
        return {"kind": kind, "f1": report.f1}
    raise ConfigError(f"unknown evaluate.kind {kind!r}")


COMMANDS = {
    "aggregate": cmd_aggregate,
    "fit": cmd_fit,
    "path": cmd_path,
    "select": cmd_select,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tpsqr", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"tpsqr {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file; flags override its keys")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, help="cap on worker processes (default 1)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--preset", help="named parameter preset, e.g. 'adr'")
        sp.add_argument("--events", help="events CSV (subject_id,timestamp,event_type)")
        sp.add_argument("--header", help="JSON sidecar with the number of event types")
        sp.add_argument("--sequences", help="aggregated sequences CSV")
        sp.add_argument("--samples", help="count samples CSV for graph problems")
        sp.add_argument("--p", type=int, help="number of event types")
        sp.add_argument("--thresholds", help="comma-separated lag-window thresholds")
        sp.add_argument("--t-ambiguity", type=float)
        sp.add_argument("--min-duration", type=float)
        sp.add_argument("--lam", type=float)
        sp.add_argument("--n-lambdas", type=int)
        sp.add_argument("--lambda-min-ratio", type=float)
        fe = sp.add_mutually_exclusive_group()
        fe.add_argument("--fixed-effects", dest="fixed_effects", action="store_const", const=True)
        fe.add_argument("--no-fixed-effects", dest="fixed_effects", action="store_const", const=False)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any (dotted) config key")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        out = Outputs(cfg["out"])
        summary = COMMANDS[args.command](cfg, out)
        out.manifest(args.command, cfg)
    except StageError as exc:
        print(f"tpsqr {args.command}: {exc}", file=sys.stderr)
        numerical = isinstance(exc.cause, (ArithmeticError, NonConvergenceError))
        return EXIT_NUMERICAL if numerical else EXIT_INVALID
    except (TailMassError, NonConvergenceError, FloatingPointError) as exc:
        print(f"tpsqr {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, EventDataError, ValueError, OSError, KeyError, TypeError) as exc:
        print(f"tpsqr {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(json.dumps(_plain(summary), sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
