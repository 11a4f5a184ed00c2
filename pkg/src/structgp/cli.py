"""Command-line interface.

Subcommands: ``simulate``, ``fit``, ``predict``, ``eval`` and
``export-graph``.  Settings come from defaults, then an optional config file
(``key = value`` lines, TOML syntax), then long-form flags.  The resolved
configuration is echoed into every JSON output and next to every CSV.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import typing

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, load_config_file, parse_lag
from .data import (DataError, ObservationSet, TaskCatalog, _atomic_write, derive_pseudo_tasks,
                   ingest_csv, normal_score_transform, write_csv)
from .gp import NumericalError
from .metrics import forecast_metrics
from .models import ModelBundle, fit_model, predict
from .simulation import SimConfig, recovery_experiment, sample_trajectories, sample_truth
from .structure import is_acyclic

log = logging.getLogger("structgp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
FORECAST_HEADER = ("subject_id", "task_id", "time", "mean", "variance", "lo95", "hi95")


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser, cls, skip=(), prefixed=()):
    """One long-form flag per dataclass field, defaulting to 'not given'.

    Fields listed in ``prefixed`` get a ``--sim-`` flag so they do not clash
    with same-named run settings.
    """
    hints = typing.get_type_hints(cls)
    group = parser.add_argument_group(f"{cls.__name__} overrides")
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        tp = hints[f.name]
        flag = _flag("sim_" + f.name if f.name in prefixed else f.name)
        kw = {"dest": f"{cls.__name__}.{f.name}", "default": argparse.SUPPRESS}
        if tp is bool:
            group.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif f.name == "lag_tasks":
            group.add_argument("--lag-task", action="append", metavar="TASK:LAG",
                               help="add a lagged copy of TASK (repeatable)", **kw)
        elif f.name in ("lambda_grid",):
            group.add_argument(flag, type=_float_list, metavar="L1,L2,...", **kw)
        elif f.name == "mixture":
            group.add_argument(flag, type=_float_list, metavar="LATENT,INDIVIDUAL", **kw)
        elif tp in (int, float, str):
            group.add_argument(flag, type=tp, metavar=f.name.upper(), **kw)
        else:       # optional floats
            group.add_argument(flag, type=float, metavar=f.name.upper(), **kw)


def _float_list(text: str):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _overrides(args, cls) -> dict:
    prefix = cls.__name__ + "."
    return {k[len(prefix):]: v for k, v in vars(args).items() if k.startswith(prefix)}


def resolve_config(args) -> tuple[RunConfig, SimConfig]:
    file_cfg = load_config_file(args.config) if getattr(args, "config", None) else {}
    sim_file = file_cfg.pop("simulation", {})
    if not isinstance(sim_file, dict):
        raise ConfigError("[simulation] must be a table")
    run = RunConfig.from_dict({**file_cfg, **_overrides(args, RunConfig)})
    sim_kw = {**sim_file, **_overrides(args, SimConfig)}
    sim_kw.setdefault("seed", run.seed)
    known = {f.name for f in dataclasses.fields(SimConfig)}
    bad = sorted(set(sim_kw) - known)
    if bad:
        raise ConfigError(f"unknown simulation key(s): {', '.join(bad)}")
    try:
        sim = SimConfig(**sim_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return run, sim


def _echo(run: RunConfig, extra: dict | None = None) -> dict:
    return {"config": run.to_dict(), "version": __version__, **(extra or {})}


def _ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")


def _write_json(path, obj):
    _atomic_write(path, json.dumps(obj, indent=2) + "\n")


def _sidecar(path, run: RunConfig, extra=None):
    _write_json(os.fspath(path) + ".config.json", _echo(run, extra))


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def recovery_fitter(run: RunConfig):
    """Estimator used by the recovery experiment.

    Pathway simulations use ``lp-structgp`` unless the run asks for
    ``lp-fixed``, in which case the graph is learned first and then frozen.
    """
    def fit(obs, truth, seed):
        cfg = run.replace(seed=seed)
        if truth.pathway is None:
            bundle = fit_model(obs, cfg.replace(mode="structgp"))
            return bundle.structure.adjacency, None
        if run.mode == "lp-fixed":
            base = fit_model(obs, cfg.replace(mode="structgp"))
            bundle = fit_model(obs, cfg, base=base)
        else:
            bundle = fit_model(obs, cfg.replace(mode="lp-structgp"))
        return bundle.structure.adjacency, bundle.assignments().labels
    return fit


def cmd_simulate(args) -> int:
    run, sim = resolve_config(args)
    _ensure_dir(args.out)
    truth = sample_truth(sim)
    obs = sample_trajectories(truth, sim)
    write_csv(obs, os.path.join(args.out, "observations.csv"))
    _sidecar(os.path.join(args.out, "observations.csv"), run, {"simulation": sim.to_dict()})
    _write_json(os.path.join(args.out, "truth.json"),
                {**truth.to_dict(), **_echo(run, {"simulation": sim.to_dict()})})
    if args.recovery:
        counts = args.subject_counts or [sim.r]
        fitter = None if args.oracle else recovery_fitter(run)
        summary = recovery_experiment(sim, counts, fitter, None, args.out,
                                      extra=_echo(run))
        from .plotting import plot_recovery
        plot_recovery(summary, os.path.join(args.out, "recovery.png"))
    print(f"wrote {len(obs)} observations to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _prepare_training(obs: ObservationSet, run: RunConfig):
    transform = None
    if run.transform == "normal-score":
        obs, transform = normal_score_transform(obs)
    derived = []
    for lag_spec in run.lag_tasks:
        name, lag = parse_lag(lag_spec)
        derived.append((obs.catalog.index(name), "lag", lag))
    if run.constant_task:
        derived.append((0, "constant", 0.0))
    if derived:
        obs = derive_pseudo_tasks(obs, obs.catalog.with_derived(derived))
    return obs, transform


def cmd_fit(args) -> int:
    run, _ = resolve_config(args)
    _ensure_dir(args.out)
    obs = ingest_csv(args.data)
    obs, transform = _prepare_training(obs, run)
    base = None
    if args.base:
        base = _load_bundle(args.base)
    torch.manual_seed(run.seed)
    bundle = fit_model(obs, run, base=base, transform=transform)
    _write_json(os.path.join(args.out, "bundle.json"), {**bundle.to_dict(), **_echo(run)})
    report = {"mode": bundle.mode, "nmll": bundle.diagnostics.get("nmll"),
              "h_smooth": bundle.diagnostics.get("h_smooth")}
    if bundle.structure is not None:
        s = bundle.structure
        report.update({"edges": s.n_edges, "acyclic": is_acyclic(s.adjacency),
                       "lambda": s.lam, "aic": s.aic, "order": s.order})
        _atomic_write(os.path.join(args.out, "graph.dot"), s.to_dot(list(obs.catalog.all_names)))
        _write_json(os.path.join(args.out, "structure.json"), {**s.to_dict(), **_echo(run)})
        from .plotting import plot_graph
        plot_graph(s, os.path.join(args.out, "graph.png"), list(obs.catalog.all_names))
    if bundle.pathway is not None:
        path = os.path.join(args.out, "assignments.csv")
        _atomic_write(path, bundle.assignments().to_csv(bundle.subject_labels))
        _sidecar(path, run)
    _write_json(os.path.join(args.out, "fit_report.json"), {**report, **_echo(run)})
    print(json.dumps(report))
    return EXIT_OK


def _load_bundle(path) -> ModelBundle:
    try:
        with open(path, encoding="utf-8") as fh:
            return ModelBundle.from_json(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read bundle {path}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: invalid bundle ({exc})") from exc


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def read_query(path, catalog: TaskCatalog):
    """Rows ``(subject label, task id, time, value or nan)`` of a query CSV."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"subject_id", "task_id", "time"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: query header must contain {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            name = row["task_id"].strip()
            if name in catalog.all_names:
                tid = catalog.index(name)
            else:
                raise DataError(f"{path}:{lineno}: unknown task {name!r}")
            if catalog.is_derived(tid):
                raise DataError(f"{path}:{lineno}: task {name!r} is a derived input, not a forecast target")
            try:
                t = float(row["time"])
                v = float(row["value"]) if row.get("value") not in (None, "") else float("nan")
            except ValueError:
                raise DataError(f"{path}:{lineno}: cannot parse time/value") from None
            out.append((row["subject_id"].strip(), tid, t, v))
    return out


def _conditioning(path, bundle: ModelBundle, before):
    raw_cat = TaskCatalog(bundle.catalog.names)
    obs = ingest_csv(path, raw_cat)
    if before is not None:
        obs = obs.select(obs.time < before)
    if bundle.transform is not None:
        obs = obs.with_values(bundle.transform.forward(obs.task, obs.value))
    if bundle.catalog.derived_tasks:
        obs = derive_pseudo_tasks(obs, bundle.catalog)
    return obs


def cmd_predict(args) -> int:
    run, _ = resolve_config(args)
    bundle = _load_bundle(args.bundle)
    rows = read_query(args.query, bundle.catalog)
    if args.query_after is not None:
        rows = [r for r in rows if r[2] > args.query_after]
    cond = _conditioning(args.condition, bundle, args.condition_before) if args.condition else None
    subj = [r[0] for r in rows]
    mean, var, lo, hi = predict(bundle, cond, subj, [r[1] for r in rows], [r[2] for r in rows],
                                include_noise=run.include_noise)
    names = bundle.catalog.all_names
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FORECAST_HEADER)
    out_rows = []
    for (s, t, x, v), m, va, a, b in zip(rows, mean, var, lo, hi):
        w.writerow([s, names[t], repr(x), repr(float(m)), repr(float(va)), repr(float(a)), repr(float(b))])
        rec = {"subject_id": s, "task_id": names[t], "time": x, "mean": m, "lo95": a, "hi95": b}
        if np.isfinite(v):
            rec["truth"] = v
        out_rows.append(rec)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    _ensure_dir(out_dir)
    _atomic_write(args.out, buf.getvalue())
    _sidecar(args.out, run, {"bundle": os.path.abspath(args.bundle),
                             "condition_before": args.condition_before,
                             "query_after": args.query_after})
    if args.plot:
        from .plotting import plot_forecast
        plot_forecast(out_rows, args.plot)
    print(f"wrote {len(rows)} forecasts to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _read_table(path, need):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(need) <= set(reader.fieldnames):
            raise DataError(f"{path}: header must contain {list(need)}")
        return list(reader)


def cmd_eval(args) -> int:
    run, _ = resolve_config(args)
    fc = _read_table(args.forecast, FORECAST_HEADER)
    truth = _read_table(args.truth, ("subject_id", "task_id", "time", "value"))
    lookup = {}
    for r in truth:
        lookup[(r["subject_id"].strip(), r["task_id"].strip(), float(r["time"]))] = float(r["value"])
    subj, task, y, mean, lo, hi = [], [], [], [], [], []
    for lineno, r in enumerate(fc, start=2):
        key = (r["subject_id"].strip(), r["task_id"].strip(), float(r["time"]))
        if key not in lookup:
            raise DataError(f"{args.forecast}:{lineno}: no truth row for {key}")
        subj.append(key[0])
        task.append(key[1])
        y.append(lookup[key])
        mean.append(float(r["mean"]))
        lo.append(float(r["lo95"]))
        hi.append(float(r["hi95"]))
    if not y:
        raise DataError(f"{args.forecast}: no forecast rows")
    names = sorted(set(task))
    tid = np.array([names.index(t) for t in task])
    metrics = forecast_metrics(np.array(subj), tid, np.array(y), np.array(mean), np.array(lo),
                               np.array(hi), n_boot=run.n_boot, seed=run.seed,
                               task_names=dict(enumerate(names)))
    _ensure_dir(os.path.dirname(os.path.abspath(args.out)))
    _write_json(args.out, {**metrics, **_echo(run)})
    print(json.dumps(metrics["overall"]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# export-graph
# ---------------------------------------------------------------------------

def cmd_export_graph(args) -> int:
    run, _ = resolve_config(args)
    bundle = _load_bundle(args.bundle)
    if bundle.structure is None:
        raise DataError(f"bundle mode {bundle.mode!r} has no learned structure")
    _ensure_dir(args.out)
    names = list(bundle.catalog.all_names)
    _atomic_write(os.path.join(args.out, "graph.dot"), bundle.structure.to_dot(names))
    _write_json(os.path.join(args.out, "structure.json"), {**bundle.structure.to_dict(), **_echo(run)})
    from .plotting import plot_graph
    plot_graph(bundle.structure, os.path.join(args.out, "graph.png"), names)
    print(f"exported {bundle.structure.n_edges} edges to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="structgp", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="config file with key = value lines")
        _add_dataclass_flags(sp, RunConfig)

    s = sub.add_parser("simulate", help="generate ground truth and observations")
    s.add_argument("--out", required=True)
    s.add_argument("--recovery", action="store_true", help="also run the recovery experiment")
    s.add_argument("--oracle", action="store_true", help="score the truth itself (plumbing check)")
    s.add_argument("--subject-counts", type=lambda x: [int(v) for v in x.split(",")])
    common(s)
    _add_dataclass_flags(s, SimConfig, skip=("seed",), prefixed=("p",))
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a model to a CSV of observations")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--base", help="StructGP bundle whose graph is frozen (lp-fixed)")
    common(f)
    f.set_defaults(func=cmd_fit)

    q = sub.add_parser("predict", help="posterior forecasts for query rows")
    q.add_argument("--bundle", required=True)
    q.add_argument("--query", required=True)
    q.add_argument("--condition", help="CSV of conditioning observations")
    q.add_argument("--condition-before", type=float, help="only condition on records with time < T")
    q.add_argument("--query-after", type=float, help="only forecast query rows with time > T")
    q.add_argument("--out", required=True)
    q.add_argument("--plot", help="also render a forecast figure to this PNG")
    common(q)
    q.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="score a forecast CSV against the truth")
    e.add_argument("--forecast", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", required=True)
    common(e)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("export-graph", help="write DOT, JSON and PNG of a bundle's graph")
    g.add_argument("--bundle", required=True)
    g.add_argument("--out", required=True)
    common(g)
    g.set_defaults(func=cmd_export_graph)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("STRUCTGP_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
