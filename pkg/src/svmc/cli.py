"""Command-line harness: ``svmc simulate | filter | benchmark | stream | export-field``.

Data and results are JSON Lines, configs are JSON, tables and fields are CSV.
Exit codes: 0 success, 2 configuration / schema / input error, 3 numerical
failure during a run.
"""

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import EXPERIMENTS, ExperimentConfig, experiment_configs
from .errors import ConfigError, DomainError, NumericalError, SvmcError
from .filters import run_stream, summarize
from .gp import export_velocity_field, snapshot
from .simulators import Dataset, default_metadata, simulate, true_model

DATASET_SCHEMA = "svmc-dataset-v1"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _dumps(obj):
    return json.dumps(obj, allow_nan=False)


# --- dataset and record I/O -------------------------------------------------


def dataset_lines(ds):
    """Header record, then one record per step."""
    meta = ds.metadata
    header = {"schema": DATASET_SCHEMA, "system": meta["system"], "params": meta["params"], "seed": meta["seed"]}
    if ds.x is not None:
        header["x0"] = ds.x[0].tolist()
    yield _dumps(header)
    for t in range(ds.T):
        rec = {"t": t + 1, "y": ds.y[t].tolist()}
        if ds.x is not None:
            rec["x"] = ds.x[t + 1].tolist()
        yield _dumps(rec)


def write_dataset(path, ds):
    with open(path, "w") as fh:
        for line in dataset_lines(ds):
            fh.write(line + "\n")


def parse_header(rec):
    if not isinstance(rec, dict) or rec.get("schema") != DATASET_SCHEMA:
        raise ConfigError(f"expected a {DATASET_SCHEMA} header record")
    missing = {"system", "params", "seed"} - set(rec)
    if missing:
        raise ConfigError(f"dataset header lacks {sorted(missing)}")
    return {"system": rec["system"], "params": rec["params"], "seed": rec["seed"]}


def read_dataset(path):
    try:
        with open(path) as fh:
            lines = [ln for ln in fh if ln.strip()]
        if not lines:
            raise ConfigError(f"{path}: empty dataset file")
        header = json.loads(lines[0])
        meta = parse_header(header)
        recs = [json.loads(ln) for ln in lines[1:]]
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read dataset {path}: {e}") from None
    ts = [r.get("t") for r in recs]
    if ts != list(range(1, len(recs) + 1)):
        raise ConfigError(f"{path}: records must have t = 1..T in order")
    y = np.array([r["y"] for r in recs], dtype=float).reshape(len(recs), -1)
    x = None
    if "x0" in header and all("x" in r for r in recs):
        x = np.array([header["x0"]] + [r["x"] for r in recs], dtype=float)
    return Dataset(y, x, meta)


def write_records(fh, records):
    for r in records:
        fh.write(_dumps(r) + "\n")


# --- runs -------------------------------------------------------------------


def _model_for(meta, ys=None):
    model = true_model(meta)
    if ys is not None and ys.size and ys.shape[1] != model.dim_y:
        raise ConfigError(f"observations have dimension {ys.shape[1]}, model expects {model.dim_y}")
    return model


def filter_dataset(cfg, ds, replication=0, timing=True):
    """Run one configured filter over a dataset; returns (records, summary, runner)."""
    model = _model_for(ds.metadata, ds.y)
    runner = cfg.runner(model, run_stream(cfg.seed, replication))
    records = []
    for y in ds.y:
        rec = runner.step(y)
        if not timing:
            rec["wall_us"] = 0.0
        records.append(rec)
    return records, summarize(records, ds.x), runner


def _replication_job(args):
    cfg_dict, data, replication, timing = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    ds = Dataset(data["y"], data["x"], data["metadata"])
    return filter_dataset(cfg, ds, replication, timing)[1]


def run_benchmark(configs, ds, replications, workers=1, timing=True):
    """Summaries per method (dict name -> list over replications), in replication order."""
    data = {"y": ds.y, "x": ds.x, "metadata": ds.metadata}
    jobs = [(name, (cfg.to_dict(), data, r, timing)) for name, cfg in configs.items() for r in range(replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replication_job, [j for _, j in jobs]))
    else:
        results = [_replication_job(j) for _, j in jobs]
    out = {name: [] for name in configs}
    for (name, _), res in zip(jobs, results):
        out[name].append(res)
    return out


def mean_se(values):
    """Mean and standard error (sample std / sqrt(R); 0 for a single value)."""
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return None, None
    se = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(np.mean(v)), se


METRICS = ("neg_elbo", "rmse", "wall_s")


def benchmark_table(results):
    """Rows of method, R and mean/se per metric."""
    rows = []
    for name, summaries in results.items():
        row = {"method": name, "replications": len(summaries)}
        for m in METRICS:
            row[f"{m}_mean"], row[f"{m}_se"] = mean_se([s[m] for s in summaries])
        rows.append(row)
    return rows


def table_csv(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: "" if v is None else v for k, v in r.items()})
    return buf.getvalue()


def table_text(rows):
    def cell(m, s):
        return "n/a" if m is None else f"{m:.4g} ± {s:.2g}"

    header = f"{'method':<14}{'R':>4}  {'-ELBO':>22}  {'RMSE':>22}  {'wall (s)':>22}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['method']:<14}{r['replications']:>4}  "
            + "  ".join(f"{cell(r[f'{m}_mean'], r[f'{m}_se']):>22}" for m in METRICS)
        )
    return "\n".join(lines)


# --- commands ---------------------------------------------------------------


def _config_from_args(args):
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    return cfg.override(
        seed=getattr(args, "seed", None),
        method=getattr(args, "method", None),
        particles=getattr(args, "particles", None),
        grad_particles=getattr(args, "grad_particles", None),
        sgd_steps=getattr(args, "sgd_steps", None),
        replications=getattr(args, "replications", None),
    )


def cmd_simulate(args):
    cfg = _config_from_args(args)
    ds = simulate(cfg.system, seed=cfg.dataset_seed, **cfg.params)
    if args.out:
        write_dataset(args.out, ds)
    else:
        for line in dataset_lines(ds):
            sys.stdout.write(line + "\n")
    return EXIT_OK


def cmd_filter(args):
    cfg = _config_from_args(args)
    ds = read_dataset(args.data)
    records, summary, runner = filter_dataset(cfg, ds, timing=not args.no_timing)
    if args.out:
        with open(args.out, "w") as fh:
            write_records(fh, records)
    else:
        write_records(sys.stdout, records)
    if args.snapshot:
        if cfg.method != "svmc-gp":
            raise ConfigError("--snapshot needs method svmc-gp")
        with open(args.snapshot, "w") as fh:
            fh.write(_dumps(snapshot(runner.cloud)) + "\n")
    print(_dumps({"summary": summary}), file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_benchmark(args):
    overrides = {k: getattr(args, k) for k in ("particles", "grad_particles", "sgd_steps")}
    seed = 0 if args.seed is None else args.seed
    reps = 1 if args.replications is None else args.replications
    configs = experiment_configs(args.experiment, seed=seed, replications=reps, **overrides)
    if args.methods:
        unknown = set(args.methods) - set(configs)
        if unknown:
            raise ConfigError(f"unknown methods for {args.experiment}: {sorted(unknown)}")
        configs = {k: v for k, v in configs.items() if k in args.methods}
    base = next(iter(configs.values()))
    ds = simulate(base.system, seed=base.dataset_seed, **base.params)
    results = run_benchmark(configs, ds, reps, args.workers, timing=not args.no_timing)
    rows = benchmark_table(results)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table_csv(rows))
    print(table_text(rows))
    return EXIT_OK


def cmd_stream(args, stdin=None, stdout=None, stderr=None):
    """Line-in / line-out filtering of {"t", "y"} records.

    A dataset header line (as written by ``simulate``) may precede the
    observations and then defines the model; otherwise the model comes from
    the config's system and parameters.
    """
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    cfg = _config_from_args(args)
    runner = model = None
    meta = default_metadata(cfg.system, cfg.params, cfg.dataset_seed)
    for n, line in enumerate(stdin, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if isinstance(rec, dict) and "schema" in rec:
                if runner is not None:
                    raise ConfigError("header record after observations")
                meta = parse_header(rec)
                continue
            if not isinstance(rec, dict) or "y" not in rec or "t" not in rec:
                raise ConfigError('expected {"t": int, "y": [...]}')
            y = np.asarray(rec["y"], dtype=float).ravel()
            if runner is None:
                model = _model_for(meta, y[None])
                runner = cfg.runner(model, run_stream(cfg.seed))
            elif y.size != model.dim_y:
                raise ConfigError("observation dimension changed mid-stream")
            out = runner.step(y)
        except (ConfigError, DomainError, ValueError, TypeError) as e:
            stderr.write(_dumps({"error": str(e), "line": n}) + "\n")
            stderr.flush()
            continue
        if args.no_timing:
            out["wall_us"] = 0.0
        stdout.write(_dumps(out) + "\n")
        stdout.flush()
    return EXIT_OK


def cmd_export_field(args):
    try:
        with open(args.snapshot) as fh:
            snap = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read snapshot {args.snapshot}: {e}") from None
    bounds = np.asarray(args.bounds, dtype=float).reshape(-1, 2)
    if len(args.counts) != bounds.shape[0]:
        raise ConfigError("need one count per bounded dimension")
    rows = export_velocity_field(snap, bounds.tolist(), args.counts)
    d = bounds.shape[0]
    header = [f"x{i}" for i in range(d)] + [f"dx{i}" for i in range(d)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows([[repr(float(v)) for v in r] for r in rows])
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# --- entry point ------------------------------------------------------------


def _common(p, data=False):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=["kalman", "bpf", "svmc", "svmc-gp"])
    p.add_argument("--particles", type=int)
    p.add_argument("--grad-particles", type=int)
    p.add_argument("--sgd-steps", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--out")
    p.add_argument("--no-timing", action="store_true", help="write wall_us = 0 for byte-stable output")


def build_parser():
    parser = argparse.ArgumentParser(prog="svmc", description="Streaming particle filtering with online proposal learning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a dataset")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("filter", help="filter a dataset file")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--snapshot", help="write the final GP belief snapshot here (svmc-gp)")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("benchmark", help="replicated comparison of methods on a preset experiment")
    _common(p)
    p.add_argument("--experiment", required=True, choices=sorted(EXPERIMENTS))
    p.add_argument("--methods", nargs="+", help="subset of the preset's method variants")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("stream", help="filter JSONL observations from stdin")
    _common(p)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("export-field", help="CSV velocity field from a GP snapshot")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--bounds", type=float, nargs="+", required=True, help="lo hi per dimension")
    p.add_argument("--counts", type=int, nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_field)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"svmc: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except SvmcError as e:
        print(f"svmc: error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
