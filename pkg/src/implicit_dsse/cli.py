"""Command-line interface.

Subcommands::

    gen-data  build a dataset bundle
    train     fit an SF, PS or IL model on a dataset
    eval      score a checkpoint on the test split
    report    pool per-run CSVs into summary and improvement tables
    repro     full multi-seed loop for one (network, scenario, variability) cell

Every command writes a ``manifest.json``-style record next to its output.
Exit codes: 0 ok, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (CaseParseError, ConfigurationError, ContractViolation, DivergenceError,
                     NetworkValidationError, ObservabilityError, SingularBranchError, TrainingAborted)
from .evaluation import (GAMMA_GRID, aggregate_runs, read_metrics_csv, rmse_report,
                         write_improvement_csv, write_metrics_csv)
from .grid import parse_case
from .measurements import SCENARIOS, MeasurementPlan, load_plan, make_plan
from .neural import TrainingConfig
from .pipelines import (DEFAULT_COUNTS, TrainedModel, build_dataset, estimate_batch, load_checkpoint,
                        load_dataset, save_checkpoint, save_dataset, train_il, train_ps, train_sf)

log = logging.getLogger("implicit_dsse")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
WORKERS_ENV = "IMPLICIT_DSSE_WORKERS"
REFERENCES = ("truth", "retrospective")

# non-training settings and their built-in defaults
RUN_DEFAULTS = {
    "network": "ieee33", "scenario": "PMU", "plan": None, "variability": 0.10,
    "counts": list(DEFAULT_COUNTS), "seed": 0, "seeds": 5, "pool_seed": 0,
    "gammas": list(GAMMA_GRID), "reference": "truth", "noise_scale": 1.0,
}


# -- config ----------------------------------------------------------------

def _read_config_file(path):
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    # a manifest carries its effective config under "config"
    return doc.get("config", doc) if "versions" in doc else doc


def merge_config(flags: dict, file_doc: dict) -> dict:
    """Effective config: flags override the config file, which overrides defaults."""
    run = dict(RUN_DEFAULTS)
    training = TrainingConfig().to_dict()
    for key, value in file_doc.items():
        if key == "training":
            if not isinstance(value, dict):
                raise ConfigurationError("config field 'training' must be an object")
            for k, v in value.items():
                if k not in training:
                    raise ConfigurationError(f"unknown config field 'training.{k}'")
                training[k] = v
        elif key == "seed":
            run[key] = training[key] = value
        elif key in training:
            training[key] = value
        elif key in run:
            run[key] = value
        else:
            raise ConfigurationError(f"unknown config field '{key}'")
    for key, value in flags.items():
        if value is None:
            continue
        if key == "seed":
            run[key] = training[key] = value
        elif key in training:
            training[key] = value
        elif key in run:
            run[key] = value
    run["training"] = training
    return validate_config(run)


def validate_config(cfg: dict) -> dict:
    try:
        TrainingConfig(**cfg["training"])
    except TypeError as exc:
        raise ConfigurationError(f"training: {exc}") from exc
    counts = cfg["counts"]
    if isinstance(counts, str):
        counts = _parse_counts(counts)
    if (not isinstance(counts, (list, tuple)) or len(counts) != 3
            or any(not isinstance(c, int) or c < 0 for c in counts)):
        raise ConfigurationError(f"counts: expected three non-negative integers, got {counts!r}")
    cfg["counts"] = list(counts)
    v = cfg["variability"]
    if not isinstance(v, (int, float)) or not 0 <= v < 1:
        raise ConfigurationError(f"variability: must lie in [0, 1), got {v!r}")
    cfg["variability"] = float(v)
    if cfg["scenario"] not in SCENARIOS and cfg.get("plan") is None:
        raise ConfigurationError(f"scenario: unknown scenario {cfg['scenario']!r}; choose from {sorted(SCENARIOS)}")
    if cfg["reference"] not in REFERENCES:
        raise ConfigurationError(f"reference: must be one of {REFERENCES}")
    gammas = cfg["gammas"]
    if isinstance(gammas, str):
        gammas = _parse_floats(gammas, "gammas")
    if not gammas or any(not 0 <= g <= 1 for g in gammas):
        raise ConfigurationError(f"gammas: values must lie in [0, 1], got {gammas!r}")
    cfg["gammas"] = [float(g) for g in gammas]
    seeds = cfg["seeds"]
    if isinstance(seeds, int):
        if seeds < 1:
            raise ConfigurationError("seeds: need at least one seed")
    elif not (isinstance(seeds, list) and seeds and all(isinstance(s, int) for s in seeds)):
        raise ConfigurationError(f"seeds: expected a count or a list of integers, got {seeds!r}")
    if not cfg["noise_scale"] > 0:
        raise ConfigurationError("noise_scale: must be positive")
    return cfg


def _parse_counts(text):
    try:
        counts = [int(c) for c in str(text).split(",")]
    except ValueError:
        raise ConfigurationError(f"counts: expected 'train,val,test', got {text!r}") from None
    if len(counts) != 3:
        raise ConfigurationError(f"counts: expected three values, got {text!r}")
    return counts


def _counts_arg(text):
    try:
        return _parse_counts(text)
    except ConfigurationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _parse_floats(text, name):
    try:
        return [float(g) for g in str(text).split(",")]
    except ValueError:
        raise ConfigurationError(f"{name}: expected comma-separated numbers, got {text!r}") from None


def _seed_list(seeds):
    return list(range(seeds)) if isinstance(seeds, int) else list(seeds)


def parse_cell(text):
    """'ieee33/PMU/0.10' -> ('ieee33', 'PMU', 0.1)."""
    parts = str(text).split("/")
    if len(parts) != 3:
        raise ConfigurationError(f"cell: expected network/scenario/variability, got {text!r}")
    try:
        var = float(parts[2])
    except ValueError:
        raise ConfigurationError(f"cell: variability {parts[2]!r} is not a number") from None
    return parts[0], parts[1], var


# -- manifests and IO ------------------------------------------------------

def _git_hash():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def _versions():
    import scipy
    return {"implicit_dsse": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def write_manifest(path, command, config, seeds=None, extra=None):
    doc = {"command": command, "config": config, "seeds": seeds, "versions": _versions(),
           "git": _git_hash(), **(extra or {})}
    _atomic_text(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _atomic_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def config_hash(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]


def _resolve_plan(cfg, network) -> MeasurementPlan:
    if cfg.get("plan"):
        return load_plan(cfg["plan"])
    return make_plan(cfg["scenario"], network)


def _network_for(dataset, override=None):
    source = override or dataset.provenance.get("network_source") or dataset.provenance.get("network")
    network = parse_case(source)
    if network.digest() != dataset.provenance.get("network_hash"):
        raise ConfigurationError(f"network: {source!r} does not match the network the dataset was built on")
    return network


def _plan_for(dataset):
    return MeasurementPlan.from_dict(dataset.provenance["plan"])


def _training_config(cfg, **over) -> TrainingConfig:
    return TrainingConfig(**{**cfg["training"], **over})


# -- commands --------------------------------------------------------------

def cmd_gen_data(args, cfg):
    network = parse_case(cfg["network"])
    plan = _resolve_plan(cfg, network)
    ds = build_dataset(network, plan, cfg["variability"], cfg["counts"], cfg["seed"], cfg["noise_scale"])
    ds.provenance["network_source"] = cfg["network"]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "gen-data", cfg, [cfg["seed"]],
                   {"provenance": ds.provenance})
    print(f"wrote {out} ({len(ds)} samples, regenerated {ds.provenance['regenerated']})")


def _load_warm_start(path):
    if path is None:
        raise ConfigurationError("warm-start: IL training needs --warm-start pointing at a PS checkpoint")
    model, _ = load_checkpoint(path)
    if model.method != "PS":
        raise ConfigurationError(f"warm-start: {path} holds a {model.method} model, expected PS")
    return model


def cmd_train(args, cfg):
    ds = load_dataset(args.data)
    method = args.method.upper()
    tcfg = _training_config(cfg)
    if method == "IL":
        warm = _load_warm_start(args.warm_start)
        network = _network_for(ds, args.network)
        model = train_il(ds, tcfg, warm, warm.sigma_d, network, _plan_for(ds))
    elif method == "PS":
        model = train_ps(ds, tcfg)
    else:
        model = train_sf(ds, tcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    extra = {"config": tcfg.to_dict(), "config_hash": config_hash(tcfg.to_dict(), ds.provenance),
             "provenance": ds.provenance}
    save_checkpoint(model, out, extra)
    write_manifest(out.with_name(out.name + ".manifest.json"), f"train --method {args.method}", cfg,
                   [tcfg.seed], {"data": str(args.data), "warm_start": args.warm_start})
    print(f"wrote {out} ({model.history.get('epochs')} epochs, best {model.history.get('best_epoch')})")


def evaluate_model(model: TrainedModel, ds, network, plan, reference="truth", seed=None):
    te = ds.test
    if len(te) == 0:
        raise ConfigurationError("dataset has an empty test split")
    est = estimate_batch(model.method, model, ds.z_a[te], plan, network)
    ref = ds.x_true[te] if reference == "truth" else ds.x_ref[te]
    meta = {"method": model.method, "network": ds.provenance.get("network"),
            "scenario": ds.provenance.get("scenario"), "variability": ds.provenance.get("variability"),
            "gamma": model.gamma, "reference": reference, "seeds": [] if seed is None else [int(seed)]}
    ok = np.all(np.isfinite(est.x), axis=1)
    if not ok.all():
        raise DivergenceError(f"{int((~ok).sum())} test estimates are non-finite")
    return rmse_report(est.x, ref, network, meta)


def cmd_eval(args, cfg):
    ds = load_dataset(args.data)
    model, doc = load_checkpoint(args.checkpoint)
    network = _network_for(ds, args.network)
    seed = (doc.get("config") or {}).get("seed")
    report = evaluate_model(model, ds, network, _plan_for(ds), cfg["reference"], seed)
    out = Path(args.out)
    write_metrics_csv(out, [report])
    write_manifest(out.with_name(out.name + ".manifest.json"), "eval", cfg, report.metadata["seeds"],
                   {"data": str(args.data), "checkpoint": str(args.checkpoint)})
    print(f"{model.method}: RMSE_V {report.rmse_v:.4e}  RMSE_theta {report.rmse_theta:.4e} rad  "
          f"(reference: {cfg['reference']})")


def cmd_report(args, cfg):
    reports = [r for path in args.inputs for r in read_metrics_csv(path)]
    agg = aggregate_runs(reports)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "summary.csv", agg.reports)
    write_improvement_csv(out / "improvement.csv", agg.improvement)
    write_manifest(out / "manifest.json", "report", cfg, None, {"inputs": [str(p) for p in args.inputs]})
    _print_summary(agg)


def _print_summary(agg):
    for r in agg.reports:
        tag = r.method if r.gamma is None else f"{r.method}(g={r.gamma:g})"
        sd = "" if r.std is None else f" +- {r.std['rmse_v']:.2e}"
        print(f"{tag:10s} RMSE_V {r.rmse_v:.4e}{sd}  RMSE_theta {np.rad2deg(r.rmse_theta):.4e} deg  "
              f"RMSE_P {r.rmse_p:.4e}")
    for row in agg.improvement:
        print(f"IL vs PS improvement: {row.improvement_pct:.2f}% (best gamma {row.best_gamma:g})")


def _checkpoint_or_train(path, key, train_fn):
    """Reuse a finished checkpoint whose config hash matches ``key``."""
    path = Path(path)
    if path.exists():
        try:
            model, doc = load_checkpoint(path)
            if doc.get("config_hash") == key:
                log.info("resuming from %s", path)
                return model
        except (ValueError, KeyError, ContractViolation):
            log.warning("ignoring unreadable checkpoint %s", path)
    model = train_fn()
    save_checkpoint(model, path, {"config_hash": key})
    return model


def run_seed(job):
    """One repetition of the repro loop; returns per-run report rows."""
    cfg, seed, pool_path, out_dir = job
    pool = load_dataset(pool_path)
    ds = pool.resplit(seed)
    network = _network_for(ds)
    plan = _plan_for(ds)
    base = _training_config(cfg, seed=seed)
    ck = Path(out_dir) / f"seed{seed}"
    ck.mkdir(parents=True, exist_ok=True)
    prov = ds.provenance

    sf = _checkpoint_or_train(ck / "sf.json", config_hash("SF", base.to_dict(), prov),
                              lambda: train_sf(ds, base))
    ps = _checkpoint_or_train(ck / "ps.json", config_hash("PS", base.to_dict(), prov),
                              lambda: train_ps(ds, base))
    models = [sf, ps]
    for g in cfg["gammas"]:
        il_cfg = replace(base, gamma=g)
        models.append(_checkpoint_or_train(
            ck / f"il_g{g:g}.json", config_hash("IL", il_cfg.to_dict(), prov),
            lambda il_cfg=il_cfg: train_il(ds, il_cfg, ps, ps.sigma_d, network, plan)))
    return [evaluate_model(m, ds, network, plan, cfg["reference"], seed) for m in models]


def _workers():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV}: expected an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"{WORKERS_ENV}: must be at least 1")
    return n


def cmd_repro(args, cfg):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    network = parse_case(cfg["network"])
    plan = _resolve_plan(cfg, network)
    pool_path = out / "pool.npz"
    pool_prov = {"network_hash": network.digest(), "scenario": plan.name,
                 "variability": cfg["variability"], "seed": cfg["pool_seed"], "counts": cfg["counts"],
                 "noise_scale": cfg["noise_scale"]}
    reuse = False
    if pool_path.exists():
        prov = load_dataset(pool_path).provenance
        reuse = all(prov.get(k) == v for k, v in pool_prov.items())
    if not reuse:
        ds = build_dataset(network, plan, cfg["variability"], cfg["counts"], cfg["pool_seed"],
                           cfg["noise_scale"])
        ds.provenance["network_source"] = cfg["network"]
        save_dataset(ds, pool_path)

    seeds = _seed_list(cfg["seeds"])
    jobs = [(cfg, s, str(pool_path), str(out)) for s in seeds]
    workers = min(_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run_seed, jobs))
    else:
        results = [run_seed(j) for j in jobs]
    runs = [r for rs in results for r in rs]
    agg = aggregate_runs(runs)
    write_metrics_csv(out / "runs.csv", runs)
    write_metrics_csv(out / "summary.csv", agg.reports)
    write_improvement_csv(out / "improvement.csv", agg.improvement)
    write_manifest(out / "manifest.json", "repro", cfg, seeds)
    _print_summary(agg)


# -- argument parsing ------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON config file (flags take precedence)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_training(p):
    g = p.add_argument_group("training overrides")
    g.add_argument("--max-epochs", dest="max_epochs", type=int)
    g.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--gn-iters", dest="gn_iters", type=int)
    g.add_argument("--gn-warm-start", dest="gn_warm_start", action="store_const", const=True,
                   help="start training-time WLS solves from the previous epoch's estimate")


def build_parser():
    parser = argparse.ArgumentParser(prog="implicit-dsse",
                                     description="Distribution-system state estimation with learned pseudo-measurements.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset bundle")
    p.add_argument("--network", help="bundled case name or case file path")
    p.add_argument("--scenario", help=f"measurement scenario ({', '.join(sorted(SCENARIOS))})")
    p.add_argument("--plan", help="custom plan JSON (overrides --scenario)")
    p.add_argument("--variability", type=float)
    p.add_argument("--counts", type=_counts_arg, help="train,val,test sample counts")
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-scale", dest="noise_scale", type=float)
    p.add_argument("--out", default="dataset.npz")
    _add_common(p)

    p = sub.add_parser("train", help="train an SF, PS or IL model")
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True, choices=("sf", "ps", "il"))
    p.add_argument("--gamma", type=float, help="hybrid-loss weight for IL")
    p.add_argument("--warm-start", dest="warm_start", help="PS checkpoint (required for il)")
    p.add_argument("--network", help="override the dataset's network source")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="model.json")
    _add_training(p)
    _add_common(p)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--network", help="override the dataset's network source")
    p.add_argument("--reference", choices=REFERENCES, help="truth (default) or retrospective WLS")
    p.add_argument("--out", default="metrics.csv")
    _add_common(p)

    p = sub.add_parser("report", help="aggregate per-run metric CSVs")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out-dir", dest="out_dir", default="report")
    _add_common(p)

    p = sub.add_parser("repro", help="multi-seed SF/PS/IL loop for one cell")
    p.add_argument("--cell", help="network/scenario/variability, e.g. ieee33/PMU/0.10")
    p.add_argument("--seeds", type=int, help="number of repetitions (seeds 0..N-1)")
    p.add_argument("--counts", type=_counts_arg)
    p.add_argument("--gammas", help="comma-separated IL gamma grid")
    p.add_argument("--pool-seed", dest="pool_seed", type=int, help="seed of the shared sample pool")
    p.add_argument("--reference", choices=REFERENCES)
    p.add_argument("--out-dir", dest="out_dir", default="repro")
    _add_training(p)
    _add_common(p)
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "report": cmd_report, "repro": cmd_repro}
_NOT_CONFIG = {"command", "config", "verbose", "out", "out_dir", "data", "checkpoint", "inputs",
               "warm_start", "method", "cell"}


def _flags(args) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    if getattr(args, "cell", None):
        flags["network"], flags["scenario"], flags["variability"] = parse_cell(args.cell)
    if flags.get("network") and getattr(args, "command", None) in ("train", "eval"):
        flags.pop("network")  # handled as an explicit override
    return flags


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train" and args.method == "il" and not args.warm_start:
            raise ConfigurationError("warm-start: IL training needs --warm-start pointing at a PS checkpoint")
        cfg = merge_config(_flags(args), _read_config_file(args.config))
        COMMANDS[args.command](args, cfg)
    except (ConfigurationError, ContractViolation, CaseParseError, NetworkValidationError,
            SingularBranchError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, ObservabilityError, TrainingAborted) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
