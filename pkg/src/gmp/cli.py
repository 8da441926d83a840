"""Command-line harness: train, ablate, sweep, grad-check, export-plot-data.

Run configuration is a flat INI file with [data], [model] and [train]
sections; every run directory gets a canonical config snapshot that
reproduces the run byte-for-byte. Exit codes: 0 success, 1 check failure,
2 usage/config error, 3 numeric abort.
"""

import argparse
import configparser
import json
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    pass


def _apply_thread_cap():
    threads = os.environ.get("GMP_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, threads)


# Must run before numpy loads its BLAS backend.
_apply_thread_cap()

import numpy as np  # noqa: E402

from .checkpoint import save_checkpoint  # noqa: E402
from .data import (SynthConfig, dataset_hash, generate, make_preset,  # noqa: E402
                   split_leave_one_domain_out)
from .gradcheck import run_grad_check  # noqa: E402
from .model import ModelConfig, init_model  # noqa: E402
from .trainer import (EVAL_HEADER, METRICS_HEADER, STRATEGIES,  # noqa: E402
                      TrainConfig, eval_csv, metrics_csv, run_training)

SWEEP_AXES = ("alpha_k", "alpha_p", "lambda")
ABLATION_HEADER = "strategy,source_val_acc,target_acc,dataset_hash,status"
SWEEP_HEADER = "axis,value,source_val_acc,target_acc"
PLOT_HEADER = "step,series,value"
PLOT_SERIES = ("rho_v", "rho_a", "sigma_v", "sigma_a", "k_v", "k_a", "p_v", "p_a")


@dataclass
class RunSpec:
    synth: SynthConfig
    target_domain: int
    val_fraction: float
    encoder_hidden: int
    feature_dim: int
    train: TrainConfig


_DATA_KEYS = {"preset", "seed", "num_classes", "num_domains",
              "samples_per_class_per_domain", "dim_v", "dim_a",
              "discrim_strength_v", "discrim_strength_a",
              "domain_leak_v", "domain_leak_a", "noise_std_v", "noise_std_a",
              "target_domain", "val_fraction"}
_MODEL_KEYS = {"encoder_hidden", "feature_dim"}
_TRAIN_KEYS = {"strategy", "lambda", "eta", "alpha_k", "alpha_p", "epochs",
               "batch_size", "seed"}


def _section(cp, name, known):
    if not cp.has_section(name):
        return {}
    sec = dict(cp.items(name))
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"section [{name}]: unknown keys {sorted(unknown)}")
    return sec


def _cast(section, sec, key, cast, default):
    if key not in sec:
        return default
    raw = sec[key]
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"section [{section}], key {key!r}: "
                          f"cannot parse {raw!r}") from exc


def load_run_spec(path, seed=None, strategy=None) -> RunSpec:
    """Parse an INI run configuration; optional seed/strategy overrides."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}")
    unknown = set(cp.sections()) - {"data", "model", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")

    data = _section(cp, "data", _DATA_KEYS)
    model = _section(cp, "model", _MODEL_KEYS)
    train = _section(cp, "train", _TRAIN_KEYS)

    train_seed = seed if seed is not None else _cast("train", train, "seed", int, 0)
    data_seed = _cast("data", data, "seed", int, train_seed)

    base = make_preset(data.get("preset", "asym-v"), seed=data_seed)
    try:
        synth = SynthConfig(
            num_classes=_cast("data", data, "num_classes", int, base.num_classes),
            num_domains=_cast("data", data, "num_domains", int, base.num_domains),
            samples_per_class_per_domain=_cast(
                "data", data, "samples_per_class_per_domain", int,
                base.samples_per_class_per_domain),
            dim_v=_cast("data", data, "dim_v", int, base.dim_v),
            dim_a=_cast("data", data, "dim_a", int, base.dim_a),
            discrim_strength={
                "v": _cast("data", data, "discrim_strength_v", float,
                           base.discrim_strength["v"]),
                "a": _cast("data", data, "discrim_strength_a", float,
                           base.discrim_strength["a"])},
            domain_leak={
                "v": _cast("data", data, "domain_leak_v", float,
                           base.domain_leak["v"]),
                "a": _cast("data", data, "domain_leak_a", float,
                           base.domain_leak["a"])},
            noise_std={
                "v": _cast("data", data, "noise_std_v", float,
                           base.noise_std["v"]),
                "a": _cast("data", data, "noise_std_a", float,
                           base.noise_std["a"])},
            seed=data_seed)
        train_cfg = TrainConfig(
            strategy=strategy if strategy is not None
            else train.get("strategy", "gmp"),
            lam=_cast("train", train, "lambda", float, 0.1),
            eta=_cast("train", train, "eta", float, 1e-4),
            alpha_k=_cast("train", train, "alpha_k", float, 0.3),
            alpha_p=_cast("train", train, "alpha_p", float, 0.3),
            epochs=_cast("train", train, "epochs", int, 20),
            batch_size=_cast("train", train, "batch_size", int, 64),
            seed=train_seed)
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc))

    return RunSpec(
        synth=synth,
        target_domain=_cast("data", data, "target_domain", int, 2),
        val_fraction=_cast("data", data, "val_fraction", float, 0.2),
        encoder_hidden=_cast("model", model, "encoder_hidden", int, 256),
        feature_dim=_cast("model", model, "feature_dim", int, 32),
        train=train_cfg)


def render_config(spec: RunSpec) -> str:
    """Canonical, fully resolved INI snapshot of a run configuration."""
    s, t = spec.synth, spec.train
    lines = [
        "[data]",
        f"seed = {s.seed}",
        f"num_classes = {s.num_classes}",
        f"num_domains = {s.num_domains}",
        f"samples_per_class_per_domain = {s.samples_per_class_per_domain}",
        f"dim_v = {s.dim_v}",
        f"dim_a = {s.dim_a}",
        f"discrim_strength_v = {s.discrim_strength['v']!r}",
        f"discrim_strength_a = {s.discrim_strength['a']!r}",
        f"domain_leak_v = {s.domain_leak['v']!r}",
        f"domain_leak_a = {s.domain_leak['a']!r}",
        f"noise_std_v = {s.noise_std['v']!r}",
        f"noise_std_a = {s.noise_std['a']!r}",
        f"target_domain = {spec.target_domain}",
        f"val_fraction = {spec.val_fraction!r}",
        "",
        "[model]",
        f"encoder_hidden = {spec.encoder_hidden}",
        f"feature_dim = {spec.feature_dim}",
        "",
        "[train]",
        f"strategy = {t.strategy}",
        f"lambda = {t.lam!r}",
        f"eta = {t.eta!r}",
        f"alpha_k = {t.alpha_k!r}",
        f"alpha_p = {t.alpha_p!r}",
        f"epochs = {t.epochs}",
        f"batch_size = {t.batch_size}",
        f"seed = {t.seed}",
        "",
    ]
    return "\n".join(lines)


def model_config_for(spec: RunSpec) -> ModelConfig:
    return ModelConfig(input_dim_v=spec.synth.dim_v,
                       input_dim_a=spec.synth.dim_a,
                       feature_dim=spec.feature_dim,
                       num_classes=spec.synth.num_classes,
                       num_domains=spec.synth.num_domains,
                       encoder_hidden=spec.encoder_hidden,
                       seed=spec.train.seed)


def run_experiment(spec: RunSpec, out_dir: Path, dataset=None) -> dict:
    """Train one configuration end to end and persist all artifacts.

    Returns the manifest dict (also written to manifest.json).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    if dataset is None:
        dataset = generate(spec.synth)
    train_ds, val_ds, test_ds = split_leave_one_domain_out(
        dataset, spec.target_domain, spec.val_fraction)
    params = init_model(model_config_for(spec))
    result = run_training(params, spec.train, train_ds, val_ds, test_ds)

    metrics_path = out_dir / "metrics.csv"
    eval_path = out_dir / "eval.csv"
    ckpt_path = out_dir / "checkpoint.gmpc"
    snapshot_path = out_dir / "config.ini"
    manifest_path = out_dir / "manifest.json"
    metrics_path.write_text(metrics_csv(result.metrics))
    eval_path.write_text(eval_csv(result.eval_rows))
    save_checkpoint(ckpt_path, result.best_params)
    snapshot_path.write_text(render_config(spec))

    manifest = {
        "config_snapshot": snapshot_path.name,
        "artifacts": {
            "metrics_csv": metrics_path.name,
            "eval_csv": eval_path.name,
            "checkpoint": ckpt_path.name,
        },
        "dataset_hash": dataset_hash(dataset),
        "best_epoch": result.best_epoch,
        "duration_seconds": time.time() - t0,
        "summary": result.summary,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def cmd_train(args) -> int:
    spec = load_run_spec(args.config, seed=args.seed, strategy=args.strategy)
    manifest = run_experiment(spec, Path(args.out))
    summary = manifest["summary"]
    print(f"run complete: {args.out}")
    print(f"best_source_val_acc = {summary['best_source_val_acc']:.4f} "
          f"(epoch {manifest['best_epoch']})")
    print(f"target_acc_at_best = {summary['target_acc_at_best']:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    spec = load_run_spec(args.config, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = generate(spec.synth)
    d_hash = dataset_hash(dataset)
    rows, all_ok = [], True
    for strat in STRATEGIES:
        sub = replace(spec, train=replace(spec.train, strategy=strat))
        try:
            manifest = run_experiment(sub, out_dir / strat, dataset=dataset)
            summary = manifest["summary"]
            rows.append(f"{strat},{summary['best_source_val_acc']!r},"
                        f"{summary['target_acc_at_best']!r},{d_hash},ok")
        except FloatingPointError as exc:
            print(f"strategy {strat} failed: {exc}", file=sys.stderr)
            rows.append(f"{strat},nan,nan,{d_hash},failed")
            all_ok = False
    table = "\n".join([ABLATION_HEADER] + rows) + "\n"
    (out_dir / "ablation_summary.csv").write_text(table)
    print(table, end="")
    return EXIT_OK if all_ok else EXIT_CHECK_FAILED


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}; "
                          f"choose from {SWEEP_AXES}")
    raw = [v for v in args.values.split(",") if v.strip()]
    if not raw:
        raise ConfigError("empty sweep value list")
    try:
        values = [float(v) for v in raw]
    except ValueError as exc:
        raise ConfigError(f"cannot parse sweep values {args.values!r}") from exc
    spec = load_run_spec(args.config, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = generate(spec.synth)
    field = "lam" if args.axis == "lambda" else args.axis
    rows = []
    for value in values:
        sub = replace(spec, train=replace(spec.train, **{field: value}))
        manifest = run_experiment(sub, out_dir / f"{args.axis}_{value!r}",
                                  dataset=dataset)
        summary = manifest["summary"]
        rows.append(f"{args.axis},{value!r},{summary['best_source_val_acc']!r},"
                    f"{summary['target_acc_at_best']!r}")
    table = "\n".join([SWEEP_HEADER] + rows) + "\n"
    (out_dir / "sweep.csv").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    passed, reports, max_err = run_grad_check(seed=args.seed,
                                              tolerance=args.tolerance)
    for rep in reports:
        print(f"{rep.loss:>14}  {rep.param:<12} rel_err={rep.rel_err:.3e}")
    print(f"max relative error: {max_err:.3e} (tolerance {args.tolerance:g})")
    if passed:
        print("gradient check PASSED")
        return EXIT_OK
    offenders = [f"{r.loss}:{r.param}" for r in reports
                 if r.rel_err >= args.tolerance]
    print(f"gradient check FAILED for: {', '.join(offenders)}")
    return EXIT_CHECK_FAILED


def cmd_export_plot_data(args) -> int:
    src = Path(args.metrics)
    if not src.is_file():
        raise ConfigError(f"metrics file not found: {src}")
    text = src.read_text()
    out_lines = [PLOT_HEADER]
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines:
        if lines[0] != METRICS_HEADER:
            raise ConfigError(f"unrecognized metrics header in {src}")
        columns = lines[0].split(",")
        idx = {name: columns.index(name) for name in PLOT_SERIES}
        step_idx = columns.index("step")
        for line in lines[1:]:
            cells = line.split(",")
            if len(cells) != len(columns):
                raise ConfigError(f"malformed metrics row: {line!r}")
            for name in PLOT_SERIES:
                out_lines.append(f"{cells[step_idx]},{name},{cells[idx[name]]}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "plot_data.csv"
    out_path.write_text("\n".join(out_lines) + "\n")
    print(f"wrote {out_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gmp",
        description="Gradient modulation + conflict-adaptive projection "
                    "training harness on a synthetic two-modality benchmark")
    sub = parser.add_subparsers(dest="command")

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="path to INI run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default="runs", help="output directory")

    p_train = sub.add_parser("train", help="run one training configuration")
    common(p_train)
    p_train.add_argument("--strategy", default=None, choices=STRATEGIES,
                         help="override the config strategy")
    p_train.set_defaults(func=cmd_train)

    p_ablate = sub.add_parser("ablate",
                              help="run every strategy on identical data")
    common(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_sweep = sub.add_parser("sweep", help="sweep one hyperparameter axis")
    common(p_sweep)
    p_sweep.add_argument("--axis", required=True, help="alpha_k|alpha_p|lambda")
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated list of axis values")
    p_sweep.set_defaults(func=cmd_sweep)

    p_check = sub.add_parser("grad-check",
                             help="finite-difference gradient verification")
    p_check.add_argument("--seed", type=int, default=0)
    p_check.add_argument("--tolerance", type=float, default=1e-4)
    p_check.set_defaults(func=cmd_grad_check)

    p_export = sub.add_parser("export-plot-data",
                              help="metrics CSV -> tidy long-format CSV")
    p_export.add_argument("metrics", help="path to a metrics.csv")
    p_export.add_argument("--out", default="runs", help="output directory")
    p_export.set_defaults(func=cmd_export_plot_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
