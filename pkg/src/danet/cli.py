"""Command-line interface.

Subcommands: train, eval, compress, mask-report, synth, flops. Settings come
from three layers with strict precedence: command-line flag, then config
file, then built-in default. Config files are flat ``key = value`` lines
(``#`` comments allowed); unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import (DataError, load_csv, PreprocessState, read_schema,
                   stratified_split, synth_generate, write_csv)
from .entmax import entmax15
from .network import DANet, DANetConfig, count_flops, count_flops_folded
from .reparam import CompressedModel, compress_model
from .serialize import ContainerError, load_model, save_model
from .training import TrainConfig, evaluate, fit, history_to_csv, TrainingError


class ConfigError(ValueError):
    """Bad config file or flag combination."""


@dataclass
class RunConfig:
    """Every tunable the CLI understands, with its default."""

    data: str | None = None
    schema: str | None = None
    out: str | None = None
    task: str = "class"
    seed: int = 0
    depth: int = 8
    k0: int = 5
    d0: int = 32
    d1: int = 64
    dropout: float = 0.1
    head_hidden: int = 0
    ghost_size: int = 256
    batch_size: int = 8192
    lr0: float = 0.008
    decay_factor: float = 0.95
    decay_every: int = 20
    weight_decay: float = 1e-5
    nu1: float = 0.8
    nu2: float = 1.0
    beta1: float = 0.995
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 30
    valid_frac: float = 0.2


_FIELD_TYPES = {f.name: (str if f.name in ("data", "schema", "out", "task") else f.type)
                for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind is str or key in ("data", "schema", "out", "task"):
        return raw
    try:
        if kind == "int":
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None


def parse_config_file(path) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate config key {key!r}")
            values[key] = _coerce(key, val)
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """flag > config file > default."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, val in parse_config_file(args.config).items():
            setattr(cfg, key, val)
    for key in _FIELD_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            setattr(cfg, key, flag)
    return cfg


def _require(cfg: RunConfig, command: str, *keys: str) -> None:
    for key in keys:
        if getattr(cfg, key) in (None, ""):
            raise ConfigError(f"{command}: --{key} (or config key '{key}') is required")


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.batch_size, ghost_size=cfg.ghost_size, lr0=cfg.lr0,
        decay_factor=cfg.decay_factor, decay_every=cfg.decay_every,
        weight_decay=cfg.weight_decay, nu1=cfg.nu1, nu2=cfg.nu2,
        beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
        max_epochs=cfg.max_epochs, patience=cfg.patience, seed=cfg.seed,
    )


def _metric_name(task: str) -> str:
    return "accuracy" if task == "class" else "mse"


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "train", "data", "schema", "out")
    schema = read_schema(cfg.schema)
    ds = load_csv(cfg.data, schema, task=cfg.task)
    num_classes = 2
    if cfg.task == "class":
        num_classes = int(ds.targets.max()) + 1
        if num_classes < 2:
            raise DataError(f"train: need at least 2 classes, found {num_classes}")
    train_raw, valid_raw = stratified_split(ds, frac=cfg.valid_frac, seed=cfg.seed)
    pp = PreprocessState()
    train_set = pp.fit(train_raw)
    valid_set = pp.apply(valid_raw)

    net_cfg = DANetConfig(depth=cfg.depth, k0=cfg.k0, d0=cfg.d0, d1=cfg.d1,
                          dropout=cfg.dropout, head_hidden=cfg.head_hidden,
                          task=cfg.task, num_classes=num_classes)
    model = DANet(train_set.n_features, net_cfg, ghost_size=cfg.ghost_size, seed=cfg.seed)
    result = fit(model, train_set, valid_set, _train_config(cfg))

    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    target_name = next(n for n, k in schema.items() if k == "target")
    save_model(out_dir / "model.danet", model, feature_names=ds.names,
               feature_kinds=ds.kinds, preprocess=pp, target_name=target_name)
    history_to_csv(result.history, out_dir / "history.csv")

    full = pp.apply(ds)
    metric = evaluate(model, full)
    name = _metric_name(cfg.task)
    line = (f"dataset={Path(cfg.data).stem} depth={cfg.depth} k0={cfg.k0} "
            f"d0={cfg.d0} d1={cfg.d1} seed={cfg.seed} "
            f"{name}={metric:.6f} valid_{name}={result.best_metric:.6f} "
            f"epochs={result.epochs_run}")
    (out_dir / "metrics.txt").write_text(line + "\n", encoding="utf-8")
    print(line)
    return 0


def _load_eval_dataset(bundle, data_path, schema_path):
    if schema_path:
        schema = read_schema(schema_path)
    else:
        if bundle.feature_names is None or bundle.manifest.get("target") is None:
            raise ConfigError(
                "eval: the model container carries no feature schema; pass --schema"
            )
        schema = {n: k for n, k in zip(bundle.feature_names, bundle.feature_kinds)}
        schema[bundle.manifest["target"]] = "target"
    ds = load_csv(data_path, schema, task=bundle.model.task)
    if bundle.preprocess is not None:
        ds = bundle.preprocess.apply(ds)
    if ds.n_features != bundle.model.n_features:
        raise DataError(
            f"eval: dataset has {ds.n_features} features, model expects "
            f"{bundle.model.n_features}"
        )
    return ds


def cmd_eval(args: argparse.Namespace) -> int:
    bundle = load_model(args.model)
    ds = _load_eval_dataset(bundle, args.data, args.schema)
    metric = evaluate(bundle.model, ds)
    print(f"{_metric_name(bundle.model.task)}={metric:.6f}")
    return 0


def cmd_compress(args: argparse.Namespace) -> int:
    bundle = load_model(args.model)
    if isinstance(bundle.model, CompressedModel):
        raise ConfigError("compress: model is already compressed")
    cmodel = compress_model(bundle.model)
    save_model(args.out, cmodel, feature_names=bundle.feature_names,
               feature_kinds=bundle.feature_kinds, preprocess=bundle.preprocess,
               target_name=bundle.manifest.get("target"))
    orig = count_flops(bundle.model).total
    comp = count_flops(cmodel).total
    print(f"original_flops={orig} compressed_flops={comp} "
          f"reduction={100.0 * (1.0 - comp / orig):.2f}%")
    return 0


def cmd_mask_report(args: argparse.Namespace) -> int:
    bundle = load_model(args.model)
    model = bundle.model
    if isinstance(model, CompressedModel):
        raise ConfigError("mask-report: masks are folded away in a compressed model")
    names = bundle.feature_names or [f"f{i}" for i in range(model.n_features)]
    rows = []
    for k, unit in enumerate(model.blocks[0].main1.units):
        rows.append((f"block0.main1.u{k}", unit))
    for i, block in enumerate(model.blocks):
        for k, unit in enumerate(block.shortcut.units):
            rows.append((f"block{i}.shortcut.u{k}", unit))
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(["mask"] + list(names)) + "\n")
        for label, unit in rows:
            probs = entmax15(unit.mask_logits).probs
            fh.write(",".join([label] + [repr(float(p)) for p in probs]) + "\n")
    print(f"wrote {len(rows)} mask rows to {args.out}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    ds = synth_generate(args.formula, n=args.n, seed=args.seed, task=args.task)
    write_csv(ds, args.out)
    if args.schema_out:
        lines = [f"{n}=continuous" for n in ds.names] + ["target=target"]
        Path(args.schema_out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {ds.n_rows} rows to {args.out}")
    return 0


def cmd_flops(args: argparse.Namespace) -> int:
    bundle = load_model(args.model)
    model = bundle.model
    report = count_flops(model)
    if isinstance(model, CompressedModel):
        width = max(len(n) for n, _ in report.lines)
        for name, n in report.lines:
            print(f"{name:<{width}}  {n}")
        print(f"{'total':<{width}}  {report.total}")
        return 0
    folded = count_flops_folded(model)
    width = max(len(n) for n, _ in report.lines)
    print(f"{'layer':<{width}}  {'original':>10}  {'compressed':>10}")
    for (name, n), (_, nf) in zip(report.lines, folded.lines):
        print(f"{name:<{width}}  {n:>10}  {nf:>10}")
    print(f"{'total':<{width}}  {report.total:>10}  {folded.total:>10}")
    print(f"reduction={100.0 * (1.0 - folded.total / report.total):.2f}%")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="danet",
        description="Tabular deep networks with sparse feature selection and "
                    "inference-time re-parameterization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--depth", type=int, help="main-path abstraction layers (even)")
        p.add_argument("--k0", type=int, help="branches per abstraction layer")
        p.add_argument("--d0", type=int, help="block output width")
        p.add_argument("--d1", type=int, help="intra-block width")
        p.add_argument("--dropout", type=float, help="shortcut dropout rate")
        p.add_argument("--task", choices=["class", "rank"])
        p.add_argument("--data", help="training CSV")
        p.add_argument("--schema", help="schema file (column=kind lines)")
        p.add_argument("--out", help="output directory")

    p_train = sub.add_parser("train", help="train a model end to end")
    add_run_flags(p_train)

    p_eval = sub.add_parser("eval", help="score a saved model on a CSV")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--schema", help="override the schema stored in the container")

    p_comp = sub.add_parser("compress", help="fold masks and batch norm into affine maps")
    p_comp.add_argument("--model", required=True)
    p_comp.add_argument("--out", required=True)

    p_mask = sub.add_parser("mask-report", help="CSV of the first-level feature masks")
    p_mask.add_argument("--model", required=True)
    p_mask.add_argument("--out", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    p_synth.add_argument("--formula", type=int, choices=[1, 2, 3, 4], required=True)
    p_synth.add_argument("--n", type=int, default=7000)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--task", choices=["class", "rank"], default="rank")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--schema-out", dest="schema_out",
                         help="also write the matching schema file")

    p_flops = sub.add_parser("flops", help="per-layer inference cost")
    p_flops.add_argument("--model", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(resolve_config(args))
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "compress":
            return cmd_compress(args)
        if args.command == "mask-report":
            return cmd_mask_report(args)
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "flops":
            return cmd_flops(args)
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, ContainerError, DataError, TrainingError, ValueError,
            OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
