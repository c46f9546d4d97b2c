"""Command-line entry point: ``modalign <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as X
from .config import ConfigError, ExperimentConfig, load_config, write_config
from .discrepancy import AssumptionError, SearchTooLarge, estimate, logit_table
from .evaluation import extract_features, linear_probe
from .fileformat import FormatError, load_dataset, load_logit_table, load_params, save_dataset, save_params
from .synthdata import AssumptionError as DataAssumptionError
from .training import METHODS, TrainingError

USER_ERRORS = (ConfigError, FormatError, X.ReportError, TrainingError, AssumptionError,
               DataAssumptionError, SearchTooLarge, FileNotFoundError)


def _config(args) -> ExperimentConfig:
    overrides = {
        "method": getattr(args, "method", None),
        "lam": getattr(args, "lam", None),
        "inner_steps": getattr(args, "inner_steps", None),
        "trials": getattr(args, "trials", None),
        "mode": getattr(args, "mode", None),
        "out": getattr(args, "out", None),
    }
    if getattr(args, "method", None):
        overrides["methods"] = [args.method]
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
        overrides["seeds"] = [args.seed]
    return load_config(args.config, {k: v for k, v in overrides.items() if v is not None})


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", cfg)
    return out


def _emit(row: dict, out: Path | None, name: str) -> None:
    text = json.dumps(row, sort_keys=True)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    for seed in cfg.seeds:
        for name, data in X.prepare_data(cfg, seed).items():
            save_dataset(out / f"{name}_s{seed}.mkat", data)
    print(f"wrote datasets for seeds {cfg.seeds} to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    for seed in cfg.seeds:
        bundle = X.prepare_source(cfg, seed)
        save_params(out / f"source_model_s{seed}.mkat", bundle.model)
        print(f"seed {seed}: source model -> {out / f'source_model_s{seed}.mkat'} "
              f"(probe error {bundle.pretrained_probe_error:.4f})")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    rows = X.run_grid(cfg, out)
    for row in rows:
        print(json.dumps({k: row[k] for k in (*X.KEYS, "source_probe_error", "target_test_error")},
                         sort_keys=True))
    return 0


def cmd_probe(args) -> int:
    params = load_params(args.checkpoint)
    data = load_dataset(args.data)
    embedder = load_params(args.embedder_from).embedder if args.embedder_from else params.embedder
    if embedder["W"].shape[0] != data.inputs.shape[1]:
        raise FormatError(f"embedder expects {embedder['W'].shape[0]} input features, "
                          f"dataset has {data.inputs.shape[1]}; pass --embedder-from")
    res = linear_probe(extract_features(embedder, params.encoder, data), data.labels, args.split_seed)
    _emit({"probe_error": res.error, "split_seed": res.split_seed, "iterations": res.iterations,
           "resampled": res.resampled}, Path(args.out) if args.out else None, "probe.json")
    return 0


def cmd_discrepancy(args) -> int:
    if args.logits:
        table = load_logit_table(args.logits)
    else:
        if not (args.checkpoint and args.data):
            raise ConfigError("discrepancy needs --logits, or both --checkpoint and --data")
        data = load_dataset(args.data)
        model = load_params(args.checkpoint)
        if model.dims.input_dim != data.inputs.shape[1]:
            raise FormatError(f"checkpoint expects {model.dims.input_dim} input features but "
                              f"{args.data} has {data.inputs.shape[1]}; use a checkpoint whose "
                              f"embedder matches the target modality")
        table = logit_table(model, data.inputs, data.labels, data.classes)
    est = estimate(table, args.mode or "auto", args.trials or 100_000, args.seed or 0,
                   workers=X.max_workers())
    _emit(est.as_record(), Path(args.out) if args.out else None, "discrepancy.json")
    return 0


def cmd_report(args) -> int:
    run_dir = args.run_dir or args.out
    if not run_dir:
        raise ConfigError("report needs a run directory (positional or --out)")
    csv_path, json_path = X.write_report(run_dir)
    print(f"wrote {csv_path} and {json_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modalign", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, training=False):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        if training:
            sp.add_argument("--method", choices=METHODS)
            sp.add_argument("--lambda", dest="lam", type=float)
            sp.add_argument("--inner-steps", type=int)
            sp.add_argument("--trials", type=int)
            sp.add_argument("--mode", choices=("auto", "exact", "mc", "mc-hungarian"))

    common(sub.add_parser("synth", help="generate source/target datasets"))
    common(sub.add_parser("pretrain", help="pretrain the source model"))
    common(sub.add_parser("train", help="train methods x seeds and save cells"), training=True)

    sp = sub.add_parser("probe", help="linear-probe error of a checkpoint's encoder")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--embedder-from", help="take the embedder from this checkpoint")
    sp.add_argument("--split-seed", type=int, default=0)
    sp.add_argument("--out")

    sp = sub.add_parser("discrepancy", help="source-model discrepancy on a target dataset")
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--logits", help="precomputed logit table file")
    sp.add_argument("--mode", choices=("auto", "exact", "mc", "mc-hungarian"))
    sp.add_argument("--trials", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")

    sp = sub.add_parser("report", help="assemble report.csv and summary.json")
    sp.add_argument("run_dir", nargs="?")
    sp.add_argument("--out")
    return p


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train,
            "probe": cmd_probe, "discrepancy": cmd_discrepancy, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
