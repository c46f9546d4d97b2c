"""Experiment cells, sweeps and report assembly.

A *cell* is one (seed, method, delta, overrides) run: generate the source
world, pretrain (cached per seed), draw and split the target, train, then
score the result. Cells are independent and can run in worker processes;
``MKAT_THREADS`` caps how many.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig
from .discrepancy import discrepancy_report
from .evaluation import davies_bouldin, extract_features, linear_probe
from .fileformat import save_params
from .models import ModelParams, forward
from .synthdata import (
    Dataset,
    SourceWorld,
    make_source,
    make_target,
    pretrain_source,
    sample_source,
    stratified_split,
)
from .training import RUN_RECORD_SCHEMA, RunRecord, error_rate, train_method

log = logging.getLogger(__name__)

METRICS = ("source_probe_error", "target_test_error", "davies_bouldin", "discrepancy")
KEYS = ("method", "seed", "delta", "lam", "inner_steps", "outer_variant")
SURROGATE_DRAW, PROBE_DRAW = 1, 2


class ReportError(RuntimeError):
    """A run directory is missing pieces or has an incompatible schema."""


@dataclass
class SourceBundle:
    world: SourceWorld
    source: Dataset
    model: ModelParams
    surrogate: Dataset
    probe_set: Dataset
    pretrained_probe_error: float


@dataclass
class CellResult:
    key: dict
    params: ModelParams
    record: RunRecord
    metrics: dict = field(default_factory=dict)
    stage1: ModelParams | None = None

    def row(self) -> dict:
        return {**self.key, **self.metrics}


_SOURCE_CACHE: dict[tuple, SourceBundle] = {}


def clear_source_cache() -> None:
    _SOURCE_CACHE.clear()


def max_workers() -> int:
    raw = os.environ.get("MKAT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"MKAT_THREADS must be an integer, got {raw!r}") from None


def source_probe_error(embedder, encoder, probe_set: Dataset) -> float:
    """Linear-probe error of source inputs through ``encoder``."""
    return linear_probe(extract_features(embedder, encoder, probe_set), probe_set.labels).error


def prepare_source(cfg: ExperimentConfig, seed: int) -> SourceBundle:
    spec = cfg.pair_spec()
    pre = cfg.pretrain_config(seed)
    key = (seed, repr(dataclasses.replace(spec, delta=0.0)), repr(pre),
           cfg.surrogate_size, cfg.probe_size)
    if key not in _SOURCE_CACHE:
        source, world = make_source(spec, seed)
        model = pretrain_source(spec, source, pre)
        surrogate = sample_source(spec, world, cfg.surrogate_size, SURROGATE_DRAW)
        probe_set = sample_source(spec, world, cfg.probe_size, PROBE_DRAW)
        base = source_probe_error(model.embedder, model.encoder, probe_set)
        _SOURCE_CACHE[key] = SourceBundle(world, source, model, surrogate, probe_set, base)
    return _SOURCE_CACHE[key]


def target_split(cfg: ExperimentConfig, bundle: SourceBundle, delta: float, seed: int):
    target = make_target(cfg.pair_spec(delta), bundle.world, 0)
    train, test = stratified_split(target, cfg.target_train_fraction, seed)
    return target, train, test


def prepare_data(cfg: ExperimentConfig, seed: int) -> dict[str, Dataset]:
    """Every dataset a cell at ``cfg.delta`` uses, without pretraining."""
    spec = cfg.pair_spec()
    source, world = make_source(spec, seed)
    target = make_target(spec, world, 0)
    train, test = stratified_split(target, cfg.target_train_fraction, seed)
    return {
        "source": source,
        "surrogate": sample_source(spec, world, cfg.surrogate_size, SURROGATE_DRAW),
        "probe": sample_source(spec, world, cfg.probe_size, PROBE_DRAW),
        "target": target,
        "target_train": train,
        "target_test": test,
    }


def run_cell(cfg: ExperimentConfig, seed: int, method: str, delta: float | None = None,
             discrepancy: bool = True, **overrides) -> CellResult:
    delta = cfg.delta if delta is None else delta
    bundle = prepare_source(cfg, seed)
    target, train, test = target_split(cfg, bundle, delta, seed)
    tcfg = cfg.train_config(method=method, seed=seed, **overrides)
    snapshots: dict = {}
    params, record = train_method(method, bundle.model, train, bundle.surrogate, tcfg, snapshots)
    with ad.no_grad():
        test_err = error_rate(forward(params, test.inputs).value, test.labels)
    feats = extract_features(bundle.model.embedder, params.encoder, bundle.probe_set)
    metrics = {
        "source_probe_error": linear_probe(feats, bundle.probe_set.labels).error,
        "target_test_error": test_err,
        "davies_bouldin": davies_bouldin(feats, bundle.probe_set.labels).index,
        "discrepancy": math.nan,
        "pretrained_probe_error": bundle.pretrained_probe_error,
    }
    if discrepancy:
        # differing raw dims: view the target through the trained embedder,
        # then score with the pretrained encoder and its original head
        scorer = bundle.model
        if target.inputs.shape[1] != bundle.model.dims.input_dim:
            scorer = bundle.model.with_blocks(embedder=params.embedder)
        metrics["discrepancy"] = discrepancy_report(scorer, target, cfg.mode, cfg.trials, seed).value
    record.log_checkpoint(**metrics)
    key = {"method": method, "seed": seed, "delta": delta, "lam": tcfg.lam,
           "inner_steps": tcfg.inner_steps, "outer_variant": tcfg.outer_variant}
    return CellResult(key, params, record, metrics, snapshots.get("stage1"))


def grid(cfg: ExperimentConfig) -> list[tuple[int, str, float, dict]]:
    """Cells requested by ``cfg``: methods x seeds x deltas plus the ablation sweeps."""
    deltas = cfg.deltas or [cfg.delta]
    cells = []
    for seed in cfg.seeds:
        for delta in deltas:
            for method in cfg.methods:
                cells.append((seed, method, delta, {}))
                if method not in ("mona", "mona-fo"):
                    continue
                for lam in cfg.lambdas:
                    if lam != cfg.lam:
                        cells.append((seed, method, delta, {"lam": lam}))
                for s in cfg.inner_steps_list:
                    if s != cfg.inner_steps:
                        cells.append((seed, method, delta, {"inner_steps": s}))
                for v in cfg.outer_variants:
                    if v != cfg.outer_variant:
                        cells.append((seed, method, delta, {"outer_variant": v}))
    return cells


def cell_name(key: dict) -> str:
    return (f"{key['method']}_s{key['seed']}_d{key['delta']:g}_l{key['lam']:g}"
            f"_i{key['inner_steps']}_{key['outer_variant']}")


def save_cell(out: Path, result: CellResult) -> Path:
    d = Path(out) / "cells" / cell_name(result.key)
    d.mkdir(parents=True, exist_ok=True)
    save_params(d / "checkpoint.mkat", result.params)
    if result.stage1 is not None:
        save_params(d / "stage1.mkat", result.stage1)
    (d / "record.json").write_text(json.dumps(result.record.as_dict(), sort_keys=True, indent=1))
    (d / "metrics.json").write_text(json.dumps({"schema": RUN_RECORD_SCHEMA, **result.row()},
                                               sort_keys=True, indent=1))
    return d


def _run_and_save(args):
    cfg, out, seed, method, delta, overrides = args
    result = run_cell(cfg, seed, method, delta, **overrides)
    save_cell(out, result)
    return result.row()


def run_grid(cfg: ExperimentConfig, out=None) -> list[dict]:
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, out, *cell) for cell in grid(cfg)]
    workers = min(max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_and_save, jobs))
    else:
        rows = [_run_and_save(job) for job in jobs]
    for row in rows:
        if not all(math.isfinite(row[m]) for m in ("source_probe_error", "target_test_error")):
            raise ReportError(f"cell {cell_name(row)} produced non-finite metrics")
    return rows


# ------------------------------------------------------------------ reports

def load_rows(run_dir) -> list[dict]:
    cells = Path(run_dir) / "cells"
    if not cells.is_dir():
        raise ReportError(f"{run_dir}: no cells/ directory; run `train` first")
    rows = []
    for path in sorted(cells.glob("*/metrics.json")):
        try:
            row = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ReportError(f"{path}: corrupt metrics file ({exc})") from None
        if row.get("schema") != RUN_RECORD_SCHEMA:
            raise ReportError(f"{path}: schema {row.get('schema')} but this build reads {RUN_RECORD_SCHEMA}")
        rows.append(row)
    if not rows:
        raise ReportError(f"{run_dir}: no completed cells found")
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """One row per cell plus mean and sd rows per (method, delta, lam, inner_steps, variant)."""
    out = [{"kind": "cell", **{k: r[k] for k in KEYS}, **{m: r.get(m) for m in METRICS}}
           for r in sorted(rows, key=lambda r: tuple(str(r[k]) for k in KEYS))]
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in KEYS if k != "seed"), []).append(r)
    for gkey, members in sorted(groups.items(), key=lambda kv: tuple(str(x) for x in kv[0])):
        base = dict(zip([k for k in KEYS if k != "seed"], gkey))
        for kind, fn in (("mean", np.mean), ("sd", lambda v: np.std(v, ddof=1) if len(v) > 1 else 0.0)):
            stats = {}
            for m in METRICS:
                vals = [r[m] for r in members if r.get(m) is not None and math.isfinite(r[m])]
                stats[m] = float(fn(vals)) if vals else None
            out.append({"kind": kind, **base, "seed": f"n={len(members)}", **stats})
    return out


def write_report(run_dir) -> tuple[Path, Path]:
    rows = summarize(load_rows(run_dir))
    run_dir = Path(run_dir)
    csv_path, json_path = run_dir / "report.csv", run_dir / "summary.json"
    cols = ["kind", *KEYS, *METRICS]
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for r in rows:
            writer.writerow({c: r.get(c) for c in cols})
    json_path.write_text(json.dumps({"schema": RUN_RECORD_SCHEMA, "rows": rows}, indent=1, sort_keys=True))
    return csv_path, json_path
