"""Experiment driver: multi-seed runs, persistence, sweeps, plot data.

Layout of one run directory:

    {out_dir}/{run_id}/
      config.yaml                 canonical copy of the config
      summary.json, summary.csv   aggregate across seeds (byte-stable)
      seed_{s}/
        state.json                resume state: completed tasks + matrix
        records.jsonl             one record per communication round
        metrics.json              per-seed metrics
        task_{t}/round_{r}/{classifier,flow}.ckpt

Runs are resumable from the last completed task. Global parameters pass
through checkpoint (float32) precision at every task boundary whether or
not a checkpoint is read back, so a resumed run retraces an
uninterrupted one exactly.
"""

from __future__ import annotations

import json
import os
import statistics
from pathlib import Path

import numpy as np
import torch

import affcl
from affcl.config import ExperimentConfig, dump_yaml
from affcl.errors import ConfigError, InventoryError
from affcl.federation import (
    GlobalState,
    SimModels,
    TrainConfig,
    init_global_state,
    run_task_step,
)
from affcl.metrics import (
    AccuracyMatrix,
    average_accuracy,
    average_forgetting,
    evaluate_clean_subset,
    step_accuracy,
)
from affcl.params import load_checkpoint, quantize_roundtrip, save_checkpoint
from affcl.rng import derive_seed
from affcl.streams import (
    DatasetPool,
    FederationSpec,
    SyntheticSpec,
    load_idx,
    make_federation,
    make_synthetic,
)

DATA_ROOT_ENV = "AFFCL_DATA_ROOT"
CLEAN_TASKS = (3, 4, 5)  # final three of the six-task noisy protocol


def _json_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _resolve_data_path(cfg: ExperimentConfig, path: str) -> Path:
    p = Path(path)
    if p.is_absolute():
        return p
    root = cfg.data_root or os.environ.get(DATA_ROOT_ENV, ".")
    return Path(root) / p


def build_pool(cfg: ExperimentConfig, seed: int) -> DatasetPool:
    if cfg.pool.source == "synthetic":
        return make_synthetic(
            SyntheticSpec(
                classes=cfg.pool.classes,
                per_class=cfg.pool.per_class,
                image_size=cfg.pool.image_size,
                noise_sigma=cfg.pool.noise_sigma,
                seed=derive_seed(seed, "pool"),
            )
        )
    return load_idx(
        _resolve_data_path(cfg, cfg.pool.images_path),
        _resolve_data_path(cfg, cfg.pool.labels_path),
    )


def federation_spec(cfg: ExperimentConfig, seed: int) -> FederationSpec:
    fed = cfg.federation
    return FederationSpec(
        num_clients=fed.num_clients,
        num_tasks=fed.num_tasks,
        classes_per_task=fed.classes_per_task,
        kind=fed.kind if fed.kind != "synthetic" else "ltp",
        noisy_clients=fed.noisy_clients,
        seed=derive_seed(seed, "federation"),
        per_class_cap=fed.per_class_cap,
        train_fraction=fed.train_fraction,
    )


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    opt = cfg.optim
    return TrainConfig(
        method=cfg.method,
        rounds_per_task=opt.rounds_per_task,
        local_iters=opt.local_iters,
        batch_size=opt.batch_size,
        lr=opt.lr,
        prox_mu=opt.prox_mu,
        stats_refit_every=opt.stats_refit_every,
        client_fraction=opt.client_fraction,
    )


# ---------------------------------------------------------------------------
# Single-seed execution with resume
# ---------------------------------------------------------------------------

def _read_state(seed_dir: Path):
    state_path = seed_dir / "state.json"
    if not state_path.exists():
        return None
    with open(state_path) as f:
        return json.load(f)


def _write_state(seed_dir: Path, config_hash: str, completed: int,
                 matrix: AccuracyMatrix) -> None:
    state = {
        "config_hash": config_hash,
        "completed_tasks": completed,
        "matrix": matrix.to_json(),
    }
    (seed_dir / "state.json").write_text(_json_dumps(state))


def _trim_records(seed_dir: Path, completed: int) -> None:
    """Drop round records of tasks that will be re-run after a resume."""
    path = seed_dir / "records.jsonl"
    if not path.exists():
        return
    kept = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        if "task" not in rec or rec["task"] < completed:
            kept.append(line)
    path.write_text("".join(k + "\n" for k in kept))


def run_single_seed(cfg: ExperimentConfig, seed: int, seed_dir: Path,
                    _stop_after_task: int | None = None) -> dict | None:
    """Train one seed end to end; resumes from the last completed task.

    Returns the per-seed metrics dict, or None when interrupted early via
    `_stop_after_task`.
    """
    seed_dir.mkdir(parents=True, exist_ok=True)
    config_hash = cfg.config_hash()
    fed_cfg = cfg.federation

    state = _read_state(seed_dir)
    completed = 0
    if state is not None:
        if state["config_hash"] != config_hash:
            raise ConfigError(
                f"{seed_dir}: existing run has config hash {state['config_hash']}, "
                f"this config hashes to {config_hash}"
            )
        completed = state["completed_tasks"]

    metrics_path = seed_dir / "metrics.json"
    if completed >= fed_cfg.num_tasks and metrics_path.exists():
        with open(metrics_path) as f:
            return json.load(f)

    torch.set_num_threads(max(1, cfg.runtime.torch_threads))

    pool = build_pool(cfg, seed)
    federation = make_federation(federation_spec(cfg, seed), pool)
    models = SimModels.build(
        cfg.model.to_model_config(),
        federation.image_shape,
        federation.num_classes,
        fed_cfg.num_clients,
        seed=derive_seed(seed, "model-init"),
    )
    gstate = init_global_state(models)
    if state is not None and completed > 0:
        matrix = AccuracyMatrix.from_json(state["matrix"])
        last_round = cfg.optim.rounds_per_task - 1
        ck_dir = seed_dir / f"task_{completed - 1}" / f"round_{last_round}"
        gstate.classifier_vec, _, _ = load_checkpoint(ck_dir / "classifier.ckpt")
        gstate.flow_vec, _, _ = load_checkpoint(ck_dir / "flow.ckpt")
        for t in range(completed):
            gstate.seen_classes = tuple(
                sorted(set(gstate.seen_classes) | federation.task_classes(t))
            )
        _trim_records(seed_dir, completed)
    else:
        matrix = AccuracyMatrix(fed_cfg.num_clients, fed_cfg.num_tasks)

    records_path = seed_dir / "records.jsonl"
    if completed == 0:
        records_path.write_text(
            json.dumps(
                {"config_hash": config_hash, "seed": seed, "version": affcl.__version__},
                sort_keys=True,
            )
            + "\n"
        )

    tcfg = train_config(cfg)
    extra = {"config_hash": config_hash, "seed": seed}

    with open(records_path, "a") as records:

        def write_record(rec: dict) -> None:
            records.write(json.dumps(rec, sort_keys=True) + "\n")
            records.flush()

        for t in range(completed, fed_cfg.num_tasks):
            run_task_step(
                t, gstate, federation, models, tcfg,
                global_seed=derive_seed(seed, "train"),
                matrix=matrix, record_writer=write_record,
            )
            ck_dir = seed_dir / f"task_{t}" / f"round_{tcfg.rounds_per_task - 1}"
            save_checkpoint(
                ck_dir / "classifier.ckpt", gstate.classifier_vec,
                gstate.classifier_manifest, extra=extra,
            )
            save_checkpoint(
                ck_dir / "flow.ckpt", gstate.flow_vec, gstate.flow_manifest, extra=extra,
            )
            # parameters pass through checkpoint precision at every boundary
            # so resumed and uninterrupted runs are bit-identical
            gstate.classifier_vec = quantize_roundtrip(gstate.classifier_vec)
            gstate.flow_vec = quantize_roundtrip(gstate.flow_vec)
            _write_state(seed_dir, config_hash, t + 1, matrix)
            if _stop_after_task is not None and t >= _stop_after_task:
                return None

    metrics = seed_metrics(cfg, matrix, seed)
    metrics_path.write_text(_json_dumps(metrics))
    return metrics


def seed_metrics(cfg: ExperimentConfig, matrix: AccuracyMatrix, seed: int) -> dict:
    T = cfg.federation.num_tasks
    metrics = {
        "seed": seed,
        "config_hash": cfg.config_hash(),
        "accuracy": average_accuracy(matrix),
        "forgetting": average_forgetting(matrix) if T >= 2 else None,
        "per_step_accuracy": [step_accuracy(matrix, t) for t in range(T)],
        "matrix": matrix.to_json(),
    }
    if cfg.federation.kind == "noisy":
        metrics["clean_subset_accuracy"] = evaluate_clean_subset(matrix, CLEAN_TASKS)
    return metrics


# ---------------------------------------------------------------------------
# Multi-seed run
# ---------------------------------------------------------------------------

def _mean_std(values: list[float]) -> dict:
    mean = sum(values) / len(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return {"mean": mean, "std": std, "per_seed": values}


def run_dir_for(cfg: ExperimentConfig) -> Path:
    run_id = cfg.run_id or f"{cfg.method}-{cfg.config_hash()[:8]}"
    return Path(cfg.out_dir) / run_id


def run(cfg: ExperimentConfig, _stop_after_task: int | None = None) -> dict:
    """Execute the experiment for every seed and write the summary."""
    cfg.validate()
    rdir = run_dir_for(cfg)
    rdir.mkdir(parents=True, exist_ok=True)
    dump_yaml(cfg, rdir / "config.yaml")

    per_seed = []
    for seed in cfg.seeds:
        m = run_single_seed(
            cfg, seed, rdir / f"seed_{seed}", _stop_after_task=_stop_after_task
        )
        if m is None:  # interrupted (test hook)
            return {}
        per_seed.append(m)

    summary = {
        "method": cfg.method,
        "config_hash": cfg.config_hash(),
        "version": affcl.__version__,
        "seeds": list(cfg.seeds),
        "accuracy": _mean_std([m["accuracy"] for m in per_seed]),
    }
    if per_seed[0]["forgetting"] is not None:
        summary["forgetting"] = _mean_std([m["forgetting"] for m in per_seed])
    else:
        summary["forgetting"] = None
    if "clean_subset_accuracy" in per_seed[0]:
        summary["clean_subset_accuracy"] = _mean_std(
            [m["clean_subset_accuracy"] for m in per_seed]
        )
    T = cfg.federation.num_tasks
    summary["per_step_accuracy"] = [
        _mean_std([m["per_step_accuracy"][t] for m in per_seed]) for t in range(T)
    ]

    (rdir / "summary.json").write_text(_json_dumps(summary))
    _write_summary_csv(rdir / "summary.csv", cfg, per_seed, summary)
    return summary


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _write_summary_csv(path: Path, cfg: ExperimentConfig, per_seed: list[dict],
                       summary: dict) -> None:
    lines = [f"# config_hash={summary['config_hash']}", "method,seed,accuracy,forgetting"]
    for m in per_seed:
        lines.append(f"{cfg.method},{m['seed']},{_fmt(m['accuracy'])},{_fmt(m['forgetting'])}")
    acc, forg = summary["accuracy"], summary["forgetting"]
    lines.append(f"{cfg.method},mean,{_fmt(acc['mean'])},{_fmt(forg['mean'] if forg else None)}")
    lines.append(f"{cfg.method},std,{_fmt(acc['std'])},{_fmt(forg['std'] if forg else None)}")
    path.write_text("".join(line + "\n" for line in lines))


# ---------------------------------------------------------------------------
# Noisy-client sweep
# ---------------------------------------------------------------------------

def sweep_noisy(cfg: ExperimentConfig, m_values=None, methods=None) -> dict:
    """Run every sweep method at every noisy-client count.

    Produces one run directory per (method, M) cell plus a table of
    clean-subset accuracies and per-method plot series.
    """
    cfg.validate()
    if cfg.federation.kind != "noisy":
        raise ConfigError("sweep_noisy needs federation.kind: noisy")
    m_values = list(m_values if m_values is not None else cfg.sweep.noisy_clients)
    methods = list(methods if methods is not None else cfg.sweep.methods)
    parent_hash = cfg.config_hash()
    sweep_dir = Path(cfg.out_dir) / (cfg.run_id or f"sweep-{parent_hash[:8]}")
    sweep_dir.mkdir(parents=True, exist_ok=True)

    cells = []
    for method in methods:
        for m in m_values:
            data = cfg.to_dict()
            data["method"] = method
            data["federation"]["noisy_clients"] = m
            data["out_dir"] = str(sweep_dir)
            data["run_id"] = f"{method}_M{m}"
            cell_cfg = ExperimentConfig.from_dict(data)
            summary = run(cell_cfg)
            cells.append(
                {
                    "method": method,
                    "noisy_clients": m,
                    "run_id": data["run_id"],
                    "config_hash": cell_cfg.config_hash(),
                    "clean_subset_accuracy": summary["clean_subset_accuracy"],
                }
            )

    table = {
        "parent_hash": parent_hash,
        "methods": methods,
        "noisy_clients": m_values,
        "cells": cells,
    }
    (sweep_dir / "sweep_manifest.json").write_text(_json_dumps(table))

    lines = [f"# config_hash={parent_hash}", "method,noisy_clients,accuracy,err"]
    for cell in cells:
        acc = cell["clean_subset_accuracy"]
        lines.append(
            f"{cell['method']},{cell['noisy_clients']},{_fmt(acc['mean'])},{_fmt(acc['std'])}"
        )
    (sweep_dir / "noisy_sweep.csv").write_text("".join(l + "\n" for l in lines))
    return table


# ---------------------------------------------------------------------------
# Plot data emission
# ---------------------------------------------------------------------------

def _load_run(run_dir: Path) -> dict:
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        raise InventoryError(f"{run_dir}: no summary.json (run incomplete?)")
    with open(summary_path) as f:
        return json.load(f)


def emit_plot_data(source_dir, out_dir=None) -> list[Path]:
    """Write plot-ready CSV series from completed runs.

    For a sweep directory: accuracy-vs-M series per method. For a run
    directory (or a directory of runs): per-task-step accuracy curves
    per method. No rendering here; downstream plotting is external.
    """
    source_dir = Path(source_dir)
    out_dir = Path(out_dir) if out_dir is not None else source_dir / "plots"
    written: list[Path] = []

    manifest_path = source_dir / "sweep_manifest.json"
    if manifest_path.exists():
        with open(manifest_path) as f:
            manifest = json.load(f)
        out_dir.mkdir(parents=True, exist_ok=True)
        for method in manifest["methods"]:
            rows = [
                (c["noisy_clients"], c["clean_subset_accuracy"])
                for c in manifest["cells"]
                if c["method"] == method
            ]
            rows.sort()
            lines = [f"# config_hash={manifest['parent_hash']}", "m,accuracy,err"]
            for m, acc in rows:
                lines.append(f"{m},{_fmt(acc['mean'])},{_fmt(acc['std'])}")
            path = out_dir / f"noisy_{method}.csv"
            path.write_text("".join(l + "\n" for l in lines))
            written.append(path)
        return written

    run_dirs = (
        [source_dir]
        if (source_dir / "summary.json").exists()
        else sorted(p.parent for p in source_dir.glob("*/summary.json"))
    )
    if not run_dirs:
        raise InventoryError(f"{source_dir}: no completed runs found")
    out_dir.mkdir(parents=True, exist_ok=True)
    for rd in run_dirs:
        summary = _load_run(rd)
        lines = [f"# config_hash={summary['config_hash']}", "step,accuracy,err"]
        for t, acc in enumerate(summary["per_step_accuracy"]):
            lines.append(f"{t},{_fmt(acc['mean'])},{_fmt(acc['std'])}")
        path = out_dir / f"curve_{summary['method']}_{summary['config_hash'][:8]}.csv"
        path.write_text("".join(l + "\n" for l in lines))
        written.append(path)
    return written
