"""Server-side protocol: rounds, aggregation, task transitions.

Synchronous federated averaging. Each task step starts by freezing the
previous task's extractor and flow, then runs a fixed number of rounds:
broadcast global parameters, let every selected client train locally,
and average the returned vectors weighted by client sample counts. The
server never sees examples or features; only parameter vectors, counts,
and scalar loss summaries cross the client boundary.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from affcl.classifier import FrozenSnapshot
from affcl.errors import DegenerateAggregationError, ManifestMismatchError
from affcl.metrics import AccuracyMatrix
from affcl.models import ModelConfig, build_classifier, build_flow, materialize_snapshot
from affcl.params import ParamManifest, flatten_params, load_params
from affcl.replay import ClientState, LocalStepConfig, client_local_step, method_trains_flow
from affcl.rng import derive_seed, numpy_generator
from affcl.streams import Federation


@dataclass(frozen=True)
class RoundPlan:
    """Who trains this round and with which derived seeds."""

    task_index: int
    round_index: int
    selected_clients: tuple[int, ...]
    seeds: dict[int, int]

    def __post_init__(self):
        if not self.selected_clients:
            raise ValueError("a round must select at least one client")


def make_round_plan(global_seed: int, task_index: int, round_index: int,
                    num_clients: int, client_fraction: float = 1.0) -> RoundPlan:
    """All clients by default; an optional random subset otherwise."""
    if client_fraction >= 1.0:
        selected = tuple(range(num_clients))
    else:
        count = max(1, int(round(client_fraction * num_clients)))
        rng = numpy_generator(global_seed, "select", task_index, round_index)
        selected = tuple(
            sorted(int(k) for k in rng.choice(num_clients, size=count, replace=False))
        )
    seeds = {
        k: derive_seed(global_seed, "task", task_index, "round", round_index, "client", k)
        for k in selected
    }
    return RoundPlan(task_index, round_index, selected, seeds)


@dataclass
class GlobalState:
    classifier_vec: np.ndarray
    classifier_manifest: ParamManifest
    flow_vec: np.ndarray
    flow_manifest: ParamManifest
    seen_classes: tuple[int, ...] = ()
    snapshot: FrozenSnapshot | None = None


def aggregate(params: list[np.ndarray], counts: list[int]) -> np.ndarray:
    """Sample-count-weighted mean of parameter vectors."""
    if len(params) != len(counts) or not params:
        raise ValueError("need one count per parameter vector")
    length = params[0].shape[0]
    for p in params:
        if p.shape != (length,):
            raise ManifestMismatchError("parameter vectors differ in length")
    if any(c <= 0 for c in counts):
        raise DegenerateAggregationError("sample counts must be positive")
    total = float(sum(counts))
    out = np.zeros(length, dtype=np.float64)
    for p, c in zip(params, counts):
        out += (c / total) * p
    return out


def fedprox_penalty(local: np.ndarray, global_: np.ndarray, mu: float) -> float:
    """(mu/2) * squared distance between local and broadcast parameters."""
    if local.shape != global_.shape:
        raise ManifestMismatchError("parameter vectors differ in length")
    diff = local - global_
    return 0.5 * mu * float(diff @ diff)


@dataclass
class TrainConfig:
    method: str = "af_fcl"
    rounds_per_task: int = 10
    local_iters: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    prox_mu: float = 0.01
    stats_refit_every: int = 10
    client_fraction: float = 1.0


@dataclass
class SimModels:
    """Reusable module shells; parameters are overwritten by broadcast."""

    model_cfg: ModelConfig
    in_shape: tuple[int, int, int]
    num_classes: int
    client_classifiers: list
    client_flows: list
    eval_classifier: object

    @staticmethod
    def build(model_cfg: ModelConfig, in_shape, num_classes: int,
              num_clients: int, seed: int = 0) -> "SimModels":
        return SimModels(
            model_cfg=model_cfg,
            in_shape=tuple(in_shape),
            num_classes=num_classes,
            client_classifiers=[
                build_classifier(model_cfg, in_shape, num_classes, seed=seed)
                for _ in range(num_clients)
            ],
            client_flows=[
                build_flow(model_cfg, num_classes, seed=seed) for _ in range(num_clients)
            ],
            eval_classifier=build_classifier(model_cfg, in_shape, num_classes, seed=seed),
        )


def init_global_state(models: SimModels) -> GlobalState:
    cls_vec, cls_manifest = flatten_params(models.client_classifiers[0])
    flow_vec, flow_manifest = flatten_params(models.client_flows[0])
    return GlobalState(
        classifier_vec=cls_vec,
        classifier_manifest=cls_manifest,
        flow_vec=flow_vec,
        flow_manifest=flow_manifest,
    )


def take_snapshot(task_index: int, gstate: GlobalState, models: SimModels) -> FrozenSnapshot:
    """Freeze (h_a', g') from the current global parameters."""
    classifier = models.eval_classifier
    load_params(classifier, gstate.classifier_vec, gstate.classifier_manifest)
    ha_vec, ha_manifest = flatten_params(classifier.h_a)
    return FrozenSnapshot(
        step_index=task_index - 1,
        ha_vector=ha_vec.copy(),
        ha_manifest=ha_manifest,
        flow_vector=gstate.flow_vec.copy(),
        flow_manifest=gstate.flow_manifest,
    )


def evaluate_accuracy(classifier, x: np.ndarray, y: np.ndarray,
                      batch: int = 256) -> float:
    correct = 0
    with torch.no_grad():
        for start in range(0, len(y), batch):
            xb = torch.as_tensor(x[start : start + batch], dtype=torch.float32)
            pred = classifier(xb).argmax(dim=1).numpy()
            correct += int((pred == y[start : start + batch]).sum())
    return correct / len(y)


def run_task_step(task_index: int, gstate: GlobalState, federation: Federation,
                  models: SimModels, cfg: TrainConfig, global_seed: int,
                  matrix: AccuracyMatrix, record_writer=None) -> GlobalState:
    """Execute all rounds of one task step and evaluate tasks 0..task_index."""
    if task_index >= 1:
        gstate.snapshot = take_snapshot(task_index, gstate, models)

    # server collects the classes of every client's current task
    gstate.seen_classes = tuple(
        sorted(set(gstate.seen_classes) | federation.task_classes(task_index))
    )

    trains_flow = method_trains_flow(cfg.method)
    frozen_ha = frozen_flow = None
    if gstate.snapshot is not None and cfg.method != "fedavg" and cfg.method != "fedprox":
        frozen_ha, frozen_flow = materialize_snapshot(
            gstate.snapshot, models.model_cfg, models.in_shape, models.num_classes
        )

    for round_index in range(cfg.rounds_per_task):
        plan = make_round_plan(
            global_seed, task_index, round_index,
            federation.spec.num_clients, cfg.client_fraction,
        )
        t_start = time.perf_counter()
        results = []
        client_logs = []
        for k in plan.selected_clients:
            classifier = models.client_classifiers[k]
            load_params(classifier, gstate.classifier_vec, gstate.classifier_manifest)
            flow = None
            if trains_flow:
                flow = models.client_flows[k]
                load_params(flow, gstate.flow_vec, gstate.flow_manifest)
            task = federation.clients[k][task_index]
            state = ClientState(
                client_id=k,
                task_index=task_index,
                classifier=classifier,
                flow=flow,
                train_x=torch.as_tensor(task.train_x, dtype=torch.float32),
                train_y=torch.as_tensor(task.train_y, dtype=torch.long),
                seen_classes=gstate.seen_classes,
                frozen_ha=frozen_ha,
                frozen_flow=frozen_flow,
            )
            step_cfg = LocalStepConfig(
                method=cfg.method,
                local_iters=cfg.local_iters,
                batch_size=cfg.batch_size,
                lr=cfg.lr,
                stats_refit_every=cfg.stats_refit_every,
                prox_mu=cfg.prox_mu,
                seed=plan.seeds[k],
            )
            res = client_local_step(state, step_cfg)
            results.append(res)
            client_logs.append(
                {
                    "client": k,
                    "num_samples": res.num_samples,
                    "losses": {key: round(v, 6) for key, v in res.losses.items()},
                    "replay_weights": res.weight_stats,
                }
            )

        counts = [r.num_samples for r in results]
        gstate.classifier_vec = aggregate([r.classifier_vec for r in results], counts)
        if trains_flow:
            gstate.flow_vec = aggregate([r.flow_vec for r in results], counts)

        if record_writer is not None:
            record_writer(
                {
                    "task": task_index,
                    "round": round_index,
                    "clients": client_logs,
                    "aggregate": {
                        "classifier_norm": float(np.linalg.norm(gstate.classifier_vec)),
                        "flow_norm": float(np.linalg.norm(gstate.flow_vec)),
                    },
                    "wall_time": time.perf_counter() - t_start,
                }
            )

    # evaluation on every task learned so far, for every client
    classifier = models.eval_classifier
    load_params(classifier, gstate.classifier_vec, gstate.classifier_manifest)
    classifier.eval()
    for k in range(federation.spec.num_clients):
        for i in range(task_index + 1):
            task = federation.clients[k][i]
            acc = evaluate_accuracy(classifier, task.test_x, task.test_y)
            matrix.record(k, task_index, i, acc)
            matrix.set_count(k, i, len(task.test_y))
    classifier.train()
    return gstate
