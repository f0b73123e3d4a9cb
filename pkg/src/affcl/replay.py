"""Selective replay: density-based credibility scoring and the local step.

The current task's features are pushed through the flow and summarized
as one diagonal Gaussian per class (plus a pooled one). A replayed
latent is scored by its log-density under its own label's Gaussian,
falling back to the pooled fit for labels the client is not currently
learning. Scores become loss weights by max-normalization within the
batch, so outliers with respect to the current task are suppressed and
the best-supported sample always keeps weight 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from affcl.classifier import SplitClassifier, total_loss
from affcl.errors import DegenerateBatchError, EmptyBatchError
from affcl.flow import LOG_2PI, FlowModel, GeneratedBatch, nf_loss
from affcl.params import flatten_params
from affcl.rng import torch_generator

VARIANCE_FLOOR = 1e-5

METHODS = ("af_fcl", "fedavg", "fedprox", "af_wo_gr", "af_wo_kd", "af_wo_af")


def method_trains_flow(method: str) -> bool:
    return method in ("af_fcl", "af_wo_kd", "af_wo_af")


def method_uses_replay(method: str) -> bool:
    return method in ("af_fcl", "af_wo_kd", "af_wo_af")


def method_uses_kd(method: str) -> bool:
    return method in ("af_fcl", "af_wo_gr", "af_wo_af")


@dataclass
class LatentClassStats:
    """Diagonal-Gaussian moments of the current task's latents."""

    per_class: dict[int, tuple[torch.Tensor, torch.Tensor]]  # class -> (mu, var)
    pooled: tuple[torch.Tensor, torch.Tensor]
    n_per_class: dict[int, int]


def fit_latent_stats(flow: FlowModel, feature_fn, x, y,
                     chunk: int = 512) -> LatentClassStats:
    """Map a dataset into latent space and fit per-class moments.

    Moments use 1/n normalization and every variance entry is floored at
    1e-5 so single-sample classes stay scoreable.
    """
    y = torch.as_tensor(y, dtype=torch.long)
    if y.numel() == 0:
        raise EmptyBatchError("cannot fit latent stats on an empty dataset")
    x = torch.as_tensor(x, dtype=torch.float32)
    chunks = []
    with torch.no_grad():
        for start in range(0, len(y), chunk):
            feats = feature_fn(x[start : start + chunk]).to(flow.dtype)
            u, _ = flow.forward(feats, y[start : start + chunk])
            chunks.append(u)
    latents = torch.cat(chunks)

    def moments(rows: torch.Tensor):
        mu = rows.mean(dim=0)
        var = ((rows - mu) ** 2).mean(dim=0)
        return mu, var.clamp_min(VARIANCE_FLOOR)

    per_class = {}
    n_per_class = {}
    for c in sorted(int(v) for v in torch.unique(y)):
        rows = latents[y == c]
        per_class[c] = moments(rows)
        n_per_class[c] = int(rows.shape[0])
    return LatentClassStats(
        per_class=per_class, pooled=moments(latents), n_per_class=n_per_class
    )


def _diag_gauss_logpdf(u: torch.Tensor, mu: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    d = u.shape[-1]
    quad = ((u - mu) ** 2 / var).sum(dim=-1)
    return -0.5 * (d * LOG_2PI + torch.log(var).sum(dim=-1) + quad)


def correlation_density(stats: LatentClassStats, u, label: int) -> float:
    """Log-density of one latent under its label's Gaussian (pooled fallback)."""
    u = torch.as_tensor(u, dtype=torch.float64)
    mu, var = stats.per_class.get(int(label), stats.pooled)
    return float(_diag_gauss_logpdf(u, mu.to(u.dtype), var.to(u.dtype)))


def score_batch(stats: LatentClassStats, latents: torch.Tensor,
                labels: torch.Tensor) -> torch.Tensor:
    """Vectorized correlation_density over a generated batch."""
    n, d = latents.shape
    mu = torch.empty(n, d, dtype=latents.dtype)
    var = torch.empty(n, d, dtype=latents.dtype)
    pooled_mu, pooled_var = stats.pooled
    for i, lbl in enumerate(labels.tolist()):
        m, v = stats.per_class.get(int(lbl), (pooled_mu, pooled_var))
        mu[i] = m
        var[i] = v
    return _diag_gauss_logpdf(latents, mu, var)


def weights_from_density(log_densities) -> torch.Tensor:
    """Max-normalized densities: exp(log p - max log p), in (0, 1]."""
    lp = torch.as_tensor(log_densities, dtype=torch.float64)
    if lp.numel() == 0:
        raise EmptyBatchError("no densities to weight")
    top = lp.max()
    if torch.isneginf(top):
        raise DegenerateBatchError("all replay candidates have zero density")
    return torch.exp(lp - top)


# ---------------------------------------------------------------------------
# Client-local training step
# ---------------------------------------------------------------------------

@dataclass
class LocalStepConfig:
    method: str = "af_fcl"
    local_iters: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    stats_refit_every: int = 10
    prox_mu: float = 0.01
    seed: int = 0


@dataclass
class ClientState:
    """Everything one client needs for a round; never leaves the client."""

    client_id: int
    task_index: int  # 0-based
    classifier: SplitClassifier
    flow: FlowModel | None
    train_x: torch.Tensor
    train_y: torch.Tensor
    seen_classes: tuple[int, ...]
    frozen_ha: nn.Module | None = None
    frozen_flow: FlowModel | None = None


@dataclass
class ClientStepResult:
    classifier_vec: np.ndarray
    flow_vec: np.ndarray | None
    num_samples: int
    losses: dict[str, float]
    weight_stats: dict[str, float] | None


class _BatchCycler:
    """Yields fixed-size index batches, reshuffling each pass."""

    def __init__(self, n: int, batch_size: int, gen: torch.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.gen = gen
        self._queue = torch.empty(0, dtype=torch.long)

    def next(self) -> torch.Tensor:
        while self._queue.numel() < self.batch_size:
            perm = torch.randperm(self.n, generator=self.gen)
            self._queue = torch.cat([self._queue, perm])
        batch, self._queue = (
            self._queue[: self.batch_size],
            self._queue[self.batch_size :],
        )
        return batch


def client_local_step(state: ClientState, cfg: LocalStepConfig) -> ClientStepResult:
    """Run one communication round of local iterations on a client.

    Per iteration: (1) update the flow on local features plus replay
    sampled from the stored flow, (2) refit the latent stats every
    `stats_refit_every` iterations, (3) update the classifier on the
    composite objective with a freshly generated, credibility-weighted
    batch. On the first task there is no stored model, so the flow sees
    only local features and the classifier trains on cross-entropy alone.
    """
    if state.train_y.numel() == 0:
        raise EmptyBatchError("client has no training data for this task")
    method = cfg.method
    first_task = state.task_index == 0
    trains_flow = method_trains_flow(method)
    uses_replay = method_uses_replay(method) and not first_task
    uses_kd = method_uses_kd(method) and not first_task

    data_gen = torch_generator(cfg.seed, "batches")
    sample_gen = torch_generator(cfg.seed, "replay")
    cycler = _BatchCycler(len(state.train_y), cfg.batch_size, data_gen)

    cls_opt = torch.optim.Adam(state.classifier.parameters(), lr=cfg.lr)
    flow_opt = (
        torch.optim.Adam(state.flow.parameters(), lr=cfg.lr) if trains_flow else None
    )

    prox_ref = None
    if method == "fedprox":
        prox_ref = [p.detach().clone() for p in state.classifier.parameters()]

    sums: dict[str, float] = {}
    wmin, wmax, wsum, wcount = math.inf, -math.inf, 0.0, 0
    stats: LatentClassStats | None = None

    for it in range(cfg.local_iters):
        idx = cycler.next()
        xb = state.train_x[idx]
        yb = state.train_y[idx]

        if trains_flow:
            feats = state.classifier.features(xb).detach().to(state.flow.dtype)
            replay = None
            if not first_task:
                replay = state.frozen_flow.sample(
                    cfg.batch_size, state.seen_classes, rng_seed=sample_gen
                )
            floss = nf_loss(state.flow, feats, yb, replay)
            flow_opt.zero_grad()
            floss.backward()
            flow_opt.step()
            sums["nf"] = sums.get("nf", 0.0) + float(floss.detach())

        gen_batch = None
        if uses_replay:
            if stats is None or it % cfg.stats_refit_every == 0:
                stats = fit_latent_stats(
                    state.flow, state.classifier.features, state.train_x, state.train_y
                )
            gen_batch = state.flow.sample(
                cfg.batch_size, state.seen_classes, rng_seed=sample_gen
            )
            if method == "af_wo_af":
                weights = torch.ones(len(gen_batch), dtype=torch.float64)
            else:
                logd = score_batch(stats, gen_batch.latents, gen_batch.labels)
                weights = weights_from_density(logd)
            gen_batch.weights = weights
            wmin = min(wmin, float(weights.min()))
            wmax = max(wmax, float(weights.max()))
            wsum += float(weights.sum())
            wcount += weights.numel()

        closs, parts = total_loss(
            state.classifier, xb, yb, gen_batch,
            state.frozen_ha if uses_kd else None,
            use_gr=uses_replay, use_kd=uses_kd,
        )
        if prox_ref is not None:
            prox = sum(
                ((p - r) ** 2).sum() for p, r in zip(state.classifier.parameters(), prox_ref)
            )
            prox = 0.5 * cfg.prox_mu * prox
            parts["prox"] = float(prox.detach())
            closs = closs + prox
        cls_opt.zero_grad()
        closs.backward()
        cls_opt.step()
        for key, val in parts.items():
            sums[key] = sums.get(key, 0.0) + val

    losses = {k: v / cfg.local_iters for k, v in sums.items()}
    weight_stats = None
    if wcount:
        weight_stats = {"min": wmin, "max": wmax, "mean": wsum / wcount}

    cls_vec, _ = flatten_params(state.classifier)
    flow_vec = None
    if trains_flow:
        flow_vec, _ = flatten_params(state.flow)
    return ClientStepResult(
        classifier_vec=cls_vec,
        flow_vec=flow_vec,
        num_samples=int(state.train_y.numel()),
        losses=losses,
        weight_stats=weight_stats,
    )
