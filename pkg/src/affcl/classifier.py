"""Split classifier and its loss terms.

The classifier is three submodules: a convolutional feature extractor
h_a mapping images to R^d, a fully connected mid extractor h_b, and a
linear head h_c over the full global class space (the head never grows;
all tasks share it). Replayed features enter after h_a, so their
gradients never touch the extractor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from affcl.errors import (
    EmptyBatchError,
    LabelDomainError,
    ShapeError,
    WeightDomainError,
)
from affcl.flow import GeneratedBatch
from affcl.params import ParamManifest
from affcl.rng import derive_seed


class FeatureExtractor(nn.Module):
    """Stride-2 conv stack followed by one FC layer to the feature dim."""

    def __init__(self, in_shape: tuple[int, int, int], feature_dim: int,
                 channels: tuple[int, ...] = (64, 128, 256)):
        super().__init__()
        c, h, w = in_shape
        convs = []
        prev = c
        for ch in channels:
            convs.append(nn.Conv2d(prev, ch, kernel_size=3, stride=2, padding=1))
            prev = ch
            h = (h + 1) // 2
            w = (w + 1) // 2
        self.convs = nn.ModuleList(convs)
        self.flat_dim = prev * h * w
        self.fc = nn.Linear(self.flat_dim, feature_dim)
        self.in_shape = in_shape

    def forward(self, x):
        if x.dim() != 4 or tuple(x.shape[1:]) != self.in_shape:
            raise ShapeError(
                f"expected input batch of shape (n, {self.in_shape}), got {tuple(x.shape)}"
            )
        for conv in self.convs:
            x = F.leaky_relu(conv(x))
        x = x.flatten(1)
        return F.leaky_relu(self.fc(x))


class SplitClassifier(nn.Module):
    def __init__(self, in_shape: tuple[int, int, int] = (1, 28, 28),
                 feature_dim: int = 512, hidden_width: int = 512,
                 num_classes: int = 10,
                 channels: tuple[int, ...] = (64, 128, 256), seed: int = 0):
        super().__init__()
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, "classifier-init"))
            self.h_a = FeatureExtractor(in_shape, feature_dim, channels)
            self.h_b = nn.Linear(feature_dim, hidden_width)
            self.h_c = nn.Linear(hidden_width, num_classes)

    @property
    def dtype(self) -> torch.dtype:
        return self.h_b.weight.dtype

    def features(self, x) -> torch.Tensor:
        """h_a(x): one length-d feature row per input."""
        return self.h_a(torch.as_tensor(x, dtype=self.dtype))

    def head(self, feats) -> torch.Tensor:
        """h_c(h_b(features)): logits over the global class space."""
        return self.h_c(F.leaky_relu(self.h_b(feats)))

    def forward(self, x) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass(frozen=True)
class FrozenSnapshot:
    """Parameters stored at a task transition: old extractor, old flow.

    Immutable; the federation creates exactly one per transition and
    every client of the step reads the same one.
    """

    step_index: int
    ha_vector: np.ndarray
    ha_manifest: ParamManifest
    flow_vector: np.ndarray
    flow_manifest: ParamManifest

    def __post_init__(self):
        self.ha_vector.setflags(write=False)
        self.flow_vector.setflags(write=False)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def _check_labels(y: torch.Tensor, num_classes: int):
    if y.numel() == 0:
        raise EmptyBatchError("empty label batch")
    if int(y.min()) < 0 or int(y.max()) >= num_classes:
        raise LabelDomainError(
            f"labels outside [0, {num_classes}): [{int(y.min())}, {int(y.max())}]"
        )


def ce_loss_raw(h: SplitClassifier, x, y) -> torch.Tensor:
    """Mean cross-entropy of h(x) against the true labels."""
    y = torch.as_tensor(y, dtype=torch.long)
    _check_labels(y, h.num_classes)
    return F.cross_entropy(h(x), y)


def ce_loss_generated(h: SplitClassifier, batch: GeneratedBatch) -> torch.Tensor:
    """Credibility-weighted cross-entropy on replayed features.

    Features bypass h_a (they already live in its output space) and the
    weighted sum is divided by the batch size, so fully distrusted
    batches contribute exactly zero.
    """
    w = batch.weights
    if bool((w < 0).any()):
        raise WeightDomainError("replay weights must be nonnegative")
    feats = batch.features.detach().to(h.dtype)
    logits = h.head(feats)
    per_sample = F.cross_entropy(logits, batch.labels, reduction="none")
    return (per_sample * w.detach().to(h.dtype)).sum() / len(batch)


def kd_loss(h: SplitClassifier, frozen_ha: nn.Module | None, x) -> torch.Tensor:
    """Mean squared feature drift against the stored extractor.

    Zero by definition on the first task, when no snapshot exists yet.
    """
    if frozen_ha is None:
        return torch.zeros(())
    x = torch.as_tensor(x, dtype=h.dtype)
    cur = h.features(x)
    with torch.no_grad():
        frozen_dtype = next(frozen_ha.parameters()).dtype
        old = frozen_ha(x.to(frozen_dtype)).to(h.dtype)
    return ((cur - old) ** 2).sum(dim=1).mean()


def total_loss(h: SplitClassifier, raw_x, raw_y,
               gen_batch: GeneratedBatch | None,
               frozen_ha: nn.Module | None,
               use_gr: bool = True, use_kd: bool = True):
    """Composite objective; returns (loss, component dict).

    Disabled or unavailable components contribute exactly zero.
    """
    parts = {}
    loss = ce_loss_raw(h, raw_x, raw_y)
    parts["ce_raw"] = float(loss.detach())
    if use_gr and gen_batch is not None:
        gen = ce_loss_generated(h, gen_batch)
        parts["ce_gen"] = float(gen.detach())
        loss = loss + gen
    else:
        parts["ce_gen"] = 0.0
    if use_kd and frozen_ha is not None:
        kd = kd_loss(h, frozen_ha, raw_x)
        parts["kd"] = float(kd.detach())
        loss = loss + kd
    else:
        parts["kd"] = 0.0
    return loss, parts
