"""Model construction shared by the federation and the runner."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from affcl.classifier import FrozenSnapshot, SplitClassifier
from affcl.flow import FlowModel
from affcl.params import load_params


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 512
    hidden_width: int = 512
    conv_channels: tuple[int, ...] = (64, 128, 256)
    flow_layers: int = 4
    flow_hidden: int = 256
    flow_blocks: int = 2
    label_embed_dim: int = 32


def build_classifier(cfg: ModelConfig, in_shape, num_classes: int,
                     seed: int = 0) -> SplitClassifier:
    return SplitClassifier(
        in_shape=tuple(in_shape),
        feature_dim=cfg.feature_dim,
        hidden_width=cfg.hidden_width,
        num_classes=num_classes,
        channels=tuple(cfg.conv_channels),
        seed=seed,
    )


def build_flow(cfg: ModelConfig, num_classes: int, seed: int = 0) -> FlowModel:
    return FlowModel(
        dim=cfg.feature_dim,
        num_classes=num_classes,
        num_layers=cfg.flow_layers,
        hidden=cfg.flow_hidden,
        blocks=cfg.flow_blocks,
        embed_dim=cfg.label_embed_dim,
        seed=seed,
    )


def materialize_snapshot(snapshot: FrozenSnapshot, cfg: ModelConfig, in_shape,
                         num_classes: int, seed: int = 0):
    """Build read-only (h_a', g') modules from stored parameter vectors."""
    ha = build_classifier(cfg, in_shape, num_classes, seed=seed).h_a
    load_params(ha, snapshot.ha_vector, snapshot.ha_manifest)
    ha.eval()
    ha.requires_grad_(False)

    flow = build_flow(cfg, num_classes, seed=seed)
    load_params(flow, snapshot.flow_vector, snapshot.flow_manifest)
    flow.eval()
    flow.requires_grad_(False)
    return ha, flow
