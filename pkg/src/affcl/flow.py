"""Conditional normalizing flow over classifier features.

The flow is a stack of seeded random permutations and affine coupling
layers. A coupling layer passes one half of its input through untouched
and applies an elementwise scale-and-shift to the other half, with the
scale and shift computed from the pass-through half plus a learned label
embedding. The Jacobian is triangular, so the log-determinant is just
the sum of the log-scales, giving exact densities under the standard
normal prior and exact inversion for sampling.

Everything runs in float64 by default: exact invertibility and exact
likelihood are the whole point of this model family, and the feature
dimension is large enough that float32 round-trips get uncomfortably
close to tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from affcl.errors import (
    EmptyBatchError,
    EmptySupportError,
    LabelDomainError,
    NumericError,
    ShapeError,
)
from affcl.rng import derive_seed

LOG_2PI = math.log(2.0 * math.pi)


class FlowLayer(nn.Module):
    """Interface: bijective map with tractable log-det-Jacobian."""

    def forward(self, z: torch.Tensor, emb: torch.Tensor):  # -> (u, logdet)
        raise NotImplementedError

    def inverse(self, u: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class PermutationLayer(FlowLayer):
    """Fixed random permutation of coordinates; volume preserving."""

    def __init__(self, dim: int, seed: int, dtype=torch.float64):
        super().__init__()
        gen = torch.Generator()
        gen.manual_seed(seed)
        perm = torch.randperm(dim, generator=gen)
        inv = torch.empty_like(perm)
        inv[perm] = torch.arange(dim)
        self.register_buffer("perm", perm)
        self.register_buffer("inv_perm", inv)

    def forward(self, z, emb=None):
        logdet = z.new_zeros(z.shape[:-1])
        return z[..., self.perm], logdet

    def inverse(self, u, emb=None):
        return u[..., self.inv_perm]


class _ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, x):
        return x + self.fc2(F.leaky_relu(self.fc1(x)))


class CouplingNet(nn.Module):
    """Residual MLP from (pass-through half, label embedding) to one half."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int, blocks: int):
        super().__init__()
        self.proj = nn.Linear(in_dim, hidden)
        self.blocks = nn.ModuleList(_ResBlock(hidden) for _ in range(blocks))
        self.out = nn.Linear(hidden, out_dim)
        # start as the identity coupling; training moves away from it
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        h = F.leaky_relu(self.proj(x))
        for block in self.blocks:
            h = F.leaky_relu(block(h))
        return self.out(h)


class CouplingLayer(FlowLayer):
    """Affine coupling: y_a = x_a, y_b = exp(s(x_a, e)) * x_b + t(x_a, e).

    `active_mask` marks the floor(d/2) transformed coordinates; the other
    half passes through and conditions the scale/translate nets. Scales
    are soft-clamped to |s| <= scale_clamp before exponentiation.
    """

    def __init__(self, dim: int, embed_dim: int, hidden: int = 256,
                 blocks: int = 2, scale_clamp: float = 3.0):
        super().__init__()
        active = torch.zeros(dim, dtype=torch.bool)
        active[dim - dim // 2 :] = True
        self.register_buffer("active_mask", active)
        self.register_buffer("passive_idx", torch.nonzero(~active).flatten())
        self.register_buffer("active_idx", torch.nonzero(active).flatten())
        self.label_embed_dim = embed_dim
        self.scale_clamp = scale_clamp
        n_active = int(active.sum())
        n_passive = dim - n_active
        if n_active > 0:
            self.scale_net = CouplingNet(n_passive + embed_dim, n_active, hidden, blocks)
            self.translate_net = CouplingNet(n_passive + embed_dim, n_active, hidden, blocks)
        else:  # dim == 1: nothing to transform
            self.scale_net = None
            self.translate_net = None

    def _scale_shift(self, x_passive, emb):
        h = torch.cat([x_passive, emb], dim=-1)
        raw = self.scale_net(h)
        c = self.scale_clamp
        s = c * torch.tanh(raw / c)
        return s, self.translate_net(h)

    def forward(self, z, emb):
        if self.scale_net is None:
            return z, z.new_zeros(z.shape[:-1])
        x_a = z[..., self.passive_idx]
        x_b = z[..., self.active_idx]
        s, t = self._scale_shift(x_a, emb)
        y = torch.empty_like(z)
        y[..., self.passive_idx] = x_a
        y[..., self.active_idx] = torch.exp(s) * x_b + t
        return y, s.sum(dim=-1)

    def inverse(self, u, emb):
        if self.scale_net is None:
            return u
        x_a = u[..., self.passive_idx]
        y_b = u[..., self.active_idx]
        s, t = self._scale_shift(x_a, emb)
        z = torch.empty_like(u)
        z[..., self.passive_idx] = x_a
        z[..., self.active_idx] = (y_b - t) * torch.exp(-s)
        return z


@dataclass
class GeneratedBatch:
    """One batch of replayed knowledge: latents, decoded features, labels.

    Weights start at 1 and are filled in by the replay credibility
    scoring before the batch enters any loss.
    """

    latents: torch.Tensor   # (n, d)
    features: torch.Tensor  # (n, d), inverse image of latents
    labels: torch.Tensor    # (n,) int64
    weights: torch.Tensor   # (n,) in [0, 1]

    def __len__(self) -> int:
        return self.latents.shape[0]


class FlowModel(nn.Module):
    """Alternating permutation/coupling stack with a standard-normal prior."""

    def __init__(self, dim: int = 512, num_classes: int = 10, num_layers: int = 4,
                 hidden: int = 256, blocks: int = 2, embed_dim: int = 32,
                 seed: int = 0, dtype=torch.float64):
        super().__init__()
        self.dim = dim
        self.num_classes = num_classes
        self.embed_dim = embed_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, "flow-init"))
            layers: list[FlowLayer] = []
            for i in range(num_layers):
                layers.append(
                    PermutationLayer(dim, seed=derive_seed(seed, "flow-perm", i))
                )
                layers.append(
                    CouplingLayer(dim, embed_dim, hidden=hidden, blocks=blocks)
                )
            self.layers = nn.ModuleList(layers)
            self.label_embed = nn.Embedding(num_classes, embed_dim)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.label_embed.weight.dtype

    # -- input handling --------------------------------------------------

    def _check(self, x: torch.Tensor, y: torch.Tensor):
        if x.shape[-1] != self.dim:
            raise ShapeError(f"expected feature dim {self.dim}, got {x.shape[-1]}")
        if not torch.isfinite(x).all():
            raise NumericError("non-finite values in flow input")
        if y.numel() and (int(y.min()) < 0 or int(y.max()) >= self.num_classes):
            raise LabelDomainError(
                f"labels must lie in [0, {self.num_classes}), got "
                f"[{int(y.min())}, {int(y.max())}]"
            )

    def _prep(self, x, y):
        x = torch.as_tensor(x, dtype=self.dtype)
        y = torch.as_tensor(y, dtype=torch.long)
        squeeze = x.dim() == 1
        if squeeze:
            x = x.unsqueeze(0)
            y = y.reshape(1)
        self._check(x, y)
        return x, y, squeeze

    # -- bijection ---------------------------------------------------------

    def forward(self, z, y):
        """Map features to latents; returns (u, logdet)."""
        z, y, squeeze = self._prep(z, y)
        emb = self.label_embed(y)
        logdet = z.new_zeros(z.shape[0])
        u = z
        for layer in self.layers:
            u, ld = layer(u, emb)
            logdet = logdet + ld
        if squeeze:
            return u.squeeze(0), logdet.squeeze(0)
        return u, logdet

    def inverse(self, u, y):
        """Map latents back to feature space."""
        u, y, squeeze = self._prep(u, y)
        emb = self.label_embed(y)
        z = u
        for layer in reversed(self.layers):
            z = layer.inverse(z, emb)
        return z.squeeze(0) if squeeze else z

    def prior_log_density(self, u: torch.Tensor) -> torch.Tensor:
        return -0.5 * (self.dim * LOG_2PI + (u * u).sum(dim=-1))

    def log_prob(self, z, y) -> torch.Tensor:
        """Exact log-density of features under the flow."""
        u, logdet = self.forward(z, y)
        return self.prior_log_density(u) + logdet

    # -- generation ----------------------------------------------------------

    def sample(self, n: int, classes, rng_seed=0, probs=None) -> GeneratedBatch:
        """Draw n latent vectors from the prior and decode them.

        `classes` is the set of labels observed so far; labels are drawn
        uniformly from it unless `probs` gives explicit class weights.
        `rng_seed` may be an int or a torch.Generator.
        """
        if n < 1:
            raise EmptyBatchError("cannot sample an empty batch")
        classes = torch.as_tensor(sorted(int(c) for c in classes), dtype=torch.long)
        if classes.numel() == 0:
            raise EmptySupportError("no classes observed yet; nothing to sample")
        if isinstance(rng_seed, torch.Generator):
            gen = rng_seed
        else:
            gen = torch.Generator()
            gen.manual_seed(int(rng_seed))
        u = torch.randn(n, self.dim, dtype=self.dtype, generator=gen)
        if probs is None:
            idx = torch.randint(classes.numel(), (n,), generator=gen)
        else:
            p = torch.as_tensor(probs, dtype=torch.float64)
            idx = torch.multinomial(p, n, replacement=True, generator=gen)
        labels = classes[idx]
        with torch.no_grad():
            features = self.inverse(u, labels)
        return GeneratedBatch(
            latents=u,
            features=features,
            labels=labels,
            weights=torch.ones(n, dtype=self.dtype),
        )


def nf_loss(model: FlowModel, features, labels,
            replay: GeneratedBatch | None = None) -> torch.Tensor:
    """Negative mean log-likelihood of local features plus replayed ones.

    The replay term is omitted on the first task, before any stored flow
    exists. Features are treated as fixed inputs: gradients reach only
    the flow parameters.
    """
    features = torch.as_tensor(features, dtype=model.dtype).detach()
    if features.dim() == 1:
        features = features.unsqueeze(0)
    if features.shape[0] == 0:
        raise EmptyBatchError("nf_loss needs a nonempty local batch")
    labels = torch.as_tensor(labels, dtype=torch.long)
    loss = -model.log_prob(features, labels).mean()
    if replay is not None:
        if len(replay) == 0:
            raise EmptyBatchError("replay batch is empty; pass None to disable")
        loss = loss - model.log_prob(replay.features.detach(), replay.labels).mean()
    return loss
