"""Classifier losses vs direct-formula oracles and the gradient boundary."""

import math

import numpy as np
import pytest
import torch

from affcl.classifier import (
    SplitClassifier,
    ce_loss_generated,
    ce_loss_raw,
    kd_loss,
    total_loss,
)
from affcl.errors import LabelDomainError, ShapeError, WeightDomainError
from affcl.flow import GeneratedBatch

from conftest import randomize_params


def tiny_classifier(num_classes=3, seed=0):
    return SplitClassifier(in_shape=(1, 6, 6), feature_dim=4, hidden_width=4,
                           num_classes=num_classes, channels=(2, 2), seed=seed)


def make_gen_batch(n, d, num_classes, weights=None, seed=0):
    gen = torch.Generator().manual_seed(seed)
    feats = torch.randn(n, d, dtype=torch.float64, generator=gen)
    labels = torch.randint(0, num_classes, (n,), generator=gen)
    if weights is None:
        weights = torch.ones(n, dtype=torch.float64)
    return GeneratedBatch(latents=feats.clone(), features=feats,
                          labels=labels, weights=weights)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def test_zero_net_gives_zero_features():
    model = tiny_classifier()
    with torch.no_grad():
        for p in model.h_a.parameters():
            p.zero_()
    x = torch.rand(5, 1, 6, 6)
    assert torch.all(model.features(x) == 0)


def test_feature_shape_contract():
    model = tiny_classifier()
    out = model.features(torch.rand(7, 1, 6, 6))
    assert out.shape == (7, 4)
    with pytest.raises(ShapeError):
        model.features(torch.rand(7, 1, 5, 5))


def test_features_deterministic_construction():
    a = tiny_classifier(seed=3)
    b = tiny_classifier(seed=3)
    x = torch.rand(4, 1, 6, 6, generator=torch.Generator().manual_seed(0))
    assert torch.equal(a.features(x), b.features(x))


# ---------------------------------------------------------------------------
# ce_loss_raw
# ---------------------------------------------------------------------------

def test_ce_uniform_logits_is_log_k():
    model = tiny_classifier(num_classes=4)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    x = torch.rand(6, 1, 6, 6)
    y = torch.tensor([0, 1, 2, 3, 0, 1])
    assert float(ce_loss_raw(model, x, y)) == pytest.approx(math.log(4), abs=1e-6)


def test_ce_decreases_with_margin():
    # drive the correct logit up via the head bias; loss must shrink toward 0
    losses = []
    for margin in (5.0, 10.0):
        model = tiny_classifier(num_classes=3)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
            model.h_c.bias[1] = margin
        x = torch.rand(4, 1, 6, 6)
        y = torch.full((4,), 1)
        losses.append(float(ce_loss_raw(model, x, y)))
    assert losses[1] < losses[0] < 0.2


def test_ce_matches_hand_rolled_softmax():
    model = tiny_classifier(num_classes=3, seed=5)
    randomize_params(model, seed=6)
    gen = torch.Generator().manual_seed(2)
    x = torch.rand(16, 1, 6, 6, generator=gen)
    y = torch.randint(0, 3, (16,), generator=gen)
    loss = float(ce_loss_raw(model, x, y))
    with torch.no_grad():
        logits = model(x).numpy().astype(np.float64)
    # independent softmax-log computation
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    oracle = -logp[np.arange(16), y.numpy()].mean()
    assert loss == pytest.approx(oracle, abs=1e-6)


def test_ce_label_domain():
    model = tiny_classifier(num_classes=3)
    with pytest.raises(LabelDomainError):
        ce_loss_raw(model, torch.rand(2, 1, 6, 6), torch.tensor([0, 3]))


# ---------------------------------------------------------------------------
# ce_loss_generated
# ---------------------------------------------------------------------------

def test_generated_zero_weights_zero_loss():
    model = tiny_classifier()
    batch = make_gen_batch(8, 4, 3, weights=torch.zeros(8, dtype=torch.float64))
    assert float(ce_loss_generated(model, batch)) == 0.0


def test_generated_unit_weights_equal_plain_mean():
    model = tiny_classifier(seed=1)
    randomize_params(model, seed=2)
    batch = make_gen_batch(8, 4, 3, seed=3)
    loss = float(ce_loss_generated(model, batch))
    logits = model.head(batch.features.to(model.dtype))
    plain = float(torch.nn.functional.cross_entropy(logits, batch.labels))
    assert loss == pytest.approx(plain, abs=1e-6)


def test_generated_mixed_weights_oracle():
    model = tiny_classifier(seed=1)
    randomize_params(model, seed=2)
    gen = torch.Generator().manual_seed(4)
    w = torch.rand(8, dtype=torch.float64, generator=gen)
    batch = make_gen_batch(8, 4, 3, weights=w, seed=5)
    loss = float(ce_loss_generated(model, batch))
    with torch.no_grad():
        logits = model.head(batch.features.to(model.dtype)).numpy().astype(np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    per = -logp[np.arange(8), batch.labels.numpy()]
    oracle = float((per * w.numpy()).sum() / 8)
    assert loss == pytest.approx(oracle, abs=1e-6)


def test_generated_negative_weights_rejected():
    model = tiny_classifier()
    batch = make_gen_batch(4, 4, 3, weights=torch.tensor([0.5, -0.1, 0.2, 0.9]))
    with pytest.raises(WeightDomainError):
        ce_loss_generated(model, batch)


# ---------------------------------------------------------------------------
# kd_loss
# ---------------------------------------------------------------------------

def test_kd_zero_for_identical_extractors():
    model = tiny_classifier(seed=7)
    frozen = tiny_classifier(seed=7).h_a
    x = torch.rand(5, 1, 6, 6)
    assert float(kd_loss(model, frozen, x)) == pytest.approx(0.0, abs=1e-10)


def test_kd_three_four_five():
    class FixedFeatures(torch.nn.Module):
        def __init__(self, row):
            super().__init__()
            self.register_buffer("row", row)
            self._dummy = torch.nn.Parameter(torch.zeros(1))

        def forward(self, x):
            return self.row.expand(x.shape[0], -1)

    model = tiny_classifier()
    x = torch.rand(1, 1, 6, 6)
    with torch.no_grad():
        feats = model.features(x)
    old = feats + torch.tensor([[3.0, 4.0, 0.0, 0.0]])
    frozen = FixedFeatures(old)
    assert float(kd_loss(model, frozen, x)) == pytest.approx(25.0, abs=1e-4)


def test_kd_direct_norm_oracle():
    model = tiny_classifier(seed=8)
    frozen_model = tiny_classifier(seed=9)
    randomize_params(model, seed=10)
    randomize_params(frozen_model, seed=11)
    frozen = frozen_model.h_a
    x = torch.rand(16, 1, 6, 6, generator=torch.Generator().manual_seed(1))
    loss = float(kd_loss(model, frozen, x))
    with torch.no_grad():
        cur = model.features(x).numpy().astype(np.float64)
        old = frozen(x).numpy().astype(np.float64)
    oracle = float(((cur - old) ** 2).sum(axis=1).mean())
    assert loss == pytest.approx(oracle, abs=1e-6)


def test_kd_none_snapshot_is_zero():
    model = tiny_classifier()
    assert float(kd_loss(model, None, torch.rand(3, 1, 6, 6))) == 0.0


# ---------------------------------------------------------------------------
# total_loss
# ---------------------------------------------------------------------------

def test_total_loss_is_sum_of_components():
    model = tiny_classifier(seed=12)
    randomize_params(model, seed=13)
    frozen_model = tiny_classifier(seed=14)
    randomize_params(frozen_model, seed=15)
    gen = torch.Generator().manual_seed(3)
    x = torch.rand(8, 1, 6, 6, generator=gen)
    y = torch.randint(0, 3, (8,), generator=gen)
    batch = make_gen_batch(8, 4, 3, seed=16)

    loss, parts = total_loss(model, x, y, batch, frozen_model.h_a)
    assert float(loss) == pytest.approx(
        parts["ce_raw"] + parts["ce_gen"] + parts["kd"], abs=1e-6
    )

    # ablations reproduce the remaining terms exactly
    loss_no_gr, parts_no_gr = total_loss(model, x, y, batch, frozen_model.h_a,
                                         use_gr=False)
    assert parts_no_gr["ce_gen"] == 0.0
    assert float(loss_no_gr) == pytest.approx(parts["ce_raw"] + parts["kd"], abs=1e-6)

    loss_no_kd, parts_no_kd = total_loss(model, x, y, batch, frozen_model.h_a,
                                         use_kd=False)
    assert parts_no_kd["kd"] == 0.0
    assert float(loss_no_kd) == pytest.approx(parts["ce_raw"] + parts["ce_gen"], abs=1e-6)


def test_total_loss_gradient_matches_finite_differences():
    model = tiny_classifier(seed=20).double()
    randomize_params(model, seed=21)
    n_params = sum(p.numel() for p in model.parameters())
    assert n_params <= 500

    frozen_model = tiny_classifier(seed=22).double()
    randomize_params(frozen_model, seed=23)
    frozen = frozen_model.h_a

    gen = torch.Generator().manual_seed(7)
    x = torch.rand(6, 1, 6, 6, generator=gen, dtype=torch.float64)
    y = torch.randint(0, 3, (6,), generator=gen)
    w = torch.rand(6, dtype=torch.float64, generator=gen)
    batch = make_gen_batch(6, 4, 3, weights=w, seed=24)

    def objective():
        loss, _ = total_loss(model, x, y, batch, frozen)
        return loss

    loss = objective()
    loss.backward()
    analytic = torch.cat([p.grad.flatten() for p in model.parameters()]).numpy()

    h = 1e-5
    fd = np.empty_like(analytic)
    i = 0
    with torch.no_grad():
        for p in model.parameters():
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = float(flat[j])
                flat[j] = orig + h
                up = float(objective())
                flat[j] = orig - h
                down = float(objective())
                flat[j] = orig
                fd[i] = (up - down) / (2 * h)
                i += 1
    rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-6)
    assert float(rel.max()) < 1e-3


def test_generated_term_never_reaches_feature_extractor():
    model = tiny_classifier(seed=25)
    randomize_params(model, seed=26)
    batch = make_gen_batch(8, 4, 3, seed=27)
    loss = ce_loss_generated(model, batch)
    loss.backward()
    for name, p in model.named_parameters():
        if name.startswith("h_a"):
            assert p.grad is None or torch.all(p.grad == 0)
        else:
            assert p.grad is not None and torch.any(p.grad != 0)


def test_head_dimension_constant_across_inputs():
    model = tiny_classifier(num_classes=5)
    for n in (1, 4, 9):
        assert model(torch.rand(n, 1, 6, 6)).shape == (n, 5)
