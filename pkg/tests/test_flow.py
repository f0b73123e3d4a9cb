"""Flow correctness: trivial contracts plus the independent oracles
(finite-difference Jacobian, quadrature normalization, round-trips)."""

import math

import numpy as np
import pytest
import torch

from affcl.errors import EmptySupportError, NumericError, ShapeError
from affcl.flow import LOG_2PI, CouplingLayer, FlowModel, PermutationLayer, nf_loss

from conftest import randomize_params, zero_couplings


def small_flow(dim=6, num_classes=3, layers=2, hidden=8, blocks=1, embed=4, seed=7):
    return FlowModel(dim=dim, num_classes=num_classes, num_layers=layers,
                     hidden=hidden, blocks=blocks, embed_dim=embed, seed=seed)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_identity_couplings_forward_is_permutation():
    flow = small_flow(dim=6, layers=3, seed=1)
    zero_couplings(flow)
    z = torch.randn(4, 6, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 0])
    u, logdet = flow.forward(z, y)
    perm = torch.arange(6)
    for layer in flow.layers:
        if isinstance(layer, PermutationLayer):
            perm = perm[layer.perm]
    assert torch.equal(u, z[:, perm])
    assert torch.all(logdet == 0)


def test_constant_scale_logdet():
    # one coupling layer, d=4 -> 2 transformed coords, s == c means logdet = 2c
    layer = CouplingLayer(dim=4, embed_dim=2, hidden=8, blocks=1)
    c = 0.7
    with torch.no_grad():
        layer.scale_net.out.weight.zero_()
        # tanh soft clamp: choose bias so the clamped value is exactly c
        layer.scale_net.out.bias.fill_(3.0 * math.atanh(c / 3.0))
        layer.translate_net.out.weight.zero_()
        layer.translate_net.out.bias.zero_()
    layer = layer.double()
    z = torch.randn(5, 4, dtype=torch.float64)
    emb = torch.randn(5, 2, dtype=torch.float64)
    _, logdet = layer(z, emb)
    assert torch.allclose(logdet, torch.full((5,), 2 * c, dtype=torch.float64),
                          atol=1e-12)


def test_logdet_matches_numerical_jacobian():
    # independent oracle: central-difference Jacobian, h = 1e-4
    for seed in (0, 1, 2):
        flow = small_flow(dim=6, seed=seed)
        randomize_params(flow, seed=100 + seed, scale=0.5)
        z = torch.randn(6, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(seed))
        y = torch.tensor(seed % 3)
        _, logdet = flow.forward(z, y)
        h = 1e-4
        jac = np.empty((6, 6))
        for j in range(6):
            zp, zm = z.clone(), z.clone()
            zp[j] += h
            zm[j] -= h
            up, _ = flow.forward(zp, y)
            um, _ = flow.forward(zm, y)
            jac[:, j] = ((up - um) / (2 * h)).detach().numpy()
        _, oracle = np.linalg.slogdet(jac)
        assert abs(float(logdet.detach()) - oracle) / max(abs(oracle), 1e-6) < 1e-3


def test_forward_input_errors():
    flow = small_flow()
    with pytest.raises(ShapeError):
        flow.forward(torch.zeros(5), torch.tensor(0))
    bad = torch.full((6,), float("nan"), dtype=torch.float64)
    with pytest.raises(NumericError):
        flow.forward(bad, torch.tensor(0))


# ---------------------------------------------------------------------------
# inverse
# ---------------------------------------------------------------------------

def test_identity_inverse_is_identity():
    flow = FlowModel(dim=4, num_classes=2, num_layers=0, seed=0)
    u = torch.randn(3, 4, dtype=torch.float64)
    y = torch.tensor([0, 1, 0])
    assert torch.equal(flow.inverse(u, y), u)


def test_shift_only_coupling_inverse_subtracts():
    layer = CouplingLayer(dim=4, embed_dim=2, hidden=8, blocks=1).double()
    with torch.no_grad():
        layer.translate_net.out.bias.fill_(1.0)
    u = torch.randn(5, 4, dtype=torch.float64)
    emb = torch.zeros(5, 2, dtype=torch.float64)
    z = layer.inverse(u, emb)
    assert torch.allclose(z[:, layer.active_idx], u[:, layer.active_idx] - 1.0)
    assert torch.equal(z[:, layer.passive_idx], u[:, layer.passive_idx])


def test_roundtrip_randomized_stack():
    # 8-layer stack (4 permutations + 4 couplings), 100 random (u, y)
    flow = FlowModel(dim=16, num_classes=5, num_layers=4, hidden=32, blocks=2,
                     embed_dim=8, seed=3)
    randomize_params(flow, seed=9, scale=0.5)
    gen = torch.Generator().manual_seed(42)
    u = torch.randn(100, 16, dtype=torch.float64, generator=gen)
    y = torch.randint(0, 5, (100,), generator=gen)
    z = flow.inverse(u, y)
    u2, _ = flow.forward(z, y)
    assert float((u2 - u).abs().max()) < 1e-4


# ---------------------------------------------------------------------------
# log_prob
# ---------------------------------------------------------------------------

def test_log_prob_standard_normal_mode():
    flow = FlowModel(dim=2, num_classes=2, num_layers=2, hidden=8, seed=0)
    zero_couplings(flow)
    lp0 = float(flow.log_prob(torch.zeros(2, dtype=torch.float64), torch.tensor(0)))
    assert lp0 == pytest.approx(-LOG_2PI, abs=1e-9)
    lp1 = float(flow.log_prob(torch.tensor([1.0, 0.0], dtype=torch.float64),
                              torch.tensor(1)))
    assert lp1 == pytest.approx(-LOG_2PI - 0.5, abs=1e-9)


@pytest.mark.parametrize("dim", [1, 2])
def test_quadrature_normalization(dim):
    # independent oracle: trapezoid integration of exp(log_prob)
    flow = FlowModel(dim=dim, num_classes=3, num_layers=2, hidden=8, blocks=1,
                     embed_dim=4, seed=11)
    randomize_params(flow, seed=21, scale=0.25)
    y = 1
    if dim == 1:
        grid = torch.linspace(-30, 30, 10_000, dtype=torch.float64).unsqueeze(1)
        with torch.no_grad():
            dens = torch.exp(flow.log_prob(grid, torch.full((len(grid),), y)))
        total = float(np.trapezoid(dens.numpy(), grid.squeeze(1).numpy()))
    else:
        n = 501
        axis = np.linspace(-30, 30, n)
        total = 0.0
        xs, ys_ = np.meshgrid(axis, axis, indexing="ij")
        pts = torch.as_tensor(
            np.stack([xs.ravel(), ys_.ravel()], axis=1), dtype=torch.float64
        )
        with torch.no_grad():
            dens = torch.exp(flow.log_prob(pts, torch.full((len(pts),), y)))
        grid2d = dens.numpy().reshape(n, n)
        total = float(np.trapezoid(np.trapezoid(grid2d, axis, axis=1), axis))
    assert total == pytest.approx(1.0, abs=0.02)


def test_permutation_neutrality():
    # appending a permutation next to the prior changes no log_prob value
    flow = small_flow(dim=6, seed=5)
    randomize_params(flow, seed=6, scale=0.5)
    z = torch.randn(10, 6, dtype=torch.float64)
    y = torch.randint(0, 3, (10,))
    before = flow.log_prob(z, y)
    flow.layers.append(PermutationLayer(6, seed=999))
    after = flow.log_prob(z, y)
    assert torch.allclose(before, after, atol=1e-12)


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------

def test_sample_identity_flow_is_standard_normal():
    flow = FlowModel(dim=8, num_classes=4, num_layers=2, hidden=8, seed=2)
    zero_couplings(flow)
    batch = flow.sample(64, [0, 1, 2, 3], rng_seed=7)
    mean = batch.features.mean(dim=0)
    assert float(mean.abs().max()) < 4 / math.sqrt(64)
    assert torch.all(batch.weights == 1.0)


def test_sample_deterministic():
    flow = small_flow(seed=4)
    randomize_params(flow, seed=13, scale=0.3)
    a = flow.sample(32, [0, 1], rng_seed=99)
    b = flow.sample(32, [0, 1], rng_seed=99)
    assert torch.equal(a.latents, b.latents)
    assert torch.equal(a.features, b.features)
    assert torch.equal(a.labels, b.labels)


def test_sample_empty_support():
    flow = small_flow()
    with pytest.raises(EmptySupportError):
        flow.sample(4, [], rng_seed=0)


def _gauss_box_prob(lo, hi, mean, sigma):
    def cdf(v):
        return 0.5 * (1.0 + math.erf((v - mean) / (sigma * math.sqrt(2.0))))

    return cdf(hi) - cdf(lo)


def test_sample_matches_conditional_density_fit():
    # density-fit smoke oracle: train on a labeled two-Gaussian mixture,
    # then compare the sample histogram to the analytic mixture
    means = {0: (-1.5, 0.0), 1: (1.5, 0.0)}
    sigma = 0.5
    gen = torch.Generator().manual_seed(0)
    per_class = 2048
    data, labels = [], []
    for c, mu in means.items():
        pts = torch.randn(per_class, 2, dtype=torch.float64, generator=gen) * sigma
        pts += torch.tensor(mu, dtype=torch.float64)
        data.append(pts)
        labels.append(torch.full((per_class,), c))
    data = torch.cat(data)
    labels = torch.cat(labels)

    # seed 6 gives permutations that let both coordinates be transformed
    flow = FlowModel(dim=2, num_classes=2, num_layers=4, hidden=32, blocks=1,
                     embed_dim=4, seed=6)
    opt = torch.optim.Adam(flow.parameters(), lr=7e-3)
    for it in range(900):
        idx = torch.randint(len(labels), (256,), generator=gen)
        loss = nf_loss(flow, data[idx], labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()

    batch = flow.sample(5000, [0, 1], rng_seed=123)
    pts = batch.features.numpy()

    edges = np.linspace(-3.2, 3.2, 7)
    hist, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=[edges, edges])
    emp = hist.flatten() / len(pts)
    emp_outside = 1.0 - emp.sum()

    target = []
    for i in range(len(edges) - 1):
        for j in range(len(edges) - 1):
            p = 0.0
            for mu in means.values():
                p += 0.5 * (
                    _gauss_box_prob(edges[i], edges[i + 1], mu[0], sigma)
                    * _gauss_box_prob(edges[j], edges[j + 1], mu[1], sigma)
                )
            target.append(p)
    target = np.asarray(target)
    target_outside = 1.0 - target.sum()

    tv = 0.5 * (np.abs(emp - target).sum() + abs(emp_outside - target_outside))
    assert tv < 0.1


# ---------------------------------------------------------------------------
# nf_loss
# ---------------------------------------------------------------------------

def test_nf_loss_negates_mean_log_prob():
    flow = FlowModel(dim=2, num_classes=2, num_layers=2, hidden=8, seed=0)
    zero_couplings(flow)
    # standard normal log density -3 at radius^2 = 2*(3 - log 2pi)
    r2 = 2.0 * (3.0 - LOG_2PI)
    z = torch.tensor([[math.sqrt(r2), 0.0]], dtype=torch.float64)
    loss = nf_loss(flow, z, torch.tensor([0]))
    assert float(loss) == pytest.approx(3.0, abs=1e-9)


def test_nf_loss_sums_local_and_replay_means():
    from affcl.flow import GeneratedBatch

    flow = FlowModel(dim=2, num_classes=2, num_layers=2, hidden=8, seed=0)
    zero_couplings(flow)
    r2 = 2.0 * (2.0 - LOG_2PI)
    z = torch.tensor([[math.sqrt(r2), 0.0]], dtype=torch.float64)
    replay = GeneratedBatch(
        latents=z.clone(), features=z.clone(),
        labels=torch.tensor([1]), weights=torch.ones(1, dtype=torch.float64),
    )
    loss = nf_loss(flow, z, torch.tensor([0]), replay)
    assert float(loss) == pytest.approx(4.0, abs=1e-9)


def test_nf_loss_empty_batch():
    from affcl.errors import EmptyBatchError

    flow = small_flow()
    with pytest.raises(EmptyBatchError):
        nf_loss(flow, torch.empty(0, 6, dtype=torch.float64), torch.empty(0).long())


def test_nf_loss_gradient_matches_finite_differences():
    # central finite differences on every flow parameter
    from affcl.flow import GeneratedBatch

    flow = FlowModel(dim=6, num_classes=3, num_layers=1, hidden=6, blocks=1,
                     embed_dim=4, seed=31)
    randomize_params(flow, seed=32, scale=0.4)
    n_params = sum(p.numel() for p in flow.parameters())
    assert n_params <= 500

    gen = torch.Generator().manual_seed(5)
    feats = torch.randn(8, 6, dtype=torch.float64, generator=gen)
    labels = torch.randint(0, 3, (8,), generator=gen)
    rep_feats = torch.randn(8, 6, dtype=torch.float64, generator=gen)
    replay = GeneratedBatch(
        latents=rep_feats.clone(), features=rep_feats,
        labels=torch.randint(0, 3, (8,), generator=gen),
        weights=torch.ones(8, dtype=torch.float64),
    )

    loss = nf_loss(flow, feats, labels, replay)
    loss.backward()
    analytic = torch.cat([p.grad.flatten() for p in flow.parameters()]).numpy()

    h = 1e-5
    fd = np.empty_like(analytic)
    i = 0
    with torch.no_grad():
        for p in flow.parameters():
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = float(flat[j])
                flat[j] = orig + h
                up = float(nf_loss(flow, feats, labels, replay))
                flat[j] = orig - h
                down = float(nf_loss(flow, feats, labels, replay))
                flat[j] = orig
                fd[i] = (up - down) / (2 * h)
                i += 1
    rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-6)
    assert float(rel.max()) < 1e-3
