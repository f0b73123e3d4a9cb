import math

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def randomize_params(module: torch.nn.Module, seed: int, scale: float = 1.0) -> None:
    """Overwrite every parameter with seeded, fan-scaled Gaussian noise.

    Weight matrices get std scale/sqrt(fan_in), vectors std 0.2*scale, so
    a draw looks like a (perturbed) real network rather than an
    arbitrarily exploding one.
    """
    gen = torch.Generator()
    gen.manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            std = scale / math.sqrt(p[0].numel()) if p.dim() >= 2 else 0.2 * scale
            noise = torch.randn(p.shape, generator=gen, dtype=torch.float64) * std
            p.copy_(noise.to(p.dtype))


def zero_couplings(flow) -> None:
    """Force every coupling net output to zero: s = t = 0, flow = permutations."""
    from affcl.flow import CouplingLayer

    with torch.no_grad():
        for layer in flow.layers:
            if isinstance(layer, CouplingLayer) and layer.scale_net is not None:
                for net in (layer.scale_net, layer.translate_net):
                    net.out.weight.zero_()
                    net.out.bias.zero_()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
