import numpy as np
import pytest
import torch

from sganlab.dataform import CorpusConfig, make_synthetic_corpus
from sganlab.netspec import (DiscriminatorSpec, GeneratorSpec, LabelGenerator, MultiScaleDiscriminator,
                             PyramidSpec, Reconstructor, CascadedRefinementGenerator)


@pytest.fixture(scope="session")
def corpus():
    return make_synthetic_corpus(CorpusConfig(sections=4, height=128, width=128), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def smooth_activations(module):
    """Swap piecewise-linear activations for SiLU so finite differences never straddle a kink."""
    for name, child in module.named_children():
        if isinstance(child, (torch.nn.ReLU, torch.nn.LeakyReLU)):
            setattr(module, name, torch.nn.SiLU())
        else:
            smooth_activations(child)
    return module


class TinyNets:
    """Small float64 networks; everything runs at 16x16 with a 2-level pyramid."""

    size = 16

    def __init__(self, seed=0, smooth=False):
        torch.manual_seed(seed)
        pyr = PyramidSpec((1, 2), (0.4, 0.6))
        self.G_y = LabelGenerator(GeneratorSpec(upsample_factor=4, base_width=4, min_width=4,
                                                noise_channels=2)).double()
        self.G_x = CascadedRefinementGenerator(GeneratorSpec(kind="conditional_image", base_width=4,
                                                             refinement_levels=1, output_channels=1)).double()
        self.F_y = Reconstructor(width=4, dilations=(1, 2)).double()
        self.D_y = MultiScaleDiscriminator(DiscriminatorSpec(3, base_width=4, n_layers=1, pyramid=pyr)).double()
        self.D_x = MultiScaleDiscriminator(DiscriminatorSpec(4, base_width=4, n_layers=1, pyramid=pyr)).double()
        self.G_u = LabelGenerator(GeneratorSpec(upsample_factor=4, base_width=4, min_width=4, noise_channels=2,
                                                output_channels=1)).double()
        self.D_u = MultiScaleDiscriminator(DiscriminatorSpec(1, base_width=4, n_layers=1, pyramid=pyr)).double()
        self.G_j = LabelGenerator(GeneratorSpec(upsample_factor=4, base_width=4, min_width=4, noise_channels=2,
                                                output_channels=4)).double()
        if smooth:
            for net in self.nets():
                smooth_activations(net)
        g = torch.Generator().manual_seed(seed + 1)
        n, s = 2, self.size
        self.z = torch.randn(n, 2, s // 4, s // 4, generator=g, dtype=torch.float64)
        cls = torch.randint(0, 3, (n, s, s), generator=g)
        self.y = torch.nn.functional.one_hot(cls, 3).permute(0, 3, 1, 2).double()
        self.x = torch.rand(n, 1, s, s, generator=g, dtype=torch.float64) * 2 - 1


    def nets(self):
        return [self.G_y, self.G_x, self.F_y, self.D_y, self.D_x, self.G_u, self.D_u, self.G_j]


@pytest.fixture
def tiny():
    return TinyNets()


def zero_last(D):
    """Make every level emit logit 0 everywhere."""
    for level in D.levels:
        last = [m for m in level.modules() if isinstance(m, torch.nn.Conv2d)][-1]
        torch.nn.init.zeros_(last.weight)
        torch.nn.init.zeros_(last.bias)
    return D


def pytest_terminal_summary(terminalreporter):
    import _verdicts

    rows = _verdicts.lines()
    if rows:
        terminalreporter.section("acceptance criteria")
        for row in rows:
            terminalreporter.write_line(row)
