import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sganlab.netspec import (DiscriminatorSpec, GeneratorSpec, PyramidSpec, SpecError, build_conditional_generator,
                             build_discriminator, build_label_generator, build_reconstructor, compose_labels,
                             count_parameters, make_noise, multiscale_discriminate, pyramid, spec_from_json,
                             spec_to_json, weighted_log_value)

LOG_HALF = float(np.log(0.5))


@pytest.fixture(scope="module")
def g64():
    torch.manual_seed(0)
    return build_label_generator(GeneratorSpec(upsample_factor=64, base_width=16, min_width=8)).eval()


@pytest.mark.parametrize("n,out", [(1, 64), (2, 128), (4, 256)])
def test_output_size_law(g64, n, out):
    with torch.no_grad():
        y = g64(make_noise(1, n, n, seed=n))
    assert y.shape == (1, 3, out, out)
    assert torch.allclose(y.sum(1), torch.ones(1, out, out), atol=1e-6)
    assert (y >= 0).all()


def test_rectangular_noise():
    g = build_label_generator(GeneratorSpec(upsample_factor=8, base_width=8, min_width=8))
    assert g(make_noise(2, 3, 5)).shape == (2, 3, 24, 40)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from([2, 4, 8, 16]))
def test_size_law_property(h, w, factor):
    torch.manual_seed(0)
    g = build_label_generator(GeneratorSpec(upsample_factor=factor, base_width=4, min_width=4))
    with torch.no_grad():
        y = g(make_noise(1, h, w, seed=h * w))
    assert y.shape[-2:] == (h * factor, w * factor)


def test_shift_equivariance(g64):
    z = make_noise(1, 4, 4, seed=11)
    with torch.no_grad():
        a = g64(z)
        b = g64(torch.roll(z, shifts=(1, 1), dims=(2, 3)))
    moved = torch.roll(a, shifts=(64, 64), dims=(2, 3))
    inner = (slice(None), slice(None), slice(64, 192), slice(64, 192))
    assert (moved[inner].argmax(1) != b[inner].argmax(1)).sum().item() == 0
    assert torch.allclose(moved[inner], b[inner], atol=1e-5)


def test_parameter_count_independent_of_input(g64):
    n = count_parameters(g64)
    with torch.no_grad():
        g64(make_noise(1, 1, 1))
        g64(make_noise(1, 3, 3))
    assert count_parameters(g64) == n


@pytest.mark.parametrize("factor", [3, 48, 0])
def test_upsample_factor_must_be_power_of_two(factor):
    with pytest.raises(SpecError):
        build_label_generator(GeneratorSpec(upsample_factor=factor))


def test_conditional_image_shape_and_range():
    torch.manual_seed(1)
    g = build_conditional_generator(GeneratorSpec(kind="conditional_image", base_width=8, refinement_levels=5,
                                                  output_channels=1))
    y = torch.softmax(torch.randn(1, 3, 256, 256) * 4, 1)
    with torch.no_grad():
        x = g(y)
    assert x.shape == (1, 1, 256, 256)
    assert x.abs().max() <= 1
    with pytest.raises(SpecError):
        g(torch.zeros(1, 3, 255, 255))


def test_conditional_label_varies_with_noise():
    torch.manual_seed(2)
    g = build_conditional_generator(GeneratorSpec(kind="conditional_label", base_width=8, refinement_levels=3))
    membrane = (torch.rand(1, 1, 64, 64) > 0.8).float()
    with torch.no_grad():
        a = g(membrane, make_noise(1, 8, 8, seed=1))
        b = g(membrane, make_noise(1, 8, 8, seed=2))
    assert a.shape == (1, 2, 64, 64)
    assert (a - b).abs().mean() > 1e-3
    soft = compose_labels(membrane, a)
    assert torch.allclose(soft.sum(1), torch.ones(1, 64, 64), atol=1e-6)


def test_label_injection_weights_are_shared():
    g = build_conditional_generator(GeneratorSpec(kind="conditional_image", base_width=8, refinement_levels=3,
                                                  output_channels=1))
    lifts = [m for name, m in g.named_modules() if "label_lift" in name]
    assert len(lifts) == 1


def test_reconstructor_outputs_distributions():
    torch.manual_seed(3)
    f = build_reconstructor(GeneratorSpec(kind="reconstructor", base_width=8))
    with torch.no_grad():
        for x in (torch.rand(1, 1, 256, 256) * 2 - 1, torch.zeros(1, 1, 256, 256)):
            y = f(x)
            assert y.shape == (1, 3, 256, 256)
            assert torch.isfinite(y).all()
            assert torch.allclose(y.sum(1), torch.ones(1, 256, 256), atol=1e-6)


def test_pyramid_examples():
    spec = PyramidSpec()
    levels = pyramid(torch.rand(1, 1, 256, 256), spec)
    assert [lv.shape[-1] for lv in levels] == [256, 128, 64]
    const = pyramid(np.full((8, 8), 0.3), spec)
    assert all(np.allclose(lv, 0.3) for lv in const)
    checker = (np.indices((8, 8)).sum(0) % 2).astype(float)
    assert np.array_equal(pyramid(checker, PyramidSpec((1, 2), (0.5, 0.5)))[1], np.full((4, 4), 0.5))
    with pytest.raises(SpecError):
        pyramid(np.zeros((6, 6)), spec)


@pytest.mark.parametrize("factors,weights", [((2, 4), (0.5, 0.5)), ((1, 1), (0.5, 0.5)), ((1, 2), (0.7, 0.7)),
                                             ((1, 2), (1.5, -0.5)), ((1, 2), (1.0,))])
def test_pyramid_spec_validation(factors, weights):
    with pytest.raises(SpecError):
        PyramidSpec(factors, weights)


def test_multiscale_value_examples():
    torch.manual_seed(4)
    single = PyramidSpec((1,), (1.0,))
    d = build_discriminator(DiscriminatorSpec(1, base_width=4, n_layers=2, pyramid=single))
    x = torch.rand(1, 1, 32, 32)
    logits, value = multiscale_discriminate(d, single, x)
    assert value.item() == pytest.approx(torch.nn.functional.logsigmoid(logits[0]).mean().item(), abs=1e-7)

    zero = [lambda t: torch.zeros(1, 1, 4, 4)] * 3
    _, v_real = multiscale_discriminate(zero, PyramidSpec(), x)
    assert v_real == pytest.approx(LOG_HALF)

    # a padded conv net sees borders differently at each scale; a spatial mean does not
    level = lambda t: 3 * t.mean(dim=(2, 3), keepdim=True) - 1
    two = PyramidSpec((1, 2), (0.5, 0.5))
    const = torch.full((1, 1, 32, 32), 0.25)
    _, v_two = multiscale_discriminate([level, level], two, const, real=False)
    _, v_one = multiscale_discriminate([level], single, const, real=False)
    assert v_two.item() == pytest.approx(v_one.item(), abs=1e-7)

    with pytest.raises(SpecError):
        multiscale_discriminate([level], two, x)


def test_weighted_value_fake_form():
    lg = [torch.zeros(2, 2), torch.full((2, 2), 3.0)]
    v = weighted_log_value(lg, [0.25, 0.75], real=False)
    assert v.item() == pytest.approx(0.25 * LOG_HALF + 0.75 * np.log(1 - 1 / (1 + np.exp(-3.0))))


def test_discriminator_checks_channels():
    d = build_discriminator(DiscriminatorSpec(4, base_width=4, n_layers=1))
    with pytest.raises(SpecError):
        d(torch.zeros(1, 3, 32, 32))


def test_default_receptive_field_is_about_seventy():
    assert DiscriminatorSpec().receptive_field == 70


def test_noise_is_seeded():
    assert torch.equal(make_noise(1, 2, 2, seed=5), make_noise(1, 2, 2, seed=5))
    assert not torch.equal(make_noise(1, 2, 2, seed=5), make_noise(1, 2, 2, seed=6))
    with pytest.raises(SpecError):
        make_noise(1, 0, 2)


@pytest.mark.parametrize("spec", [GeneratorSpec(kind="conditional_label", base_width=12),
                                  DiscriminatorSpec(4, pyramid=PyramidSpec((1, 2), (0.2, 0.8))),
                                  PyramidSpec()])
def test_spec_json_round_trip(spec):
    assert spec_from_json(spec_to_json(spec)) == spec


def test_unknown_generator_kind():
    with pytest.raises(SpecError):
        build_label_generator(GeneratorSpec(kind="conditional_image"))
    with pytest.raises(SpecError):
        GeneratorSpec(kind="nope").validate()
