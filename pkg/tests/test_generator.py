"""Channel splits, separation-fusion algebra, and both generation networks."""

import numpy as np
import pytest
import torch

from conftest import finite_diff_grad, rel_error
from ordfusion.backbone import BackboneConfig, EncoderClassifier
from ordfusion.generator import (
    FeatureSeparator,
    LightDecoderGenerator,
    SeparatedFeatures,
    UNetGenerator,
    build_generator,
    direct_add_fusion,
    fuse,
    generate,
    reconstruction_concat,
    split_channels,
)
from ordfusion.losses import reconstruction_loss, ssim


# ------------------------------------------------------------- channel split


def test_split_channels_paper_default():
    split = split_channels(512, 0.2)
    assert (split.c_structural, split.c_categorical) == (102, 410)
    assert split.channels == 512


def test_split_channels_even():
    split = split_channels(10, 0.5)
    assert (split.c_structural, split.c_categorical) == (5, 5)


def test_split_channels_floor_rule_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(50):
        c = int(rng.integers(4, 2048))
        tau = float(rng.uniform(0.05, 0.95))
        if int(tau * c) < 1 or c - int(tau * c) < 1:
            continue
        split = split_channels(c, tau)
        assert split.c_structural == int(tau * c)
        assert split.c_structural + split.c_categorical == c


def test_split_channels_degenerate():
    with pytest.raises(ValueError):
        split_channels(4, 0.1)  # floor(0.4) = 0
    with pytest.raises(ValueError):
        split_channels(8, 0.0)
    with pytest.raises(ValueError):
        split_channels(8, 1.0)


# ---------------------------------------------------------------- separation


def test_identity_separator_reconstructs_exactly():
    torch.manual_seed(0)
    sep = FeatureSeparator(16, 0.25)
    sep.load_identity()
    f4 = torch.rand(2, 16, 3, 3)
    with torch.no_grad():
        out = sep(f4)
        recon = reconstruction_concat(out)
        assert torch.equal(recon, f4)
        assert float(reconstruction_loss(f4, out)) == 0.0


def test_random_separator_has_positive_reconstruction_loss():
    torch.manual_seed(1)
    sep = FeatureSeparator(16, 0.25)
    f4 = torch.rand(2, 16, 3, 3)
    assert float(reconstruction_loss(f4, sep(f4))) > 0.0


def test_zero_separator_outputs_zero_blocks():
    sep = FeatureSeparator(8, 0.5)
    with torch.no_grad():
        for p in sep.parameters():
            p.zero_()
    out = sep(torch.rand(1, 8, 2, 2))
    assert torch.equal(out.categorical, torch.zeros_like(out.categorical))
    assert torch.equal(out.structural, torch.zeros_like(out.structural))


def test_separator_batch_extent_and_shapes():
    sep = FeatureSeparator(32, 0.2)
    out = sep(torch.rand(5, 32, 4, 4))
    assert out.categorical.shape == (5, 26, 4, 4)
    assert out.structural.shape == (5, 6, 4, 4)


def test_separator_channel_mismatch():
    sep = FeatureSeparator(8, 0.5)
    with pytest.raises(ValueError):
        sep(torch.rand(1, 16, 2, 2))


# -------------------------------------------------------------------- fusion


def test_fuse_concat_order():
    cat_r = torch.full((3, 2, 2), 2.0)
    struct_r = torch.full((1, 2, 2), 3.0)
    cat_m = torch.full((3, 2, 2), 5.0)
    struct_m = torch.full((1, 2, 2), 7.0)
    fused = fuse(
        SeparatedFeatures(categorical=cat_m, structural=struct_m),
        SeparatedFeatures(categorical=cat_r, structural=struct_r),
    )
    assert fused.shape == (4, 2, 2)
    assert torch.equal(fused[:3], cat_r)  # reference categorical first
    assert torch.equal(fused[3:], struct_m)  # main structural second


def test_self_fusion_equals_reconstruction_concat():
    torch.manual_seed(2)
    sep = FeatureSeparator(8, 0.25)
    f4 = torch.rand(1, 8, 2, 2)
    out = sep(f4)
    assert torch.equal(fuse(out, out), reconstruction_concat(out))


def test_fusion_asymmetry():
    a = SeparatedFeatures(categorical=torch.ones(2, 2, 2), structural=torch.zeros(1, 2, 2))
    b = SeparatedFeatures(categorical=torch.full((2, 2, 2), 9.0), structural=torch.ones(1, 2, 2))
    assert not torch.equal(fuse(a, b), fuse(b, a))


def test_direct_add_properties():
    g = torch.Generator().manual_seed(3)
    a = torch.rand(2, 8, 2, 2, generator=g)
    b = torch.rand(2, 8, 2, 2, generator=g)
    assert torch.equal(direct_add_fusion(a, torch.zeros_like(a)), a)
    assert torch.equal(direct_add_fusion(a, b), direct_add_fusion(b, a))
    assert torch.equal(direct_add_fusion(a, a), 2 * a)
    with pytest.raises(ValueError):
        direct_add_fusion(a, torch.rand(2, 4, 2, 2))


# ---------------------------------------------------------------- generators


def _pyramid(model, x):
    return model.encode(x)


def test_unet_output_shape_64():
    torch.manual_seed(4)
    cfg = BackboneConfig(channels=32, input_size=64)
    model = EncoderClassifier(cfg)
    gen = UNetGenerator(cfg)
    x = torch.rand(2, 1, 64, 64)
    pyr = _pyramid(model, x)
    out = gen(torch.rand(2, 32, 4, 4), pyr)
    assert out.shape == (2, 1, 64, 64)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_light_decoder_tokens_and_shape():
    torch.manual_seed(5)
    cfg = BackboneConfig(channels=32, input_size=32)
    gen = LightDecoderGenerator(cfg)
    # token sequence is tiled to 4T internally
    assert gen.pos_embed.shape[1] == 4 * cfg.f4_size**2
    out = gen(torch.rand(3, 32, 2, 2))
    assert out.shape == (3, 1, 32, 32)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_generate_dispatch_and_errors():
    torch.manual_seed(6)
    cfg = BackboneConfig(channels=16, input_size=16)
    model = EncoderClassifier(cfg)
    unet = build_generator("unet", cfg)
    light = build_generator("light_decoder", cfg)
    x = torch.rand(1, 1, 16, 16)
    pyr = _pyramid(model, x)
    fused = torch.rand(1, 16, 1, 1)
    assert generate("unet", unet, fused, pyr).shape == (1, 1, 16, 16)
    assert generate("light_decoder", light, fused).shape == (1, 1, 16, 16)
    with pytest.raises(ValueError):
        generate("unet", unet, fused, None)
    with pytest.raises(ValueError):
        build_generator("vae", cfg)


def test_generator_deterministic():
    torch.manual_seed(7)
    cfg = BackboneConfig(channels=16, input_size=16)
    model = EncoderClassifier(cfg)
    gen = UNetGenerator(cfg)
    x = torch.rand(1, 1, 16, 16)
    pyr = _pyramid(model, x)
    fused = torch.rand(1, 16, 1, 1)
    a = gen(fused, pyr)
    b = gen(fused, pyr)
    assert torch.equal(a, b)


@pytest.mark.parametrize("kind", ["unet", "light_decoder"])
def test_generated_pixels_in_unit_range(kind):
    torch.manual_seed(8)
    cfg = BackboneConfig(channels=16, input_size=16)
    model = EncoderClassifier(cfg)
    gen = build_generator(kind, cfg)
    for _ in range(3):
        x = torch.rand(4, 1, 16, 16)
        pyr = _pyramid(model, x)
        fused = torch.randn(4, 16, 1, 1) * 5
        out = generate(kind, gen, fused, pyr)
        assert out.min() >= 0.0 and out.max() <= 1.0


def _random_pyramid(cfg, g):
    from ordfusion.backbone import FeaturePyramid

    sizes = [cfg.input_size // (2 ** (i + 1)) for i in range(4)]
    stages = [
        torch.randn(1, c, s, s, generator=g, dtype=torch.float64)
        for c, s in zip(cfg.stage_channels, sizes)
    ]
    return FeaturePyramid(stages)


def test_end_to_end_gradient_through_extractors():
    """d(mean generated pixel)/d(extractor weights) vs finite differences."""
    torch.manual_seed(9)
    cfg = BackboneConfig(channels=8, input_size=16, in_channels=1)
    sep = FeatureSeparator(8, 0.25).double()
    gen = UNetGenerator(cfg).double()
    g = torch.Generator().manual_seed(12)
    pyr_m = _random_pyramid(cfg, g)
    pyr_r = _random_pyramid(cfg, g)

    def out_of_weight(w):
        with torch.no_grad():
            sep.h_s.weight.copy_(w)
        fused = fuse(sep(pyr_m.f4), sep(pyr_r.f4))
        return gen(fused, pyr_m).mean()

    w0 = sep.h_s.weight.detach().clone()
    fd = finite_diff_grad(out_of_weight, w0, eps=1e-5)
    with torch.no_grad():
        sep.h_s.weight.copy_(w0)
    sep.h_s.weight.requires_grad_(True)
    fused = fuse(sep(pyr_m.f4), sep(pyr_r.f4))
    gen(fused, pyr_m).mean().backward()
    analytic = sep.h_s.weight.grad.detach()
    assert rel_error(analytic.numpy(), fd.numpy()) < 1e-3


def test_end_to_end_gradient_generate_ssim_path():
    """Gradient of SSIM(x_m, generated) w.r.t. extractor params vs FD."""
    torch.manual_seed(10)
    cfg = BackboneConfig(channels=8, input_size=16, in_channels=1)
    model = EncoderClassifier(cfg).double()
    sep = FeatureSeparator(8, 0.5).double()
    gen = UNetGenerator(cfg).double()
    x_m = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    x_r = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    with torch.no_grad():
        pyr_m = model.encode(x_m)
        pyr_r = model.encode(x_r)

    def ssim_of_weight(w):
        with torch.no_grad():
            sep.h_c.weight.copy_(w)
        fused = fuse(sep(pyr_m.f4), sep(pyr_r.f4))
        x_f = gen(fused, pyr_m)
        return ssim(x_m[0], x_f[0])

    w0 = sep.h_c.weight.detach().clone()
    fd = finite_diff_grad(ssim_of_weight, w0, eps=1e-5)
    with torch.no_grad():
        sep.h_c.weight.copy_(w0)
    sep.h_c.weight.requires_grad_(True)
    fused = fuse(sep(pyr_m.f4), sep(pyr_r.f4))
    x_f = gen(fused, pyr_m)
    ssim(x_m[0], x_f[0]).backward()
    analytic = sep.h_c.weight.grad.detach()
    assert rel_error(analytic.numpy(), fd.numpy()) < 1e-3
