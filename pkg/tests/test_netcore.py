import numpy as np
import pytest
import torch

from dismask import netcore
from dismask.netcore import (
    ArchConfig,
    ConvTower,
    Generator,
    ModelBundle,
    SCUnit,
    adain,
    grad_check,
    sc_block,
)


def test_adain_matches_manual_normalization():
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(2, 3, 5, 5, generator=gen, dtype=torch.float64)
    mean = torch.randn(2, 3, generator=gen, dtype=torch.float64)
    std = torch.rand(2, 3, generator=gen, dtype=torch.float64) + 0.1
    out = adain(x, mean, std)
    got_mean = out.mean(dim=(-2, -1))
    got_std = out.std(dim=(-2, -1), unbiased=False)
    assert torch.allclose(got_mean, mean, atol=1e-9)
    assert torch.allclose(got_std, std, atol=1e-6)


def test_adain_flat_channel_is_safe():
    x = torch.full((1, 1, 4, 4), 3.0)
    out = adain(x, torch.tensor([[1.0]]), torch.tensor([[2.0]]))
    assert torch.isfinite(out).all()
    # zero-variance content collapses to the style mean
    assert torch.allclose(out, torch.ones_like(out))


def _saturate_unit(unit: SCUnit, r0: int, r1: int, c0: int, c1: int) -> None:
    """Force every rectangle of the unit to the exact region [r0,r1)x[c0,c1).

    Zeroed gate weights plus one +500 bias logit per cumax give softmaxes
    that are exactly one-hot in float32, hence exact {0,1} gates.
    """
    with torch.no_grad():
        for lin, edge, size in (
            (unit.f_h1, r0, unit.height),
            (unit.f_h2, r1, unit.height),
            (unit.f_w1, c0, unit.width),
            (unit.f_w2, c1, unit.width),
        ):
            lin.weight.zero_()
            lin.bias.zero_()
            for j in range(unit.num_rects):
                lin.bias[j * size + edge] = 500.0


def test_sc_unit_saturated_gates_give_exact_rectangle():
    unit = SCUnit(channels=3, height=8, width=8, num_rects=2)
    _saturate_unit(unit, 2, 6, 3, 7)
    gamma = torch.randn(2, 3, 8, 8, generator=torch.Generator().manual_seed(1))
    out, pi = unit(gamma, torch.tensor([0.5, -0.5]))
    expected = torch.zeros(8, 8)
    expected[2:6, 3:7] = 1.0
    assert torch.equal(pi[0], expected)
    # outside the rectangle the unit is the exact identity
    outside = expected == 0.0
    assert torch.equal(out[:, :, outside], gamma[:, :, outside])


def test_sc_block_mask_zero_is_identity():
    unit = SCUnit(channels=4, height=6, width=6, num_rects=3)
    gamma = torch.randn(2, 4, 6, 6, generator=torch.Generator().manual_seed(2))
    out = sc_block(gamma, torch.tensor([1.0, 2.0]), unit, mask_override=0.0)
    assert (out - gamma).abs().max().item() <= 1e-6


def test_sc_block_mask_one_is_pure_adain():
    unit = SCUnit(channels=4, height=6, width=6, num_rects=3)
    gamma = torch.randn(2, 4, 6, 6, generator=torch.Generator().manual_seed(3))
    code = torch.tensor([0.3, -1.2])
    out = sc_block(gamma, code, unit, mask_override=1.0)
    with torch.no_grad():
        stats = unit.style(code.reshape(-1, 1))
        mean, raw = stats.chunk(2, dim=-1)
        expected = adain(gamma, mean, torch.nn.functional.softplus(raw))
    assert torch.allclose(out, expected, atol=1e-6)


def test_sc_unit_mask_range_and_shape():
    unit = SCUnit(channels=3, height=8, width=4, num_rects=6)
    gamma = torch.randn(5, 3, 8, 4, generator=torch.Generator().manual_seed(4))
    pi = unit.mask(gamma)
    assert pi.shape == (5, 8, 4)
    assert (pi >= 0).all() and (pi <= 1 + 1e-6).all()


def test_sc_unit_mask_mode_none_is_all_ones():
    unit = SCUnit(channels=3, height=4, width=4, num_rects=2, mask_mode="none")
    gamma = torch.randn(2, 3, 4, 4)
    assert torch.equal(unit.mask(gamma), torch.ones(2, 4, 4))


def test_sc_unit_softmax_mode_and_bad_mode():
    unit = SCUnit(channels=3, height=4, width=4, num_rects=2, mask_mode="softmax")
    pi = unit.mask(torch.randn(2, 3, 4, 4))
    assert pi.shape == (2, 4, 4)
    assert (pi >= 0).all() and (pi <= 1 + 1e-6).all()
    with pytest.raises(ValueError):
        SCUnit(3, 4, 4, 2, mask_mode="blur")


def test_sc_unit_rejects_wrong_spatial_dims():
    unit = SCUnit(channels=2, height=4, width=4, num_rects=1)
    with pytest.raises(ValueError):
        unit(torch.randn(1, 2, 8, 8), torch.tensor([0.0]))
    with pytest.raises(ValueError):
        unit(torch.randn(1, 2, 4, 4), torch.tensor([0.0]),
             mask_override=torch.ones(8, 8))


def test_arch_config_validation():
    with pytest.raises(ValueError):
        ArchConfig(num_rects=0)
    with pytest.raises(ValueError):
        ArchConfig(num_rects=10)
    with pytest.raises(ValueError):
        ArchConfig(resolution=32)  # default stages imply 64
    with pytest.raises(ValueError):
        ArchConfig(d=3, dim_to_block=(0, 1))  # wrong length
    with pytest.raises(ValueError):
        ArchConfig(d=2, dim_to_block=(0, 9))
    cfg = ArchConfig(d=5, stage_channels=(4, 3), resolution=16)
    assert cfg.dim_to_block == (0, 1, 0, 1, 0)
    assert ArchConfig.from_dict(cfg.to_dict()) == cfg


def test_generator_output_and_validation(tiny_arch):
    g = Generator(tiny_arch)
    codes = torch.randn(4, tiny_arch.d, generator=torch.Generator().manual_seed(5))
    img = g(codes)
    assert img.shape == (4, 1, 16, 16)
    assert (img >= -1).all() and (img <= 1).all()
    with pytest.raises(ValueError):
        g(torch.randn(4, tiny_arch.d + 1))
    with pytest.raises(ValueError):
        g(torch.randn(tiny_arch.d))


def test_generator_dim_masks_cover_all_dims(tiny_bundle):
    arch = tiny_bundle.arch
    masks = tiny_bundle.generator.dim_masks(torch.zeros(1, arch.d))
    assert sorted(masks) == list(range(arch.d))
    for pi in masks.values():
        assert pi.shape == (1, arch.resolution, arch.resolution)


def test_generator_latent_support_is_masked():
    # With exact {0,1} gates on the unit of the last stage, pixels outside
    # the rectangle cannot depend on that latent dimension at all.
    arch = ArchConfig(d=2, num_rects=2, resolution=16, base_channels=6,
                      stage_channels=(4, 3), dim_to_block=(0, 1))
    bundle = ModelBundle.build(arch, seed=11)
    unit = bundle.generator.units[1]["1"]
    _saturate_unit(unit, 3, 9, 5, 12)
    a = np.zeros((1, 2), dtype=np.float32)
    b = a.copy()
    b[0, 1] = 2.5
    diff = np.abs(netcore.generate(bundle, a) - netcore.generate(bundle, b))[0, 0]
    inside = np.zeros((16, 16), dtype=bool)
    inside[3:9, 5:12] = True
    assert diff[~inside].max() == 0.0
    assert diff[inside].max() > 0.0


def test_conv_tower_shapes(tiny_arch):
    d_net = ConvTower(tiny_arch, 1)
    q_net = ConvTower(tiny_arch, tiny_arch.d)
    x = torch.randn(3, 1, 16, 16)
    assert d_net(x).shape == (3, 1)
    assert q_net(x).shape == (3, tiny_arch.d)
    with pytest.raises(ValueError):
        d_net(torch.randn(3, 1, 8, 8))


def test_bundle_build_is_seed_deterministic(tiny_arch):
    a = ModelBundle.build(tiny_arch, seed=42)
    b = ModelBundle.build(tiny_arch, seed=42)
    c = ModelBundle.build(tiny_arch, seed=43)
    for (name, pa), (_, pb) in zip(
        a.generator.named_parameters(), b.generator.named_parameters()
    ):
        assert torch.equal(pa, pb), name
    some_equal = all(
        torch.equal(pa, pc)
        for pa, pc in zip(a.generator.parameters(), c.generator.parameters())
    )
    assert not some_equal


def test_numpy_wrappers(tiny_bundle):
    arch = tiny_bundle.arch
    code = np.zeros(arch.d)
    img = netcore.generate(tiny_bundle, code)
    assert img.shape == (1, 1, 16, 16)
    assert netcore.discriminate(tiny_bundle, img).shape == (1,)
    assert netcore.recognize(tiny_bundle, img).shape == (1, arch.d)
    with pytest.raises(ValueError):
        netcore.generate(tiny_bundle, np.zeros(arch.d + 2))


def test_generate_with_closed_masks_ignores_codes(tiny_bundle):
    rng = np.random.default_rng(0)
    a = netcore.generate(tiny_bundle, rng.standard_normal(3), mask_override=0.0)
    b = netcore.generate(tiny_bundle, rng.standard_normal(3), mask_override=0.0)
    np.testing.assert_array_equal(a, b)


def test_grad_check_accepts_true_gradient():
    def fn(params):
        return (params["x"] ** 2).sum() + (params["x"] * params["y"]).sum()

    params = {
        "x": torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64),
        "y": torch.tensor([0.3, 0.7, -1.1], dtype=torch.float64),
    }
    report = grad_check(fn, params)
    assert report.passed(1e-6)


def test_grad_check_flags_wrong_gradient():
    class WrongGrad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.sum()

        @staticmethod
        def backward(ctx, g):
            return 2.0 * g * torch.ones(3, dtype=torch.float64)

    def fn(params):
        return WrongGrad.apply(params["x"])

    report = grad_check(fn, {"x": torch.zeros(3, dtype=torch.float64)})
    assert not report.passed(1e-4)
    assert report.max_rel_err > 0.1
