import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from nircolor.losses import (
    FinetuneBatch,
    LossWeights,
    constant_ssim,
    cycle_loss,
    feature_gan_objective,
    finetune_pixel_objective,
    identity_loss,
    lsgan_d_loss,
    lsgan_g_loss,
    mix_loss,
    pretrain_objective,
    ssim,
    ssim_map,
    ssim_window_size,
    total_objective,
    translation_objective,
)

from conftest import fd_relative_error

D64 = torch.float64


def _img(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g, dtype=D64) * 1.8 - 0.9


class TinyGen(nn.Module):
    """Two-scale stand-in generator: a 3x3 conv + tanh, emitted coarse to fine."""

    def __init__(self, cin=1, cout=3, stages=2):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.stages = stages

    def forward(self, x):
        y = torch.tanh(self.conv(x))
        return [nn.functional.avg_pool2d(y, 2 ** (self.stages - 1 - s))
                for s in range(self.stages)]


class TinyDisc(nn.Module):
    def __init__(self, cin=1):
        super().__init__()
        self.conv = nn.Conv2d(cin, 1, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Const(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full((x.shape[0], 1, 2, 2), self.value, dtype=x.dtype)


def identity_gen(x):
    return [x]


def _nets(seed=0):
    torch.manual_seed(seed)
    return dict(g_n2g=TinyGen(1, 1).double(), g_g2n=TinyGen(1, 1).double(),
                f_g=TinyGen(1, 3).double(), d_n=TinyDisc(1).double(),
                d_g=TinyDisc(1).double(), d_feat=TinyDisc(3).double())


def _batch():
    x_n, x_g = _img(2, 1, 16, 16, seed=1), _img(2, 1, 16, 16, seed=2)
    y = _img(2, 3, 16, 16, seed=3)
    return FinetuneBatch(x_n, x_g, [nn.functional.avg_pool2d(y, 2), y])


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_cyc, w.lambda_idt, w.lambda_tran, w.lambda_feat) == (1, 1, 1, 1)
        assert w.alpha == 0.84

    @pytest.mark.parametrize("kwargs", [dict(lambda_cyc=-1), dict(lambda_feat=-0.1),
                                        dict(alpha=1.5), dict(alpha=-0.1)])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            LossWeights(**kwargs)


class TestSSIM:
    def test_window_shrinks(self):
        assert ssim_window_size(64, 64) == 11
        assert ssim_window_size(8, 16) == 7
        assert ssim_window_size(6, 6) == 5
        assert ssim_window_size(1, 9) == 1

    @pytest.mark.parametrize("padding", ["valid", "reflect"])
    def test_constant_images_closed_form(self, padding):
        for a, b in [(-1.0, 1.0), (0.3, -0.2), (0.5, 0.5)]:
            x = torch.full((1, 3, 16, 16), a, dtype=D64)
            y = torch.full((1, 3, 16, 16), b, dtype=D64)
            got = ssim_map(x, y, 2.0, padding=padding)
            assert torch.allclose(got, torch.full_like(got, constant_ssim(a, b, 2.0)),
                                  atol=1e-12)

    def test_closed_form_value(self):
        c1 = (0.01 * 2) ** 2
        assert constant_ssim(-1, 1) == pytest.approx((-2 + c1) / (2 + c1), abs=1e-15)

    def test_reflect_keeps_full_size(self):
        x, y = _img(1, 3, 16, 16), _img(1, 3, 16, 16, seed=1)
        assert ssim_map(x, y, padding="reflect").shape == (1, 3, 16, 16)
        assert ssim_map(x, y, padding="valid").shape == (1, 3, 6, 6)

    def test_unknown_padding(self):
        x = _img(1, 1, 8, 8)
        with pytest.raises(ValueError, match="padding"):
            ssim_map(x, x, padding="zeros")


class TestMixLoss:
    @pytest.mark.parametrize("alpha", [0.0, 0.5, 0.84, 1.0])
    def test_zero_at_identity(self, alpha):
        x = _img(2, 3, 16, 16)
        assert mix_loss(x, x, alpha).item() == pytest.approx(0.0, abs=1e-12)

    def test_constant_images(self):
        alpha = 0.84
        x = torch.full((1, 3, 16, 16), -1.0, dtype=D64)
        y = torch.full((1, 3, 16, 16), 1.0, dtype=D64)
        expected = alpha * (1 - constant_ssim(-1.0, 1.0, 2.0)) + (1 - alpha) * 2.0
        assert mix_loss(x, y, alpha).item() == pytest.approx(expected, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mix_loss(_img(1, 3, 16, 16), _img(1, 3, 16, 8))

    def test_edges_are_supervised(self):
        # a defect confined to the outer ring must still register in the SSIM term
        x = _img(1, 3, 32, 32)
        y = x.clone()
        y[..., 0, :] = -x[..., 0, :]
        assert 1 - ssim(x, y).item() > 1e-3


class TestAdversarial:
    def test_optima(self):
        ones, zeros = torch.ones(2, 1, 4, 4), torch.zeros(2, 1, 4, 4)
        assert lsgan_d_loss(ones, zeros).item() == 0
        assert lsgan_g_loss(ones).item() == 0

    def test_half(self):
        half = torch.full((1, 1, 5, 5), 0.5)
        assert lsgan_d_loss(half, half).item() == pytest.approx(0.25, abs=1e-7)


class TestReconstruction:
    def test_identity_gives_zero(self):
        x = _img(2, 1, 8, 8)
        assert cycle_loss(x, identity_gen(identity_gen(x)[-1])[-1]).item() == 0
        assert identity_loss(x, identity_gen(x)[-1]).item() == 0

    def test_constant_offset(self):
        x = _img(2, 1, 8, 8) * 0.4
        assert cycle_loss(x, x + 0.5).item() == pytest.approx(0.5, abs=1e-12)
        assert identity_loss(x, x + 0.5).item() == pytest.approx(0.5, abs=1e-12)

    def test_symmetric(self):
        a, b = _img(1, 1, 8, 8), _img(1, 1, 8, 8, seed=5)
        assert cycle_loss(a, b).item() == cycle_loss(b, a).item()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cycle_loss(_img(1, 1, 8, 8), _img(1, 1, 4, 8))


@settings(max_examples=60)
@given(seed=st.integers(0, 10 ** 6), h=st.integers(4, 16), w=st.integers(4, 16),
       alpha=st.floats(0, 1))
def test_nonnegative(seed, h, w, alpha):
    a, b = _img(1, 3, h, w, seed=seed), _img(1, 3, h, w, seed=seed + 1)
    assert mix_loss(a, b, alpha).item() >= 0
    assert cycle_loss(a, b).item() >= 0 and identity_loss(a, b).item() >= 0
    g = torch.Generator().manual_seed(seed)
    d_real, d_fake = torch.randn(2, 1, 3, 3, generator=g), torch.randn(2, 1, 3, 3, generator=g)
    assert lsgan_d_loss(d_real, d_fake).item() >= 0 and lsgan_g_loss(d_fake).item() >= 0


class TestTranslationObjective:
    def test_identity_generators_fooled_discriminators(self):
        x_n, x_g = _img(2, 1, 8, 8), _img(2, 1, 8, 8, seed=1)
        rep = translation_objective(x_n, x_g, identity_gen, identity_gen, Const(1.0), Const(1.0))
        for k in ("cyc_n", "cyc_g", "idt_n", "idt_g", "adv_n2g", "adv_g2n"):
            assert rep.terms[k].item() == 0
        # fooled D: real term 0, fake term 1/2
        assert rep.disc["d_g"].item() == pytest.approx(0.5)
        assert rep.total.item() == 0

    def test_weight_zeroing(self):
        nets = _nets()
        b = _batch()
        rep = translation_objective(b.x_n, b.x_g, nets["g_n2g"], nets["g_g2n"], nets["d_n"],
                                    nets["d_g"], LossWeights(lambda_cyc=0, lambda_idt=0))
        adv = rep.terms["adv_n2g"] + rep.terms["adv_g2n"]
        assert rep.total.item() == pytest.approx(adv.item(), rel=1e-12)

    def test_bookkeeping(self):
        nets = _nets()
        b = _batch()
        rep = translation_objective(b.x_n, b.x_g, nets["g_n2g"], nets["g_g2n"], nets["d_n"],
                                    nets["d_g"], LossWeights(lambda_cyc=2.5, lambda_idt=0.3))
        assert rep.total.item() == pytest.approx(rep.weighted_sum(), rel=1e-6)

    def test_channel_mismatch(self):
        nets = _nets()
        with pytest.raises(ValueError, match="NIR batch"):
            translation_objective(_img(1, 3, 8, 8), _img(1, 1, 8, 8), nets["g_n2g"],
                                  nets["g_g2n"], nets["d_n"], nets["d_g"])

    def test_discriminator_side_leaves_generators_alone(self):
        nets = _nets()
        b = _batch()
        rep = translation_objective(b.x_n, b.x_g, nets["g_n2g"], nets["g_g2n"], nets["d_n"],
                                    nets["d_g"])
        gen = list(nets["g_n2g"].parameters()) + list(nets["g_g2n"].parameters())
        grads = torch.autograd.grad(rep.disc_total(), gen, allow_unused=True)
        assert all(g is None or not g.any() for g in grads)


class TestPixelObjectives:
    def test_perfect_predictions(self):
        x = _img(2, 3, 16, 16)
        pyr = [nn.functional.avg_pool2d(x, 2), x]
        gen = lambda _: [p.clone() for p in pyr]  # noqa: E731
        assert pretrain_objective(x[:, :1], pyr, gen).total.item() == pytest.approx(0, abs=1e-12)
        assert finetune_pixel_objective(x[:, :1], pyr, gen).total.item() == \
            pytest.approx(0, abs=1e-12)

    def test_single_scale_is_mix_loss(self):
        torch.manual_seed(0)
        gen = TinyGen(1, 3, stages=1).double()
        x, y = _img(2, 1, 16, 16), _img(2, 3, 16, 16, seed=4)
        rep = pretrain_objective(x, [y], gen)
        assert rep.total.item() == pytest.approx(mix_loss(gen(x)[0], y).item(), rel=1e-12)

    def test_terms_nonnegative_and_sum(self):
        nets = _nets()
        b = _batch()
        rep = pretrain_objective(b.x_g, b.y_pyramid, nets["f_g"])
        vals = [v.item() for v in rep.terms.values()]
        assert all(v >= 0 for v in vals)
        assert rep.total.item() >= max(vals)
        assert rep.total.item() == pytest.approx(rep.weighted_sum(), rel=1e-6)

    def test_pyramid_mismatch(self):
        nets = _nets()
        b = _batch()
        with pytest.raises(ValueError, match="levels"):
            pretrain_objective(b.x_g, b.y_pyramid[1:], nets["f_g"])

    def test_finetune_equals_pretrain_on_same_inputs(self):
        nets = _nets()
        b = _batch()
        a = pretrain_objective(b.x_g, b.y_pyramid, nets["f_g"]).total
        c = finetune_pixel_objective(b.x_g, b.y_pyramid, nets["f_g"]).total
        assert a.item() == c.item()

    def test_finetune_gradient_reaches_translator(self):
        nets = _nets()
        b = _batch()
        x_n2g = nets["g_n2g"](b.x_n)[-1]
        finetune_pixel_objective(x_n2g, b.y_pyramid, nets["f_g"]).total.backward()
        assert nets["g_n2g"].conv.weight.grad.norm() > 0


class TestFeatureGAN:
    def test_fooled_discriminator(self):
        nets = _nets()
        b = _batch()
        rep = feature_gan_objective(b.x_n, b.x_g, nets["g_n2g"], nets["f_g"], Const(1.0))
        assert rep.terms["adv_feat"].item() == 0

    def test_detached_discriminator_side(self):
        nets = _nets()
        b = _batch()
        rep = feature_gan_objective(b.x_n, b.x_g, nets["g_n2g"], nets["f_g"], nets["d_feat"])
        gen = list(nets["g_n2g"].parameters()) + list(nets["f_g"].parameters())
        grads = torch.autograd.grad(rep.disc_total(), gen, allow_unused=True)
        assert all(g is None or not g.any() for g in grads)

    def test_generator_side_reaches_both(self):
        nets = _nets()
        b = _batch()
        rep = feature_gan_objective(b.x_n, b.x_g, nets["g_n2g"], nets["f_g"], nets["d_feat"])
        rep.total.backward()
        assert nets["g_n2g"].conv.weight.grad.norm() > 0
        assert nets["f_g"].conv.weight.grad.norm() > 0

    def test_discriminator_must_take_rgb(self):
        nets = _nets()
        b = _batch()
        with pytest.raises(RuntimeError):
            feature_gan_objective(b.x_n, b.x_g, nets["g_n2g"], nets["f_g"], nets["d_n"])


class TestTotalObjective:
    def test_weight_zeroing_gives_pixel_loss(self):
        nets = _nets()
        b = _batch()
        w = LossWeights(lambda_tran=0, lambda_feat=0)
        rep = total_objective(b, w=w, **nets)
        x_n2g = nets["g_n2g"](b.x_n)[-1]
        pf = finetune_pixel_objective(x_n2g, b.y_pyramid, nets["f_g"]).total
        assert rep.total.item() == pytest.approx(pf.item(), rel=1e-12)

    def test_bookkeeping_and_records(self):
        nets = _nets()
        rep = total_objective(_batch(), w=LossWeights(lambda_tran=0.7, lambda_feat=1.9), **nets)
        assert rep.total.item() == pytest.approx(rep.weighted_sum(), rel=1e-6)
        assert set(rep.disc) == {"d_n", "d_g", "d_feat"}
        rec = rep.to_record()
        assert {"total", "pf", "tran", "feat", "tran/cyc_n", "pf/mix_s2",
                "feat/adv_feat", "disc/d_feat"} <= set(rec)
        assert all(math.isfinite(v) for v in rec.values())

    def test_optimum(self):
        b = _batch()
        y = b.y_pyramid

        def colorizer(x):
            return [p.clone() for p in y]

        rep = total_objective(b, identity_gen, identity_gen, colorizer,
                              Const(1.0), Const(1.0), Const(1.0))
        for k in ("pf/mix_s1", "pf/mix_s2", "tran/cyc_n", "tran/cyc_g", "tran/idt_n",
                  "tran/idt_g", "tran/adv_n2g", "feat/adv_feat"):
            assert rep.details[k] == pytest.approx(0, abs=1e-12)

    def test_non_finite_component_named(self):
        nets = _nets()
        b = _batch()
        with torch.no_grad():
            nets["d_feat"].conv.bias.fill_(float("inf"))
        with pytest.raises(FloatingPointError, match="feat"):
            total_objective(b, **nets)


# -- finite differences -------------------------------------------------------

def _fd_cases():
    def nets_loss(fn, names=("g_n2g", "g_g2n", "f_g", "d_n", "d_g", "d_feat")):
        # discriminator losses see detached fakes by design, so they are
        # checked against discriminator parameters only
        def make():
            nets = _nets(seed=3)
            b = _batch()
            params = [p for n in names for p in nets[n].parameters()]
            return (lambda: fn(nets, b)), params
        return make

    x = _img(2, 3, 16, 16, seed=7).requires_grad_()
    y = _img(2, 3, 16, 16, seed=8)
    small = _img(1, 3, 8, 12, seed=9).requires_grad_()
    small_t = _img(1, 3, 8, 12, seed=10)
    dr = torch.randn(2, 1, 4, 4, dtype=D64).requires_grad_()
    df = torch.randn(2, 1, 4, 4, dtype=D64).requires_grad_()
    return {
        "mix_16": lambda: ((lambda: mix_loss(x, y)), [x]),
        "mix_8x12": lambda: ((lambda: mix_loss(small, small_t)), [small]),
        "ssim_valid": lambda: ((lambda: ssim(x, y, padding="valid")), [x]),
        "lsgan_d": lambda: ((lambda: lsgan_d_loss(dr, df)), [dr, df]),
        "lsgan_g": lambda: ((lambda: lsgan_g_loss(df)), [df]),
        "cycle": lambda: ((lambda: cycle_loss(y, x)), [x]),
        "identity": lambda: ((lambda: identity_loss(y, x)), [x]),
        "translation": nets_loss(lambda n, b: translation_objective(
            b.x_n, b.x_g, n["g_n2g"], n["g_g2n"], n["d_n"], n["d_g"]).total),
        "translation_disc": nets_loss(lambda n, b: translation_objective(
            b.x_n, b.x_g, n["g_n2g"], n["g_g2n"], n["d_n"], n["d_g"]).disc_total(),
            ("d_n", "d_g")),
        "pretrain": nets_loss(lambda n, b: pretrain_objective(
            b.x_g, b.y_pyramid, n["f_g"]).total),
        "finetune_pixel": nets_loss(lambda n, b: finetune_pixel_objective(
            n["g_n2g"](b.x_n)[-1], b.y_pyramid, n["f_g"]).total),
        "feature_gan": nets_loss(lambda n, b: feature_gan_objective(
            b.x_n, b.x_g, n["g_n2g"], n["f_g"], n["d_feat"]).total),
        "total": nets_loss(lambda n, b: total_objective(b, **n).total),
        "total_disc": nets_loss(lambda n, b: total_objective(b, **n).disc_total(),
                                ("d_n", "d_g", "d_feat")),
    }


@pytest.mark.parametrize("name", list(_fd_cases()))
def test_gradients_match_finite_differences(name):
    loss, tensors = _fd_cases()[name]()
    assert fd_relative_error(loss, tensors) < 1e-3
