import numpy as np
import pytest

from iifcn.autodiff import Tensor
from iifcn.blocks import block_shape
from iifcn.errors import InvalidArgumentError, ShapeError
from iifcn.gradcheck import check_gradients
from iifcn.losses import combined_loss
from iifcn.model import (
    ModelConfig,
    admissible,
    bottleneck_size,
    build_model,
    expected_parameter_count,
    nearest_admissible,
    pad_and_crop_infer,
)

TINY5 = ModelConfig(5, (2, 2, 2, 2, 2), head=((3, 2),))


@pytest.mark.parametrize("H,bottleneck", [(252, 4), (380, 8), (444, 10), (636, 16), (956, 26)])
def test_paper_sizes_admissible(H, bottleneck):
    assert admissible(H, H, 5)
    assert bottleneck_size(H, 5) == bottleneck


def test_688_inadmissible():
    assert not admissible(444, 688, 5)
    assert nearest_admissible(444, 688, 5) == (444, 700)


def test_b3_60():
    assert admissible(60, 60, 3) and bottleneck_size(60, 3) == 4


def test_nearest_admissible_is_smallest():
    for B in (1, 2, 3, 5):
        for H in range(1, 300):
            h, _ = nearest_admissible(H, H, B)
            assert h >= H and admissible(h, h, B)
            assert not any(admissible(c, c, B) for c in range(H, h))


def test_closed_form_matches_recurrence():
    for B in (1, 2, 3, 4, 5):
        for hb in range(1, 30):
            H = 2 ** B * hb + 4 * (2 ** B - 1)
            h = H
            for _ in range(B):
                h, _, ok = block_shape("forward", h, h)
                assert ok
            assert h == hb


def test_forward_b3_60():
    model = build_model(ModelConfig(3, (8, 8, 16)), seed=0)
    x = np.random.default_rng(0).standard_normal((1, 3, 60, 60))
    prob = model.forward(x)
    assert prob.shape == (1, 2, 60, 60)
    assert np.abs(prob.data.sum(axis=1) - 1).max() < 1e-12


def test_zero_parameters_give_half():
    model = build_model(ModelConfig(2, (4, 8)), seed=0)
    for p in model.parameters():
        p.data[...] = 0.0
    prob = model.forward(np.random.default_rng(0).standard_normal((2, 3, 28, 28)))
    assert np.all(prob.data == 0.5)


def test_b5_bottleneck_252x380():
    model = build_model(TINY5, seed=0)
    prob, bottleneck = model.forward(np.zeros((1, 3, 252, 380)), return_bottleneck=True)
    assert bottleneck.shape[2:] == (4, 8)
    assert prob.shape[2:] == (252, 380)


def test_inadmissible_names_nearest():
    model = build_model(ModelConfig(2, (2, 2)), seed=0)
    with pytest.raises(ShapeError, match="32×32"):
        model.forward(np.zeros((1, 3, 29, 29)))


@pytest.mark.parametrize("B", [1, 2, 3])
def test_spatial_identity_sweep(B):
    model = build_model(ModelConfig(B, (2,) * B, head=((3, 2),)), seed=B)
    rng = np.random.default_rng(B)
    for hb in (1, 2, 3):
        for wb in (1, 4):
            H = 2 ** B * hb + 4 * (2 ** B - 1)
            W = 2 ** B * wb + 4 * (2 ** B - 1)
            prob = model.forward(rng.standard_normal((1, 3, H, W)))
            assert prob.shape == (1, 2, H, W)


def test_bridge_extents_match():
    # encoder fusion output at level l and decoder post-upsample at the mirrored level
    for B in (1, 2, 3, 5):
        for hb in range(1, 8):
            H = 2 ** B * hb + 4 * (2 ** B - 1)
            fused, h = [], H
            for _ in range(B):
                fused.append(h - 4)
                h, _, _ = block_shape("forward", h, h)
            for j in range(B):
                assert 2 * h == fused[B - 1 - j]
                h, _, _ = block_shape("reversed", h, h)
            assert h == H


def test_adapters_present_when_channels_differ():
    model = build_model(ModelConfig(3, (4, 8, 16)), seed=0)
    assert "bridge0.w" in model.params and "bridge1.w" in model.params
    assert "bridge2.w" not in model.params


@pytest.mark.parametrize("cfg", [ModelConfig(1, (4,)), ModelConfig(3, (16, 32, 64)), ModelConfig()])
def test_parameter_count(cfg):
    model = build_model(cfg, seed=0)
    assert model.num_parameters() == expected_parameter_count(cfg)


def test_init_deterministic_and_zero_bias():
    a = build_model(ModelConfig(2, (4, 8)), seed=7)
    b = build_model(ModelConfig(2, (4, 8)), seed=7)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)
        if k.endswith(".b"):
            assert not a.params[k].data.any()


def test_end_to_end_gradient_b1():
    rng = np.random.default_rng(11)
    model = build_model(ModelConfig(1, (4,)), seed=3)
    x = Tensor(rng.standard_normal((1, 3, 8, 8)))
    target = rng.random((1, 8, 8)) > 0.6
    params = model.parameters()
    for p in params:  # zero biases put ReLUs exactly on their kink; move to a generic point
        p.data += 0.05 * rng.standard_normal(p.shape)
    err = check_gradients(lambda: combined_loss(model.forward(x), target).total, params)
    assert err <= 1e-4


def test_float32_probabilities_valid():
    model = build_model(ModelConfig(2, (4, 8)), seed=1, dtype=np.float32)
    prob = model.forward(np.random.default_rng(0).standard_normal((2, 3, 28, 44)).astype(np.float32))
    assert prob.dtype == np.float32
    assert (prob.data > 0).all() and (prob.data < 1).all()
    assert np.abs(prob.data.sum(axis=1) - 1).max() <= 1e-6


def test_forward_deterministic():
    model = build_model(ModelConfig(2, (4, 8)), seed=2)
    x = np.random.default_rng(5).standard_normal((1, 3, 28, 28))
    assert np.array_equal(model.forward(x).data, model.forward(x).data)


class TestPadAndCrop:
    def test_250_on_b5(self):
        model = build_model(TINY5, seed=0)
        assert nearest_admissible(250, 250, 5) == (252, 252)
        out = pad_and_crop_infer(model, np.zeros((3, 250, 250)))
        assert out.shape == (2, 250, 250)

    def test_admissible_is_plain_forward(self):
        model = build_model(ModelConfig(2, (4, 4)), seed=4)
        x = np.random.default_rng(0).standard_normal((3, 44, 28))
        np.testing.assert_array_equal(pad_and_crop_infer(model, x), model.forward(x[None]).data[0])

    def test_random_sizes(self):
        model = build_model(ModelConfig(2, (2, 2), head=((3, 2),)), seed=0)
        rng = np.random.default_rng(8)
        for _ in range(50):
            H, W = rng.integers(3, 40, size=2)
            out = pad_and_crop_infer(model, rng.standard_normal((3, H, W)))
            assert out.shape == (2, H, W)


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        ModelConfig(3, (4, 8))
    with pytest.raises(InvalidArgumentError):
        ModelConfig(0, ())
    cfg = ModelConfig(3, (16, 32, 64))
    assert cfg.decoder_widths == (64, 32, 16)
    assert cfg.branch_widths == (4, 8, 16)
