import numpy as np
import pytest

from iifcn.autodiff import Tensor
from iifcn.blocks import (
    FORWARD_BRANCHES,
    BlockSpec,
    block_param_count,
    block_shape,
    forward_block,
    init_block,
    reversed_block,
)
from iifcn.errors import InvalidArgumentError, ShapeError


def make(spec, seed=0):
    return init_block(spec, np.random.default_rng(seed), "blk")


def test_branches_all_shrink_by_four():
    for stack in FORWARD_BRANCHES:
        assert sum(k - 1 for k in stack) == 4


@pytest.mark.parametrize("H,expect", [(60, 28), (252, 124), (6, 1)])
def test_forward_block_shape(H, expect):
    assert block_shape("forward", H, H) == (expect, expect, True)


def test_forward_block_60():
    spec = BlockSpec(3, 2, 8)
    out = forward_block(Tensor(np.random.default_rng(0).standard_normal((2, 3, 60, 60))), spec, make(spec))
    assert out.shape == (2, 8, 28, 28)


def test_forward_block_252_rows():
    spec = BlockSpec(1, 1, 2)
    out = forward_block(Tensor(np.zeros((1, 1, 252, 10))), spec, make(spec))
    assert out.shape[2:] == (124, 3)


def test_zero_input_zero_output():
    spec = BlockSpec(2, 2, 4)
    out = forward_block(Tensor(np.zeros((1, 2, 12, 12))), spec, make(spec))
    assert not out.data.any()


def test_inadmissible_rejected():
    spec = BlockSpec(1, 1, 1)
    assert block_shape("forward", 5, 8)[2] is False
    with pytest.raises(ShapeError, match="positive and even"):
        forward_block(Tensor(np.zeros((1, 1, 5, 8))), spec, make(spec))


@pytest.mark.parametrize("h,expect", [(28, 60), (1, 6)])
def test_reversed_block_shape(h, expect):
    spec = BlockSpec(4, 2, 3, "reversed")
    out = reversed_block(Tensor(np.random.default_rng(1).standard_normal((1, 4, h, h))), spec, make(spec))
    assert out.shape == (1, 3, expect, expect)


def test_reversed_restores_forward_shape():
    rng = np.random.default_rng(2)
    fwd, rev = BlockSpec(3, 2, 8), BlockSpec(8, 2, 3, "reversed")
    for H, W in [(20, 14), (36, 8), (10, 30)]:
        x = Tensor(rng.standard_normal((1, 3, H, W)))
        y = reversed_block(forward_block(x, fwd, make(fwd)), rev, make(rev))
        assert y.shape[2:] == (H, W)


def test_shape_inverse_arithmetic():
    for H in range(6, 400, 2):
        h, _, ok = block_shape("forward", H, H)
        assert ok and block_shape("reversed", h, h)[0] == H


def test_branch_outputs_align_for_random_sizes():
    rng = np.random.default_rng(3)
    spec = BlockSpec(1, 1, 1)
    params = make(spec)
    from iifcn.autodiff import conv2d

    for _ in range(100):
        H, W = 2 * rng.integers(3, 12, size=2)
        x = Tensor(np.zeros((1, 1, H, W)))
        shapes = set()
        for b, stack in enumerate(FORWARD_BRANCHES):
            h = x
            for i in range(len(stack)):
                h = conv2d(h, params[f"branch{b}.{i}.w"])
            shapes.add(h.shape[2:])
        assert shapes == {(H - 4, W - 4)}


@pytest.mark.parametrize("direction", ["forward", "reversed"])
def test_param_count_closed_form(direction):
    spec = BlockSpec(5, 3, 7, direction)
    params = make(spec)
    assert sum(p.data.size for p in params.values()) == block_param_count(spec)
    cb, cin, cout = 3, 5, 7
    if direction == "forward":
        convs = (25 * cin * cb + cb) + (9 * cin * cb + cb + 9 * cb * cb + cb) \
            + (cin * cb + cb + 25 * cb * cb + cb) + (cin * cb + cb + 2 * (9 * cb * cb + cb)) \
            + (4 * 4 * cb * cout + cout)
    else:
        convs = (4 * cin * cout + cout) + (25 * cout * cb + cb) + (9 * cout * cb + cb + 9 * cb * cb + cb) \
            + (25 * cout * cb + cb + cb * cb + cb) + (9 * cout * cb + cb + 9 * cb * cb + cb + cb * cb + cb) \
            + (4 * cb * cout + cout)
    assert block_param_count(spec) == convs


def test_every_branch_receives_gradient():
    rng = np.random.default_rng(4)
    for spec in (BlockSpec(2, 2, 4), BlockSpec(4, 2, 2, "reversed")):
        params = make(spec, seed=5)
        for p in params.values():
            p.data += 0.05 * np.abs(rng.standard_normal(p.shape))  # keep ReLUs active
        x = Tensor(np.abs(rng.standard_normal((1, spec.in_channels, 10, 10))))
        fn = forward_block if spec.direction == "forward" else reversed_block
        out = fn(x, spec, params)
        (out * Tensor(rng.standard_normal(out.shape))).sum().backward()
        for name, p in params.items():
            assert np.linalg.norm(p.grad) > 0, name


def test_spec_validation():
    with pytest.raises(InvalidArgumentError):
        BlockSpec(0, 1, 1)
    with pytest.raises(InvalidArgumentError):
        BlockSpec(1, 1, 1, "sideways")
    assert BlockSpec(3, 8, 32).fused_channels == 32
