"""Identity inception blocks: the encoder (forward) form and its decoder mirror."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    concat_channels,
    conv2d,
    conv2d_transpose,
    he_normal,
    maxpool2,
    relu,
)
from .errors import InvalidArgumentError, ShapeError

# Each branch is a stack of square kernels; every forward stack shrinks a
# valid-padded input by exactly 4 per axis so the branches line up.
FORWARD_BRANCHES: tuple[tuple[int, ...], ...] = ((5,), (3, 3), (1, 5), (1, 3, 3))
REVERSED_BRANCHES: tuple[tuple[int, ...], ...] = tuple(tuple(reversed(b)) for b in FORWARD_BRANCHES)


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    branch_channels: int
    out_channels: int
    direction: str = "forward"

    def __post_init__(self):
        if min(self.in_channels, self.branch_channels, self.out_channels) < 1:
            raise InvalidArgumentError(f"channel counts must be >= 1: {self}")
        if self.direction not in ("forward", "reversed"):
            raise InvalidArgumentError(f"direction must be 'forward' or 'reversed', got {self.direction!r}")

    @property
    def fused_channels(self) -> int:
        return 4 * self.branch_channels


def block_shape(direction: str, H: int, W: int) -> tuple[int, int, bool]:
    """Spatial output extents of one block and whether the input is admissible."""
    if direction == "forward":
        ok = H > 4 and W > 4 and (H - 4) % 2 == 0 and (W - 4) % 2 == 0
        return (H - 4) // 2, (W - 4) // 2, ok
    if direction == "reversed":
        return 2 * H + 4, 2 * W + 4, H >= 1 and W >= 1
    raise InvalidArgumentError(f"unknown direction {direction!r}")


def _conv_layout(spec: BlockSpec) -> list[tuple[str, int, int, int]]:
    """(local name, kernel side, in channels, out channels) for every conv."""
    cb = spec.branch_channels
    layout = []
    if spec.direction == "forward":
        for b, stack in enumerate(FORWARD_BRANCHES):
            cin = spec.in_channels
            for i, k in enumerate(stack):
                layout.append((f"branch{b}.{i}", k, cin, cb))
                cin = cb
        layout.append(("fuse", 2, spec.fused_channels, spec.out_channels))
    else:
        layout.append(("up", 2, spec.in_channels, spec.out_channels))
        for b, stack in enumerate(REVERSED_BRANCHES):
            cin = spec.out_channels
            for i, k in enumerate(stack):
                layout.append((f"branch{b}.{i}", k, cin, cb))
                cin = cb
        layout.append(("fuse", 1, spec.fused_channels, spec.out_channels))
    return layout


def block_param_count(spec: BlockSpec) -> int:
    return sum(k * k * cin * cout + cout for _, k, cin, cout in _conv_layout(spec))


def init_block(spec: BlockSpec, rng: np.random.Generator, prefix: str,
               dtype=np.float64) -> dict[str, Parameter]:
    """He-normal kernels and zero biases, keyed by local name.

    Forward kernels are O×I×k×k; transpose kernels (every reversed-block
    conv except the final 1×1) are I×O×k×k.
    """
    params: dict[str, Parameter] = {}
    for name, k, cin, cout in _conv_layout(spec):
        transposed = spec.direction == "reversed" and name != "fuse"
        shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
        params[f"{name}.w"] = Parameter(he_normal(rng, shape, cin * k * k, dtype), f"{prefix}.{name}.w")
        params[f"{name}.b"] = Parameter(np.zeros(cout, dtype=dtype), f"{prefix}.{name}.b")
    return params


def _check_channels(x: Tensor, spec: BlockSpec) -> None:
    if x.data.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"block expects N×{spec.in_channels}×H×W input, got {x.shape}")


def forward_block(x: Tensor, spec: BlockSpec, params: dict[str, Parameter],
                  return_fused: bool = False):
    """Encoder block: four valid branches, concat, 2×2 fusion, max pool.

    With ``return_fused`` the pre-pool fusion output is returned as well,
    for use as a bridge into the decoder.
    """
    _check_channels(x, spec)
    H, W = x.shape[2:]
    _, _, ok = block_shape("forward", H, W)
    if not ok:
        raise ShapeError(
            f"forward block needs H-4 and W-4 positive and even, got H={H}, W={W}"
        )
    branches = []
    for b, stack in enumerate(FORWARD_BRANCHES):
        h = x
        for i in range(len(stack)):
            h = relu(conv2d(h, params[f"branch{b}.{i}.w"], params[f"branch{b}.{i}.b"]))
        branches.append(h)
    fused = relu(conv2d(concat_channels(branches), params["fuse.w"], params["fuse.b"], padding="preserve"))
    pooled = maxpool2(fused)
    return (pooled, fused) if return_fused else pooled


def reversed_block(x: Tensor, spec: BlockSpec, params: dict[str, Parameter],
                   bridge: Tensor | None = None) -> Tensor:
    """Decoder block: 2×2 stride-2 upsampling, four transpose branches, 1×1 fusion.

    ``bridge`` (already channel-matched) is added right after upsampling.
    """
    _check_channels(x, spec)
    h = relu(conv2d_transpose(x, params["up.w"], params["up.b"], stride=2))
    if bridge is not None:
        h = add(h, bridge)
    branches = []
    for b, stack in enumerate(REVERSED_BRANCHES):
        z = h
        for i in range(len(stack)):
            z = relu(conv2d_transpose(z, params[f"branch{b}.{i}.w"], params[f"branch{b}.{i}.b"]))
        branches.append(z)
    return relu(conv2d(concat_channels(branches), params["fuse.w"], params["fuse.b"]))
