"""II-FCN assembly: encoder, decoder, additive bridges and the dilated head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    center_crop,
    conv2d,
    he_normal,
    no_grad,
    relu,
    softmax2,
)
from .blocks import BlockSpec, block_param_count, forward_block, init_block, reversed_block
from .errors import InvalidArgumentError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 5
    widths: tuple[int, ...] = (32, 64, 128, 256, 512)
    # None means out_channels // 4 per block
    branch_channels: tuple[int, ...] | None = None
    head: tuple[tuple[int, int], ...] = ((3, 2), (3, 4))
    num_classes: int = 2
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "head", tuple((int(k), int(r)) for k, r in self.head))
        if self.branch_channels is not None:
            object.__setattr__(self, "branch_channels", tuple(int(c) for c in self.branch_channels))
        if self.num_blocks < 1:
            raise InvalidArgumentError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if len(self.widths) != self.num_blocks:
            raise InvalidArgumentError(
                f"widths has {len(self.widths)} entries for {self.num_blocks} blocks"
            )
        if self.branch_channels is not None and len(self.branch_channels) != self.num_blocks:
            raise InvalidArgumentError(
                f"branch_channels has {len(self.branch_channels)} entries for {self.num_blocks} blocks"
            )
        if self.num_classes != 2:
            raise InvalidArgumentError("only binary segmentation (num_classes=2) is supported")
        for k, r in self.head:
            if k % 2 == 0 or r < 1:
                raise InvalidArgumentError(f"dilated head needs odd kernels and rate >= 1, got ({k}, {r})")

    @property
    def branch_widths(self) -> tuple[int, ...]:
        if self.branch_channels is not None:
            return self.branch_channels
        return tuple(max(1, w // 4) for w in self.widths)

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        return tuple(reversed(self.widths))


# size arithmetic ------------------------------------------------------------

def bottleneck_size(H: int, B: int) -> float:
    """Extent after B forward blocks (fractional when H is inadmissible)."""
    return (H - 4 * (2 ** B - 1)) / 2 ** B


def admissible(H: int, W: int, B: int) -> bool:
    for n in (H, W):
        h = bottleneck_size(n, B)
        if h < 1 or h != int(h):
            return False
    return True


def nearest_admissible(H: int, W: int, B: int) -> tuple[int, int]:
    """Smallest admissible extents that are >= (H, W)."""
    def snap(n):
        h = max(1, -(-(n - 4 * (2 ** B - 1)) // 2 ** B))
        return 2 ** B * h + 4 * (2 ** B - 1)
    return snap(H), snap(W)


# model ------------------------------------------------------------------------

@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Parameter] = field(repr=False)

    def __post_init__(self):
        cfg = self.config
        B = cfg.num_blocks
        self.encoder_specs = encoder_specs(cfg)
        self.decoder_specs = decoder_specs(cfg)
        self._enc = [_subset(self.params, f"enc{l}.") for l in range(B)]
        self._dec = [_subset(self.params, f"dec{j}.") for j in range(B)]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "Model":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def forward(self, images, return_bottleneck: bool = False):
        """Map N×3×H×W images to N×2×H×W class probabilities."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        cfg = self.config
        B = cfg.num_blocks
        if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected N×{cfg.in_channels}×H×W images, got {x.shape}")
        H, W = x.shape[2:]
        if not admissible(H, W, B):
            nh, nw = nearest_admissible(H, W, B)
            raise ShapeError(
                f"input {H}×{W} is not admissible for {B} blocks; nearest admissible size is {nh}×{nw}"
            )
        fused = []
        for l in range(B):
            x, f = forward_block(x, self.encoder_specs[l], self._enc[l], return_fused=True)
            fused.append(f)
        bottleneck = x
        for j in range(B):
            skip = fused[B - 1 - j]
            key = f"bridge{j}.w"
            if key in self.params:
                skip = conv2d(skip, self.params[key], self.params[f"bridge{j}.b"])
            x = reversed_block(x, self.decoder_specs[j], self._dec[j], bridge=skip)
        for i, (_, rate) in enumerate(cfg.head):
            x = relu(conv2d(x, self.params[f"head{i}.w"], self.params[f"head{i}.b"],
                            padding="dilated", rate=rate))
        prob = softmax2(conv2d(x, self.params["cls.w"], self.params["cls.b"]))
        return (prob, bottleneck) if return_bottleneck else prob

    __call__ = forward


def _subset(params: dict[str, Parameter], prefix: str) -> dict[str, Parameter]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def encoder_specs(cfg: ModelConfig) -> list[BlockSpec]:
    cins = (cfg.in_channels,) + cfg.widths[:-1]
    return [BlockSpec(cin, cb, w, "forward") for cin, cb, w in zip(cins, cfg.branch_widths, cfg.widths)]


def decoder_specs(cfg: ModelConfig) -> list[BlockSpec]:
    B = cfg.num_blocks
    specs = []
    for j in range(B):
        level = max(B - 2 - j, 0)
        specs.append(BlockSpec(cfg.widths[B - 1 - j], cfg.branch_widths[level], cfg.widths[level], "reversed"))
    return specs


def _layout(cfg: ModelConfig):
    """(id, shape, fan_in) for every non-block parameter, in creation order."""
    B = cfg.num_blocks
    out = []
    for j, spec in enumerate(decoder_specs(cfg)):
        skip_ch = cfg.widths[B - 1 - j]
        if skip_ch != spec.out_channels:
            out.append((f"bridge{j}", (spec.out_channels, skip_ch, 1, 1), skip_ch))
    c = cfg.widths[0]
    for i, (k, _) in enumerate(cfg.head):
        out.append((f"head{i}", (c, c, k, k), c * k * k))
    out.append(("cls", (cfg.num_classes, c, 1, 1), c))
    return out


def init_parameters(cfg: ModelConfig, seed: int, dtype=np.float64) -> dict[str, Parameter]:
    """He-normal kernels and zero biases, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}
    for l, spec in enumerate(encoder_specs(cfg)):
        for p in init_block(spec, rng, f"enc{l}", dtype).values():
            params[p.id] = p
    for j, spec in enumerate(decoder_specs(cfg)):
        for p in init_block(spec, rng, f"dec{j}", dtype).values():
            params[p.id] = p
    for name, shape, fan_in in _layout(cfg):
        params[f"{name}.w"] = Parameter(he_normal(rng, shape, fan_in, dtype), f"{name}.w")
        params[f"{name}.b"] = Parameter(np.zeros(shape[0], dtype=dtype), f"{name}.b")
    return params


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> Model:
    return Model(cfg, init_parameters(cfg, seed, dtype))


def expected_parameter_count(cfg: ModelConfig) -> int:
    total = sum(block_param_count(s) for s in encoder_specs(cfg) + decoder_specs(cfg))
    for _, shape, _ in _layout(cfg):
        total += int(np.prod(shape)) + shape[0]
    return total


def pad_and_crop_infer(model: Model, image) -> np.ndarray:
    """Run the model on an image of any size.

    ``image`` is 3×H×W or N×3×H×W (already scaled for the network). It is
    reflect-padded up to the nearest admissible size and the probabilities
    are center-cropped back to H×W.
    """
    x = np.asarray(image, dtype=model.dtype)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    H, W = x.shape[2:]
    Ha, Wa = nearest_admissible(H, W, model.config.num_blocks)
    dh, dw = Ha - H, Wa - W
    if dh or dw:
        x = np.pad(x, ((0, 0), (0, 0), (dh // 2, dh - dh // 2), (dw // 2, dw - dw // 2)), mode="reflect")
    with no_grad():
        prob = model.forward(Tensor(x))
        if dh or dw:
            prob = center_crop(prob, H, W)
    out = prob.data
    return out[0] if squeeze else out
