"""Context-aggregation heads mapping an N x C x H x W feature map to
pre-classifier features, plus the shared 1x1 classifier.

Three interchangeable designs are provided:

* PPMHead:  parallel adaptive average pools at several bin grids, each
            projected to C/4 channels and upsampled back.
* ASPPHead: parallel 1x1 conv, three 3x3 dilated convs, and a global
            average pooling branch, each projected to C/8 channels.
* ACEHead:  a cascade of modulated deformable convolution blocks with
            channel widths C/4, C/8, C/8; the sampling pattern (and so
            the receptive field) is learned instead of hand-picked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, GeometryError
from .layers import BatchNorm2d, Conv2d, ConvBNReLU, Module, ModuleList, he_uniform
from .ops import ConvParams
from .tensor import Tensor

HEAD_KINDS = ("ppm", "aspp", "ace")


@dataclass
class HeadConfig:
    in_channels: int
    num_classes: int
    ppm_bins: tuple[int, ...] = (1, 2, 3, 6)
    aspp_rates: tuple[int, ...] = (6, 12, 18)
    ace_kernel: int = 3
    ace_fuse: str = "cascade"  # or "concat"
    ace_version: str = "v2"    # "v1" available for ablation

    def __post_init__(self):
        if self.ace_fuse not in ("cascade", "concat"):
            raise ConfigError(f"ace_fuse must be cascade or concat, got {self.ace_fuse!r}")
        if self.ace_version not in ("v1", "v2"):
            raise ConfigError(f"ace_version must be v1 or v2, got {self.ace_version!r}")
        if self.ace_kernel < 1 or self.ace_kernel % 2 == 0:
            raise ConfigError("ace_kernel must be a positive odd size")


class PPMHead(Module):
    """Pool-project-upsample branches concatenated with the input features."""

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator):
        super().__init__()
        c = cfg.in_channels
        if c % 4 != 0:
            raise ConfigError(f"PPM needs channels divisible by 4, got {c}")
        self.bins = tuple(cfg.ppm_bins)
        self.branch_channels = c // 4
        self.branches = ModuleList(
            [ConvBNReLU(c, self.branch_channels, 1, rng) for _ in self.bins])
        self.in_channels = c
        self.out_channels = c + len(self.bins) * self.branch_channels

    def forward(self, f: Tensor) -> Tensor:
        _, _, h, w = f.shape
        if max(self.bins) > min(h, w):
            raise GeometryError(f"feature map {h}x{w} smaller than pool grid "
                                f"{max(self.bins)}")
        outs = [f]
        for b, branch in zip(self.bins, self.branches):
            y = branch(ops.adaptive_avg_pool(f, b, b))
            outs.append(ops.upsample_bilinear(y, h, w))
        return ops.concat_channels(outs)

    def summary_rows(self) -> list[tuple[str, int, int]]:
        rows = [("input", self.in_channels, 0)]
        rows += [(f"pool{b}", self.branch_channels, br.num_parameters())
                 for b, br in zip(self.bins, self.branches)]
        return rows


class ASPPHead(Module):
    """Five parallel branches: 1x1 conv, three dilated 3x3 convs, global pool."""

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator):
        super().__init__()
        c = cfg.in_channels
        if c % 8 != 0:
            raise ConfigError(f"ASPP needs channels divisible by 8, got {c}")
        self.rates = tuple(cfg.aspp_rates)
        self.branch_channels = c // 8
        self.conv1x1 = ConvBNReLU(c, self.branch_channels, 1, rng)
        self.atrous = ModuleList(
            [ConvBNReLU(c, self.branch_channels, 3, rng, padding=r, dilation=r)
             for r in self.rates])
        self.gap = ConvBNReLU(c, self.branch_channels, 1, rng)
        self.in_channels = c
        self.out_channels = (2 + len(self.rates)) * self.branch_channels

    def forward(self, f: Tensor) -> Tensor:
        _, _, h, w = f.shape
        outs = [self.conv1x1(f)]
        outs += [branch(f) for branch in self.atrous]
        pooled = self.gap(ops.adaptive_avg_pool(f, 1, 1))
        outs.append(ops.upsample_bilinear(pooled, h, w))
        return ops.concat_channels(outs)

    def summary_rows(self) -> list[tuple[str, int, int]]:
        rows = [("conv1x1", self.branch_channels, self.conv1x1.num_parameters())]
        rows += [(f"atrous{r}", self.branch_channels, br.num_parameters())
                 for r, br in zip(self.rates, self.atrous)]
        rows.append(("gap", self.branch_channels, self.gap.num_parameters()))
        return rows


class DeformConvBlock(Module):
    """Offset predictor -> deformable conv -> BatchNorm -> ReLU.

    The offset predictor is a zero-initialized 3x3 conv emitting 3K
    channels, so training starts from the standard-convolution sampling
    pattern (offsets 0, modulation sigmoid(0) = 0.5).
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, version: str = "v2"):
        super().__init__()
        k = kernel_size * kernel_size
        self.version = version
        self.params = ConvParams(kernel_size, kernel_size,
                                 padding=(kernel_size - 1) // 2)
        self.offset_conv = Conv2d(in_channels, 3 * k, 3, rng, padding=1, bias=True)
        self.offset_conv.weight.data[:] = 0.0
        fan_in = in_channels * k
        self.weight = Tensor(
            he_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in),
            requires_grad=True)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        field = ops.offset_predictor(x, self.offset_conv.weight, self.offset_conv.bias)
        if self.version == "v2":
            y = ops.deform_conv_v2(x, self.weight, field, self.params)
        else:
            y = ops.deform_conv_v1(x, self.weight, field, self.params)
        return ops.relu(self.bn(y))


class ACEHead(Module):
    """Cascade of deformable convolution blocks with C/4, C/8, C/8 widths.

    `cascade` fuse mode feeds the classifier the last block's features;
    `concat` stacks all three block outputs instead.
    """

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator):
        super().__init__()
        c = cfg.in_channels
        if c % 8 != 0:
            raise ConfigError(f"this head needs channels divisible by 8, got {c}")
        self.fuse = cfg.ace_fuse
        widths = (c // 4, c // 8, c // 8)
        self.block_channels = widths
        chain = (c,) + widths
        self.blocks = ModuleList(
            [DeformConvBlock(chain[i], chain[i + 1], cfg.ace_kernel, rng,
                             version=cfg.ace_version)
             for i in range(3)])
        self.in_channels = c
        self.out_channels = sum(widths) if self.fuse == "concat" else widths[-1]

    def forward(self, f: Tensor) -> Tensor:
        outs = []
        x = f
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        if self.fuse == "concat":
            return ops.concat_channels(outs)
        return outs[-1]

    def summary_rows(self) -> list[tuple[str, int, int]]:
        return [(f"block{i + 1}", c, b.num_parameters())
                for i, (c, b) in enumerate(zip(self.block_channels, self.blocks))]


class Classifier(Module):
    """1x1 conv to class scores followed by bilinear upsampling."""

    def __init__(self, in_channels: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_channels, num_classes, 1, rng, bias=True)

    def forward(self, h: Tensor, out_h: int, out_w: int) -> Tensor:
        _, _, fh, fw = h.shape
        if out_h < fh or out_w < fw:
            raise GeometryError(f"classifier target {out_h}x{out_w} smaller than "
                                f"feature map {fh}x{fw}")
        return ops.upsample_bilinear(self.conv(h), out_h, out_w)


def make_head(kind: str, cfg: HeadConfig, rng: np.random.Generator) -> Module:
    if kind == "ppm":
        return PPMHead(cfg, rng)
    if kind == "aspp":
        return ASPPHead(cfg, rng)
    if kind == "ace":
        return ACEHead(cfg, rng)
    raise ConfigError(f"unknown head kind {kind!r}; choose from {HEAD_KINDS}")


def head_summary(head: Module) -> str:
    """Plain-text table of branch name, output channels, parameter count."""
    rows = head.summary_rows()
    lines = [f"head={type(head).__name__} in_channels={head.in_channels} "
             f"out_channels={head.out_channels}"]
    lines.append(f"{'branch':<12}{'out_channels':>14}{'params':>12}")
    for name, channels, params in rows:
        lines.append(f"{name:<12}{channels:>14}{params:>12}")
    lines.append(f"{'total':<12}{head.out_channels:>14}{head.num_parameters():>12}")
    return "\n".join(lines)
