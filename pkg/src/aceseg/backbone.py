"""Small fixed feature extractor producing stride-8 features plus an
auxiliary tap for deep supervision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import GeometryError
from .layers import ConvBNReLU, Module, Sequential
from .tensor import Tensor


@dataclass
class BackboneOutput:
    main: Tensor  # N x C x H/8 x W/8
    aux: Tensor   # N x C_aux x H/8 x W/8


class Backbone(Module):
    """Three downsampling stages, each halving resolution.

    Stage layout: 3x3 conv stride 2 -> BN -> ReLU -> 3x3 conv stride 1 ->
    BN -> ReLU, with channels 3 -> 32 -> 64 -> C. The auxiliary branch
    projects the stride-4 stage-2 output to `aux_channels` and average
    pools it to stride 8 so both classifiers see the same geometry.
    """

    def __init__(self, rng: np.random.Generator, out_channels: int = 128,
                 aux_channels: int = 64):
        super().__init__()
        widths = (32, 64, out_channels)
        self.out_channels = out_channels
        self.aux_channels = aux_channels
        self.stage1 = self._stage(3, widths[0], rng)
        self.stage2 = self._stage(widths[0], widths[1], rng)
        self.stage3 = self._stage(widths[1], widths[2], rng)
        self.aux_proj = ConvBNReLU(widths[1], aux_channels, 1, rng)

    @staticmethod
    def _stage(cin: int, cout: int, rng: np.random.Generator) -> Sequential:
        return Sequential(
            ConvBNReLU(cin, cout, 3, rng, stride=2, padding=1),
            ConvBNReLU(cout, cout, 3, rng, stride=1, padding=1),
        )

    def forward(self, img: Tensor) -> BackboneOutput:
        _, _, h, w = img.shape
        if h % 8 != 0 or w % 8 != 0:
            raise GeometryError(f"input size {h}x{w} must be divisible by 8")
        s1 = self.stage1(img)
        s2 = self.stage2(s1)
        s3 = self.stage3(s2)
        aux = self.aux_proj(s2)
        aux = ops.adaptive_avg_pool(aux, aux.shape[2] // 2, aux.shape[3] // 2)
        return BackboneOutput(main=s3, aux=aux)
