"""Full segmentation model: backbone + context head + classifiers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backbone import Backbone
from .errors import ConfigError
from .heads import Classifier, HeadConfig, head_summary, make_head
from .layers import Module
from .tensor import Tensor, no_grad

_HEAD_CODES = {"ppm": 1.0, "aspp": 2.0, "ace": 3.0}
_FUSE_CODES = {"cascade": 0.0, "concat": 1.0}
_VERSION_CODES = {"v1": 1.0, "v2": 2.0}


@dataclass
class SegOutput:
    main: Tensor
    aux: Optional[Tensor]


class SegModel(Module):
    """Backbone, one context head, and main plus auxiliary classifiers.

    The auxiliary classifier reads the backbone tap, not the head, and is
    only evaluated in train mode.
    """

    def __init__(self, head_kind: str, num_classes: int,
                 backbone_channels: int = 128, aux_channels: int = 64,
                 head_cfg: Optional[HeadConfig] = None, seed: int = 0):
        super().__init__()
        if num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {num_classes}")
        rng = np.random.default_rng(seed)
        self.head_kind = head_kind
        self.num_classes = num_classes
        self.seed = seed
        self.cfg = head_cfg or HeadConfig(in_channels=backbone_channels,
                                          num_classes=num_classes)
        if self.cfg.in_channels != backbone_channels:
            raise ConfigError("head config channel count must match the backbone")
        self.backbone = Backbone(rng, out_channels=backbone_channels,
                                 aux_channels=aux_channels)
        self.head = make_head(head_kind, self.cfg, rng)
        self.classifier = Classifier(self.head.out_channels, num_classes, rng)
        self.aux_classifier = Classifier(aux_channels, num_classes, rng)

    def forward(self, images: Tensor) -> SegOutput:
        _, _, h, w = images.shape
        feats = self.backbone(images)
        logits = self.classifier(self.head(feats.main), h, w)
        aux = self.aux_classifier(feats.aux, h, w) if self.training else None
        return SegOutput(main=logits, aux=aux)

    def predict_probs(self, image: np.ndarray) -> np.ndarray:
        """Eval-mode softmax probabilities for one (3, H, W) image."""
        with no_grad():
            logits = self.forward(Tensor(image[None].astype(np.float32))).main.data[0]
        z = logits - logits.max(axis=0, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=0, keepdims=True)

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Eval-mode argmax label map for one (3, H, W) image."""
        with no_grad():
            logits = self.forward(Tensor(image[None].astype(np.float32))).main.data[0]
        return logits.argmax(axis=0)

    def summary(self) -> str:
        return head_summary(self.head)

    # -- checkpoint metadata -------------------------------------------------

    def meta(self) -> dict[str, np.ndarray]:
        def box(v: float) -> np.ndarray:
            return np.full((1, 1, 1, 1), v, dtype=np.float32)

        cfg = self.cfg
        return {
            "meta.head": box(_HEAD_CODES[self.head_kind]),
            "meta.num_classes": box(self.num_classes),
            "meta.backbone_channels": box(self.backbone.out_channels),
            "meta.aux_channels": box(self.backbone.aux_channels),
            "meta.ace_kernel": box(cfg.ace_kernel),
            "meta.ace_fuse": box(_FUSE_CODES[cfg.ace_fuse]),
            "meta.ace_version": box(_VERSION_CODES[cfg.ace_version]),
            "meta.ppm_bins": np.array(cfg.ppm_bins, dtype=np.float32).reshape(
                1, 1, 1, -1),
            "meta.aspp_rates": np.array(cfg.aspp_rates, dtype=np.float32).reshape(
                1, 1, 1, -1),
        }

    @classmethod
    def from_meta(cls, meta: dict[str, np.ndarray]) -> "SegModel":
        def unbox(name: str) -> float:
            return float(meta[name].reshape(-1)[0])

        codes = {v: k for k, v in _HEAD_CODES.items()}
        fuses = {v: k for k, v in _FUSE_CODES.items()}
        versions = {v: k for k, v in _VERSION_CODES.items()}
        channels = int(unbox("meta.backbone_channels"))
        cfg = HeadConfig(
            in_channels=channels,
            num_classes=int(unbox("meta.num_classes")),
            ppm_bins=tuple(int(v) for v in meta["meta.ppm_bins"].reshape(-1)),
            aspp_rates=tuple(int(v) for v in meta["meta.aspp_rates"].reshape(-1)),
            ace_kernel=int(unbox("meta.ace_kernel")),
            ace_fuse=fuses[unbox("meta.ace_fuse")],
            ace_version=versions[unbox("meta.ace_version")],
        )
        return cls(codes[unbox("meta.head")], cfg.num_classes,
                   backbone_channels=channels,
                   aux_channels=int(unbox("meta.aux_channels")),
                   head_cfg=cfg)
