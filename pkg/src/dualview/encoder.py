"""Vision encoder interface and a deterministic patch-embedding stand-in.

Any object with an ``encode(img) -> (h_l, w_l, d)`` method and a ``spec``
attribute can drive the pipeline. :class:`PatchEmbedEncoder` flattens
non-overlapping ``p x p`` patches, projects them linearly and adds a
per-position embedding. It has no transformer blocks and no CLS token.
"""
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .exceptions import ShapeMismatch
from .tensor import LinearParams, Rng, linear, round_to_f32
from .validation import check_image

# feature grids are (rows, cols, channels) float64 arrays
FeatureGrid = np.ndarray


@dataclass(frozen=True)
class VisionEncoderSpec:
    input_w: int
    input_h: int
    patch: int
    dim: int
    channels: int = 3

    def __post_init__(self):
        if min(self.input_w, self.input_h, self.patch, self.dim, self.channels) < 1:
            raise ValueError(f"all encoder sizes must be positive: {self}")
        if self.input_w % self.patch or self.input_h % self.patch:
            raise ShapeMismatch(
                f"patch {self.patch} does not divide input {self.input_w}x{self.input_h}"
            )
        if self.dim % 2:
            raise ValueError(f"feature dim must be even, got {self.dim}")

    @property
    def w_l(self) -> int:
        return self.input_w // self.patch

    @property
    def h_l(self) -> int:
        return self.input_h // self.patch

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


def token_count(spec: VisionEncoderSpec) -> int:
    """Tokens emitted per encoded sub-image."""
    return spec.w_l * spec.h_l


class Encoder(Protocol):
    spec: VisionEncoderSpec

    def encode(self, img: np.ndarray) -> FeatureGrid:
        ...


@dataclass
class EncoderParams:
    embed: LinearParams  # (p*p*C, d)
    pos: np.ndarray  # (h_l, w_l, d)

    @classmethod
    def init(cls, spec: VisionEncoderSpec, rng: Rng) -> "EncoderParams":
        w = round_to_f32(rng.normal((spec.patch_dim, spec.dim), 1.0 / np.sqrt(spec.patch_dim)))
        pos = round_to_f32(rng.normal((spec.h_l, spec.w_l, spec.dim), 1.0 / np.sqrt(spec.dim)))
        return cls(LinearParams(w, np.zeros(spec.dim)), pos)

    @classmethod
    def zeros(cls, spec: VisionEncoderSpec) -> "EncoderParams":
        return cls(LinearParams(np.zeros((spec.patch_dim, spec.dim)), np.zeros(spec.dim)),
                   np.zeros((spec.h_l, spec.w_l, spec.dim)))


def patchify(imgs: np.ndarray, p: int) -> np.ndarray:
    """(..., H, W, C) -> (..., H/p, W/p, p*p*C), patch values in (row, col, channel) order."""
    *lead, H, W, C = imgs.shape
    k = len(lead)
    t = imgs.reshape(*lead, H // p, p, W // p, p, C)
    t = np.moveaxis(t, k + 2, k + 1)
    return t.reshape(*lead, H // p, W // p, p * p * C)


class PatchEmbedEncoder:
    def __init__(self, spec: VisionEncoderSpec, params: EncoderParams):
        if params.embed.weight.shape != (spec.patch_dim, spec.dim):
            raise ShapeMismatch(
                f"embedding weight {params.embed.weight.shape} does not fit spec {spec}"
            )
        if params.pos.shape != (spec.h_l, spec.w_l, spec.dim):
            raise ShapeMismatch(f"positional table {params.pos.shape} does not fit spec {spec}")
        self.spec = spec
        self.params = params

    def _check(self, img):
        s = self.spec
        if img.shape[-3:] != (s.input_h, s.input_w, s.channels):
            raise ShapeMismatch(
                f"encoder expects {s.input_h}x{s.input_w}x{s.channels}, got {img.shape[-3:]}"
            )

    def encode(self, img: np.ndarray) -> FeatureGrid:
        img = check_image(img)
        self._check(img)
        return self.encode_batch(img[None])[0]

    def encode_batch(self, imgs: np.ndarray) -> np.ndarray:
        """Encode a stack ``(n, H, W, C)``; each item is processed independently."""
        imgs = np.asarray(imgs, dtype=np.float64)
        self._check(imgs)
        tokens = linear(patchify(imgs, self.spec.patch), self.params.embed)
        return tokens + self.params.pos
