"""End-to-end visual path: image -> dual crops -> encoder -> recombine -> DEM -> tokens.

The token count handed downstream is ``w_l * h_l`` for every valid input
resolution; higher resolutions only add encoder calls and attention work,
which :func:`budget` accounts for without running anything.
"""
import dataclasses
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .dem import FUSION_VARIANTS, DemParams, dual_pool, enhance, multires_combine
from .encoder import EncoderParams, PatchEmbedEncoder, VisionEncoderSpec, token_count
from .exceptions import ShapeMismatch, UnknownVariant
from .geometry import (
    GridSpec,
    compute_grid,
    global_crop,
    global_recombine,
    local_crop,
    local_recombine,
)
from .tensor import LinearParams, Rng, avg_pool, linear, round_to_f32
from .validation import check_image

ABLATIONS = ("full", "dcm_local_only", "dcm_global_only", "dcm_add")

TOY_ENCODER = VisionEncoderSpec(input_w=8, input_h=8, patch=4, dim=8)


@dataclass(frozen=True)
class PipelineConfig:
    encoder: VisionEncoderSpec = TOY_ENCODER
    fusion_variant: str = "linear_concat"
    multires: bool = False
    low_res: Optional[Tuple[int, int]] = None  # (w, h); must equal the encoder input
    seed: int = 0
    projector_out: int = 8
    ablation: str = "full"
    share_branches: bool = False

    def __post_init__(self):
        if self.fusion_variant not in FUSION_VARIANTS:
            raise UnknownVariant(f"unknown fusion variant {self.fusion_variant!r}")
        if self.ablation not in ABLATIONS:
            raise UnknownVariant(f"unknown ablation mode {self.ablation!r}; choose from {ABLATIONS}")
        if self.projector_out < 1:
            raise ValueError("projector_out must be at least 1")
        if self.low_res is not None:
            if tuple(self.low_res) != (self.encoder.input_w, self.encoder.input_h):
                raise ShapeMismatch(
                    f"low_res {tuple(self.low_res)} must equal the encoder input "
                    f"{self.encoder.input_w}x{self.encoder.input_h} so the features can be added"
                )

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class PipelineParams:
    encoder: EncoderParams
    dem: DemParams
    projector: LinearParams

    @classmethod
    def init(cls, cfg: PipelineConfig) -> "PipelineParams":
        """Seeded draw; encoder, DEM and projector consume one Rng stream in that order."""
        rng = Rng(cfg.seed)
        d = cfg.encoder.dim
        enc = EncoderParams.init(cfg.encoder, rng)
        dem = DemParams.init(d, rng, cfg.fusion_variant, cfg.share_branches)
        proj = LinearParams(round_to_f32(rng.normal((d, cfg.projector_out), 1.0 / np.sqrt(d))),
                            np.zeros(cfg.projector_out))
        return cls(enc, dem, proj)

    @classmethod
    def zeros(cls, cfg: PipelineConfig) -> "PipelineParams":
        d = cfg.encoder.dim
        z = DemParams.init(d, Rng(0), cfg.fusion_variant, cfg.share_branches)
        arrays = {k: np.zeros_like(v) for k, v in z.arrays().items()}
        return cls(EncoderParams.zeros(cfg.encoder),
                   DemParams.from_arrays(arrays, cfg.fusion_variant),
                   LinearParams(np.zeros((d, cfg.projector_out)), np.zeros(cfg.projector_out)))

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {
            "encoder.embed.weight": self.encoder.embed.weight,
            "encoder.embed.bias": self.encoder.embed.bias,
            "encoder.pos": self.encoder.pos,
        }
        out.update({f"dem.{k}": v for k, v in self.dem.arrays().items()})
        out["projector.weight"] = self.projector.weight
        out["projector.bias"] = self.projector.bias
        return {k: v for k, v in out.items() if v is not None}

    @classmethod
    def from_arrays(cls, arrays, fusion_variant="linear_concat") -> "PipelineParams":
        enc = EncoderParams(
            LinearParams(arrays["encoder.embed.weight"], arrays.get("encoder.embed.bias")),
            np.asarray(arrays["encoder.pos"], dtype=np.float64),
        )
        dem = DemParams.from_arrays(
            {k[4:]: np.asarray(v, dtype=np.float64) for k, v in arrays.items() if k.startswith("dem.")},
            fusion_variant,
        )
        proj = LinearParams(arrays["projector.weight"], arrays.get("projector.bias"))
        return cls(enc, dem, proj)


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (h_l * w_l, projector_out)
    provenance: np.ndarray  # (h_l * w_l, 2) cell (y, x) of each token

    def __len__(self):
        return self.tokens.shape[0]


@dataclass
class DualViews:
    """Recombined encoder features of both perspectives and their geometry."""

    grid: GridSpec  # pixel level
    feature_grid: GridSpec  # token level
    f_loc: np.ndarray
    f_glo: np.ndarray
    encoder_calls: int = 0  # sub-images encoded
    sub_features_loc: list = field(default_factory=list)
    sub_features_glo: list = field(default_factory=list)


def _encode_all(encoder, items):
    if hasattr(encoder, "encode_batch"):
        return list(encoder.encode_batch(np.stack(items)))
    return [encoder.encode(it) for it in items]


def encode_views(img, cfg: PipelineConfig, params: PipelineParams, encoder=None) -> DualViews:
    """Crop both ways, encode all ``2N`` sub-images and recombine each perspective."""
    img = check_image(img)
    spec = cfg.encoder
    if img.shape[2] != spec.channels:
        raise ShapeMismatch(f"image has {img.shape[2]} channels, encoder expects {spec.channels}")
    encoder = encoder or PatchEmbedEncoder(spec, params.encoder)
    grid = compute_grid(img.shape[1], img.shape[0], spec.input_w, spec.input_h)
    loc = local_crop(img, grid)
    glo = global_crop(img, grid)
    feats = _encode_all(encoder, loc.items + glo.items)
    n = grid.n_sub
    fgrid = grid.for_features(spec.w_l, spec.h_l)
    return DualViews(
        grid, fgrid,
        f_loc=local_recombine(feats[:n], fgrid),
        f_glo=global_recombine(feats[n:], fgrid),
        encoder_calls=len(feats),
        sub_features_loc=feats[:n],
        sub_features_glo=feats[n:],
    )


def downsample(img, grid: GridSpec):
    """Area-average an exact-multiple image down to the encoder input size."""
    return avg_pool(img, grid.n_h, grid.n_w)


def run(img, cfg: PipelineConfig, params: PipelineParams, encoder=None) -> TokenSequence:
    """Full visual path for one image.

    ``encoder`` overrides the patch-embedding stand-in with any object that
    has ``encode(img) -> (h_l, w_l, d)``.
    """
    img = check_image(img)
    views = encode_views(img, cfg, params, encoder)
    fgrid = views.feature_grid
    dem_params = params.dem
    if dem_params.fusion_variant != cfg.fusion_variant:
        arrays = dem_params.arrays()
        dem_params = DemParams.from_arrays(arrays, cfg.fusion_variant)
    if cfg.ablation == "full":
        f_dual = enhance(views.f_glo, views.f_loc, fgrid, dem_params).f_dual
    elif cfg.ablation == "dcm_local_only":
        f_dual = dual_pool(views.f_loc, fgrid)
    elif cfg.ablation == "dcm_global_only":
        f_dual = dual_pool(views.f_glo, fgrid)
    else:
        f_dual = dual_pool(views.f_loc + views.f_glo, fgrid)
    if cfg.multires:
        enc = encoder or PatchEmbedEncoder(cfg.encoder, params.encoder)
        f_dual = multires_combine(enc.encode(downsample(img, views.grid)), f_dual)
    h_l, w_l, d = f_dual.shape
    tokens = linear(f_dual.reshape(h_l * w_l, d), params.projector)
    yy, xx = np.divmod(np.arange(h_l * w_l), w_l)
    return TokenSequence(tokens, np.stack([yy, xx], axis=1))


@dataclass
class BudgetReport:
    n_sub_images: int
    encoder_calls: int
    tokens_before_pool: int
    tokens_final: int
    attention_flops_global: int
    attention_flops_local: int
    attention_flops_total: int

    def lines(self):
        return [f"{k}={v}" for k, v in asdict(self).items()]


def budget(img_w: int, img_h: int, cfg: PipelineConfig) -> BudgetReport:
    """Count sub-images, encoder calls, tokens and attention multiply-adds (x2 for FLOPs).

    Each enhancement direction costs ``2 * N * t^2 * d`` for ``Q K^T`` and the
    same again for ``A V``, with ``t = w_l * h_l``.
    """
    spec = cfg.encoder
    grid = compute_grid(img_w, img_h, spec.input_w, spec.input_h)
    t = token_count(spec)
    n = grid.n_sub
    per_direction = 2 * n * t * t * spec.dim * 2 if cfg.ablation == "full" else 0
    return BudgetReport(
        n_sub_images=2 * n,
        encoder_calls=2 * n + (1 if cfg.multires else 0),
        tokens_before_pool=n * t,
        tokens_final=t,
        attention_flops_global=per_direction,
        attention_flops_local=per_direction,
        attention_flops_total=2 * per_direction,
    )
