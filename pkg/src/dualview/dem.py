"""Dual-perspective enhancement: paired cross-attention, fusion and pooling.

The forward pass is written once on :class:`~dualview.autodiff.Var` so that
the same code yields both the features and their parameter gradients.
Attention is single-head with no residual path and no normalization:

    A_i = softmax((X_i Wq)(Y_i Wk)^T / sqrt(d)),    V_i = A_i Y_i Wv

where the global branch takes queries ``X`` from the global grid and
keys/values ``Y`` from the local grid, both cropped with the global
(strided) pattern, and the local branch swaps the roles and crops with
contiguous tiles. Tokens inside a sub-grid are flattened row-major.
"""
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .exceptions import NotDivisible, ShapeMismatch, UnknownVariant
from .geometry import GridSpec, global_merge, global_split, local_merge, local_split
from .tensor import LinearParams, Rng, round_to_f32
from .validation import check_feature_grid, check_same_shape

FUSION_VARIANTS = (
    "linear_concat",
    "addition",
    "weighted_addition",
    "multiplication",
    "maxpool",
    "conv3x3",
)


@dataclass
class BranchParams:
    q: np.ndarray  # (d, d)
    k: np.ndarray
    v: np.ndarray


@dataclass
class DemParams:
    glo_branch: BranchParams
    loc_branch: BranchParams
    fuse_glo: LinearParams  # (d, d/2)
    fuse_loc: LinearParams
    fusion_variant: str = "linear_concat"
    mix_logits: Optional[np.ndarray] = None  # (2,), weighted_addition
    conv_weight: Optional[np.ndarray] = None  # (3, 3, 2d, d), conv3x3
    conv_bias: Optional[np.ndarray] = None  # (d,)

    def __post_init__(self):
        if self.fusion_variant not in FUSION_VARIANTS:
            raise UnknownVariant(
                f"unknown fusion variant {self.fusion_variant!r}; choose from {FUSION_VARIANTS}"
            )
        d = self.dim
        if d % 2:
            raise ShapeMismatch(f"feature dim must be even, got {d}")
        for br in {id(self.glo_branch): self.glo_branch, id(self.loc_branch): self.loc_branch}.values():
            for m in (br.q, br.k, br.v):
                if np.shape(m) != (d, d):
                    raise ShapeMismatch(f"attention matrices must be {d}x{d}, got {np.shape(m)}")
        for lp in (self.fuse_glo, self.fuse_loc):
            if lp.weight.shape != (d, d // 2):
                raise ShapeMismatch(f"fusion projections must be {d}x{d // 2}, got {lp.weight.shape}")
        if self.mix_logits is None:
            self.mix_logits = np.zeros(2)
        if self.conv_weight is None:
            self.conv_weight = np.zeros((3, 3, 2 * d, d))
        if self.conv_bias is None:
            self.conv_bias = np.zeros(d)

    @property
    def dim(self) -> int:
        return int(np.shape(self.glo_branch.q)[0])

    @property
    def shared(self) -> bool:
        return self.loc_branch is self.glo_branch

    @classmethod
    def init(cls, dim: int, rng: Rng, fusion_variant="linear_concat",
             share_branches=False) -> "DemParams":
        """Draw weights i.i.d. normal with std 1/sqrt(dim); biases and mixing logits start at zero."""
        std = 1.0 / np.sqrt(dim)

        def mat(shape, s=std):
            return round_to_f32(rng.normal(shape, s))

        glo = BranchParams(mat((dim, dim)), mat((dim, dim)), mat((dim, dim)))
        loc = glo if share_branches else BranchParams(mat((dim, dim)), mat((dim, dim)), mat((dim, dim)))
        half = dim // 2
        fuse_glo = LinearParams(mat((dim, half)), np.zeros(half))
        fuse_loc = LinearParams(mat((dim, half)), np.zeros(half))
        conv = mat((3, 3, 2 * dim, dim), 1.0 / np.sqrt(9 * 2 * dim))
        return cls(glo, loc, fuse_glo, fuse_loc, fusion_variant,
                   mix_logits=np.zeros(2), conv_weight=conv, conv_bias=np.zeros(dim))

    def arrays(self, variant_only=False) -> Dict[str, np.ndarray]:
        """Flat ``name -> array`` view; with ``variant_only`` drop unused fusion parameters."""
        out = {}
        branches = [("glo", self.glo_branch)] + ([] if self.shared else [("loc", self.loc_branch)])
        for name, br in branches:
            out[f"{name}.q"] = br.q
            out[f"{name}.k"] = br.k
            out[f"{name}.v"] = br.v
        v = self.fusion_variant
        if not variant_only or v == "linear_concat":
            out["fuse_glo.weight"] = self.fuse_glo.weight
            out["fuse_glo.bias"] = self.fuse_glo.bias
            out["fuse_loc.weight"] = self.fuse_loc.weight
            out["fuse_loc.bias"] = self.fuse_loc.bias
        if not variant_only or v == "weighted_addition":
            out["mix.logits"] = self.mix_logits
        if not variant_only or v == "conv3x3":
            out["conv.weight"] = self.conv_weight
            out["conv.bias"] = self.conv_bias
        return {k: v for k, v in out.items() if v is not None}

    @classmethod
    def from_arrays(cls, arrays, fusion_variant="linear_concat") -> "DemParams":
        glo = BranchParams(arrays["glo.q"], arrays["glo.k"], arrays["glo.v"])
        if "loc.q" in arrays:
            loc = BranchParams(arrays["loc.q"], arrays["loc.k"], arrays["loc.v"])
        else:
            loc = glo
        return cls(
            glo, loc,
            LinearParams(arrays["fuse_glo.weight"], arrays.get("fuse_glo.bias")),
            LinearParams(arrays["fuse_loc.weight"], arrays.get("fuse_loc.bias")),
            fusion_variant,
            mix_logits=arrays.get("mix.logits"),
            conv_weight=arrays.get("conv.weight"),
            conv_bias=arrays.get("conv.bias"),
        )


@dataclass
class EnhancedFeatures:
    v_glo: np.ndarray  # (h_h, w_h, d)
    v_loc: np.ndarray
    v_dual: np.ndarray
    f_dual: np.ndarray  # (h_l, w_l, d), pooled


def _param_vars(params: DemParams, leaves=None):
    """Map every parameter name the forward pass reads to a Var."""
    leaves = leaves if leaves is not None else {
        k: ad.Var(v) for k, v in params.arrays().items()
    }
    full = dict(leaves)
    if params.shared:
        for m in "qkv":
            full.setdefault(f"loc.{m}", full[f"glo.{m}"])
    return full


def _sub_dims(f, grid: GridSpec):
    h_h, w_h, d = f.shape
    if h_h % grid.n_h or w_h % grid.n_w:
        raise ShapeMismatch(f"feature grid {h_h}x{w_h} does not split into {grid.n_h}x{grid.n_w}")
    return h_h // grid.n_h, w_h // grid.n_w, d


def _split_tokens(f, split, grid):
    h_l, w_l, d = _sub_dims(f, grid)
    return ad.rearrange(f, lambda ix: split(ix, grid.n_w, grid.n_h).reshape(grid.n_sub, h_l * w_l, d))


def _merge_tokens(x, merge, grid, h_l, w_l):
    d = x.shape[-1]
    return ad.rearrange(x, lambda ix: merge(ix.reshape(grid.n_sub, h_l, w_l, d), grid.n_w, grid.n_h))


def _cross_attend(queries, context, wq, wk, wv, d):
    q = ad.matmul(queries, wq)
    k = ad.matmul(context, wk)
    v = ad.matmul(context, wv)
    logits = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d))
    attn = ad.softmax_rows(logits)
    return ad.matmul(attn, v), attn


def _enhance(query_grid, context_grid, grid, P, branch, split, merge):
    h_l, w_l, d = _sub_dims(query_grid.data, grid)
    queries = _split_tokens(query_grid, split, grid)
    context = _split_tokens(context_grid, split, grid)
    out, attn = _cross_attend(queries, context, P[f"{branch}.q"], P[f"{branch}.k"],
                              P[f"{branch}.v"], d)
    return _merge_tokens(out, merge, grid, h_l, w_l), attn


def _check_pair(f_glo, f_loc, grid):
    f_glo = check_feature_grid(f_glo, "f_glo")
    f_loc = check_feature_grid(f_loc, "f_loc")
    check_same_shape(f_glo, f_loc, ("f_glo", "f_loc"))
    _sub_dims(f_glo, grid)
    return f_glo, f_loc


def _check_dim(f, params):
    if f.shape[-1] != params.dim:
        raise ShapeMismatch(f"features have {f.shape[-1]} channels, parameters expect {params.dim}")


def global_enhance(f_glo, f_loc, grid: GridSpec, params: DemParams, return_attention=False):
    """Global grid attends to the local grid inside each strided sub-grid pair.

    Only ``grid.n_w``/``grid.n_h`` are used; the sub-grid size follows from
    the feature shape. Returns ``(h_h, w_h, d)``, plus the ``(N, t, t)``
    attention maps when ``return_attention`` is set.
    """
    f_glo, f_loc = _check_pair(f_glo, f_loc, grid)
    _check_dim(f_glo, params)
    out, attn = _enhance(ad.Var(f_glo), ad.Var(f_loc), grid, _param_vars(params), "glo",
                         global_split, global_merge)
    return (out.data, attn.data) if return_attention else out.data


def local_enhance(f_glo, f_loc, grid: GridSpec, params: DemParams, return_attention=False):
    """Local grid attends to the global grid inside each contiguous tile pair."""
    f_glo, f_loc = _check_pair(f_glo, f_loc, grid)
    _check_dim(f_glo, params)
    out, attn = _enhance(ad.Var(f_loc), ad.Var(f_glo), grid, _param_vars(params), "loc",
                         local_split, local_merge)
    return (out.data, attn.data) if return_attention else out.data


def _fuse(v_glo, v_loc, P, variant):
    if variant == "linear_concat":
        g = ad.linear(v_glo, P["fuse_glo.weight"], P.get("fuse_glo.bias"))
        l = ad.linear(v_loc, P["fuse_loc.weight"], P.get("fuse_loc.bias"))
        return ad.concat([g, l], axis=-1)
    if variant == "addition":
        return ad.add(v_glo, v_loc)
    if variant == "weighted_addition":
        w = ad.softmax_rows(ad.reshape(P["mix.logits"], (1, 2)))
        a = ad.rearrange(w, lambda ix: ix[0, 0:1])
        b = ad.rearrange(w, lambda ix: ix[0, 1:2])
        return ad.add(ad.mul(a, v_glo), ad.mul(b, v_loc))
    if variant == "multiplication":
        return ad.mul(v_glo, v_loc)
    if variant == "maxpool":
        return ad.maximum(v_glo, v_loc)
    if variant == "conv3x3":
        return ad.conv3x3(ad.concat([v_glo, v_loc], axis=-1), P["conv.weight"], P["conv.bias"])
    raise UnknownVariant(f"unknown fusion variant {variant!r}")


def fuse(v_glo, v_loc, params: DemParams, variant: Optional[str] = None):
    """Merge the two enhanced grids into one ``(h_h, w_h, d)`` grid.

    ``variant`` defaults to ``params.fusion_variant``.
    """
    variant = variant or params.fusion_variant
    if variant not in FUSION_VARIANTS:
        raise UnknownVariant(f"unknown fusion variant {variant!r}; choose from {FUSION_VARIANTS}")
    v_glo = check_feature_grid(v_glo, "v_glo")
    v_loc = check_feature_grid(v_loc, "v_loc")
    check_same_shape(v_glo, v_loc, ("v_glo", "v_loc"))
    _check_dim(v_glo, params)
    return _fuse(ad.Var(v_glo), ad.Var(v_loc), _param_vars(params), variant).data


def _pool(v_dual, grid):
    h_h, w_h = v_dual.shape[0], v_dual.shape[1]
    if h_h % grid.n_h or w_h % grid.n_w:
        raise NotDivisible(f"grid {h_h}x{w_h} is not divisible by {grid.n_h}x{grid.n_w}")
    return ad.avg_pool(v_dual, grid.n_h, grid.n_w)


def dual_pool(v_dual, grid: GridSpec):
    """Average over ``n_h x n_w`` windows, bringing the grid back to ``h_l x w_l``."""
    v_dual = check_feature_grid(v_dual, "v_dual")
    return _pool(ad.Var(v_dual), grid).data


def multires_combine(f_low, f_dual):
    """Elementwise sum of low-resolution features and pooled dual features."""
    f_low = check_feature_grid(f_low, "f_low")
    f_dual = check_feature_grid(f_dual, "f_dual")
    check_same_shape(f_low, f_dual, ("f_low", "f_dual"))
    return f_low + f_dual


def _forward(f_glo, f_loc, grid, P, variant):
    v_glo, _ = _enhance(f_glo, f_loc, grid, P, "glo", global_split, global_merge)
    v_loc, _ = _enhance(f_loc, f_glo, grid, P, "loc", local_split, local_merge)
    v_dual = _fuse(v_glo, v_loc, P, variant)
    return v_glo, v_loc, v_dual, _pool(v_dual, grid)


def enhance(f_glo, f_loc, grid: GridSpec, params: DemParams) -> EnhancedFeatures:
    """Both enhancement directions, fusion and pooling in one call."""
    f_glo, f_loc = _check_pair(f_glo, f_loc, grid)
    _check_dim(f_glo, params)
    parts = _forward(ad.Var(f_glo), ad.Var(f_loc), grid, _param_vars(params),
                     params.fusion_variant)
    return EnhancedFeatures(*(p.data for p in parts))


def dem_grad_check(f_glo, f_loc, grid: GridSpec, params: DemParams, h: float = 1e-4):
    """Finite-difference check of d sum(F_dual) / d(every parameter the variant uses)."""
    f_glo, f_loc = _check_pair(f_glo, f_loc, grid)
    variant = params.fusion_variant
    shared = params.shared

    def objective(leaves):
        P = dict(leaves)
        if shared:
            for m in "qkv":
                P[f"loc.{m}"] = P[f"glo.{m}"]
        *_, f_dual = _forward(ad.Var(f_glo), ad.Var(f_loc), grid, P, variant)
        return ad.total(f_dual)

    return ad.grad_check(objective, params.arrays(variant_only=True), h)
