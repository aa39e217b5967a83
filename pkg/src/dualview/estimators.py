"""scikit-learn style wrappers so the crops and the token pipeline compose with Pipelines."""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .encoder import VisionEncoderSpec
from .geometry import GLOBAL, LOCAL, PERSPECTIVES, compute_grid, global_crop, global_recombine, local_crop, local_recombine
from .pipeline import PipelineConfig, PipelineParams, budget, run
from .validation import check_image

_CROP = {LOCAL: local_crop, GLOBAL: global_crop}
_RECOMBINE = {LOCAL: local_recombine, GLOBAL: global_recombine}


def _pair(v):
    return (int(v), int(v)) if np.ndim(v) == 0 else (int(v[0]), int(v[1]))


class DualPerspectiveCropper(TransformerMixin, BaseEstimator):
    """Crop an image into encoder-sized sub-images from one perspective.

    Parameters
    ----------
    encoder_size : int or (width, height)
        Encoder input resolution; the image must be an exact multiple.
    perspective : {"local", "global"}
    """

    def __init__(self, encoder_size=336, perspective="local"):
        self.encoder_size = encoder_size
        self.perspective = perspective

    def fit(self, X, y=None):
        if self.perspective not in PERSPECTIVES:
            raise ValueError(f"perspective must be one of {PERSPECTIVES}, got {self.perspective!r}")
        X = check_image(X)
        ew, eh = _pair(self.encoder_size)
        self.grid_ = compute_grid(X.shape[1], X.shape[0], ew, eh)
        self.n_channels_ = X.shape[2]
        return self

    def transform(self, X):
        """Return the sub-images stacked as ``(N, enc_h, enc_w, C)``."""
        check_is_fitted(self, "grid_")
        return _CROP[self.perspective](X, self.grid_).stack()

    def inverse_transform(self, X):
        check_is_fitted(self, "grid_")
        return _RECOMBINE[self.perspective](list(X), self.grid_)


class DualViewTokenizer(TransformerMixin, BaseEstimator):
    """Image -> fixed-size visual token sequence.

    ``fit`` only draws the seeded parameters (nothing is learned from ``X``);
    ``transform`` maps one ``(H, W, C)`` image to ``(h_l * w_l, projector_out)``
    tokens, or a batch ``(B, H, W, C)`` to ``(B, h_l * w_l, projector_out)``.
    """

    def __init__(self, encoder_size=8, patch=4, dim=8, fusion="linear_concat",
                 ablation="full", multires=False, projector_out=8, share_branches=False,
                 seed=0):
        self.encoder_size = encoder_size
        self.patch = patch
        self.dim = dim
        self.fusion = fusion
        self.ablation = ablation
        self.multires = multires
        self.projector_out = projector_out
        self.share_branches = share_branches
        self.seed = seed

    def _config(self):
        ew, eh = _pair(self.encoder_size)
        return PipelineConfig(
            encoder=VisionEncoderSpec(ew, eh, self.patch, self.dim),
            fusion_variant=self.fusion,
            multires=self.multires,
            seed=self.seed,
            projector_out=self.projector_out,
            ablation=self.ablation,
            share_branches=self.share_branches,
        )

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        self.params_ = PipelineParams.init(self.config_)
        return self

    @classmethod
    def from_params(cls, config: PipelineConfig, params: PipelineParams):
        enc = config.encoder
        est = cls(encoder_size=(enc.input_w, enc.input_h), patch=enc.patch, dim=enc.dim,
                  fusion=config.fusion_variant, ablation=config.ablation,
                  multires=config.multires, projector_out=config.projector_out,
                  share_branches=config.share_branches, seed=config.seed)
        est.config_ = config
        est.params_ = params
        return est

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 4:
            return np.stack([run(x, self.config_, self.params_).tokens for x in X])
        return run(X, self.config_, self.params_).tokens

    def budget(self, img_w, img_h):
        return budget(img_w, img_h, self._config())
