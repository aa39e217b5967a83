"""Dual-perspective cropping of images and feature grids.

Two crops partition an ``n_h * enc_h`` by ``n_w * enc_w`` array into
``N = n_w * n_h`` encoder-sized pieces:

* local: contiguous tiles, item ``i`` sits at ``row = i // n_w``, ``col = i % n_w``;
* global: strided samplings, item ``(i, j)`` holds pixels
  ``x = j + u * n_w``, ``y = i + v * n_h`` and is stored at index ``i * n_w + j``.

Both crops and their recombinations are pure reshapes/transposes, so
``recombine(crop(x)) == x`` holds bit for bit. The same functions serve
feature grids, with the encoder token grid ``(w_l, h_l)`` in place of the
pixel size (see :meth:`GridSpec.for_features`).
"""
from dataclasses import dataclass, field
from typing import List, Sequence, Union

import numpy as np

from .exceptions import NotMultiple, OutOfRange, ShapeMismatch, TooSmall, WrongPerspective
from .validation import check_image

LOCAL = "local"
GLOBAL = "global"
PERSPECTIVES = (LOCAL, GLOBAL)


@dataclass(frozen=True)
class GridSpec:
    img_w: int
    img_h: int
    enc_w: int
    enc_h: int
    n_w: int
    n_h: int

    def __post_init__(self):
        if self.img_w != self.n_w * self.enc_w or self.img_h != self.n_h * self.enc_h:
            raise NotMultiple(f"inconsistent grid {self}")

    @property
    def n_sub(self) -> int:
        return self.n_w * self.n_h

    def for_features(self, w_l: int, h_l: int) -> "GridSpec":
        """Same ``n_w x n_h`` layout at feature-cell granularity."""
        return GridSpec(self.n_w * w_l, self.n_h * h_l, w_l, h_l, self.n_w, self.n_h)


def _nearest_multiples(size, enc):
    lo = max(enc, (size // enc) * enc)
    hi = -(-size // enc) * enc
    return lo, hi


def compute_grid(img_w: int, img_h: int, enc_w: int, enc_h: int) -> GridSpec:
    """Count encoder-sized sub-images along each axis.

    Raises
    ------
    TooSmall
        If the image is smaller than the encoder input.
    NotMultiple
        If a side is not an exact multiple of the encoder side.
    """
    for name, v in (("img_w", img_w), ("img_h", img_h), ("enc_w", enc_w), ("enc_h", enc_h)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    img_w, img_h, enc_w, enc_h = int(img_w), int(img_h), int(enc_w), int(enc_h)
    if img_w < enc_w or img_h < enc_h:
        raise TooSmall(f"image {img_w}x{img_h} is smaller than encoder input {enc_w}x{enc_h}")
    n_w, n_h = img_w // enc_w, img_h // enc_h
    if img_w != n_w * enc_w or img_h != n_h * enc_h:
        bad = []
        if img_w != n_w * enc_w:
            bad.append("width %d (nearest valid: %d, %d)" % ((img_w,) + _nearest_multiples(img_w, enc_w)))
        if img_h != n_h * enc_h:
            bad.append("height %d (nearest valid: %d, %d)" % ((img_h,) + _nearest_multiples(img_h, enc_h)))
        raise NotMultiple(f"not a multiple of the encoder input {enc_w}x{enc_h}: " + "; ".join(bad))
    return GridSpec(img_w, img_h, enc_w, enc_h, n_w, n_h)


@dataclass
class SubImageSet:
    """Ordered crops of one image (or feature grid) under one perspective."""

    grid: GridSpec
    perspective: str
    items: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.perspective not in PERSPECTIVES:
            raise WrongPerspective(f"unknown perspective {self.perspective!r}")

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def stack(self) -> np.ndarray:
        return np.stack(self.items)


def _check_matches(x, grid):
    if x.shape[0] != grid.img_h or x.shape[1] != grid.img_w:
        raise ShapeMismatch(
            f"array is {x.shape[1]}x{x.shape[0]} but grid expects {grid.img_w}x{grid.img_h}"
        )


# Array-level rearrangements on (..., H, W, C) arrays. The leading axes are
# carried along untouched, which lets the enhancement module crop a whole
# batch in one call.

def local_split(x: np.ndarray, n_w: int, n_h: int) -> np.ndarray:
    """(..., n_h*h, n_w*w, C) -> (..., N, h, w, C), tiles in row-major order."""
    *lead, H, W, C = x.shape
    h, w = H // n_h, W // n_w
    t = x.reshape(*lead, n_h, h, n_w, w, C)
    k = len(lead)
    t = np.moveaxis(t, k + 2, k + 1)  # (..., n_h, n_w, h, w, C)
    return t.reshape(*lead, n_h * n_w, h, w, C)


def local_merge(x: np.ndarray, n_w: int, n_h: int) -> np.ndarray:
    """Inverse of :func:`local_split`."""
    *lead, N, h, w, C = x.shape
    k = len(lead)
    t = x.reshape(*lead, n_h, n_w, h, w, C)
    t = np.moveaxis(t, k + 1, k + 2)  # (..., n_h, h, n_w, w, C)
    return t.reshape(*lead, n_h * h, n_w * w, C)


def global_split(x: np.ndarray, n_w: int, n_h: int) -> np.ndarray:
    """(..., n_h*h, n_w*w, C) -> (..., N, h, w, C) with stride-interleaved sampling."""
    *lead, H, W, C = x.shape
    h, w = H // n_h, W // n_w
    k = len(lead)
    # y = v*n_h + i, x = u*n_w + j
    t = x.reshape(*lead, h, n_h, w, n_w, C)
    t = np.moveaxis(t, [k + 1, k + 3], [k, k + 1])  # (..., n_h, n_w, h, w, C)
    return t.reshape(*lead, n_h * n_w, h, w, C)


def global_merge(x: np.ndarray, n_w: int, n_h: int) -> np.ndarray:
    """Inverse of :func:`global_split`."""
    *lead, N, h, w, C = x.shape
    k = len(lead)
    t = x.reshape(*lead, n_h, n_w, h, w, C)
    t = np.moveaxis(t, [k, k + 1], [k + 1, k + 3])  # (..., h, n_h, w, n_w, C)
    return t.reshape(*lead, n_h * h, n_w * w, C)


_SPLIT = {LOCAL: local_split, GLOBAL: global_split}
_MERGE = {LOCAL: local_merge, GLOBAL: global_merge}


def _crop(img, grid, perspective):
    img = check_image(img)
    _check_matches(img, grid)
    parts = _SPLIT[perspective](img, grid.n_w, grid.n_h)
    return SubImageSet(grid, perspective, [np.ascontiguousarray(p) for p in parts])


def local_crop(img: np.ndarray, grid: GridSpec) -> SubImageSet:
    """Cut ``img`` into ``grid.n_sub`` contiguous tiles of ``enc_h x enc_w``."""
    return _crop(img, grid, LOCAL)


def global_crop(img: np.ndarray, grid: GridSpec) -> SubImageSet:
    """Sample ``img`` with strides ``(n_h, n_w)`` into ``grid.n_sub`` sub-images.

    Sub-image ``(i, j)`` at pixel ``(u, v)`` is source pixel
    ``(x=j + u*n_w, y=i + v*n_h)``; it is stored at index ``i*n_w + j``.
    """
    return _crop(img, grid, GLOBAL)


SubItems = Union[SubImageSet, Sequence[np.ndarray]]


def _recombine(subs, grid, perspective):
    if isinstance(subs, SubImageSet):
        if subs.perspective != perspective:
            raise WrongPerspective(f"expected {perspective} sub-images, got {subs.perspective}")
        items = subs.items
    else:
        items = list(subs)
    if len(items) != grid.n_sub:
        raise ShapeMismatch(f"expected {grid.n_sub} items, got {len(items)}")
    items = [check_image(it, "sub-image") for it in items]
    shape = items[0].shape
    for it in items:
        if it.shape != shape:
            raise ShapeMismatch(f"sub-images disagree in shape: {shape} vs {it.shape}")
    return _MERGE[perspective](np.stack(items), grid.n_w, grid.n_h)


def local_recombine(subs: SubItems, grid: GridSpec) -> np.ndarray:
    """Place local tiles back into the full layout (exact inverse of :func:`local_crop`).

    Only ``grid.n_w`` and ``grid.n_h`` are used, so the same call rebuilds
    pixel images and encoder feature grids alike.
    """
    return _recombine(subs, grid, LOCAL)


def global_recombine(subs: SubItems, grid: GridSpec) -> np.ndarray:
    """Interleave global sub-images back (exact inverse of :func:`global_crop`)."""
    return _recombine(subs, grid, GLOBAL)


def map_pixel(grid: GridSpec, perspective: str, sub_index, u: int, v: int):
    """Source coordinates ``(x, y)`` of pixel ``(u, v)`` in a sub-image.

    ``sub_index`` is the flat index, or a ``(row, col)`` / ``(i, j)`` pair.
    """
    if perspective not in PERSPECTIVES:
        raise WrongPerspective(f"unknown perspective {perspective!r}")
    if isinstance(sub_index, tuple):
        r, c = sub_index
        if not (0 <= r < grid.n_h and 0 <= c < grid.n_w):
            raise OutOfRange(f"sub-image {sub_index} outside {grid.n_h}x{grid.n_w} grid")
    else:
        if not 0 <= sub_index < grid.n_sub:
            raise OutOfRange(f"sub-image index {sub_index} outside [0, {grid.n_sub})")
        r, c = divmod(sub_index, grid.n_w)
    if not (0 <= u < grid.enc_w and 0 <= v < grid.enc_h):
        raise OutOfRange(f"pixel ({u}, {v}) outside {grid.enc_w}x{grid.enc_h} sub-image")
    if perspective == LOCAL:
        return c * grid.enc_w + u, r * grid.enc_h + v
    return c + u * grid.n_w, r + v * grid.n_h
