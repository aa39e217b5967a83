"""Input validation helpers shared by the functional API and the estimators."""
import numpy as np

from .exceptions import NonFinite, ShapeMismatch


def check_finite(x, name="array"):
    if not np.all(np.isfinite(x)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return x


def check_image(img, name="image"):
    """Return ``img`` as a finite float64 array of shape (height, width, channels).

    2-D input is treated as a single-channel image.
    """
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeMismatch(f"{name} must have shape (height, width, channels), got {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeMismatch(f"{name} has an empty axis: {arr.shape}")
    arr = arr.astype(np.float64, copy=False)
    return check_finite(arr, name)


# feature grids share the (rows, cols, channels) layout of images
check_feature_grid = check_image


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{names[0]} has shape {a.shape} but {names[1]} has shape {b.shape}")
