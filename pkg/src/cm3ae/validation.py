"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
import numbers

import numpy as np

from .data import SamplePair
from .exceptions import InputError


def check_image_array(images, name="images", size=None):
    """Coerce to a float64 ``(n, H, W, 3)`` array with values in [0, 1]."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise InputError(f"{name} must have shape (n, H, W, 3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise InputError(f"{name} contains NaN or inf")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputError(f"{name} values must lie in [0, 1]")
    if size is not None and arr.shape[1:3] != (size, size):
        raise InputError(f"{name} are {arr.shape[1]}x{arr.shape[2]}, expected {size}x{size}")
    return arr


def check_pairs(X, size=None, require_voxels=False, record_width=None):
    """Validate a sequence of :class:`SamplePair`; returns it as a list."""
    if isinstance(X, SamplePair):
        X = [X]
    pairs = list(X)
    if not pairs:
        raise InputError("need at least one sample")
    for i, p in enumerate(pairs):
        if not isinstance(p, SamplePair):
            raise InputError(f"sample {i} is {type(p).__name__}, expected SamplePair")
        check_image_array(p.rgb, f"sample {i} rgb", size)
        check_image_array(p.event, f"sample {i} event", size)
        if np.shape(p.rgb) != np.shape(p.event):
            raise InputError(f"sample {i}: rgb and event shapes differ")
        if require_voxels:
            if p.voxels is None:
                raise InputError(f"sample {i} has no voxels")
            if record_width is not None and np.shape(p.voxels)[-1] != record_width:
                raise InputError(f"sample {i}: voxel width {np.shape(p.voxels)[-1]} != {record_width}")
    return pairs


def check_labels(y, n):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise InputError(f"expected {n} labels, got shape {y.shape}")
    if len(np.unique(y)) < 2:
        raise InputError("a classifier needs at least 2 classes")
    return y


def check_random_state(seed):
    """Return a ``numpy.random.Generator`` for ``seed`` (int, None or Generator)."""
    if seed is None or isinstance(seed, numbers.Integral):
        return np.random.default_rng(seed)
    if isinstance(seed, np.random.Generator):
        return seed
    raise ValueError(f"{seed!r} cannot be used to seed a Generator")
