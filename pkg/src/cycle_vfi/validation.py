"""Input checks for frames, frame stacks and datasets passed through the public API."""
from typing import Sequence, Union

import numpy as np

from .data import Clip, Triplet, make_triplets, triplets_to_array


def check_frame(frame, name="frame") -> np.ndarray:
    """A finite ``(H, W, 3)`` float32 array with values in [0, 1]."""
    arr = np.asarray(frame, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[-1] != 3 or min(arr.shape[:2]) < 1:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_frame_stack(X, n_frames=None, name="X") -> np.ndarray:
    """A ``(N, L, H, W, 3)`` array; ``L`` must equal ``n_frames`` when given."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 5 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (N, L, H, W, 3), got {arr.shape}")
    if n_frames is not None and arr.shape[1] != n_frames:
        raise ValueError(f"{name} must hold {n_frames} frames per sample, got {arr.shape[1]}")
    if len(arr) == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def as_triplet_array(X: Union[np.ndarray, Sequence[Clip], Sequence[Triplet]], stride=1) -> np.ndarray:
    """Accept clips, triplets or a ready ``(N, 3, H, W, 3)`` array."""
    if isinstance(X, np.ndarray):
        return check_frame_stack(X, 3)
    items = list(X)
    if not items:
        raise ValueError("no training data")
    if all(isinstance(c, Clip) for c in items):
        items = [t for c in items for t in make_triplets(c, stride)]
        if not items:
            raise ValueError("clips are too short to form triplets")
    if all(isinstance(t, Triplet) for t in items):
        return check_frame_stack(triplets_to_array(items), 3)
    return check_frame_stack(np.asarray(items), 3)


def check_time_value(t) -> float:
    t = float(t)
    if not 0.0 < t < 1.0:
        raise ValueError(f"t must lie in (0, 1), got {t}")
    return t
