"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

from typing import List, Sequence, Tuple, Union

import numpy as np

from .synth import Corpus


def check_images(X, channels: int = 3) -> np.ndarray:
    """Coerce one image or a stack to float64 ``(N, C, H, W)`` in [0, 1].

    Accepts ``(C, H, W)``, ``(H, W, C)``, ``(N, C, H, W)`` and ``(N, H, W, C)``;
    uint8 input is rescaled from 0..255.
    """
    arr = np.asarray(X)
    if arr.dtype == object or arr.size == 0:
        raise ValueError("expected a non-empty numeric image array")
    scale = 255.0 if arr.dtype == np.uint8 else 1.0
    arr = arr.astype(np.float64) / scale
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected image(s) of rank 3 or 4, got shape {np.shape(X)}")
    if arr.shape[1] != channels and arr.shape[-1] == channels:
        arr = arr.transpose(0, 3, 1, 2)
    if arr.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got shape {np.shape(X)}")
    if not np.isfinite(arr).all():
        raise ValueError("images contain NaN or infinite values")
    return np.ascontiguousarray(arr)


def check_corpora(X) -> List[Corpus]:
    """A single corpus or a non-empty sequence of them."""
    if isinstance(X, Corpus):
        return [X]
    items = list(X) if isinstance(X, (list, tuple)) else None
    if not items or not all(isinstance(c, Corpus) for c in items):
        raise TypeError("expected a Corpus or a non-empty list of Corpus objects")
    for c in items:
        if len(c) == 0:
            raise ValueError(f"dataset {c.name!r} has no samples")
    return items


def check_ratios(ratios: Union[int, Sequence[int], None], n: int) -> Tuple[int, ...]:
    if ratios is None:
        return (1,) * n
    if isinstance(ratios, (int, np.integer)):
        ratios = (int(ratios),) * n
    ratios = tuple(int(r) for r in ratios)
    if len(ratios) != n:
        raise ValueError(f"{len(ratios)} ratios for {n} datasets")
    if any(r < 0 for r in ratios) or sum(ratios) == 0:
        raise ValueError("ratios must be nonnegative with a positive sum")
    return ratios


def pad_to_multiple(images: np.ndarray, multiple: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Edge-pad ``(N, C, H, W)`` on the bottom/right; return the original extents too."""
    h, w = images.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        images = np.pad(images, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return images, (h, w)
