"""Spatial resampling of label masks and feature maps.

Conventions (fixed, see README):

* nearest-neighbour downsampling samples the source pixel under the centre
  of each output cell, ``floor((i + 0.5) * r)``, clamped to the last row or
  column when the size is not divisible by ``r``;
* bilinear resizing uses half-pixel centres (``align_corners=False``) with
  edge replication, so constants and interior regions are reproduced
  exactly.

Label masks are integer arrays of shape ``(H, W)``; feature maps are float64
arrays of shape ``(H, W, C)``.
"""

from __future__ import annotations

import numpy as np

from joem.errors import InvalidInput, InvalidParameter


def _check_factor(r) -> int:
    if isinstance(r, bool) or int(r) != r:
        raise InvalidParameter(f"resampling factor must be an integer, got {r!r}")
    r = int(r)
    if r < 1:
        raise InvalidParameter(f"resampling factor must be >= 1, got {r}")
    return r


def as_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise InvalidInput(f"label mask must be a non-empty 2-D array, got shape {mask.shape}")
    if not np.issubdtype(mask.dtype, np.integer):
        raise InvalidInput(f"label mask must hold integers, got {mask.dtype}")
    if mask.min() < 0:
        raise InvalidInput("label mask ids must be non-negative")
    return mask


def as_feature_map(fmap) -> np.ndarray:
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 3 or fmap.size == 0:
        raise InvalidInput(f"feature map must be a non-empty (H, W, C) array, got shape {fmap.shape}")
    return fmap


def nn_source_indices(n_in: int, r: int) -> np.ndarray:
    """Source rows (or columns) sampled when downsampling ``n_in`` pixels by ``r``."""
    n_out = -(-n_in // r)
    idx = np.floor((np.arange(n_out) + 0.5) * r).astype(np.intp)
    return np.minimum(idx, n_in - 1)


def nn_downsample(mask, r) -> np.ndarray:
    """Downsample a label mask by ``r`` with nearest-neighbour sampling.

    The output has shape ``(ceil(H / r), ceil(W / r))``.
    """
    r = _check_factor(r)
    mask = as_mask(mask)
    rows = nn_source_indices(mask.shape[0], r)
    cols = nn_source_indices(mask.shape[1], r)
    return mask[np.ix_(rows, cols)]


def _lerp_coords(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_weights(n_in: int, n_out: int):
    """Per-output (lower index, upper index, upper weight) triples along one axis."""
    return _lerp_coords(n_in, n_out)


def resize_bilinear(fmap, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the two leading axes of ``fmap`` to ``(out_h, out_w)``.

    Values are interpolated as ``x0 + a * (x1 - x0)`` along each axis, which
    keeps equal neighbours bit-exact.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim < 2 or fmap.size == 0:
        raise InvalidInput(f"cannot resize an empty map of shape {fmap.shape}")
    if out_h < 1 or out_w < 1:
        raise InvalidParameter(f"invalid target size {out_h}x{out_w}")
    h, w = fmap.shape[:2]
    if (h, w) == (out_h, out_w):
        return fmap.copy()

    i0, i1, a = _lerp_coords(h, out_h)
    a = a.reshape((-1,) + (1,) * (fmap.ndim - 1))
    top = fmap[i0]
    rows = top + a * (fmap[i1] - top)

    j0, j1, b = _lerp_coords(w, out_w)
    b = b.reshape((1, -1) + (1,) * (fmap.ndim - 2))
    left = rows[:, j0]
    return left + b * (rows[:, j1] - left)


def bilinear_upsample(fmap, r) -> np.ndarray:
    r = _check_factor(r)
    fmap = as_feature_map(fmap)
    h, w = fmap.shape[:2]
    return resize_bilinear(fmap, r * h, r * w)


def stack_semantic(mask, table) -> np.ndarray:
    """Paint each pixel with the semantic vector of its class.

    Only the classes present in ``mask`` are read from ``table``.
    """
    mask = as_mask(mask)
    ids, inverse = np.unique(mask, return_inverse=True)
    vectors = table.matrix(ids.tolist())
    return vectors[inverse.reshape(mask.shape)]


def interpolated_semantic_map(mask, table, r) -> np.ndarray:
    """Semantic map smoothed across region boundaries.

    The mask is downsampled by ``r``, painted with semantic vectors and
    bilinearly upsampled back, then cropped to the mask size when ``H`` or
    ``W`` is not a multiple of ``r``. With ``r == 1`` this is exactly
    :func:`stack_semantic`.
    """
    r = _check_factor(r)
    mask = as_mask(mask)
    if r == 1:
        return stack_semantic(mask, table)
    small = stack_semantic(nn_downsample(mask, r), table)
    up = bilinear_upsample(small, r)
    return up[: mask.shape[0], : mask.shape[1]]
