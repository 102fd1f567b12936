"""Training objectives with analytic gradients.

Every loss returns a :class:`LossValue` whose ``grads`` dict holds adjoints
keyed by input name:

* ``"v"``           visual features, same shape as the feature input
* ``"w"``           classifier weights, ``(|S|, C)`` rows in ascending seen id
* ``"enc_weight"``  semantic encoder weight ``(D, C)``
* ``"enc_bias"``    semantic encoder bias ``(C,)``

Feature maps may be a single ``(H, W, C)`` map or a batch ``(B, H, W, C)``
with masks ``(H, W)`` / ``(B, H, W)``. Per-pixel losses are averaged over
all seen-labelled pixels of the batch (one pooled normaliser).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from joem.data import SplitSpec
from joem.embedding import SemanticEncoderParams, SemanticTable, softmax_offdiag
from joem.errors import InvalidInput, InvalidLabel, InvalidParameter, NonFiniteError, UndefinedLoss
from joem.resample import (as_mask, bilinear_upsample, interpolated_semantic_map, nn_downsample,
                           stack_semantic)

# Smoothing of the Euclidean distance, sqrt(|x|^2 + eps^2) - eps, keeps the
# gradient defined at zero.
DIST_EPS = 1e-8


@dataclass
class LossValue:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    parts: dict[str, float] = field(default_factory=dict)


def smooth_distance(diff: np.ndarray):
    """Smoothed Euclidean norm along the last axis and ``sqrt(|x|^2 + eps^2)``."""
    root = np.sqrt(np.sum(diff * diff, axis=-1) + DIST_EPS**2)
    return root - DIST_EPS, root


def _batched(v, y):
    v = np.asarray(v, dtype=np.float64)
    y = np.asarray(y)
    single = v.ndim == 3
    if single:
        v, y = v[None], y[None]
    if v.ndim != 4 or y.ndim != 3:
        raise InvalidInput(f"expected (H, W, C) features with (H, W) mask, got {v.shape} and {y.shape}")
    if v.shape[:3] != y.shape:
        raise InvalidInput(f"feature map {v.shape[:3]} and mask {y.shape} differ in size")
    if not np.issubdtype(y.dtype, np.integer):
        raise InvalidInput(f"label mask must hold integers, got {y.dtype}")
    return v, y, single


def check_labels(y: np.ndarray, split: SplitSpec, ignore_unseen: bool = False) -> None:
    """Reject ids outside the class universe, and unseen ids unless ignored."""
    ids = np.unique(y)
    unknown = [int(c) for c in ids if c not in split.seen and c not in split.unseen]
    if unknown:
        raise InvalidLabel(f"mask contains ids outside the class universe: {unknown}")
    if not ignore_unseen:
        unseen = [int(c) for c in ids if c in split.unseen]
        if unseen:
            raise InvalidLabel(f"training mask contains unseen class ids {unseen}")


def seen_pixels(y: np.ndarray, split: SplitSpec, ignore_unseen: bool = False) -> np.ndarray:
    """Boolean mask of pixels that take part in the training losses.

    Unseen ids are a contract violation unless ``ignore_unseen`` is set, in
    which case they are skipped like any other non-seen pixel.
    """
    check_labels(y, split, ignore_unseen)
    valid = np.isin(y, split.seen_sorted)
    if not valid.any():
        raise UndefinedLoss("no seen-labelled pixels to average over")
    return valid


def _unbatch(grad, single):
    return grad[0] if single else grad


def ce_loss(v, w, y, split: SplitSpec, ignore_unseen: bool = False) -> LossValue:
    """Pixel-wise softmax cross-entropy restricted to seen classes."""
    v, y, single = _batched(v, y)
    seen = np.array(split.seen_sorted)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (len(seen), v.shape[-1]):
        raise InvalidInput(f"classifier weights {w.shape}, expected {(len(seen), v.shape[-1])}")
    valid = seen_pixels(y, split, ignore_unseen)
    n = int(valid.sum())

    feats = v[valid]
    target = np.searchsorted(seen, y[valid])
    logits = feats @ w.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    nll = lse - shifted[np.arange(n), target]
    value = float(np.sum(nll) / n)

    probs = np.exp(shifted - lse[:, None])
    probs[np.arange(n), target] -= 1.0
    g_logits = probs / n
    g_v = np.zeros_like(v)
    g_v[valid] = g_logits @ w
    return LossValue(value, {"v": _unbatch(g_v, single), "w": g_logits.T @ feats}, {"ce": value})


def _seen_interpolated(y2d, table, r, split):
    """Interpolated semantic map built from seen classes only.

    Cells of the downsampled mask holding non-seen ids are dropped and the
    bilinear weights renormalised over the remaining cells; pixels left with
    no seen neighbour fall back to their own class vector.
    """
    if np.isin(y2d, split.seen_sorted).all():
        return interpolated_semantic_map(y2d, table, r)
    seen = split.seen_sorted
    h, w = y2d.shape
    small = nn_downsample(y2d, r)
    ok = np.isin(small, seen)
    painted = np.zeros(small.shape + (table.dim,))
    if ok.any():
        painted[ok] = stack_semantic(small[ok][None], table)[0]
    num = bilinear_upsample(painted, r)[:h, :w]
    den = bilinear_upsample(ok[..., None].astype(np.float64), r)[:h, :w]
    out = np.zeros((h, w, table.dim))
    has = den[..., 0] > 0
    out[has] = num[has] / den[has]
    own = ~has & np.isin(y2d, seen)
    if own.any():
        out[own] = stack_semantic(y2d[own][None], table)[0]
    return out


def semantic_targets(y, table: SemanticTable, split: SplitSpec, r: int = 1,
                     ignore_unseen: bool = False) -> np.ndarray:
    """Per-pixel semantic vectors used as regression targets (batch-aware).

    Reads only the vectors of seen classes.
    """
    y = np.asarray(y)
    single = y.ndim == 2
    ys = y[None] if single else y
    maps = []
    for m in ys:
        m = as_mask(m)
        check_labels(m, split, ignore_unseen)
        maps.append(_seen_interpolated(m, table, r, split))
    out = np.stack(maps)
    return out[0] if single else out


def regression_loss(v, y, s_map, enc: SemanticEncoderParams, split: SplitSpec,
                    ignore_unseen: bool = False, name: str = "bar") -> LossValue:
    """Mean smoothed distance between features and encoded semantic targets."""
    v, y, single = _batched(v, y)
    s_map = np.asarray(s_map, dtype=np.float64)
    if s_map.ndim == 3:
        s_map = s_map[None]
    if s_map.shape[:3] != y.shape or s_map.shape[-1] != enc.in_dim:
        raise InvalidInput(f"semantic map {s_map.shape} does not match mask {y.shape}")
    if enc.out_dim != v.shape[-1]:
        raise InvalidInput(f"encoder outputs {enc.out_dim} channels, features have {v.shape[-1]}")
    valid = seen_pixels(y, split, ignore_unseen)
    n = int(valid.sum())

    s_sel = s_map[valid]
    diff = v[valid] - (s_sel @ enc.weight + enc.bias)
    dist, root = smooth_distance(diff)
    value = float(np.sum(dist) / n)

    g_diff = diff / (root[:, None] * n)
    g_v = np.zeros_like(v)
    g_v[valid] = g_diff
    grads = {"v": _unbatch(g_v, single),
             "enc_weight": -(s_sel.T @ g_diff),
             "enc_bias": -g_diff.sum(axis=0)}
    return LossValue(value, grads, {name: value})


def bar_loss(v, y, table: SemanticTable, enc: SemanticEncoderParams, split: SplitSpec, r: int,
             ignore_unseen: bool = False) -> LossValue:
    """Boundary-aware regression towards interpolated ("virtual") prototypes."""
    s_map = semantic_targets(y, table, split, r, ignore_unseen)
    return regression_loss(v, y, s_map, enc, split, ignore_unseen, "bar")


def center_loss(v, y, table: SemanticTable, enc: SemanticEncoderParams, split: SplitSpec,
                ignore_unseen: bool = False) -> LossValue:
    s_map = semantic_targets(y, table, split, 1, ignore_unseen)
    return regression_loss(v, y, s_map, enc, split, ignore_unseen, "center")


def sc_loss(table: SemanticTable, enc: SemanticEncoderParams, split: SplitSpec,
            tau_s: float, tau_mu: float) -> LossValue:
    """KL divergence between semantic-space and joint-space class relations.

    Relations are softmaxes over the other seen classes of ``-tau * d``; the
    semantic side is a fixed target.
    """
    if not (tau_s > 0 and tau_mu > 0):
        raise InvalidParameter(f"temperatures must be positive, got {tau_s}, {tau_mu}")
    seen = split.seen_sorted
    if len(seen) < 2:
        raise InvalidInput("semantic consistency needs at least two seen classes")
    s = table.matrix(seen)

    s_diff = s[:, None, :] - s[None, :, :]
    target = softmax_offdiag(-tau_s * np.sqrt(np.sum(s_diff * s_diff, axis=-1)))

    mu = s @ enc.weight + enc.bias
    diff = mu[:, None, :] - mu[None, :, :]
    dist, root = smooth_distance(diff)
    pred = softmax_offdiag(-tau_mu * dist)

    k = len(seen)
    off = ~np.eye(k, dtype=bool)
    support = off & (target > 0)
    with np.errstate(divide="ignore"):
        log_ratio = np.log(target[support]) - np.log(pred[support])
    value = float(np.sum(target[support] * log_ratio))
    if not math.isfinite(value):
        raise NonFiniteError("semantic consistency loss underflowed; lower the temperatures")

    g_dist = -tau_mu * (pred - target) * off
    g_sym = g_dist + g_dist.T
    g_mu = np.sum((g_sym / root)[:, :, None] * diff, axis=1)
    grads = {"enc_weight": s.T @ g_mu, "enc_bias": g_mu.sum(axis=0)}
    return LossValue(value, grads, {"sc": value})


def total_loss(ce: LossValue, reg: LossValue, sc: LossValue | None, lam: float,
               ce_weight: float = 1.0, reg_weight: float = 1.0) -> LossValue:
    """``ce + reg + lam * sc`` with gradients summed accordingly."""
    if lam < 0:
        raise InvalidParameter(f"lambda must be non-negative, got {lam}")
    terms = [(ce_weight, ce), (reg_weight, reg)]
    if sc is not None:
        terms.append((lam, sc))
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    parts: dict[str, float] = {}
    for weight, term in terms:
        value += weight * term.value
        parts.update(term.parts)
        for key, g in term.grads.items():
            grads[key] = grads[key] + weight * g if key in grads else weight * g
    parts["total"] = value
    return LossValue(value, grads, parts)


def flatten(arrays: dict[str, np.ndarray]):
    """Concatenate named arrays into one vector; returns ``(vector, layout)``."""
    layout = [(k, np.shape(a)) for k, a in arrays.items()]
    vec = np.concatenate([np.ravel(np.asarray(a, dtype=np.float64)) for a in arrays.values()]) \
        if arrays else np.zeros(0)
    return vec, layout


def unflatten(vec: np.ndarray, layout) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for key, shape in layout:
        size = int(np.prod(shape, dtype=np.int64))
        out[key] = vec[pos:pos + size].reshape(shape)
        pos += size
    return out


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5,
                       coords=None) -> np.ndarray:
    """Central differences of ``f`` at ``x`` (optionally only at ``coords``)."""
    x = np.array(x, dtype=np.float64)
    grad = np.full(x.size, np.nan)
    idx = range(x.size) if coords is None else coords
    for i in idx:
        old = x.flat[i]
        x.flat[i] = old + eps
        fp = f(x)
        x.flat[i] = old - eps
        fm = f(x)
        x.flat[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"loss is non-finite while probing coordinate {i}")
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def grad_check(loss: Callable[[np.ndarray], tuple[float, np.ndarray]], params, eps: float = 1e-5,
               coords=None, abs_floor: float = 1e-5) -> float:
    """Worst relative error between the analytic and central-difference gradient.

    ``loss(x)`` returns ``(value, gradient)`` for a flat parameter vector.
    The relative error of each coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``;
    the floor keeps round-off in gradients that are exactly zero (for example
    translation-invariant directions) from reading as a large relative error.
    """
    if not eps > 0:
        raise InvalidParameter(f"finite-difference step must be positive, got {eps}")
    x = np.array(params, dtype=np.float64).ravel()
    value, analytic = loss(x)
    if not math.isfinite(value):
        raise NonFiniteError("loss is non-finite at the probe point")
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = numerical_gradient(lambda z: loss(z)[0], x, eps, coords)
    idx = np.arange(x.size) if coords is None else np.asarray(list(coords))
    a, n = analytic[idx], numeric[idx]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), abs_floor)
    return float(np.max(np.abs(a - n) / denom)) if idx.size else 0.0
