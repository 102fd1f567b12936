"""Prototype nearest-neighbour classification and its calibrated variants.

Ties (equal distances or equal calibrated scores) go to the smallest class
id. Prototype sets are kept sorted by class id, so a stable sort or a
first-occurrence ``argmin`` implements that rule directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from joem.data import SplitSpec
from joem.embedding import PrototypeSet
from joem.errors import DegenerateInput, InvalidInput, InvalidParameter
from joem.resample import as_feature_map, resize_bilinear


@dataclass
class NearestTwo:
    first: np.ndarray  # class ids, (H, W)
    second: np.ndarray
    d1: np.ndarray
    d2: np.ndarray


@dataclass
class Circle:
    center: np.ndarray
    radius: float

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.linalg.norm(x - self.center, axis=-1) <= self.radius


def upsample_features(v, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsampling of a feature map to the image resolution."""
    v = as_feature_map(v)
    if out_h < v.shape[0] or out_w < v.shape[1]:
        raise InvalidParameter(
            f"target size {out_h}x{out_w} is smaller than the feature map {v.shape[:2]}")
    return resize_bilinear(v, out_h, out_w)


def check_prototypes(protos: PrototypeSet, minimum: int = 2) -> None:
    if len(protos) < minimum:
        raise InvalidInput(f"need at least {minimum} prototypes, got {len(protos)}")
    uniq = np.unique(protos.vectors, axis=0)
    if len(uniq) != len(protos):
        raise DegenerateInput("two classes share the same prototype vector")


def distances(v, protos: PrototypeSet) -> np.ndarray:
    """Euclidean distances ``(..., K)`` from every feature to every prototype."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != protos.dim:
        raise InvalidInput(f"features have {v.shape[-1]} channels, prototypes {protos.dim}")
    diff = v[..., None, :] - protos.vectors
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _lead(dist):
    """Indices of the nearest and runner-up prototypes, smallest id on ties."""
    order = np.argsort(dist, axis=-1, kind="stable")
    return order[..., 0], order[..., 1]


def nearest_two(v, protos: PrototypeSet, dist: np.ndarray | None = None) -> NearestTwo:
    check_prototypes(protos)
    dist = distances(v, protos) if dist is None else dist
    i1, i2 = _lead(dist)
    d1 = np.take_along_axis(dist, i1[..., None], axis=-1)[..., 0]
    d2 = np.take_along_axis(dist, i2[..., None], axis=-1)[..., 0]
    return NearestTwo(protos.ids[i1], protos.ids[i2], d1, d2)


def nn_classify(v, protos: PrototypeSet, dist: np.ndarray | None = None) -> np.ndarray:
    check_prototypes(protos)
    dist = distances(v, protos) if dist is None else dist
    return protos.ids[np.argmin(dist, axis=-1)]


def cs_classify(v, protos: PrototypeSet, split: SplitSpec, gamma: float,
                dist: np.ndarray | None = None) -> np.ndarray:
    """Calibrated stacking: unseen-class distances are reduced by ``gamma``."""
    if not np.isfinite(gamma):
        raise InvalidParameter(f"gamma must be finite, got {gamma}")
    check_prototypes(protos)
    dist = distances(v, protos) if dist is None else dist
    shift = np.where(split.is_unseen(protos.ids), gamma, 0.0)
    return protos.ids[np.argmin(dist - shift, axis=-1)]


def apollonius_circle(mu_a, mu_b, sigma: float) -> Circle:
    """Locus of points whose distance ratio to ``mu_a`` and ``mu_b`` is ``sigma``."""
    if not 0 < sigma < 1:
        raise InvalidParameter(f"sigma must lie in (0, 1), got {sigma}")
    mu_a = np.asarray(mu_a, dtype=np.float64)
    mu_b = np.asarray(mu_b, dtype=np.float64)
    if mu_a.shape != mu_b.shape:
        raise InvalidInput(f"prototype shapes differ: {mu_a.shape} vs {mu_b.shape}")
    sep = np.linalg.norm(mu_a - mu_b)
    if sep == 0:
        raise DegenerateInput("the two prototypes coincide")
    k = 1.0 - sigma * sigma
    return Circle((mu_a - sigma * sigma * mu_b) / k, float(sigma * sep / k))


def ac_classify(v, protos: PrototypeSet, split: SplitSpec, sigma: float,
                dist: np.ndarray | None = None) -> np.ndarray:
    """Apollonius calibration.

    Where the nearest prototype is seen and the runner-up unseen, keep the
    seen class only if ``d1 / d2 <= sigma``; everywhere else keep the
    nearest class. ``sigma = 1`` is the plain nearest-neighbour rule.
    """
    if not 0 < sigma <= 1:
        raise InvalidParameter(f"sigma must lie in (0, 1], got {sigma}")
    nt = nearest_two(v, protos, dist)
    mixed = ~split.is_unseen(nt.first) & split.is_unseen(nt.second)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = nt.d1 / nt.d2
    flip = mixed & (ratio > sigma)
    return np.where(flip, nt.second, nt.first)


RULES = ("nn", "cs", "ac")


def classify(rule: str, v, protos: PrototypeSet, split: SplitSpec, param: float | None = None,
             dist: np.ndarray | None = None) -> np.ndarray:
    if rule == "nn":
        return nn_classify(v, protos, dist)
    if rule == "cs":
        return cs_classify(v, protos, split, 0.0 if param is None else param, dist)
    if rule == "ac":
        return ac_classify(v, protos, split, 1.0 if param is None else param, dist)
    raise InvalidParameter(f"unknown decision rule {rule!r}; expected one of {RULES}")
