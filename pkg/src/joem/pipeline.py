"""Glue between trained parameters, datasets and the decision rules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from joem.data import Sample, SplitSpec
from joem.embedding import PrototypeSet, SemanticTable, encode_prototype_set
from joem.evaluate import MetricReport, evaluate_predictions, max_distance_span, sigma_grid, sweep
from joem.inference import classify, upsample_features
from joem.model import ModelParams


def prototypes(params: ModelParams, table: SemanticTable, split: SplitSpec) -> PrototypeSet:
    """Prototypes of every seen and unseen class; no retraining involved."""
    return encode_prototype_set(params.encoder, table, split.all_classes)


def image_features(params: ModelParams, samples: Sequence[Sample]) -> list[np.ndarray]:
    """Visual features upsampled to each image's resolution."""
    out = []
    for s in samples:
        v = params.features(s.image)
        out.append(upsample_features(v, *s.image.shape[:2]))
    return out


def predict(params: ModelParams, table: SemanticTable, split: SplitSpec, samples: Sequence[Sample],
            rule: str = "nn", param: float | None = None) -> list[np.ndarray]:
    protos = prototypes(params, table, split)
    return [classify(rule, v, protos, split, param) for v in image_features(params, samples)]


@dataclass
class RuleScores:
    nn: MetricReport
    cs: MetricReport
    cs_param: float
    ac: MetricReport
    ac_param: float


def best_point(points):
    """Grid point with the highest hIoU; the earliest one wins ties."""
    best = points[0]
    for p in points[1:]:
        if p[1].hiou > best[1].hiou:
            best = p
    return best


def cs_auto_grid(features, protos, n: int = 49) -> list[float]:
    """Evenly spaced gammas from 0 to just past the largest distance span."""
    span = max_distance_span(features, protos)
    return [float(g) for g in np.linspace(0.0, span * 1.02 + 1e-9, n)]


def score_rules(params: ModelParams, table: SemanticTable, split: SplitSpec,
                samples: Sequence[Sample], gammas: Sequence[float] | None = None,
                sigmas: Sequence[float] | None = None) -> RuleScores:
    """Plain NN plus CS and AC at their best swept parameter (by hIoU)."""
    protos = prototypes(params, table, split)
    feats = image_features(params, samples)
    gts = [s.mask for s in samples]
    gammas = cs_auto_grid(feats, protos) if gammas is None else gammas
    sigmas = sigma_grid() if sigmas is None else sigmas
    nn = sweep(feats, gts, protos, split, "ac", [1.0])[0][1]
    cs_param, cs = best_point(sweep(feats, gts, protos, split, "cs", gammas))
    ac_param, ac = best_point(sweep(feats, gts, protos, split, "ac", sigmas))
    return RuleScores(nn, cs, cs_param, ac, ac_param)


def evaluate_rule(params: ModelParams, table: SemanticTable, split: SplitSpec,
                  samples: Sequence[Sample], rule: str = "nn",
                  param: float | None = None) -> MetricReport:
    preds = predict(params, table, split, samples, rule, param)
    return evaluate_predictions(preds, [s.mask for s in samples], split)

