"""Confusion matrices, mIoU / hIoU, seen-bias counters and calibration sweeps."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from joem.data import SplitSpec
from joem.embedding import PrototypeSet
from joem.errors import InvalidInput, InvalidParameter, UndefinedMetric
from joem.formats import atomic_write
from joem.inference import check_prototypes, classify, distances

CURVE_HEADER = ["param", "miou_s", "miou_u", "hiou", "tp_u", "fn_s_to_u"]


class ConfusionMatrix:
    """K x K pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, classes: Iterable[int]):
        self.classes = sorted(int(c) for c in classes)
        if not self.classes:
            raise InvalidInput("confusion matrix needs at least one class")
        self._index = {c: i for i, c in enumerate(self.classes)}
        self.counts = np.zeros((len(self.classes), len(self.classes)), dtype=np.int64)

    def _positions(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids).ravel()
        lut = np.asarray(self.classes)
        pos = np.searchsorted(lut, ids)
        pos = np.minimum(pos, len(lut) - 1)
        bad = lut[pos] != ids
        if bad.any():
            raise InvalidInput(f"class id {int(ids[bad][0])} is outside the class universe")
        return pos

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise InvalidInput(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        k = len(self.classes)
        flat = self._positions(gt) * k + self._positions(pred)
        self.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
        return self

    def count(self, gt_class: int, pred_class: int) -> int:
        return int(self.counts[self._index[gt_class], self._index[pred_class]])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> dict[int, float]:
        """Per-class IoU; classes whose union is empty map to NaN."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            vals = np.where(union > 0, tp / union, np.nan)
        return {c: float(v) for c, v in zip(self.classes, vals)}


def accumulate(conf: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return conf.accumulate(pred, gt)


def miou(conf: ConfusionMatrix, classes: Iterable[int]) -> float:
    """Mean IoU over ``classes``, skipping classes with an empty union."""
    classes = list(classes)
    if not classes:
        raise InvalidInput("mIoU over an empty class set")
    ious = conf.iou()
    vals = [ious[int(c)] for c in classes if not math.isnan(ious[int(c)])]
    if not vals:
        raise UndefinedMetric("every requested class has an empty union")
    return float(np.mean(vals))


def hiou(miou_s: float, miou_u: float) -> float:
    if miou_s < 0 or miou_u < 0:
        raise InvalidParameter("mIoU values must be non-negative")
    if miou_s == 0 or miou_u == 0:
        return 0.0
    return 2.0 * miou_s * miou_u / (miou_s + miou_u)


def bias_counters(conf: ConfusionMatrix, split: SplitSpec) -> tuple[int, int]:
    """``(TP_U, FN_S->U)``: unseen true positives, seen pixels predicted unseen."""
    unseen = [conf._index[c] for c in split.unseen_sorted if c in conf._index]
    seen = [conf._index[c] for c in split.seen_sorted if c in conf._index]
    tp_u = int(sum(conf.counts[i, i] for i in unseen))
    fn = int(conf.counts[np.ix_(seen, unseen)].sum()) if seen and unseen else 0
    return tp_u, fn


@dataclass
class MetricReport:
    iou: dict
    miou_s: float
    miou_u: float
    hiou: float
    tp_u: int
    fn_s_to_u: int

    @classmethod
    def from_confusion(cls, conf: ConfusionMatrix, split: SplitSpec) -> "MetricReport":
        ms = _miou_or_zero(conf, split.seen_sorted)
        mu = _miou_or_zero(conf, split.unseen_sorted)
        tp_u, fn = bias_counters(conf, split)
        return cls(conf.iou(), ms, mu, hiou(ms, mu), tp_u, fn)

    def summary(self) -> str:
        return (f"mIoU_S {100 * self.miou_s:.1f}  mIoU_U {100 * self.miou_u:.1f}  "
                f"hIoU {100 * self.hiou:.1f}  TP_U {self.tp_u}  FN_S->U {self.fn_s_to_u}")

    def as_row(self, param) -> list:
        return [param, self.miou_s, self.miou_u, self.hiou, self.tp_u, self.fn_s_to_u]


def _miou_or_zero(conf, classes):
    try:
        return miou(conf, classes)
    except UndefinedMetric:
        return 0.0


def evaluate_predictions(preds: Sequence, gts: Sequence, split: SplitSpec) -> MetricReport:
    conf = ConfusionMatrix(split.all_classes)
    for p, g in zip(preds, gts):
        conf.accumulate(p, g)
    return MetricReport.from_confusion(conf, split)


def validate_grid(rule: str, grid: Sequence[float]) -> list[float]:
    grid = [float(g) for g in grid]
    if not grid:
        raise InvalidParameter("sweep grid is empty")
    for g in grid:
        if not math.isfinite(g):
            raise InvalidParameter(f"non-finite grid value {g}")
        if rule == "ac" and not 0 < g <= 1:
            raise InvalidParameter(f"sigma grid value {g} outside (0, 1]")
    if rule not in ("cs", "ac"):
        raise InvalidParameter(f"sweeps need rule 'cs' or 'ac', got {rule!r}")
    return grid


def sweep(features: Sequence[np.ndarray], gts: Sequence[np.ndarray], protos: PrototypeSet,
          split: SplitSpec, rule: str, grid: Sequence[float]) -> list[tuple[float, MetricReport]]:
    """Metrics of a calibrated rule at every grid value.

    Distances to the prototypes are computed once and shared by all points.
    """
    grid = validate_grid(rule, grid)
    check_prototypes(protos)
    dists = [distances(v, protos) for v in features]
    out = []
    for g in grid:
        preds = [classify(rule, None, protos, split, g, dist=d) for d in dists]
        out.append((g, evaluate_predictions(preds, gts, split)))
    return out


def sigma_grid(step: float = 0.05) -> list[float]:
    """(0, 1] with the given step, ending exactly at 1."""
    n = int(round(1.0 / step))
    return [round(step * i, 10) for i in range(1, n + 1)]


def gamma_grid(stop: float = 12.0, step: float = 0.5) -> list[float]:
    n = int(math.floor(stop / step + 1e-9))
    return [round(step * i, 10) for i in range(n + 1)]


def max_distance_span(features: Sequence[np.ndarray], protos: PrototypeSet) -> float:
    """Largest ``max_c d - min_c d`` over all pixels; a gamma above it forces unseen labels."""
    span = 0.0
    for v in features:
        d = distances(v, protos)
        span = max(span, float(np.max(d.max(axis=-1) - d.min(axis=-1))))
    return span


def curve_csv(points: Sequence[tuple[float, MetricReport]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_HEADER)
    for param, rep in points:
        writer.writerow([repr(float(param)), repr(rep.miou_s), repr(rep.miou_u), repr(rep.hiou),
                         rep.tp_u, rep.fn_s_to_u])
    return buf.getvalue()


def write_curve(path, points) -> None:
    with atomic_write(path, "w") as fh:
        fh.write(curve_csv(points))


def read_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CURVE_HEADER:
            raise InvalidInput(f"{path}: unexpected header {reader.fieldnames}")
        return [{"param": float(r["param"]), "miou_s": float(r["miou_s"]),
                 "miou_u": float(r["miou_u"]), "hiou": float(r["hiou"]),
                 "tp_u": int(r["tp_u"]), "fn_s_to_u": int(r["fn_s_to_u"])} for r in reader]


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation across runs (std 0 for a single run)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InvalidInput("no values to aggregate")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std
