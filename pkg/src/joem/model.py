"""Visual encoder, optimisers, learning-rate schedule and the joint training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from joem.data import Sample, SplitSpec
from joem.embedding import SemanticEncoderParams, SemanticTable
from joem.errors import InvalidInput, InvalidParameter, NonFiniteError, TrainingDiverged
from joem.losses import ce_loss, regression_loss, sc_loss, semantic_targets, total_loss

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.1


# ---------------------------------------------------------------------------
# visual encoder
# ---------------------------------------------------------------------------

def init_visual(in_channels: int, widths: Sequence[int], out_channels: int,
                rng: np.random.Generator, kernel: int = 3) -> dict[str, np.ndarray]:
    """Conv stack ``in -> widths... -> out`` with uniform fan-in initialisation."""
    params = {}
    chans = [in_channels, *widths, out_channels]
    for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
        bound = math.sqrt(3.0 / (cin * kernel * kernel))
        params[f"conv{i}.weight"] = rng.uniform(-bound, bound, (cout, cin, kernel, kernel))
        params[f"conv{i}.bias"] = np.zeros(cout)
    return params


def _n_layers(params) -> int:
    n = 0
    while f"conv{n}.weight" in params:
        n += 1
    if n == 0:
        raise InvalidInput("visual encoder has no layers")
    return n


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B, H, W, Cin, k, k)
    b, h, w = x.shape[:3]
    return win.reshape(b * h * w, -1)


def _col2im(cols: np.ndarray, shape, k: int) -> np.ndarray:
    b, h, w, cin = shape
    p = k // 2
    cols = cols.reshape(b, h, w, cin, k, k)
    out = np.zeros((b, h + 2 * p, w + 2 * p, cin))
    for i in range(k):
        for j in range(k):
            out[:, i:i + h, j:j + w, :] += cols[..., i, j]
    return out[:, p:p + h, p:p + w, :]


def visual_forward_batch(params: dict, x: np.ndarray, keep_cache: bool = False):
    """Forward pass on a ``(B, H, W, Cin)`` batch; returns ``(features, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    n = _n_layers(params)
    cache = []
    h = x
    for i in range(n):
        weight = params[f"conv{i}.weight"]
        cout, cin, k, _ = weight.shape
        if h.shape[-1] != cin:
            raise InvalidInput(f"layer {i} expects {cin} channels, got {h.shape[-1]}")
        cols = _im2col(h, k)
        pre = (cols @ weight.reshape(cout, -1).T + params[f"conv{i}.bias"]).reshape(h.shape[:3] + (cout,))
        if keep_cache:
            cache.append((cols, h.shape, pre))
        h = pre if i == n - 1 else np.where(pre > 0, pre, LEAKY_SLOPE * pre)
    return h, cache


def visual_backward(params: dict, cache, g_out: np.ndarray) -> dict[str, np.ndarray]:
    n = _n_layers(params)
    grads = {}
    g = g_out
    for i in reversed(range(n)):
        cols, in_shape, pre = cache[i]
        if i != n - 1:
            g = g * np.where(pre > 0, 1.0, LEAKY_SLOPE)
        weight = params[f"conv{i}.weight"]
        cout, _, k, _ = weight.shape
        gm = g.reshape(-1, cout)
        grads[f"conv{i}.weight"] = (gm.T @ cols).reshape(weight.shape)
        grads[f"conv{i}.bias"] = gm.sum(axis=0)
        if i > 0:
            g = _col2im(gm @ weight.reshape(cout, -1), in_shape, k)
    return grads


def visual_forward(params: dict, image) -> np.ndarray:
    """Feature map ``(H, W, C)`` for one ``(H, W, Cin)`` image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise InvalidInput(f"image must be (H, W, C), got shape {image.shape}")
    return visual_forward_batch(params, image[None])[0][0]


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    step: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)


def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"gradient of {name!r} has {bad} non-finite entries")


def sgd_step(params: dict, grads: dict, state: OptimizerState, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0):
    """Momentum SGD with L2 weight decay added to the gradient."""
    _check_finite(grads)
    new_params, buffers = {}, {}
    for name, p in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p
        buf = state.buffers.get(name)
        buf = g if buf is None else momentum * buf + g
        buffers[name] = buf
        new_params[name] = p - lr * buf
    return new_params, OptimizerState(state.step + 1, buffers)


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8):
    _check_finite(grads)
    b1, b2 = betas
    t = state.step + 1
    new_params, m_all, v_all = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.buffers.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.second.get(name, 0.0) + (1 - b2) * g * g
        m_all[name], v_all[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, OptimizerState(t, m_all, v_all)


def poly_lr(base_lr: float, it: int, max_iter: int, power: float = 0.9) -> float:
    if max_iter <= 0:
        return base_lr
    frac = min(max(it / max_iter, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lam: float = 0.1
    r: int = 4
    tau_s: float = 5.0
    tau_mu: float = 1.0
    epochs: int = 30
    batch_size: int = 8
    lr_visual: float = 0.05
    lr_semantic: float = 0.01
    weight_decay: float = 1e-4
    momentum: float = 0.9
    poly_power: float = 0.9
    seed: int = 0
    embed_dim: int = 16
    hidden: tuple = (16, 16)
    ce_weight: float = 1.0
    reg_weight: float = 1.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        positive = ["r", "tau_s", "tau_mu", "batch_size", "lr_visual", "lr_semantic", "embed_dim"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidParameter(f"{name} must be positive, got {getattr(self, name)}")
        for name in ["lam", "epochs", "weight_decay", "momentum", "poly_power",
                     "ce_weight", "reg_weight"]:
            if getattr(self, name) < 0:
                raise InvalidParameter(f"{name} must be non-negative, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class ModelParams:
    visual: dict[str, np.ndarray]
    classifier: np.ndarray  # (|S|, C), rows in ascending seen id
    encoder: SemanticEncoderParams

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {f"visual.{k}": v for k, v in self.visual.items()}
        out["classifier.weight"] = self.classifier
        out["encoder.weight"] = self.encoder.weight
        out["encoder.bias"] = self.encoder.bias
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "ModelParams":
        try:
            visual = {k[len("visual."):]: v for k, v in tensors.items() if k.startswith("visual.")}
            return cls(visual, tensors["classifier.weight"],
                       SemanticEncoderParams(tensors["encoder.weight"], tensors["encoder.bias"]))
        except KeyError as exc:
            raise InvalidInput(f"checkpoint lacks tensor {exc}") from None

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.visual.items()},
                           self.classifier.copy(), self.encoder.copy())

    def features(self, image) -> np.ndarray:
        return visual_forward(self.visual, image)


def init_model(config: TrainConfig, in_channels: int, sem_dim: int, n_seen: int) -> ModelParams:
    rng = np.random.default_rng(config.seed)
    visual = init_visual(in_channels, config.hidden, config.embed_dim, rng)
    bound = 1.0 / math.sqrt(config.embed_dim)
    classifier = rng.uniform(-bound, bound, (n_seen, config.embed_dim))
    encoder = SemanticEncoderParams.init(sem_dim, config.embed_dim, rng)
    return ModelParams(visual, classifier, encoder)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)


def _seen_nn_hits(v, y, protos: np.ndarray, seen: np.ndarray):
    feats = v.reshape(-1, v.shape[-1])
    d = np.sum((feats[:, None, :] - protos[None]) ** 2, axis=-1)
    pred = seen[np.argmin(d, axis=1)]
    return int(np.sum(pred == y.reshape(-1))), feats.shape[0]


def train(config: TrainConfig, dataset: Sequence[Sample], table: SemanticTable, split: SplitSpec,
          init: ModelParams | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Jointly train the visual and semantic encoders on seen classes.

    The visual encoder and classifier follow momentum SGD, the semantic
    encoder Adam; both learning rates follow the poly schedule. Only seen
    class vectors are ever read from ``table``.
    """
    seen = np.array(split.seen_sorted)
    for i, sample in enumerate(dataset):
        bad = sorted(set(np.unique(sample.mask).tolist()) - split.seen)
        if bad:
            raise InvalidInput(f"training sample {i} contains non-seen class ids {bad}")
    if dataset:
        present = set().union(*(np.unique(s.mask).tolist() for s in dataset))
        if len(present) < 2:
            log.warning("training masks contain a single class %s; CE carries no signal", present)

    in_ch = dataset[0].image.shape[-1] if dataset else 1
    params = init.copy() if init is not None else init_model(config, in_ch, table.dim, len(seen))
    history: list[dict] = []
    if config.epochs == 0 or not dataset:
        return TrainResult(params, history)

    images = np.stack([s.image for s in dataset])
    masks = np.stack([s.mask for s in dataset])
    targets = semantic_targets(masks, table, split, config.r)
    seen_vectors = table.matrix(seen)

    rng = np.random.default_rng([config.seed, 1])
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    max_iter = steps_per_epoch * config.epochs
    sgd_state, adam_state = OptimizerState(), OptimizerState()
    it = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        sums = {"ce": 0.0, "reg": 0.0, "sc": 0.0, "total": 0.0}
        hits = count = 0
        for start in range(0, len(dataset), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            x, y, s_map = images[idx], masks[idx], targets[idx]
            v, cache = visual_forward_batch(params.visual, x, keep_cache=True)

            ce = ce_loss(v, params.classifier, y, split)
            reg = regression_loss(v, y, s_map, params.encoder, split)
            sc = sc_loss(table, params.encoder, split, config.tau_s, config.tau_mu)
            loss = total_loss(ce, reg, sc, config.lam, config.ce_weight, config.reg_weight)
            if not math.isfinite(loss.value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {it}",
                                       params.copy(), epoch, it)

            protos = seen_vectors @ params.encoder.weight + params.encoder.bias
            h, c = _seen_nn_hits(v, y, protos, seen)
            hits += h
            count += c

            g_visual = visual_backward(params.visual, cache, loss.grads["v"])
            g_visual["classifier"] = loss.grads["w"]
            lr_v = poly_lr(config.lr_visual, it, max_iter, config.poly_power)
            lr_s = poly_lr(config.lr_semantic, it, max_iter, config.poly_power)
            try:
                new_visual, sgd_state = sgd_step({**params.visual, "classifier": params.classifier},
                                                 g_visual, sgd_state, lr_v, config.momentum,
                                                 config.weight_decay)
                enc_p = {"weight": params.encoder.weight, "bias": params.encoder.bias}
                enc_g = {"weight": loss.grads["enc_weight"], "bias": loss.grads["enc_bias"]}
                new_enc, adam_state = adam_step(enc_p, enc_g, adam_state, lr_s)
            except NonFiniteError as exc:
                raise TrainingDiverged(str(exc), params.copy(), epoch, it) from exc
            classifier = new_visual.pop("classifier")
            params = ModelParams(new_visual, classifier,
                                 SemanticEncoderParams(new_enc["weight"], new_enc["bias"]))
            it += 1

            n_batch = len(idx)
            sums["ce"] += ce.value * n_batch
            sums["reg"] += reg.value * n_batch
            sums["sc"] += sc.value * n_batch
            sums["total"] += loss.value * n_batch

        row = {"epoch": epoch + 1}
        row.update({k: v / len(dataset) for k, v in sums.items()})
        row["seen_acc"] = hits / count
        history.append(row)
        log.info("epoch %d ce=%.4f reg=%.4f sc=%.4f total=%.4f seen_acc=%.3f", row["epoch"],
                 row["ce"], row["reg"], row["sc"], row["total"], row["seen_acc"])
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(params, history)
