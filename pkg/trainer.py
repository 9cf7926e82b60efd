"""
trainer.py - Desk-scale training of layer-graph models and synthetic leaf data

Training is mini-batch Adam on softmax cross-entropy with early stopping on
validation accuracy. Weight gradients come from a batched reverse pass over
the same layer set the model graph evaluates, with batch-norm in training
mode (batch statistics, running statistics updated by momentum).

The synthetic generator draws leaf images with ground-truth lesion masks:
sparse localized spots, a diffuse chlorosis gradient, or healthy tissue.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

import tensorcore as tc
from errors import DivergenceError, ManifestError, NonFiniteError, ShapeError
from evalkit import AnnotationMask
from netgraph import INPUT_ID, ModelGraph, apply_node, forward_batch

logger = logging.getLogger(__name__)

TRAINABLE_SLOTS = {
    "conv2d": ("kernel", "bias"),
    "dense": ("weight", "bias"),
    "batchnorm": ("gamma", "beta"),
}


# Configuration


class AdamConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class TrainConfig(BaseModel):
    """Training hyper-parameters (loadable from YAML)"""

    model_config = ConfigDict(extra="forbid")

    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    validation_fraction: float = 0.10
    early_stop_patience: int = 20
    seed: int = 0
    adam: AdamConfig = Field(default_factory=AdamConfig)
    resplit_each_epoch: bool = False
    bn_momentum: float = 0.1

    @field_validator("learning_rate")
    @classmethod
    def validate_learning_rate(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("Learning rate must be positive")
        return v

    @field_validator("batch_size")
    @classmethod
    def validate_batch_size(cls, v: int) -> int:
        if v < 1:
            raise ValueError("Batch size must be at least 1")
        return v

    @field_validator("max_epochs")
    @classmethod
    def validate_max_epochs(cls, v: int) -> int:
        if v < 0:
            raise ValueError("max_epochs must be non-negative")
        return v

    @field_validator("validation_fraction")
    @classmethod
    def validate_validation_fraction(cls, v: float) -> float:
        if not 0 < v < 1:
            raise ValueError("Validation fraction must be between 0 and 1")
        return v

    @field_validator("early_stop_patience")
    @classmethod
    def validate_patience(cls, v: int) -> int:
        if v < 1:
            raise ValueError("Patience must be at least 1")
        return v


# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int, dtype=np.float32) -> "AdamState":
        return cls(m=np.zeros(size, dtype), v=np.zeros(size, dtype), t=0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    config: TrainConfig,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update on flat parameter/gradient vectors"""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeError(
            f"Adam shapes disagree: params {params.shape}, grads {grads.shape}, "
            f"state {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise NonFiniteError("Non-finite gradient passed to Adam")
    a = config.adam
    t = state.t + 1
    m = a.beta1 * state.m + (1 - a.beta1) * grads
    v = a.beta2 * state.v + (1 - a.beta2) * grads * grads
    m_hat = m / (1 - a.beta1**t)
    v_hat = v / (1 - a.beta2**t)
    update = config.learning_rate * m_hat / (np.sqrt(v_hat) + a.eps)
    new_params = (params - update).astype(params.dtype)
    return new_params, AdamState(m=m.astype(params.dtype), v=v.astype(params.dtype), t=t)


# Parameter layout


def trainable_names(model: ModelGraph) -> list[str]:
    return [
        f"{n.id}.{slot}" for n in model.nodes for slot in TRAINABLE_SLOTS.get(n.op, ())
    ]


def flatten_params(model: ModelGraph, names: Sequence[str]) -> np.ndarray:
    weights = dict(model.weight_items())
    return np.concatenate([weights[name].ravel() for name in names])


def unflatten_params(
    model: ModelGraph, names: Sequence[str], flat: np.ndarray
) -> dict[str, np.ndarray]:
    weights = dict(model.weight_items())
    out, offset = {}, 0
    for name in names:
        shape = weights[name].shape
        size = int(np.prod(shape))
        out[name] = flat[offset : offset + size].reshape(shape)
        offset += size
    return out


def initialize_weights(model: ModelGraph, seed: int) -> ModelGraph:
    """He-uniform conv/dense weights, zero biases, identity batch-norm"""
    rng = np.random.default_rng(seed)
    dtype = model.dtype
    weights = {}
    for node in model.nodes:
        if node.op in ("conv2d", "dense"):
            slot = "kernel" if node.op == "conv2d" else "weight"
            shape = node.weights[slot].shape
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            weights[f"{node.id}.{slot}"] = rng.uniform(-bound, bound, shape).astype(dtype)
            weights[f"{node.id}.bias"] = np.zeros(shape[0], dtype)
        elif node.op == "batchnorm":
            c = node.weights["gamma"].shape[0]
            weights[f"{node.id}.gamma"] = np.ones(c, dtype)
            weights[f"{node.id}.beta"] = np.zeros(c, dtype)
            weights[f"{node.id}.running_mean"] = np.zeros(c, dtype)
            weights[f"{node.id}.running_var"] = np.ones(c, dtype)
    return model.with_weights(weights)


# Loss and gradients


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits"""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = -float(log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


@dataclass
class _BatchNormCache:
    xhat: np.ndarray
    std: np.ndarray
    axes: tuple[int, ...]


def _forward_train(
    model: ModelGraph, xb: np.ndarray, momentum: float
) -> tuple[dict, dict, dict]:
    """Training-mode pass: returns (values, caches, updated running statistics)"""
    values = {INPUT_ID: xb}
    caches: dict = {}
    running: dict[str, np.ndarray] = {}
    for node in model.nodes:
        args = [values[s] for s in node.inputs]
        if node.op == "batchnorm":
            x = args[0]
            axes = (0,) + tuple(range(2, x.ndim))
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            eps = float(node.param("epsilon"))
            std = np.sqrt(var + eps)
            xhat = (x - tc.channel_view(mean, x.ndim)) / tc.channel_view(std, x.ndim)
            w = node.weights
            out = xhat * tc.channel_view(w["gamma"], x.ndim) + tc.channel_view(
                w["beta"], x.ndim
            )
            caches[node.id] = _BatchNormCache(xhat, std, axes)
            count = x.size // x.shape[1]
            unbiased = var * count / max(count - 1, 1)
            running[f"{node.id}.running_mean"] = (
                (1 - momentum) * w["running_mean"] + momentum * mean
            ).astype(x.dtype)
            running[f"{node.id}.running_var"] = (
                (1 - momentum) * w["running_var"] + momentum * unbiased
            ).astype(x.dtype)
        else:
            out, caches[node.id] = apply_node(node, args)
        values[node.id] = out
    return values, caches, running


def _backward_train(
    model: ModelGraph, values: dict, caches: dict, grad_logits: np.ndarray
) -> dict[str, np.ndarray]:
    grads = {model.prelogits_id: grad_logits}
    param_grads: dict[str, np.ndarray] = {}
    stop = model.ids().index(model.prelogits_id)

    for node in reversed(model.nodes[: stop + 1]):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        x = values[node.inputs[0]]
        op = node.op
        w = node.weights

        if op == "conv2d":
            stride, padding = int(node.param("stride")), int(node.param("padding"))
            dk, db = tc.conv2d_backward_params(g, x, w["kernel"].shape, stride, padding)
            param_grads[f"{node.id}.kernel"] = dk
            param_grads[f"{node.id}.bias"] = db
            parts = [tc.conv2d_backward_input(g, w["kernel"], x.shape[1:], stride, padding)]
        elif op == "dense":
            flat = x.reshape(x.shape[0], -1)
            param_grads[f"{node.id}.weight"] = g.T @ flat
            param_grads[f"{node.id}.bias"] = g.sum(axis=0)
            parts = [(g @ w["weight"]).reshape(x.shape)]
        elif op == "relu":
            parts = [np.where(caches[node.id], g, 0).astype(g.dtype)]
        elif op == "batchnorm":
            cache = caches.get(node.id)
            if isinstance(cache, _BatchNormCache):
                xhat, axes = cache.xhat, cache.axes
                count = g.size // g.shape[1]
                d_gamma = (g * xhat).sum(axis=axes)
                d_beta = g.sum(axis=axes)
                scale = w["gamma"] / cache.std
                parts = [
                    tc.channel_view(scale / count, g.ndim)
                    * (
                        count * g
                        - tc.channel_view(d_beta, g.ndim)
                        - xhat * tc.channel_view(d_gamma, g.ndim)
                    )
                ]
            else:
                std = np.sqrt(w["running_var"] + float(node.param("epsilon")))
                xhat = (x - tc.channel_view(w["running_mean"], x.ndim)) / tc.channel_view(
                    std, x.ndim
                )
                axes = (0,) + tuple(range(2, x.ndim))
                d_gamma = (g * xhat).sum(axis=axes)
                d_beta = g.sum(axis=axes)
                parts = [g * tc.channel_view(w["gamma"] / std, g.ndim)]
            param_grads[f"{node.id}.gamma"] = d_gamma
            param_grads[f"{node.id}.beta"] = d_beta
        elif op in ("maxpool", "avgpool"):
            kind = "max" if op == "maxpool" else "average"
            parts = [
                tc.pool_backward(
                    g,
                    x.shape[1:],
                    kind,
                    int(node.param("window")),
                    int(node.param("stride")),
                    caches.get(node.id),
                )
            ]
        elif op == "globalavgpool":
            h, wd = x.shape[2:]
            parts = [np.broadcast_to((g / (h * wd))[:, :, None, None], x.shape).copy()]
        elif op == "concat":
            bounds = np.cumsum([values[s].shape[1] for s in node.inputs])[:-1]
            parts = np.split(g, bounds, axis=1)
        else:
            raise ShapeError(f"No training backward rule for node '{node.id}' ({op})")

        for src, part in zip(node.inputs, parts):
            if src == INPUT_ID:
                continue
            grads[src] = grads[src] + part if src in grads else part
    return param_grads


def loss_and_gradients(
    model: ModelGraph,
    images: np.ndarray,
    labels: np.ndarray,
    training: bool = True,
    bn_momentum: float = 0.1,
) -> tuple[float, dict[str, np.ndarray], np.ndarray, dict[str, np.ndarray]]:
    """Cross-entropy on the pre-softmax layer and its weight gradients

    Returns:
        (loss, gradients by "<node>.<slot>", logits, updated running stats);
        running stats are empty when training is False
    """
    xb = np.asarray(images, dtype=model.dtype)
    if training:
        values, caches, running = _forward_train(model, xb, bn_momentum)
    else:
        values, argmax, masks = forward_batch(model, xb)
        values[INPUT_ID] = xb
        caches = {**argmax, **masks}
        running = {}
    logits = values[model.prelogits_id].reshape(xb.shape[0], -1)
    loss, grad_logits = cross_entropy(logits, np.asarray(labels))
    grads = _backward_train(model, values, caches, grad_logits.astype(model.dtype))
    return loss, grads, logits, running


# Training loop


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray
    label: int
    mask: AnnotationMask
    leaf: Optional[np.ndarray] = None
    name: str = ""


@dataclass(eq=False)
class TrainResult:
    model: ModelGraph
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None


def evaluate(
    model: ModelGraph, images: np.ndarray, labels: np.ndarray, batch_size: int = 64
) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) in inference mode"""
    total_loss, correct = 0.0, 0
    n = len(labels)
    for start in range(0, n, batch_size):
        xb = np.asarray(images[start : start + batch_size], dtype=model.dtype)
        yb = np.asarray(labels[start : start + batch_size])
        values, _, _ = forward_batch(model, xb)
        logits = values[model.prelogits_id].reshape(len(yb), -1)
        loss, _ = cross_entropy(logits, yb)
        total_loss += loss * len(yb)
        correct += int((np.argmax(logits, axis=1) == yb).sum())
    return total_loss / n, correct / n


def _split(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val == n:
        logger.warning(
            "Dataset of %d samples is too small to hold out %.0f%%; validating on "
            "the training data",
            n,
            100 * fraction,
        )
        return order, order
    return order[n_val:], order[:n_val]


def train(
    model_template: ModelGraph, dataset: Sequence[Sample], config: TrainConfig
) -> TrainResult:
    """Train from a freshly initialized copy of model_template

    Early stopping restores the weights of the epoch with the best validation
    accuracy (first occurrence on ties).

    Raises:
        DivergenceError: loss became non-finite (carries the epoch index)
    """
    if not dataset:
        raise ValueError("Training dataset is empty")
    images = np.stack([s.image for s in dataset]).astype(model_template.dtype)
    labels = np.array([s.label for s in dataset], dtype=np.intp)
    num_classes = int(np.prod(model_template.shapes[model_template.prelogits_id]))
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"Labels must be in [0, {num_classes})")

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, split_rng, order_rng = (np.random.default_rng(s) for s in seeds)
    model = initialize_weights(model_template, int(init_rng.integers(2**31)))
    if config.max_epochs == 0:
        return TrainResult(model=model)

    names = trainable_names(model)
    params = flatten_params(model, names)
    state = AdamState.zeros(params.size, params.dtype)
    train_idx, val_idx = _split(len(labels), config.validation_fraction, split_rng)

    history: list[EpochRecord] = []
    best_acc, best_model, best_epoch, stale = -1.0, model, None, 0

    for epoch in range(1, config.max_epochs + 1):
        if config.resplit_each_epoch and epoch > 1:
            train_idx, val_idx = _split(len(labels), config.validation_fraction, split_rng)
        order = order_rng.permutation(train_idx)
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            try:
                loss, grads, logits, running = loss_and_gradients(
                    model, images[batch], labels[batch], True, config.bn_momentum
                )
                if not np.isfinite(loss):
                    raise DivergenceError(epoch)
                flat_grads = np.concatenate([grads[name].ravel() for name in names])
                params, state = adam_step(
                    params, flat_grads.astype(params.dtype), state, config
                )
            except NonFiniteError as e:
                raise DivergenceError(epoch, str(e)) from e
            model = model.with_weights({**unflatten_params(model, names, params), **running})
            loss_sum += loss * len(batch)
            correct += int((np.argmax(logits, axis=1) == labels[batch]).sum())

        try:
            val_loss, val_acc = evaluate(model, images[val_idx], labels[val_idx])
        except NonFiniteError as e:
            raise DivergenceError(epoch, f"non-finite activation at '{e.node_id}'") from e
        if not np.isfinite(val_loss):
            raise DivergenceError(epoch, "non-finite validation loss")
        record = EpochRecord(
            epoch, loss_sum / len(order), correct / len(order), val_loss, val_acc
        )
        history.append(record)
        logger.info(
            "epoch %d: train_loss=%.4f train_acc=%.3f val_loss=%.4f val_acc=%.3f",
            *(record.epoch, record.train_loss, record.train_acc, val_loss, val_acc),
        )

        if val_acc > best_acc:
            best_acc, best_model, best_epoch, stale = val_acc, model, epoch, 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                logger.info("Early stopping at epoch %d (best %d)", epoch, best_epoch)
                break

    return TrainResult(model=best_model, history=history, best_epoch=best_epoch)


def write_history(history: Sequence[EpochRecord], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for r in history:
            writer.writerow(
                [
                    r.epoch,
                    f"{r.train_loss:.6f}",
                    f"{r.train_acc:.6f}",
                    f"{r.val_loss:.6f}",
                    f"{r.val_acc:.6f}",
                ]
            )


# Synthetic leaf images

Color = tuple[float, float, float]


class ColorParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    background: Color = (0.16, 0.14, 0.12)
    leaf: Color = (0.22, 0.55, 0.18)
    lesion: Color = (0.62, 0.40, 0.16)
    noise: float = 0.02


class SyntheticClass(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    pattern: Literal["localized_spots", "diffuse_gradient", "healthy"]
    spot_count_range: tuple[int, int] = (3, 5)
    spot_radius_range: tuple[float, float] = (1.5, 3.0)
    color_params: ColorParams = Field(default_factory=ColorParams)

    @model_validator(mode="after")
    def validate_ranges(self) -> "SyntheticClass":
        lo, hi = self.spot_count_range
        if lo < 1 or hi < lo:
            raise ValueError("spot_count_range must satisfy 1 <= low <= high")
        rlo, rhi = self.spot_radius_range
        if rlo < 1.0 or rhi < rlo:
            raise ValueError("spot_radius_range must satisfy 1 <= low <= high")
        return self


class SyntheticDatasetSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    classes: list[SyntheticClass] = Field(min_length=1)
    image_size: int = 32
    samples_per_class: int = 60
    seed: int = 0

    @field_validator("image_size")
    @classmethod
    def validate_image_size(cls, v: int) -> int:
        if v < 12:
            raise ValueError("Image size must be at least 12 pixels")
        return v

    @field_validator("samples_per_class")
    @classmethod
    def validate_samples(cls, v: int) -> int:
        if v < 1:
            raise ValueError("samples_per_class must be positive")
        return v


CHLOROSIS = ColorParams(lesion=(0.82, 0.76, 0.22))

PRESETS: dict[str, list[SyntheticClass]] = {
    "three-class": [
        SyntheticClass(name="spots", pattern="localized_spots"),
        SyntheticClass(name="chlorosis", pattern="diffuse_gradient", color_params=CHLOROSIS),
        SyntheticClass(name="healthy", pattern="healthy"),
    ],
    # Two spot diseases with overlapping size and colour
    "confounded": [
        SyntheticClass(name="blight", pattern="localized_spots", spot_radius_range=(2.0, 3.0)),
        SyntheticClass(
            name="pustule",
            pattern="localized_spots",
            spot_count_range=(4, 6),
            spot_radius_range=(1.5, 2.5),
            color_params=ColorParams(lesion=(0.58, 0.42, 0.20)),
        ),
        SyntheticClass(name="chlorosis", pattern="diffuse_gradient", color_params=CHLOROSIS),
        SyntheticClass(name="healthy", pattern="healthy"),
    ],
}


def preset_spec(name: str, **overrides) -> SyntheticDatasetSpec:
    if name not in PRESETS:
        raise ValueError(f"Unknown preset '{name}'. Valid presets: {', '.join(PRESETS)}")
    return SyntheticDatasetSpec(classes=PRESETS[name], **overrides)


def _leaf_shape(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = (size - 1) / 2 + rng.uniform(-1, 1, 2)
    a = size * rng.uniform(0.40, 0.46)
    b = size * rng.uniform(0.28, 0.34)
    theta = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _place_spots(
    leaf: np.ndarray, cls: SyntheticClass, rng: np.random.Generator
) -> np.ndarray:
    """Union of disjoint discs fully inside the leaf, separated by >= 2 px"""
    size = leaf.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(100):
        count = int(rng.integers(cls.spot_count_range[0], cls.spot_count_range[1] + 1))
        spots: list[tuple[float, float, float]] = []
        mask = np.zeros_like(leaf)
        for _ in range(200 * count):
            if len(spots) == count:
                break
            r = rng.uniform(*cls.spot_radius_range)
            cy, cx = rng.uniform(0, size - 1, 2)
            disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            if not disc.any() or (disc & ~leaf).any():
                continue
            if any(np.hypot(cy - sy, cx - sx) < r + sr + 2 for sy, sx, sr in spots):
                continue
            spots.append((cy, cx, r))
            mask |= disc
        if len(spots) == count:
            return mask
    raise ValueError(
        f"Cannot fit {cls.spot_count_range} spots of radius {cls.spot_radius_range} "
        f"on a {size}px leaf"
    )


def _chlorosis_weight(leaf: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Yellowing strength per pixel: 0 ahead of the chlorotic front, >= 0.15 behind it"""
    size = leaf.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, 2 * np.pi)
    t = ((xx - size / 2) * np.cos(theta) + (yy - size / 2) * np.sin(theta)) / size + 0.5
    onset = rng.uniform(0.2, 0.4)
    ramp = np.clip((t - onset) / (1 - onset), 0, 1)
    return np.where(ramp > 0, 0.15 + 0.85 * ramp, 0.0) * leaf


def _draw_sample(
    cls: SyntheticClass, label: int, size: int, rng: np.random.Generator, name: str
) -> Sample:
    colors = cls.color_params
    leaf = _leaf_shape(size, rng)
    rgb = np.empty((size, size, 3), dtype=np.float64)
    rgb[:] = colors.background
    rgb[leaf] = colors.leaf

    if cls.pattern == "localized_spots":
        lesion = _place_spots(leaf, cls, rng)
        rgb[lesion] = colors.lesion
    elif cls.pattern == "diffuse_gradient":
        w = _chlorosis_weight(leaf, rng)[..., None]
        rgb = np.where(
            leaf[..., None], (1 - w) * np.array(colors.leaf) + w * np.array(colors.lesion), rgb
        )
        lesion = leaf & (w[..., 0] > 0)
    else:
        lesion = np.zeros_like(leaf)

    rgb = np.clip(rgb + rng.normal(0, colors.noise, rgb.shape), 0, 1)
    image = rgb.transpose(2, 0, 1).astype(np.float32)
    return Sample(
        image=tc.freeze(image),
        label=label,
        mask=AnnotationMask(lesion, "synthetic"),
        leaf=leaf,
        name=name,
    )


def generate_synthetic(spec: SyntheticDatasetSpec) -> list[Sample]:
    """Class-balanced synthetic dataset, a pure function of the spec and seed

    Sample j of class i is drawn from its own generator seeded with
    (seed, i, j), so samples are independent of generation order.
    """
    samples = []
    for label, cls in enumerate(spec.classes):
        for j in range(spec.samples_per_class):
            rng = np.random.default_rng([spec.seed, label, j])
            samples.append(
                _draw_sample(cls, label, spec.image_size, rng, f"{cls.name}_{j:04d}")
            )
    logger.debug("Generated %d synthetic samples", len(samples))
    return samples


# Manifests

# image_path,label[,mask_path[,leaf_path]]; paths relative to the manifest


@dataclass(frozen=True)
class ManifestRow:
    image_path: Path
    label: Optional[int]
    mask_path: Optional[Path] = None
    leaf_path: Optional[Path] = None


def _save_bool_png(grid: np.ndarray, path: Path) -> None:
    Image.fromarray(np.where(grid, 255, 0).astype(np.uint8)).save(path, format="PNG")


def write_dataset(
    samples: Sequence[Sample],
    out_dir: Union[str, Path],
    class_names: Sequence[str],
    test_fraction: float = 0.10,
    seed: int = 0,
) -> tuple[Path, Path]:
    """Write PNGs plus train.csv/test.csv manifests with a per-class test split"""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    (out / "leaves").mkdir(exist_ok=True)

    rng = np.random.default_rng(seed)
    test_names: set[str] = set()
    for label in range(len(class_names)):
        members = [s.name for s in samples if s.label == label]
        n_test = int(round(test_fraction * len(members)))
        picked = rng.permutation(len(members))[:n_test]
        test_names.update(members[i] for i in picked)

    rows = {"train": [], "test": []}
    for s in samples:
        img_rel = Path("images") / f"{s.name}.png"
        mask_rel = Path("masks") / f"{s.name}.png"
        leaf_rel = Path("leaves") / f"{s.name}.png"
        arr = np.round(np.clip(s.image, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(arr).save(out / img_rel, format="PNG")
        _save_bool_png(s.mask.grid, out / mask_rel)
        row = [img_rel.as_posix(), s.label, mask_rel.as_posix()]
        if s.leaf is not None:
            _save_bool_png(s.leaf, out / leaf_rel)
            row.append(leaf_rel.as_posix())
        rows["test" if s.name in test_names else "train"].append(row)

    (out / "classes.txt").write_text("\n".join(class_names) + "\n", encoding="utf-8")
    paths = []
    for split in ("train", "test"):
        path = out / f"{split}.csv"
        with open(path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f).writerows(rows[split])
        paths.append(path)
    logger.info("Wrote %d train / %d test samples to %s", len(rows["train"]), len(rows["test"]), out)
    return paths[0], paths[1]


def read_manifest(path: Union[str, Path]) -> list[ManifestRow]:
    """Parse a dataset manifest; an empty label field means "unlabeled"

    Raises:
        ManifestError: malformed rows (listed by 1-based line number)
    """
    path = Path(path)
    base = path.parent
    rows, bad = [], []
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, fields in enumerate(csv.reader(f), start=1):
            if not fields or fields[0].startswith("#"):
                continue
            if fields[0] == "image_path":
                continue
            try:
                label = int(fields[1]) if len(fields) > 1 and fields[1] != "" else None
            except ValueError:
                bad.append(lineno)
                continue
            if len(fields) > 4 or (label is not None and label < 0):
                bad.append(lineno)
                continue
            extra = [base / p if p else None for p in fields[2:4]]
            extra += [None] * (2 - len(extra))
            rows.append(ManifestRow(base / fields[0], label, extra[0], extra[1]))
    if bad:
        raise ManifestError(f"Malformed manifest {path}", bad)
    return rows


def read_class_names(manifest: Union[str, Path]) -> Optional[list[str]]:
    path = Path(manifest).parent / "classes.txt"
    if not path.exists():
        return None
    return [line for line in path.read_text(encoding="utf-8").splitlines() if line]


def load_image(path: Union[str, Path]) -> np.ndarray:
    """8-bit RGB PNG -> [3,H,W] float32 in [0,1]"""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return tc.freeze(arr.transpose(2, 0, 1))


def _load_bool(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 127


def load_sample(row: ManifestRow) -> Sample:
    image = load_image(row.image_path)
    if row.mask_path is not None:
        mask = AnnotationMask(_load_bool(row.mask_path), "synthetic")
    else:
        mask = AnnotationMask(np.zeros(image.shape[1:], dtype=bool), "synthetic")
    leaf = _load_bool(row.leaf_path) if row.leaf_path is not None else None
    return Sample(
        image=image,
        label=-1 if row.label is None else row.label,
        mask=mask,
        leaf=leaf,
        name=row.image_path.stem,
    )
