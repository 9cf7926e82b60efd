"""
attribution.py - Pixel attribution methods over layer-graph models

Eight methods, all returning a signed ExplanationMap for one target neuron
(by default the maximal neuron of the pre-softmax layer):

- gradient family: saliency, gradient x input, guided backpropagation,
  SmoothGrad, integrated gradients
- relevance family: LRP-z, LRP-epsilon, deep Taylor decomposition

Relevance methods require linear + ReLU structure, so batch-norm must be
folded first (or explicitly treated as a per-channel linear map).
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

import tensorcore as tc
from autodiff import GradientRequest, StepObserver, Target, check_target, input_gradient
from errors import (
    ModelFormatError,
    NumericalDegeneracyError,
    ShapeError,
    UnsupportedNodeError,
)
from netgraph import INPUT_ID, LayerNode, ModelGraph, forward

logger = logging.getLogger(__name__)

# Panel order
METHODS: tuple[str, ...] = (
    "saliency",
    "gi",
    "gbp",
    "smoothgrad",
    "ig",
    "dtd",
    "lrp-z",
    "lrp-epsilon",
)

EXPL_MAGIC = b"EXPL"
EXPL_VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4")}

BatchnormMode = Literal["error", "linear"]


# Parameters


class SmoothGradParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_samples: int = 50
    sigma: Optional[float] = None  # None -> 0.15 * (max(x) - min(x))
    seed: int = 0

    @field_validator("n_samples")
    @classmethod
    def validate_n_samples(cls, v: int) -> int:
        if v < 1:
            raise ValueError("SmoothGrad needs at least one sample")
        return v

    @field_validator("sigma")
    @classmethod
    def validate_sigma(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and v < 0:
            raise ValueError("Sigma must be non-negative")
        return v


class IntegratedGradientsParams(BaseModel):
    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    steps: int = 300
    baseline: Union[Literal["black", "white"], np.ndarray] = "black"

    @field_validator("steps")
    @classmethod
    def validate_steps(cls, v: int) -> int:
        if v < 1:
            raise ValueError("Integrated gradients needs at least one step")
        return v


class LRPParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epsilon: float = 0.01

    @field_validator("epsilon")
    @classmethod
    def validate_epsilon(cls, v: float) -> float:
        if v < 0:
            raise ValueError("Epsilon must be non-negative")
        return v


class DeepTaylorParams(BaseModel):
    """Input-domain bounds; unset bounds select the z+ rule at the input too"""

    model_config = ConfigDict(extra="forbid")

    input_low: Optional[float] = None
    input_high: Optional[float] = None

    @model_validator(mode="after")
    def validate_bounds(self) -> "DeepTaylorParams":
        if (self.input_low is None) != (self.input_high is None):
            raise ValueError("Set both input_low and input_high, or neither")
        if self.input_low is not None and self.input_low >= self.input_high:
            raise ValueError("input_low must be below input_high")
        return self

    @property
    def bounded(self) -> bool:
        return self.input_low is not None


class MethodParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    smoothgrad: SmoothGradParams = Field(default_factory=SmoothGradParams)
    integrated_gradients: IntegratedGradientsParams = Field(
        default_factory=IntegratedGradientsParams
    )
    lrp: LRPParams = Field(default_factory=LRPParams)
    dtd: DeepTaylorParams = Field(default_factory=DeepTaylorParams)


# Explanation maps


def reduce_channels(raw: np.ndarray, signed: bool = False) -> np.ndarray:
    """Collapse [C,H,W] to [H,W] by sum of |values| (or plain sum when signed)"""
    if raw.ndim == 3:
        return raw.sum(axis=0) if signed else np.abs(raw).sum(axis=0)
    return raw.copy() if signed else np.abs(raw)


@dataclass(frozen=True, eq=False)
class ExplanationMap:
    raw: np.ndarray
    method: str
    target: Target
    params: dict = field(default_factory=dict)
    model_digest: str = ""

    @property
    def reduced(self) -> np.ndarray:
        return reduce_channels(self.raw)


def _make_map(
    raw: np.ndarray, method: str, target: Target, params: Optional[dict] = None
) -> ExplanationMap:
    tc.check_finite(raw)
    return ExplanationMap(
        raw=tc.freeze(raw), method=method, target=target, params=dict(params or {})
    )


def resolve_target(
    model: ModelGraph, x: np.ndarray, target: Optional[Target] = None
) -> Target:
    """Explicit target, or the maximal pre-softmax neuron for x"""
    if target is None:
        prelogits = forward(model, x)[model.prelogits_id]
        target = (model.prelogits_id, int(np.argmax(prelogits)))
    check_target(model, target)
    return target


def _gradient(
    model: ModelGraph,
    x: np.ndarray,
    target: Target,
    rule: str = "plain",
    observer: Optional[StepObserver] = None,
) -> np.ndarray:
    req = GradientRequest(model=model, input=x, target=target, rule=rule)
    return input_gradient(req, observer)


# Gradient family


def saliency(
    model: ModelGraph, x: np.ndarray, target: Optional[Target] = None
) -> ExplanationMap:
    """Gradient of the target pre-softmax activation w.r.t. the input"""
    target = resolve_target(model, x, target)
    return _make_map(_gradient(model, x, target), "saliency", target)


def gradient_times_input(
    model: ModelGraph, x: np.ndarray, target: Optional[Target] = None
) -> ExplanationMap:
    target = resolve_target(model, x, target)
    x = np.asarray(x, dtype=model.dtype)
    return _make_map(x * _gradient(model, x, target), "gi", target)


def guided_backprop(
    model: ModelGraph,
    x: np.ndarray,
    target: Optional[Target] = None,
    observer: Optional[StepObserver] = None,
) -> ExplanationMap:
    """Backprop that also zeroes negative gradient entering each ReLU"""
    target = resolve_target(model, x, target)
    return _make_map(_gradient(model, x, target, "guided", observer), "gbp", target)


def noisy_inputs(
    x: np.ndarray, sigma: float, n_samples: int, seed: int
) -> Iterator[np.ndarray]:
    """x + n_i for i in sample order, n_i ~ N(0, sigma^2) from a seeded generator"""
    rng = np.random.default_rng(seed)
    for _ in range(n_samples):
        yield x + rng.normal(0.0, sigma, size=x.shape).astype(x.dtype)


def smoothgrad(
    model: ModelGraph,
    x: np.ndarray,
    target: Optional[Target] = None,
    params: Optional[SmoothGradParams] = None,
) -> ExplanationMap:
    """Mean saliency over Gaussian-perturbed copies of x"""
    params = params or SmoothGradParams()
    x = np.asarray(x, dtype=model.dtype)
    target = resolve_target(model, x, target)
    sigma = params.sigma
    if sigma is None:
        sigma = 0.15 * float(x.max() - x.min())
    used = {"n_samples": params.n_samples, "sigma": sigma, "seed": params.seed}

    if sigma == 0:
        return _make_map(_gradient(model, x, target), "smoothgrad", target, used)

    total = np.zeros(x.shape, dtype=model.dtype)
    for noisy in noisy_inputs(x, sigma, params.n_samples, params.seed):
        total = total + _gradient(model, noisy, target)
    return _make_map(total / params.n_samples, "smoothgrad", target, used)


def resolve_baseline(
    baseline: Union[str, np.ndarray], x: np.ndarray
) -> np.ndarray:
    if isinstance(baseline, str):
        if baseline == "black":
            return np.zeros_like(x)
        if baseline == "white":
            return np.ones_like(x)
        raise ValueError(f"Unknown baseline preset '{baseline}'")
    baseline = np.asarray(baseline, dtype=x.dtype)
    if baseline.shape != x.shape:
        raise ShapeError(
            f"Baseline shape {baseline.shape} does not match input shape {x.shape}"
        )
    return baseline


def integrated_gradients(
    model: ModelGraph,
    x: np.ndarray,
    target: Optional[Target] = None,
    params: Optional[IntegratedGradientsParams] = None,
) -> ExplanationMap:
    """(x - baseline) * mean gradient at the m midpoints of the straight path"""
    params = params or IntegratedGradientsParams()
    x = np.asarray(x, dtype=model.dtype)
    target = resolve_target(model, x, target)
    baseline = resolve_baseline(params.baseline, x)
    diff = x - baseline
    m = params.steps

    total = np.zeros(x.shape, dtype=model.dtype)
    for k in range(1, m + 1):
        alpha = (k - 0.5) / m
        total = total + _gradient(model, baseline + alpha * diff, target)

    used = {
        "steps": m,
        "baseline": params.baseline if isinstance(params.baseline, str) else "tensor",
    }
    return _make_map(diff * (total / m), "ig", target, used)


# Relevance family

RelevanceRule = Literal["z", "zplus"]


def _stabilized_ratio(
    relevance: np.ndarray, denom: np.ndarray, node_id: str, epsilon: float, strict: bool
) -> np.ndarray:
    if epsilon > 0:
        denom = denom + np.where(denom >= 0, epsilon, -epsilon).astype(denom.dtype)
    zero = denom == 0
    if strict and np.any(zero & (relevance != 0)):
        raise NumericalDegeneracyError(node_id)
    return np.divide(relevance, denom, out=np.zeros_like(relevance), where=~zero)


def _linear_maps(
    node: LayerNode, in_shape: tuple[int, ...]
) -> tuple[Callable, Callable]:
    """(apply(a, W) without bias, transpose(r, W)) for a conv2d/dense node"""
    if node.op == "dense":

        def apply(a, w):
            return w @ a.reshape(-1)

        def transpose(r, w):
            return (w.T @ r).reshape(in_shape)

        return apply, transpose

    stride, padding = int(node.param("stride")), int(node.param("padding"))

    def apply(a, w):
        zero_bias = np.zeros(w.shape[0], dtype=w.dtype)
        return tc.conv2d_batch(a[None], w, zero_bias, stride, padding)[0]

    def transpose(r, w):
        return tc.conv2d_backward_input(r[None], w, in_shape, stride, padding)[0]

    return apply, transpose


class _RelevancePropagator:
    """Backward relevance pass over a recorded forward trace"""

    def __init__(
        self,
        model: ModelGraph,
        rule: RelevanceRule,
        epsilon: float = 0.0,
        bounds: Optional[tuple[float, float]] = None,
        batchnorm: BatchnormMode = "error",
        observer: Optional[StepObserver] = None,
    ):
        self.model = model
        self.rule = rule
        self.epsilon = epsilon
        self.bounds = bounds
        self.batchnorm = batchnorm
        self.observer = observer
        self.strict = rule == "z"
        self.trace = None

    def run(self, x: np.ndarray, target: Target) -> np.ndarray:
        model = self.model
        layer, index = target
        if model.node(layer).op == "softmax":
            raise UnsupportedNodeError(
                "Relevance targets must precede the softmax node; use the "
                "pre-softmax layer"
            )
        trace = forward(model, x)
        self.trace = trace
        start = trace[layer].flat[index]
        if self.rule == "zplus":
            start = max(start, 0)
        seed = np.zeros(model.shapes[layer], dtype=trace[layer].dtype)
        seed.flat[index] = start
        relevance = {layer: seed}

        stop = model.ids().index(layer)
        for node in reversed(model.nodes[: stop + 1]):
            r = relevance.pop(node.id, None)
            if r is None:
                continue
            parts = self._step(node, r)
            if self.observer is not None:
                self.observer(node.id, parts)
            for src, part in zip(node.inputs, parts):
                relevance[src] = relevance[src] + part if src in relevance else part

        out = relevance.get(INPUT_ID)
        if out is None:
            out = np.zeros(model.input_shape, dtype=trace.input.dtype)
        return out

    def _step(self, node: LayerNode, r: np.ndarray) -> list[np.ndarray]:
        trace = self.trace
        args = [trace[s] for s in node.inputs]
        a = args[0]
        op = node.op

        if op in ("conv2d", "dense"):
            return [self._linear(node, a, r)]
        if op == "relu":
            return [r]
        if op == "maxpool":
            grad = tc.pool_backward(
                r[None],
                a.shape,
                "max",
                int(node.param("window")),
                int(node.param("stride")),
                trace.argmax[node.id][None],
            )
            return [grad[0]]
        if op == "avgpool":
            ratio = _stabilized_ratio(
                r, trace[node.id], node.id, self.epsilon, self.strict
            )
            spread = tc.pool_backward(
                ratio[None],
                a.shape,
                "average",
                int(node.param("window")),
                int(node.param("stride")),
            )
            return [a * spread[0]]
        if op == "globalavgpool":
            ratio = _stabilized_ratio(
                r, trace[node.id], node.id, self.epsilon, self.strict
            )
            _, h, w = a.shape
            return [a * (ratio / (h * w))[:, None, None]]
        if op == "concat":
            bounds = np.cumsum([arg.shape[0] for arg in args])[:-1]
            return np.split(r, bounds, axis=0)
        if op == "batchnorm":
            return [self._batchnorm(node, a, r)]
        raise UnsupportedNodeError(f"No relevance rule for node '{node.id}' ({op})")

    def _linear(self, node: LayerNode, a: np.ndarray, r: np.ndarray) -> np.ndarray:
        w = node.weights["kernel" if node.op == "conv2d" else "weight"]
        apply, transpose = _linear_maps(node, a.shape)

        if self.rule == "z":
            ratio = _stabilized_ratio(
                r, self.trace[node.id], node.id, self.epsilon, strict=True
            )
            return a * transpose(ratio, w)

        w_pos = np.maximum(w, 0)
        if self.bounds is not None and node.inputs[0] == INPUT_ID:
            w_neg = np.minimum(w, 0)
            low = np.full_like(a, self.bounds[0])
            high = np.full_like(a, self.bounds[1])
            denom = apply(a, w) - apply(low, w_pos) - apply(high, w_neg)
            ratio = _stabilized_ratio(r, denom, node.id, 0.0, strict=False)
            return (
                a * transpose(ratio, w)
                - low * transpose(ratio, w_pos)
                - high * transpose(ratio, w_neg)
            )

        ratio = _stabilized_ratio(r, apply(a, w_pos), node.id, 0.0, strict=False)
        return a * transpose(ratio, w_pos)

    def _batchnorm(self, node: LayerNode, a: np.ndarray, r: np.ndarray) -> np.ndarray:
        if self.batchnorm != "linear":
            raise UnsupportedNodeError(
                f"Batch-norm node '{node.id}' has no relevance rule; apply "
                "fold_batchnorm first or select the linear batch-norm mode"
            )
        wts = node.weights
        scale, _ = tc.batchnorm_scale_shift(
            wts["gamma"],
            wts["beta"],
            wts["running_mean"],
            wts["running_var"],
            float(node.param("epsilon")),
        )
        scale = scale.reshape((-1,) + (1,) * (a.ndim - 1))
        if self.rule == "z":
            ratio = _stabilized_ratio(
                r, self.trace[node.id], node.id, self.epsilon, strict=True
            )
            return a * scale * ratio
        z = a * np.maximum(scale, 0)
        return z * _stabilized_ratio(r, z, node.id, 0.0, strict=False)


def lrp(
    model: ModelGraph,
    x: np.ndarray,
    target: Optional[Target] = None,
    epsilon: float = 0.0,
    batchnorm: BatchnormMode = "error",
    observer: Optional[StepObserver] = None,
) -> ExplanationMap:
    """Layer-wise relevance propagation with the z (epsilon = 0) or epsilon rule

    Relevance starts as the target activation; linear layers redistribute it
    in proportion to z_jk = a_j w_jk with the bias absorbed into the
    denominator; ReLU passes it unchanged; max-pool is winner-take-all;
    average-pool is proportional; concat splits by source.

    Raises:
        UnsupportedNodeError: batch-norm present (fold first) or softmax target
        NumericalDegeneracyError: zero denominator with epsilon = 0
    """
    if epsilon < 0:
        raise ValueError("Epsilon must be non-negative")
    target = resolve_target(model, x, target)
    x = np.asarray(x, dtype=model.dtype)
    prop = _RelevancePropagator(model, "z", epsilon, None, batchnorm, observer)
    method = "lrp-z" if epsilon == 0 else "lrp-epsilon"
    return _make_map(prop.run(x, target), method, target, {"epsilon": epsilon})


def deep_taylor(
    model: ModelGraph,
    x: np.ndarray,
    target: Optional[Target] = None,
    params: Optional[DeepTaylorParams] = None,
    batchnorm: BatchnormMode = "error",
    observer: Optional[StepObserver] = None,
) -> ExplanationMap:
    """Deep Taylor decomposition: z+ rule on hidden layers, z^B at a bounded input

    Relevance starts as max(A_target, 0). Without input bounds the z+ rule is
    applied at the input layer as well; for images pass
    DeepTaylorParams(input_low=0.0, input_high=1.0) to get z^B on pixels.
    """
    params = params or DeepTaylorParams()
    target = resolve_target(model, x, target)
    x = np.asarray(x, dtype=model.dtype)
    bounds = (params.input_low, params.input_high) if params.bounded else None
    prop = _RelevancePropagator(model, "zplus", 0.0, bounds, batchnorm, observer)
    return _make_map(prop.run(x, target), "dtd", target, params.model_dump())


# Dispatch


def explain(
    method: str,
    model: ModelGraph,
    x: np.ndarray,
    target: Optional[Target] = None,
    params: Optional[MethodParams] = None,
    batchnorm: BatchnormMode = "error",
) -> ExplanationMap:
    """Run one named method (see METHODS)"""
    params = params or MethodParams()
    if method == "saliency":
        return saliency(model, x, target)
    if method == "gi":
        return gradient_times_input(model, x, target)
    if method == "gbp":
        return guided_backprop(model, x, target)
    if method == "smoothgrad":
        return smoothgrad(model, x, target, params.smoothgrad)
    if method == "ig":
        return integrated_gradients(model, x, target, params.integrated_gradients)
    if method == "dtd":
        return deep_taylor(model, x, target, params.dtd, batchnorm)
    if method == "lrp-z":
        return lrp(model, x, target, 0.0, batchnorm)
    if method == "lrp-epsilon":
        return lrp(model, x, target, params.lrp.epsilon, batchnorm)
    raise ValueError(
        f"Unknown method '{method}'. Valid methods: {', '.join(METHODS)}"
    )


# EXPL files


def save_explanation(emap: ExplanationMap) -> bytes:
    """Serialize to the EXPL binary format (f32 payload, JSON metadata)"""
    raw = emap.raw
    if raw.ndim == 3:
        c, h, w = raw.shape
    elif raw.ndim == 2:
        c, (h, w) = 1, raw.shape
    else:
        c, h, w = 1, 1, raw.size
    meta = json.dumps(
        {
            "method": emap.method,
            "params": emap.params,
            "target": [emap.target[0], emap.target[1]],
            "model_digest": emap.model_digest,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return b"".join(
        [
            EXPL_MAGIC,
            struct.pack("<BB", EXPL_VERSION, 1),
            struct.pack("<III", c, h, w),
            np.ascontiguousarray(raw, dtype="<f4").tobytes(),
            struct.pack("<I", len(meta)),
            meta,
        ]
    )


def load_explanation(blob: bytes) -> ExplanationMap:
    """Parse an EXPL file; raw comes back as a [C,H,W] float32 tensor

    Raises:
        ModelFormatError: bad magic, version, truncation, trailing bytes or
            unreadable metadata
    """
    if blob[:4] != EXPL_MAGIC:
        raise ModelFormatError("Explanation file does not start with magic 'EXPL'")
    try:
        version, tag = struct.unpack_from("<BB", blob, 4)
        if version != EXPL_VERSION or tag not in DTYPE_TAGS:
            raise ModelFormatError(f"Unsupported explanation version {version}/dtype {tag}")
        c, h, w = struct.unpack_from("<III", blob, 6)
        offset = 18
        size = c * h * w
        nbytes = DTYPE_TAGS[tag].itemsize * size
        if offset + nbytes > len(blob):
            raise ModelFormatError("Explanation file truncated in the map payload")
        raw = np.frombuffer(blob, dtype=DTYPE_TAGS[tag], count=size, offset=offset)
        offset += nbytes
        (meta_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
    except struct.error as e:
        raise ModelFormatError(f"Explanation file truncated: {e}") from e
    if offset + meta_len != len(blob):
        raise ModelFormatError(
            f"Explanation metadata length {meta_len} does not match the "
            f"{len(blob) - offset} remaining bytes"
        )
    try:
        meta = json.loads(blob[offset:].decode("utf-8"))
        return ExplanationMap(
            raw=tc.freeze(raw.astype(np.float32).reshape(c, h, w)),
            method=meta["method"],
            target=(meta["target"][0], int(meta["target"][1])),
            params=meta["params"],
            model_digest=meta["model_digest"],
        )
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, IndexError, TypeError) as e:
        raise ModelFormatError(f"Unreadable explanation metadata: {e}") from e
