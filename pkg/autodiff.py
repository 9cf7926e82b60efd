"""
autodiff.py - Reverse-mode input gradients and a finite-difference oracle

Gradients are vector-Jacobian products taken node by node, in reverse
topological order, over a recorded ForwardTrace. Only gradients with respect
to the input are computed here; weight gradients live in the trainer.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Literal, Optional

import numpy as np

import tensorcore as tc
from errors import InvalidTargetError, NonFiniteError
from netgraph import INPUT_ID, ForwardTrace, LayerNode, ModelGraph, forward

logger = logging.getLogger(__name__)

Rule = Literal["plain", "guided"]
Target = tuple[str, int]

# Called with (node_id, gradient w.r.t. that node's inputs) after each step
StepObserver = Callable[[str, list[np.ndarray]], None]


@dataclass(frozen=True, eq=False)
class GradientRequest:
    model: ModelGraph
    input: np.ndarray
    target: Target
    rule: Rule = "plain"


def check_target(model: ModelGraph, target: Target) -> None:
    layer, index = target
    if layer not in model.shapes:
        raise InvalidTargetError(f"Target layer '{layer}' is not a node")
    size = int(np.prod(model.shapes[layer]))
    if not 0 <= index < size:
        raise InvalidTargetError(
            f"Neuron index {index} out of range for layer '{layer}' with {size} outputs"
        )


def default_target(model: ModelGraph, trace: ForwardTrace) -> Target:
    """Pre-softmax layer, neuron with the maximum activation (lowest on ties)"""
    return model.prelogits_id, int(np.argmax(trace[model.prelogits_id]))


def _vjp(
    node: LayerNode,
    g: np.ndarray,
    trace: ForwardTrace,
    in_shapes: list[tuple[int, ...]],
    rule: Rule,
) -> list[np.ndarray]:
    op = node.op
    shape = in_shapes[0]
    if op == "conv2d":
        grad = tc.conv2d_backward_input(
            g[None],
            node.weights["kernel"],
            shape,
            int(node.param("stride")),
            int(node.param("padding")),
        )
        return [grad[0]]
    if op == "dense":
        return [(node.weights["weight"].T @ g).reshape(shape)]
    if op == "relu":
        mask = trace.relu_masks[node.id]
        if rule == "guided":
            mask = mask & (g > 0)
        return [np.where(mask, g, 0).astype(g.dtype)]
    if op == "batchnorm":
        w = node.weights
        scale, _ = tc.batchnorm_scale_shift(
            w["gamma"], w["beta"], w["running_mean"], w["running_var"],
            float(node.param("epsilon")),
        )
        return [g * scale.reshape((-1,) + (1,) * (g.ndim - 1))]
    if op in ("maxpool", "avgpool"):
        kind = "max" if op == "maxpool" else "average"
        argmax = trace.argmax[node.id][None] if kind == "max" else None
        grad = tc.pool_backward(
            g[None],
            shape,
            kind,
            int(node.param("window")),
            int(node.param("stride")),
            argmax,
        )
        return [grad[0]]
    if op == "globalavgpool":
        _, h, w = shape
        return [np.broadcast_to((g / (h * w))[:, None, None], shape).copy()]
    if op == "concat":
        bounds = np.cumsum([s[0] for s in in_shapes])[:-1]
        return np.split(g, bounds, axis=0)
    if op == "softmax":
        s = trace[node.id]
        return [s * (g - np.sum(g * s))]
    raise InvalidTargetError(f"No backward rule for op '{op}'")


def backward(
    model: ModelGraph,
    trace: ForwardTrace,
    target: Target,
    rule: Rule = "plain",
    observer: Optional[StepObserver] = None,
) -> np.ndarray:
    """Gradient of trace[target layer].flat[neuron] w.r.t. the input"""
    check_target(model, target)
    layer, index = target
    seed = np.zeros(model.shapes[layer], dtype=trace[layer].dtype)
    seed.flat[index] = 1
    grads: dict[str, np.ndarray] = {layer: seed}

    stop = model.ids().index(layer)
    for node in reversed(model.nodes[: stop + 1]):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        in_shapes = [
            model.input_shape if s == INPUT_ID else model.shapes[s] for s in node.inputs
        ]
        parts = _vjp(node, g, trace, in_shapes, rule)
        if observer is not None:
            observer(node.id, parts)
        for src, part in zip(node.inputs, parts):
            grads[src] = grads[src] + part if src in grads else part

    grad = grads.get(INPUT_ID)
    if grad is None:
        grad = np.zeros(model.input_shape, dtype=trace.input.dtype)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("Non-finite input gradient", node_id=layer)
    return tc.freeze(grad)


def input_gradient(
    req: GradientRequest, observer: Optional[StepObserver] = None
) -> np.ndarray:
    """d A_target / d x for a plain or guided backward pass

    plain: exact vJps (ReLU gated by its activity mask, max-pool routed to
    the recorded argmax, average-pool spread uniformly, concat split by
    source, conv/dense transposed).
    guided: additionally zeroes negative incoming gradient at every ReLU.
    """
    trace = forward(req.model, req.input)
    return backward(req.model, trace, req.target, req.rule, observer)


# Finite differences


def _target_value(model: ModelGraph, x: np.ndarray, target: Target) -> float:
    layer, index = target
    return float(forward(model, x)[layer].flat[index])


def finite_difference(
    model: ModelGraph, x: np.ndarray, target: Target, h: float = 1e-4
) -> np.ndarray:
    """Central differences (F(x + h e_i) - F(x - h e_i)) / 2h, evaluated in f64"""
    if h <= 0:
        raise ValueError(f"Step h must be positive, got {h}")
    check_target(model, target)
    model64 = model.astype(np.float64)
    x64 = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x64)
    for i in range(x64.size):
        xp = x64.copy()
        xm = x64.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        grad.flat[i] = (
            _target_value(model64, xp, target) - _target_value(model64, xm, target)
        ) / (2 * h)
    return tc.freeze(grad)


def kink_margin(model: ModelGraph, x: np.ndarray) -> float:
    """Distance of x from the nearest non-differentiable point

    Smallest |pre-activation| over all ReLU inputs and smallest gap between
    the two largest entries of any max-pool window (inf if neither exists).
    Windows whose two largest entries are both exactly zero are skipped: they
    hold dead ReLU units, which the pre-activation margin already keeps dead.
    """
    trace = forward(model, x)
    margin = np.inf
    for node in model.nodes:
        if node.op == "relu":
            pre = trace[node.inputs[0]]
            margin = min(margin, float(np.min(np.abs(pre))))
        elif node.op == "maxpool":
            src = trace[node.inputs[0]][None]
            win = int(node.param("window"))
            view = tc.window_view(src, win, win, int(node.param("stride")))
            flat = np.sort(view.reshape(view.shape[:4] + (-1,)), axis=-1)
            if flat.shape[-1] > 1:
                top, second = flat[..., -1], flat[..., -2]
                live = (top != 0) | (second != 0)
                if live.any():
                    margin = min(margin, float(np.min((top - second)[live])))
    return margin
