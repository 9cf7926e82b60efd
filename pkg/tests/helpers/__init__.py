"""Small model builders and brute-force loop references shared by tests"""

import numpy as np

from netgraph import INPUT_ID, ModelGraph, make_node


def linear_model(w=(2.0, -1.0), b=0.0, dtype=np.float64) -> ModelGraph:
    """One dense neuron: F(x) = w . x + b"""
    w = np.asarray([w], dtype=dtype)
    node = make_node(
        "out", "dense", [INPUT_ID], None, {"weight": w, "bias": np.full(1, b, dtype)}
    )
    return ModelGraph(
        input_shape=(w.shape[1],), nodes=(node,), output_id="out", prelogits_id="out"
    )


def two_layer_model(w1, w2, b1=None, b2=None, dtype=np.float64) -> ModelGraph:
    """dense -> ReLU -> dense, vector input"""
    w1 = np.asarray(w1, dtype=dtype)
    w2 = np.asarray(w2, dtype=dtype)
    b1 = np.zeros(w1.shape[0], dtype) if b1 is None else np.asarray(b1, dtype)
    b2 = np.zeros(w2.shape[0], dtype) if b2 is None else np.asarray(b2, dtype)
    nodes = (
        make_node("h", "dense", [INPUT_ID], None, {"weight": w1, "bias": b1}),
        make_node("h_relu", "relu", ["h"]),
        make_node("out", "dense", ["h_relu"], None, {"weight": w2, "bias": b2}),
    )
    return ModelGraph(
        input_shape=(w1.shape[1],), nodes=nodes, output_id="out", prelogits_id="out"
    )


def constant_model(n=2, dtype=np.float64) -> ModelGraph:
    """Zero weights, bias 1: output independent of the input"""
    return linear_model(w=[0.0] * n, b=1.0, dtype=dtype)


def conv_bn_model(rng, dtype=np.float32, softmax=True) -> ModelGraph:
    """conv -> BN -> ReLU -> avgpool -> dense (-> softmax) on a [2,4,4] input"""
    c = 3
    nodes = [
        make_node(
            "conv",
            "conv2d",
            [INPUT_ID],
            {"stride": 1, "padding": 1},
            {
                "kernel": rng.normal(0, 0.5, (c, 2, 3, 3)).astype(dtype),
                "bias": rng.normal(0, 0.1, c).astype(dtype),
            },
        ),
        make_node(
            "bn",
            "batchnorm",
            ["conv"],
            {"epsilon": 1e-5},
            {
                "gamma": rng.uniform(0.5, 1.5, c).astype(dtype),
                "beta": rng.normal(0, 0.1, c).astype(dtype),
                "running_mean": rng.normal(0, 0.1, c).astype(dtype),
                "running_var": rng.uniform(0.5, 2.0, c).astype(dtype),
            },
        ),
        make_node("relu", "relu", ["bn"]),
        make_node("pool", "avgpool", ["relu"], {"window": 2, "stride": 2}),
        make_node(
            "fc",
            "dense",
            ["pool"],
            None,
            {
                "weight": rng.normal(0, 0.5, (3, c * 4)).astype(dtype),
                "bias": rng.normal(0, 0.1, 3).astype(dtype),
            },
        ),
    ]
    if softmax:
        nodes.append(make_node("softmax", "softmax", ["fc"]))
    return ModelGraph(
        input_shape=(2, 4, 4),
        nodes=tuple(nodes),
        output_id="softmax" if softmax else "fc",
        prelogits_id="fc",
    )


def naive_conv2d(x, kernel, bias, stride=1, padding=0):
    """Sextuple-loop cross-correlation of a [C,H,W] input"""
    c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                total = bias[oc]
                for ic in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            total += (
                                xp[ic, i * stride + di, j * stride + dj]
                                * kernel[oc, ic, di, dj]
                            )
                out[oc, i, j] = total
    return out


def naive_pool(x, kind, window, stride):
    """Loop pooling; returns (out, first-occurrence argmax plane indices)"""
    c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.zeros((c, ho, wo))
    argmax = np.zeros((c, ho, wo), dtype=np.int64)
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                best, best_idx, total = -np.inf, -1, 0.0
                for di in range(window):
                    for dj in range(window):
                        r, s = i * stride + di, j * stride + dj
                        v = x[ch, r, s]
                        total += v
                        if v > best:
                            best, best_idx = v, r * w + s
                out[ch, i, j] = best if kind == "max" else total / (window * window)
                argmax[ch, i, j] = best_idx
    return out, argmax
