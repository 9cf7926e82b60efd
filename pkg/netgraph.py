"""
netgraph.py - Layer-graph models: document format, weights blob, forward pass

A model is an immutable DAG of typed layers. The graph input is referenced
by the reserved id "input"; dense blocks are expressed with explicit concat
nodes. Two files describe a model:

- a YAML document (format_version, input_shape, nodes, output_id, prelogits_id)
- an "NNWT" little-endian weights blob holding every "<node_id>.<slot>" tensor
"""

import hashlib
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Iterator, Literal, Mapping, Optional, Sequence, Union, get_args

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

import tensorcore as tc
from errors import (
    CyclicGraphError,
    MissingWeightError,
    ModelFormatError,
    NonFiniteError,
    ShapeError,
    UnfoldableError,
    UnknownOpError,
    VersionMismatchError,
    WeightShapeError,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
INPUT_ID = "input"
WEIGHTS_MAGIC = b"NNWT"
SCHEMA_COMMENT = "# yaml-language-server: $schema=leafxai-model.schema.json"

Op = Literal[
    "conv2d",
    "dense",
    "relu",
    "batchnorm",
    "maxpool",
    "avgpool",
    "globalavgpool",
    "concat",
    "softmax",
]
OPS: tuple[str, ...] = get_args(Op)

WEIGHT_SLOTS: dict[str, tuple[str, ...]] = {
    "conv2d": ("kernel", "bias"),
    "dense": ("weight", "bias"),
    "batchnorm": ("gamma", "beta", "running_mean", "running_var"),
}

PARAM_DEFAULTS: dict[str, dict[str, Union[int, float]]] = {
    "conv2d": {"stride": 1, "padding": 0},
    "maxpool": {"window": 2, "stride": 2},
    "avgpool": {"window": 2, "stride": 2},
    "concat": {"axis": 0},
    "batchnorm": {"epsilon": 1e-5},
}

LINEAR_OPS = ("conv2d", "dense")


# Model document (YAML)


class NodeSpec(BaseModel):
    """One node entry of the model document"""

    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1)
    op: str
    inputs: list[str] = Field(min_length=1)
    params: dict[str, Union[int, float]] = Field(default_factory=dict)
    weights: list[str] = Field(default_factory=list)

    @field_validator("id")
    @classmethod
    def validate_id(cls, v: str) -> str:
        if v == INPUT_ID:
            raise ValueError(f"Node id '{INPUT_ID}' is reserved for the graph input")
        if "." in v:
            raise ValueError("Node ids must not contain '.'")
        return v


class ModelDocument(BaseModel):
    """Top-level structure of the model document"""

    model_config = ConfigDict(extra="forbid")

    format_version: int
    input_shape: list[int] = Field(min_length=1, max_length=3)
    nodes: list[NodeSpec] = Field(min_length=1)
    output_id: str
    prelogits_id: str

    @field_validator("input_shape")
    @classmethod
    def validate_input_shape(cls, v: list[int]) -> list[int]:
        if any(s <= 0 for s in v):
            raise ValueError("Input extents must be positive")
        if len(v) == 2:
            raise ValueError("Input shape must be [n] or [C,H,W]")
        return v


# Runtime graph


@dataclass(frozen=True, eq=False)
class LayerNode:
    id: str
    op: str
    inputs: tuple[str, ...]
    params: Mapping[str, Union[int, float]] = field(
        default_factory=lambda: MappingProxyType({})
    )
    weights: Mapping[str, np.ndarray] = field(
        default_factory=lambda: MappingProxyType({})
    )

    def param(self, name: str) -> Union[int, float]:
        if name in self.params:
            return self.params[name]
        return PARAM_DEFAULTS[self.op][name]


def make_node(
    id: str,
    op: str,
    inputs: Sequence[str],
    params: Optional[Mapping[str, Union[int, float]]] = None,
    weights: Optional[Mapping[str, np.ndarray]] = None,
) -> LayerNode:
    """Build a LayerNode with frozen params and read-only weights"""
    frozen = {k: tc.freeze(np.asarray(v)) for k, v in (weights or {}).items()}
    return LayerNode(
        id=id,
        op=op,
        inputs=tuple(inputs),
        params=MappingProxyType(dict(params or {})),
        weights=MappingProxyType(frozen),
    )


@dataclass(frozen=True, eq=False)
class ModelGraph:
    """Validated, topologically ordered layer graph"""

    input_shape: tuple[int, ...]
    nodes: tuple[LayerNode, ...]
    output_id: str
    prelogits_id: str
    shapes: Mapping[str, tuple[int, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "shapes", MappingProxyType(_validate(self)))

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def consumers(self, node_id: str) -> list[LayerNode]:
        return [n for n in self.nodes if node_id in n.inputs]

    @property
    def dtype(self) -> np.dtype:
        for _, arr in self.weight_items():
            return arr.dtype
        return np.dtype(np.float32)

    @property
    def has_softmax(self) -> bool:
        return self.node(self.output_id).op == "softmax"

    def weight_items(self) -> Iterator[tuple[str, np.ndarray]]:
        """Yield ("<node_id>.<slot>", tensor) in node order, slot order"""
        for n in self.nodes:
            for slot in WEIGHT_SLOTS.get(n.op, ()):
                yield f"{n.id}.{slot}", n.weights[slot]

    def with_weights(self, weights: Mapping[str, np.ndarray]) -> "ModelGraph":
        """Copy of the graph with the named weight tensors replaced"""
        nodes = []
        for n in self.nodes:
            slots = WEIGHT_SLOTS.get(n.op, ())
            if any(f"{n.id}.{s}" in weights for s in slots):
                merged = {s: weights.get(f"{n.id}.{s}", n.weights[s]) for s in slots}
                n = make_node(n.id, n.op, n.inputs, n.params, merged)
            nodes.append(n)
        return replace(self, nodes=tuple(nodes))

    def astype(self, dtype) -> "ModelGraph":
        """Copy of the graph with every weight cast to dtype"""
        return self.with_weights(
            {name: arr.astype(dtype) for name, arr in self.weight_items()}
        )


def _node_output_shape(
    node: LayerNode, in_shapes: list[tuple[int, ...]]
) -> tuple[int, ...]:
    op = node.op
    shape = in_shapes[0]

    def expect_image():
        if len(shape) != 3:
            raise ShapeError(f"Node '{node.id}' ({op}) needs a [C,H,W] input, got {shape}")

    if op == "conv2d":
        expect_image()
        kernel, bias = node.weights["kernel"], node.weights["bias"]
        if kernel.ndim != 4 or kernel.shape[1] != shape[0]:
            raise WeightShapeError(
                f"Node '{node.id}': kernel {kernel.shape} does not fit input {shape}"
            )
        if bias.shape != (kernel.shape[0],):
            raise WeightShapeError(f"Node '{node.id}': bias shape {bias.shape}")
        return tc.conv_output_shape(
            shape, kernel.shape, int(node.param("stride")), int(node.param("padding"))
        )
    if op == "dense":
        weight, bias = node.weights["weight"], node.weights["bias"]
        if weight.ndim != 2 or weight.shape[1] != int(np.prod(shape)):
            raise WeightShapeError(
                f"Node '{node.id}': weight {weight.shape} does not fit input {shape}"
            )
        if bias.shape != (weight.shape[0],):
            raise WeightShapeError(f"Node '{node.id}': bias shape {bias.shape}")
        return (weight.shape[0],)
    if op in ("relu", "softmax"):
        return shape
    if op == "batchnorm":
        for slot in WEIGHT_SLOTS["batchnorm"]:
            if node.weights[slot].shape != (shape[0],):
                raise WeightShapeError(
                    f"Node '{node.id}': {slot} shape {node.weights[slot].shape} "
                    f"does not match {shape[0]} channels"
                )
        return shape
    if op in ("maxpool", "avgpool"):
        expect_image()
        return tc.pool_output_shape(
            shape, int(node.param("window")), int(node.param("stride"))
        )
    if op == "globalavgpool":
        expect_image()
        return (shape[0],)
    if op == "concat":
        if len(in_shapes) < 2:
            raise ModelFormatError(f"Concat node '{node.id}' needs at least 2 inputs")
        if int(node.param("axis")) != 0:
            raise ModelFormatError(f"Concat node '{node.id}' supports axis 0 only")
        rest = {s[1:] for s in in_shapes}
        if len(rest) != 1:
            raise ShapeError(
                f"Concat node '{node.id}' inputs disagree on non-channel extents: "
                f"{in_shapes}"
            )
        return (sum(s[0] for s in in_shapes),) + in_shapes[0][1:]
    raise UnknownOpError(f"Node '{node.id}' has unknown op '{op}'")


def _validate(model: ModelGraph) -> dict[str, tuple[int, ...]]:
    """Check structural invariants; returns static shape inference per node"""
    shapes: dict[str, tuple[int, ...]] = {INPUT_ID: model.input_shape}
    for node in model.nodes:
        if node.op not in OPS:
            raise UnknownOpError(f"Node '{node.id}' has unknown op '{node.op}'")
        if node.id in shapes:
            raise ModelFormatError(f"Duplicate node id '{node.id}'")
        for src in node.inputs:
            if src not in shapes:
                raise CyclicGraphError(
                    f"Node '{node.id}' references '{src}' which is not an earlier node"
                )
        for slot in WEIGHT_SLOTS.get(node.op, ()):
            if slot not in node.weights:
                raise MissingWeightError(node.id, slot)
        if node.op not in ("concat",) and len(node.inputs) != 1:
            raise ModelFormatError(f"Node '{node.id}' ({node.op}) takes exactly 1 input")
        shapes[node.id] = _node_output_shape(node, [shapes[s] for s in node.inputs])

    ids = [n.id for n in model.nodes]
    for ref, name in ((model.output_id, "output_id"), (model.prelogits_id, "prelogits_id")):
        if ref not in ids:
            raise ModelFormatError(f"{name} '{ref}' is not a node")
    for node in model.nodes:
        if node.op == "softmax":
            if node.id != model.output_id or node.id != ids[-1]:
                raise ModelFormatError(f"Softmax node '{node.id}' must be terminal")
            if model.prelogits_id != node.inputs[0]:
                raise ModelFormatError(
                    f"prelogits_id '{model.prelogits_id}' must be the softmax input "
                    f"'{node.inputs[0]}'"
                )
    del shapes[INPUT_ID]
    return shapes


# Weights blob


def write_weights_blob(entries: Sequence[tuple[str, np.ndarray]]) -> bytes:
    """Serialize named tensors to the NNWT format (payload stored as f32)"""
    parts = [WEIGHTS_MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries:
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def read_weights_blob(blob: bytes) -> dict[str, np.ndarray]:
    """Parse an NNWT blob into {name: read-only float32 tensor}"""
    if blob[:4] != WEIGHTS_MAGIC:
        raise ModelFormatError("Weights blob does not start with magic 'NNWT'")
    try:
        (count,) = struct.unpack_from("<I", blob, 4)
        offset = 8
        entries = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            if offset + name_len > len(blob):
                raise ModelFormatError("Weights blob truncated in an entry name")
            try:
                name = blob[offset : offset + name_len].decode("utf-8")
            except UnicodeDecodeError as e:
                raise ModelFormatError(f"Weights entry name is not UTF-8: {e}") from e
            if name in entries:
                raise ModelFormatError(f"Duplicate weights entry '{name}'")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            size = int(np.prod(shape))
            if offset + 4 * size > len(blob):
                raise ModelFormatError(f"Weights blob truncated in entry '{name}'")
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            entries[name] = tc.freeze(arr.astype(np.float32).reshape(shape))
    except struct.error as e:
        raise ModelFormatError(f"Weights blob truncated: {e}") from e
    if offset != len(blob):
        raise ModelFormatError(f"{len(blob) - offset} trailing bytes in weights blob")
    return entries


# Load / save


def _toposort(specs: list[NodeSpec]) -> list[NodeSpec]:
    """Stable Kahn ordering; document order breaks ties"""
    by_id = {s.id: s for s in specs}
    if len(by_id) != len(specs):
        raise ModelFormatError("Duplicate node ids in model document")
    for s in specs:
        for src in s.inputs:
            if src != INPUT_ID and src not in by_id:
                raise CyclicGraphError(f"Node '{s.id}' references unknown node '{src}'")

    placed: set[str] = {INPUT_ID}
    ordered: list[NodeSpec] = []
    pending = list(specs)
    while pending:
        ready = next((s for s in pending if all(i in placed for i in s.inputs)), None)
        if ready is None:
            stuck = ", ".join(s.id for s in pending)
            raise CyclicGraphError(f"Layer graph has a cycle among: {stuck}")
        ordered.append(ready)
        placed.add(ready.id)
        pending.remove(ready)
    return ordered


def load_model(model_document: str, weights_blob: bytes) -> ModelGraph:
    """Parse a YAML model document and its NNWT weights blob

    Raises:
        VersionMismatchError, UnknownOpError, CyclicGraphError,
        MissingWeightError, WeightShapeError: distinct format failures
        ModelFormatError: the document is not parseable YAML
        pydantic.ValidationError: document does not match the schema
    """
    try:
        raw = yaml.safe_load(model_document)
    except yaml.YAMLError as e:
        raise ModelFormatError(f"Model document is not valid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ModelFormatError("Model document must be a mapping")
    if raw.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"Unsupported format_version {raw.get('format_version')!r}; "
            f"expected {FORMAT_VERSION}"
        )
    doc = ModelDocument.model_validate(raw)
    blob = read_weights_blob(weights_blob)

    nodes = []
    for spec in _toposort(doc.nodes):
        if spec.op not in OPS:
            raise UnknownOpError(f"Node '{spec.id}' has unknown op '{spec.op}'")
        required = WEIGHT_SLOTS.get(spec.op, ())
        undeclared = set(spec.weights) - set(required)
        if undeclared:
            raise ModelFormatError(
                f"Node '{spec.id}' declares unknown weight slot(s) {sorted(undeclared)}"
            )
        weights = {}
        for slot in required:
            name = f"{spec.id}.{slot}"
            if slot not in spec.weights or name not in blob:
                raise MissingWeightError(spec.id, slot)
            weights[slot] = blob[name]
        nodes.append(make_node(spec.id, spec.op, spec.inputs, spec.params, weights))

    model = ModelGraph(
        input_shape=tuple(doc.input_shape),
        nodes=tuple(nodes),
        output_id=doc.output_id,
        prelogits_id=doc.prelogits_id,
    )
    logger.debug("Loaded model with %d nodes", len(model.nodes))
    return model


def save_model(model: ModelGraph) -> tuple[str, bytes]:
    """Serialize a model to (YAML document text, NNWT blob)"""
    doc = ModelDocument(
        format_version=FORMAT_VERSION,
        input_shape=list(model.input_shape),
        nodes=[
            NodeSpec(
                id=n.id,
                op=n.op,
                inputs=list(n.inputs),
                params=dict(n.params),
                weights=list(WEIGHT_SLOTS.get(n.op, ())),
            )
            for n in model.nodes
        ],
        output_id=model.output_id,
        prelogits_id=model.prelogits_id,
    )
    text = yaml.safe_dump(
        doc.model_dump(), sort_keys=False, default_flow_style=None, allow_unicode=True
    )
    return f"{SCHEMA_COMMENT}\n{text}", write_weights_blob(list(model.weight_items()))


def load_model_files(model_path: Union[str, Path], weights_path: Union[str, Path]) -> ModelGraph:
    return load_model(
        Path(model_path).read_text(encoding="utf-8"), Path(weights_path).read_bytes()
    )


def save_model_files(
    model: ModelGraph, model_path: Union[str, Path], weights_path: Union[str, Path]
) -> None:
    text, blob = save_model(model)
    Path(model_path).write_text(text, encoding="utf-8")
    Path(weights_path).write_bytes(blob)
    logger.info("Wrote %s and %s", model_path, weights_path)


def model_digest(model: ModelGraph) -> str:
    """SHA-256 over the serialized document and blob"""
    text, blob = save_model(model)
    h = hashlib.sha256(text.encode("utf-8"))
    h.update(blob)
    return h.hexdigest()


# Forward evaluation


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Activations recorded by one forward pass

    outputs holds one entry per node; argmax holds max-pool routing records
    and relu_masks the activity masks (pre-activation > 0) of ReLU nodes.
    """

    input: np.ndarray
    outputs: Mapping[str, np.ndarray]
    argmax: Mapping[str, np.ndarray]
    relu_masks: Mapping[str, np.ndarray]

    def __getitem__(self, node_id: str) -> np.ndarray:
        if node_id == INPUT_ID:
            return self.input
        return self.outputs[node_id]


def apply_node(
    node: LayerNode, args: list[np.ndarray]
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Evaluate one node on batched inputs

    Returns:
        (output, aux) where aux is the argmax record for max-pool, the
        activity mask for ReLU, else None
    """
    x = args[0]
    op = node.op
    if op == "conv2d":
        out = tc.conv2d_batch(
            x,
            node.weights["kernel"],
            node.weights["bias"],
            int(node.param("stride")),
            int(node.param("padding")),
        )
        return out, None
    if op == "dense":
        return tc.dense_batch(x, node.weights["weight"], node.weights["bias"]), None
    if op == "relu":
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype), mask
    if op == "batchnorm":
        w = node.weights
        out = tc.batchnorm_batch(
            x,
            w["gamma"],
            w["beta"],
            w["running_mean"],
            w["running_var"],
            float(node.param("epsilon")),
        )
        return out, None
    if op in ("maxpool", "avgpool"):
        kind = "max" if op == "maxpool" else "average"
        return tc.pool_batch(x, kind, int(node.param("window")), int(node.param("stride")))
    if op == "globalavgpool":
        return tc.global_avg_pool_batch(x), None
    if op == "concat":
        return np.concatenate(args, axis=1), None
    if op == "softmax":
        return tc.softmax(x.reshape(x.shape[0], -1), axis=1).reshape(x.shape), None
    raise UnknownOpError(f"Node '{node.id}' has unknown op '{op}'")


def forward_batch(
    model: ModelGraph, xb: np.ndarray
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Evaluate every node on a [N, *input_shape] batch (inference mode)

    Returns:
        (outputs, argmax records, relu masks), each keyed by node id
    """
    if tuple(xb.shape[1:]) != model.input_shape:
        raise ShapeError(
            f"Input shape {tuple(xb.shape[1:])} does not match model input "
            f"{model.input_shape}"
        )
    values: dict[str, np.ndarray] = {INPUT_ID: xb}
    argmax: dict[str, np.ndarray] = {}
    masks: dict[str, np.ndarray] = {}
    for node in model.nodes:
        out, aux = apply_node(node, [values[s] for s in node.inputs])
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("Non-finite activation", node_id=node.id)
        values[node.id] = out
        if node.op == "maxpool":
            argmax[node.id] = aux
        elif node.op == "relu":
            masks[node.id] = aux
    del values[INPUT_ID]
    return values, argmax, masks


def forward(model: ModelGraph, x: np.ndarray) -> ForwardTrace:
    """Run the network on one input and record every activation

    The input is cast to the model's weight dtype.

    Raises:
        ShapeError: x.shape differs from model.input_shape
        NonFiniteError: non-finite input or intermediate (names the node)
    """
    x = np.asarray(x, dtype=model.dtype)
    if x.shape != model.input_shape:
        raise ShapeError(
            f"Input shape {x.shape} does not match model input {model.input_shape}"
        )
    tc.check_finite(x, node_id=INPUT_ID)
    outputs, argmax, masks = forward_batch(model, x[None])

    def strip(d):
        return MappingProxyType({k: tc.freeze(v[0]) for k, v in d.items()})

    return ForwardTrace(
        input=tc.freeze(x.copy()),
        outputs=strip(outputs),
        argmax=strip(argmax),
        relu_masks=strip(masks),
    )


def predict(model: ModelGraph, x: np.ndarray) -> tuple[int, np.ndarray]:
    """Class index = argmax of the pre-softmax layer (ties -> lowest index)"""
    prelogits = forward(model, x)[model.prelogits_id]
    return int(np.argmax(prelogits)), prelogits


def strip_softmax(model: ModelGraph) -> ModelGraph:
    """Copy of the model ending at the pre-softmax layer"""
    if not model.has_softmax:
        return model
    return ModelGraph(
        input_shape=model.input_shape,
        nodes=model.nodes[:-1],
        output_id=model.prelogits_id,
        prelogits_id=model.prelogits_id,
    )


# Batch-norm folding


def fold_batchnorm(model: ModelGraph) -> ModelGraph:
    """Fold inference-mode batch-norm into the preceding conv2d/dense node

    w' = w * gamma / sqrt(var + eps), b' = (b - mean) * gamma / sqrt(var + eps) + beta

    Raises:
        UnfoldableError: a batch-norm input is not a linear node, or that
            linear node feeds anything besides the batch-norm
    """
    rename: dict[str, str] = {}
    folded: dict[str, LayerNode] = {}

    for node in model.nodes:
        if node.op != "batchnorm":
            continue
        src_id = node.inputs[0]
        if src_id == INPUT_ID or model.node(src_id).op not in LINEAR_OPS:
            raise UnfoldableError(
                f"Batch-norm '{node.id}' follows '{src_id}', not a conv2d/dense node"
            )
        if len(model.consumers(src_id)) != 1 or src_id in (
            model.output_id,
            model.prelogits_id,
        ):
            raise UnfoldableError(
                f"Batch-norm '{node.id}': producer '{src_id}' has other consumers"
            )

        src = folded.get(src_id, model.node(src_id))
        w = node.weights
        scale, shift = tc.batchnorm_scale_shift(
            w["gamma"],
            w["beta"],
            w["running_mean"],
            w["running_var"],
            float(node.param("epsilon")),
        )
        if src.op == "conv2d":
            new_w = {"kernel": src.weights["kernel"] * scale[:, None, None, None]}
        else:
            new_w = {"weight": src.weights["weight"] * scale[:, None]}
        new_w["bias"] = src.weights["bias"] * scale + shift
        dtype = src.weights["bias"].dtype
        new_w = {k: v.astype(dtype) for k, v in new_w.items()}
        folded[src_id] = make_node(src.id, src.op, src.inputs, src.params, new_w)
        rename[node.id] = src_id
        logger.debug("Folded batch-norm '%s' into '%s'", node.id, src_id)

    if not rename:
        return model

    nodes = []
    for node in model.nodes:
        if node.op == "batchnorm":
            continue
        node = folded.get(node.id, node)
        if any(i in rename for i in node.inputs):
            node = replace(node, inputs=tuple(rename.get(i, i) for i in node.inputs))
        nodes.append(node)
    return ModelGraph(
        input_shape=model.input_shape,
        nodes=tuple(nodes),
        output_id=rename.get(model.output_id, model.output_id),
        prelogits_id=rename.get(model.prelogits_id, model.prelogits_id),
    )


# Architecture builders


class _GraphBuilder:
    """Accumulates nodes with zero-valued weights for later initialization"""

    def __init__(self, input_shape: Sequence[int], dtype=np.float32):
        self.input_shape = tuple(input_shape)
        self.dtype = dtype
        self.nodes: list[LayerNode] = []
        self.channels: dict[str, int] = {INPUT_ID: self.input_shape[0]}

    def add(self, id, op, inputs, params=None, weights=None, channels=None) -> str:
        self.nodes.append(make_node(id, op, inputs, params, weights))
        self.channels[id] = channels if channels is not None else self.channels[inputs[0]]
        return id

    def conv(self, id, src, out_ch, k, padding):
        in_ch = self.channels[src]
        weights = {
            "kernel": np.zeros((out_ch, in_ch, k, k), self.dtype),
            "bias": np.zeros(out_ch, self.dtype),
        }
        params = {"stride": 1, "padding": padding}
        return self.add(id, "conv2d", [src], params, weights, out_ch)

    def batchnorm(self, id, src):
        c = self.channels[src]
        weights = {
            "gamma": np.ones(c, self.dtype),
            "beta": np.zeros(c, self.dtype),
            "running_mean": np.zeros(c, self.dtype),
            "running_var": np.ones(c, self.dtype),
        }
        return self.add(id, "batchnorm", [src], {"epsilon": 1e-5}, weights)

    def conv_bn_relu(self, prefix, src, out_ch, k, padding, batchnorm):
        out = self.conv(f"{prefix}_conv", src, out_ch, k, padding)
        if batchnorm:
            out = self.batchnorm(f"{prefix}_bn", out)
        return self.add(f"{prefix}_relu", "relu", [out])


def build_densenet(
    input_shape: Sequence[int],
    num_classes: int,
    growth_rate: int = 8,
    block_layers: Sequence[int] = (2,),
    stem_channels: int = 8,
    transition_channels: Optional[int] = None,
    batchnorm: bool = True,
    dtype=np.float32,
) -> ModelGraph:
    """Desk-scale dense-block network template (weights zero, BN identity)

    stem Conv-BN-ReLU + 2x2 max-pool, dense blocks whose layers see the
    concatenation of all earlier maps in the block, 1x1 Conv-BN-ReLU + 2x2
    average-pool transitions between blocks, global average pool, a fully
    connected pre-softmax layer and softmax.
    """
    if len(input_shape) != 3:
        raise ShapeError("build_densenet expects a [C,H,W] input shape")
    g = _GraphBuilder(input_shape, dtype)
    x = g.conv_bn_relu("stem", INPUT_ID, stem_channels, 3, 1, batchnorm)
    x = g.add("stem_pool", "maxpool", [x], {"window": 2, "stride": 2})

    for b, n_layers in enumerate(block_layers, start=1):
        features = [x]
        for layer in range(1, n_layers + 1):
            new = g.conv_bn_relu(f"b{b}l{layer}", x, growth_rate, 3, 1, batchnorm)
            features.append(new)
            total = sum(g.channels[f] for f in features)
            x = g.add(f"b{b}l{layer}_cat", "concat", features, {"axis": 0}, None, total)
        if b < len(block_layers):
            out_ch = transition_channels or max(g.channels[x] // 2, 1)
            x = g.conv_bn_relu(f"t{b}", x, out_ch, 1, 0, batchnorm)
            x = g.add(f"t{b}_pool", "avgpool", [x], {"window": 2, "stride": 2})

    x = g.add("gap", "globalavgpool", [x])
    c = g.channels[x]
    fc = g.add(
        "fc",
        "dense",
        [x],
        None,
        {
            "weight": np.zeros((num_classes, c), dtype),
            "bias": np.zeros(num_classes, dtype),
        },
        num_classes,
    )
    g.add("softmax", "softmax", [fc])
    return ModelGraph(
        input_shape=g.input_shape,
        nodes=tuple(g.nodes),
        output_id="softmax",
        prelogits_id=fc,
    )
