"""
errors.py - Exception hierarchy shared by every leafxai module

All library failures derive from LeafXAIError so the command-line front end
can report them uniformly. Configuration problems are reported separately by
pydantic as ValidationError.
"""

from typing import Optional


class LeafXAIError(Exception):
    """Base class for all leafxai errors"""


class ShapeError(LeafXAIError):
    """Operand shapes do not conform"""


class GeometryError(LeafXAIError):
    """Window/stride/padding combination yields an empty or invalid output"""


class NonFiniteError(LeafXAIError):
    """NaN or Inf encountered in a tensor"""

    def __init__(self, message: str, node_id: Optional[str] = None):
        if node_id is not None:
            message = f"{message} (node '{node_id}')"
        super().__init__(message)
        self.node_id = node_id


class ModelFormatError(LeafXAIError):
    """Model document or weights blob is malformed"""


class CyclicGraphError(ModelFormatError):
    """Layer graph contains a cycle or a dangling input reference"""


class MissingWeightError(ModelFormatError):
    """A declared weight is absent from the weights blob"""

    def __init__(self, node_id: str, slot: str):
        super().__init__(f"Missing weight '{node_id}.{slot}' for node '{node_id}'")
        self.node_id = node_id
        self.slot = slot


class UnknownOpError(ModelFormatError):
    """Node declares an op outside the supported vocabulary"""


class VersionMismatchError(ModelFormatError):
    """Model document format_version is not supported"""


class WeightShapeError(ModelFormatError):
    """Weight tensor shape disagrees with the node geometry"""


class UnfoldableError(LeafXAIError):
    """Batch-norm node cannot be folded into its producer"""


class UnsupportedNodeError(LeafXAIError):
    """Relevance rule is not defined for a node kind"""


class NumericalDegeneracyError(LeafXAIError):
    """Exact-zero relevance denominator with no stabilizer"""

    def __init__(self, node_id: str):
        super().__init__(
            f"Zero denominator while propagating relevance through node '{node_id}'; "
            "use epsilon > 0"
        )
        self.node_id = node_id


class InvalidTargetError(LeafXAIError):
    """Attribution target layer or neuron does not exist"""


class ParameterError(LeafXAIError):
    """Method parameter outside its valid range"""


class DivergenceError(LeafXAIError):
    """Training loss became non-finite"""

    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"Training diverged at epoch {epoch}: {message}")
        self.epoch = epoch


class UndefinedMetricError(LeafXAIError):
    """Metric is undefined for the given inputs"""


class ManifestError(LeafXAIError):
    """Dataset manifest rows are invalid"""

    def __init__(self, message: str, rows: Optional[list[int]] = None):
        self.rows = rows or []
        if self.rows:
            message = f"{message}: rows {', '.join(str(r) for r in self.rows)}"
        super().__init__(message)
