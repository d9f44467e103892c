"""
Exception hierarchy shared by every GraphFormers module.
The CLI maps ConfigError to exit code 1 and any other GraphFormersError to 2.
"""
from typing import Optional


class GraphFormersError(Exception):
    """Base class for all library errors."""


class DimensionError(GraphFormersError):
    """Operand extents do not match the kernel contract."""


class ShapeError(DimensionError):
    """A structured input (messenger sequence, batch) has the wrong shape."""


class DegenerateRowError(GraphFormersError):
    """Softmax row with every entry masked out."""


class ContractError(GraphFormersError):
    """Caller violated an API precondition."""


class NonFiniteError(GraphFormersError):
    """NaN or Inf produced by a kernel."""


class DeterminismError(GraphFormersError):
    """Function evaluated twice on the same input gave different results."""


class RangeError(GraphFormersError, IndexError):
    """Index (token id, position, node count) outside its valid range."""


class CapacityError(GraphFormersError):
    """More neighbours than the model was configured for."""


class StaleCacheError(GraphFormersError):
    """Neighbour cache was built for a different parameter version."""


class CacheIOError(GraphFormersError):
    """Neighbour cache persistence failed after retries."""


class ConfigError(GraphFormersError):
    """Invalid or unknown configuration value."""


class EmptyBatchError(GraphFormersError):
    """Loss requested over an empty batch."""


class NodeNotFoundError(GraphFormersError, KeyError):
    """Node id not present in the graph."""


class DivergenceError(GraphFormersError):
    """Training loss stayed far above its initial value."""


class NonFiniteGradientError(GraphFormersError):
    """
    Optimizer received a NaN/Inf gradient.
    Carries the parameter name and step for diagnostics.
    """

    def __init__(self, param_name: str, step: int, detail: Optional[str] = None):
        self.param_name = param_name
        self.step = step
        message = f"non-finite gradient for '{param_name}' at step {step}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
