from graphformers.core.tensor import (
    FlopCounter,
    TapeNode,
    Tensor,
    backward,
    count_flops,
    get_default_dtype,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "FlopCounter",
    "TapeNode",
    "Tensor",
    "backward",
    "count_flops",
    "get_default_dtype",
    "no_grad",
    "precision",
    "set_default_dtype",
]
