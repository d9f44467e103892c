"""
Aggregator dispatch: one entry point for the nested encoder and the
cascaded baselines.
"""
from typing import Callable, Optional

import numpy as np

from graphformers.core.tensor import Tensor, no_grad
from graphformers.models.schemas import EncoderMode
from graphformers.nn.baselines import cascaded_encode, cascaded_encode_batch
from graphformers.nn.encoder import GraphBatch, GraphInput, encode_batch, encode_graph
from graphformers.nn.params import ParamSet

EncodeFn = Callable[[GraphInput], np.ndarray]


def forward_batch(batch: GraphBatch, params: ParamSet) -> Tensor:
    """[B, d] embeddings for a packed batch under ``params.config``."""
    cfg = params.config
    if cfg.is_nested:
        return encode_batch(batch, params, cfg)
    return cascaded_encode_batch(batch, params, cfg)


def forward_one(inp: GraphInput, params: ParamSet, cache=None) -> Tensor:
    cfg = params.config
    if cfg.is_nested:
        return encode_graph(inp, params, cfg, cache=cache)
    return cascaded_encode(inp, params, cfg)


def make_encoder(params: ParamSet, cache=None) -> EncodeFn:
    """
    Inference closure GraphInput -> embedding array. A cache is only used by
    the unidirectional nested encoder.
    """
    cfg = params.config
    use_cache: Optional[object] = cache if cfg.is_nested and cfg.mode == EncoderMode.UNIDIRECTIONAL else None

    def encode(inp: GraphInput) -> np.ndarray:
        with no_grad():
            return forward_one(inp, params, cache=use_cache).numpy()

    return encode
