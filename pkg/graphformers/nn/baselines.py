"""
Cascaded Transformers-GNN baselines: every node is encoded on its own
through all layers, then the final [CLS] embeddings are aggregated.
"""
import logging
from typing import Any, Optional, Union

import numpy as np

from graphformers.core import ops
from graphformers.core.tensor import Tensor
from graphformers.errors import ContractError
from graphformers.models.schemas import Aggregator, ModelConfig
from graphformers.nn.encoder import GraphBatch, GraphInput, _check_capacity, encode_plain_stack
from graphformers.nn.layers import cls_states, token_embed, transformer_layer
from graphformers.nn.params import ParamSet

logger = logging.getLogger(__name__)


def _attention_pool(query: Tensor, keys: Tensor, mask: np.ndarray) -> Tensor:
    """
    softmax(query·key) weighted sum of ``keys [B, N, d]`` for ``query [B, d]``.
    Rows without any valid key give the zero vector.
    """
    B, N, d = keys.shape
    has_any = mask.any(axis=-1)
    safe_mask = np.where(has_any[:, None], mask, True)
    scores = ops.matmul(ops.reshape(query, (B, 1, d)), ops.swap_last(keys))  # [B, 1, N]
    weights = ops.softmax_masked(scores, safe_mask[:, None, :])
    pooled = ops.reshape(ops.matmul(weights, keys), (B, d))
    if has_any.all():
        return pooled
    return ops.mul(pooled, Tensor(has_any.astype(pooled.dtype)[:, None] * np.ones((1, d))))


def aggregate(
    center: Tensor,
    neighbours: Optional[Tensor],
    neighbour_mask: Optional[np.ndarray],
    aggregator: Aggregator,
    params: Optional[ParamSet] = None,
) -> Tensor:
    """
    Combine center embeddings ``[B, d]`` with neighbour embeddings ``[B, N, d]``.

    none: center. max/mean/att: pool the neighbours, concat with the center,
    affine 2d -> d. gat: softmax(center·node) weighted sum over all nodes,
    center included. An empty neighbour set pools to the zero vector.
    """
    aggregator = Aggregator(aggregator)
    if aggregator == Aggregator.NONE:
        return center
    if aggregator == Aggregator.NESTED:
        raise ContractError("the nested aggregator is not a cascaded baseline")
    B, d = center.shape
    empty = neighbours is None or neighbours.shape[1] == 0

    if aggregator == Aggregator.GAT:
        nodes = ops.reshape(center, (B, 1, d))
        mask = np.ones((B, 1), dtype=bool)
        if not empty:
            nodes = ops.concat([nodes, neighbours], axis=1)
            mask = np.concatenate([mask, neighbour_mask], axis=1)
        return _attention_pool(center, nodes, mask)

    if empty:
        pooled = Tensor(np.zeros((B, d)))
    elif aggregator == Aggregator.MAX:
        pooled = ops.masked_max(neighbours, neighbour_mask)
    elif aggregator == Aggregator.MEAN:
        pooled = ops.masked_mean(neighbours, neighbour_mask)
    else:
        pooled = _attention_pool(center, neighbours, neighbour_mask)
    if params is None:
        raise ContractError(f"aggregator {aggregator.value} needs the affine map parameters")
    w, b = params.aggregator_weights()
    return ops.add(ops.matmul(ops.concat([center, pooled], axis=1), w), b)


def cascaded_encode(
    inp: GraphInput,
    params: ParamSet,
    cfg: ModelConfig,
    aggregator: Union[Aggregator, str, None] = None,
) -> Tensor:
    """
    Baseline embedding of one instance, Tensor[d]. Each node's text
    embedding is its final z from ``encode_plain_stack``.

    Args:
        aggregator: defaults to ``cfg.aggregator``
    """
    _check_capacity(inp, cfg)
    aggregator = Aggregator(aggregator or cfg.aggregator)
    d = cfg.hidden_size
    center = ops.reshape(encode_plain_stack(inp.center, params, cfg)[-1], (1, d))
    neighbours = None
    mask = None
    if inp.neighbours and aggregator != Aggregator.NONE:
        finals = [encode_plain_stack(seq, params, cfg)[-1] for seq in inp.neighbours]
        neighbours = ops.reshape(ops.stack(finals, axis=0), (1, len(finals), d))
        mask = np.ones((1, len(finals)), dtype=bool)
    return ops.reshape(aggregate(center, neighbours, mask, aggregator, params), (d,))


def cascaded_encode_batch(
    batch: GraphBatch,
    params: ParamSet,
    cfg: ModelConfig,
    aggregator: Union[Aggregator, str, None] = None,
) -> Tensor:
    """Batched baseline embeddings, shape [B, d]."""
    aggregator = Aggregator(aggregator or cfg.aggregator)
    nodes = 1 if aggregator == Aggregator.NONE else batch.num_nodes
    H = token_embed(batch.tokens[:, :nodes], params.embeddings())
    for index in range(cfg.num_layers):
        H = transformer_layer(H, None, params.layer(index), batch.token_mask[:, :nodes])
    texts = cls_states(H)  # [B, M, d]
    center = ops.getitem(texts, (slice(None), 0, slice(None)))
    neighbours = None
    mask: Any = None
    if nodes > 1:
        neighbours = ops.getitem(texts, (slice(None), slice(1, None), slice(None)))
        mask = batch.node_mask[:, 1:]
    return aggregate(center, neighbours, mask, aggregator, params)
