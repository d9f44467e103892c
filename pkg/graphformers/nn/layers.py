"""
Building blocks of the nested encoder: embeddings, graph-aggregation MHA with
relation bias, asymmetric MHA over messenger-augmented tokens, and the
transformer block.

All functions accept arbitrary leading batch axes: a ``[..., n, d]`` tensor is
a stack of ``n``-row matrices.
"""
import logging
import math
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from graphformers.core import ops
from graphformers.core.tensor import Tensor
from graphformers.errors import RangeError, ShapeError

logger = logging.getLogger(__name__)

# Relation classes indexing RelationBias rows.
CENTER_CENTER = 0
CENTER_NEIGHBOUR = 1
NEIGHBOUR_NEIGHBOUR = 2


@dataclass
class EmbeddingTable:
    word: Tensor  # [V, d]
    position: Tensor  # [P_max, d]

    @property
    def vocab_size(self) -> int:
        return self.word.shape[0]

    @property
    def max_positions(self) -> int:
        return self.position.shape[0]


@dataclass
class MhaWeights:
    """
    Fused projections: column block ``j*d_head:(j+1)*d_head`` of each [d, d]
    matrix is head ``j``'s W_j. Biases and the output projection are optional;
    graph aggregation uses neither.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    num_heads: int
    bq: Optional[Tensor] = None
    bk: Optional[Tensor] = None
    bv: Optional[Tensor] = None
    wo: Optional[Tensor] = None
    bo: Optional[Tensor] = None

    @property
    def head_size(self) -> int:
        return self.wq.shape[1] // self.num_heads


@dataclass
class RelationBias:
    values: Tensor  # [3, h]: rows cc, cn, nn

    @property
    def num_heads(self) -> int:
        return self.values.shape[1]


@dataclass
class TransformerLayerWeights:
    attn: MhaWeights
    w1: Tensor  # [d, 4d]
    b1: Tensor
    w2: Tensor  # [4d, d]
    b2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    eps: float = 1e-12


def token_embed(token_ids: Any, table: EmbeddingTable) -> Tensor:
    """
    H0[..., p, :] = word[token_ids[..., p]] + position[p].

    Args:
        token_ids: integer ids, shape [..., P]
        table: word and position embeddings

    Returns:
        Tensor [..., P, d]
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 0:
        ids = ids.reshape(1)
    length = ids.shape[-1]
    if length > table.max_positions:
        raise RangeError(f"sequence length {length} exceeds max positions {table.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise RangeError(f"token id outside [0, {table.vocab_size})")
    words = ops.getitem(table.word, ids)
    positions = ops.getitem(table.position, slice(0, length))
    return ops.add(words, positions)


def _relation_classes(num_nodes: int) -> np.ndarray:
    classes = np.full((num_nodes, num_nodes), NEIGHBOUR_NEIGHBOUR, dtype=np.int64)
    classes[0, :] = CENTER_NEIGHBOUR
    classes[:, 0] = CENTER_NEIGHBOUR
    classes[0, 0] = CENTER_CENTER
    return classes


def relation_bias_tensor(num_nodes: int, bias: RelationBias) -> Tensor:
    """Per-head bias matrices, shape [h, M, M]; node 0 is the center."""
    if num_nodes < 1:
        raise RangeError(f"node count must be >= 1, got {num_nodes}")
    gathered = ops.getitem(bias.values, _relation_classes(num_nodes))  # [M, M, h]
    return ops.transpose(gathered, (2, 0, 1))


def relation_bias_matrix(num_nodes: int, bias: RelationBias, head: int) -> Tensor:
    if not 0 <= head < bias.num_heads:
        raise RangeError(f"head {head} outside [0, {bias.num_heads})")
    return ops.getitem(relation_bias_tensor(num_nodes, bias), head)


def _project(x: Tensor, w: Tensor, b: Optional[Tensor]) -> Tensor:
    out = ops.matmul(x, w)
    return ops.add(out, b) if b is not None else out


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = ops.reshape(x, (*lead, n, num_heads, d // num_heads))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return ops.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return ops.reshape(ops.transpose(x, axes), (*lead, n, h * dh))


def attend(
    queries: Tensor,
    keys: Tensor,
    w: MhaWeights,
    key_mask: Any = None,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """
    Scaled dot-product multi-head attention of ``queries [..., n, d]`` over
    ``keys [..., m, d]`` (keys also supply values).

    ``key_mask [..., m]`` marks usable keys; ``bias`` is added to the
    ``[..., h, n, m]`` scores before the softmax.
    """
    h = w.num_heads
    q = _split_heads(_project(queries, w.wq, w.bq), h)
    k = _split_heads(_project(keys, w.wk, w.bk), h)
    v = _split_heads(_project(keys, w.wv, w.bv), h)

    scores = ops.scale(ops.matmul(q, ops.swap_last(k)), 1.0 / math.sqrt(w.head_size))
    if bias is not None:
        scores = ops.add(scores, bias)
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
    weights = ops.softmax_masked(scores, mask)
    out = _merge_heads(ops.matmul(weights, v))
    if w.wo is not None:
        out = _project(out, w.wo, w.bo)
    return out


def gnn_mha(
    Z: Tensor,
    w: MhaWeights,
    bias: Optional[RelationBias],
    node_mask: Any = None,
    center_only: bool = False,
) -> Tensor:
    """
    Graph aggregation over node-level embeddings ``Z [..., M, d]``.

    Concatenated heads with no residual, LayerNorm or MLP. With
    ``center_only`` only row 0 is computed and the result is ``[..., 1, d]``.
    Padded node slots (``node_mask`` False) are never attended to.
    """
    num_nodes = Z.shape[-2]
    bias_t = relation_bias_tensor(num_nodes, bias) if bias is not None else None
    queries = Z
    if center_only:
        queries = ops.getitem(Z, (Ellipsis, slice(0, 1), slice(None)))
        if bias_t is not None:
            bias_t = ops.getitem(bias_t, (slice(None), slice(0, 1), slice(None)))
    return attend(queries, Z, w, key_mask=node_mask, bias=bias_t)


def asymmetric_mha(H: Tensor, H_hat: Tensor, w: MhaWeights, key_mask: Any = None) -> Tensor:
    """
    Queries from ``H [..., P, d]``; keys and values from the
    messenger-augmented ``H_hat [..., P+1, d]``. Output has P rows.
    """
    if H_hat.shape[-2] != H.shape[-2] + 1 or H_hat.shape[:-2] != H.shape[:-2]:
        raise ShapeError(f"H_hat shape {H_hat.shape} must be H shape {H.shape} plus one row")
    return attend(H, H_hat, w, key_mask=key_mask)


def mlp(x: Tensor, w: TransformerLayerWeights) -> Tensor:
    hidden = ops.gelu(_project(x, w.w1, w.b1))
    return _project(hidden, w.w2, w.b2)


def prepend_messenger(H: Tensor, messenger: Tensor, key_mask: Any = None):
    """Ĥ = Concat(ẑ, H) along the token axis, and the matching key mask."""
    row = ops.reshape(messenger, (*H.shape[:-2], 1, H.shape[-1]))
    H_hat = ops.concat([row, H], axis=-2)
    if key_mask is None:
        return H_hat, None
    mask = np.asarray(key_mask, dtype=bool)
    mask_hat = np.concatenate([np.ones(mask.shape[:-1] + (1,), dtype=bool), mask], axis=-1)
    return H_hat, mask_hat


def transformer_layer(
    H: Tensor,
    messenger: Optional[Tensor],
    w: TransformerLayerWeights,
    key_mask: Any = None,
) -> Tensor:
    """
    One transformer block. With a messenger the attention runs over
    Concat(ẑ, H); the first residual always adds the original H.
    """
    if messenger is not None:
        H_hat, mask_hat = prepend_messenger(H, messenger, key_mask)
        attn = asymmetric_mha(H, H_hat, w.attn, mask_hat)
    else:
        attn = attend(H, H, w.attn, key_mask=key_mask)
    mid = ops.layer_norm(ops.add(H, attn), w.ln1_gamma, w.ln1_beta, w.eps)
    return ops.layer_norm(ops.add(mid, mlp(mid, w)), w.ln2_gamma, w.ln2_beta, w.eps)


def cls_states(H: Tensor) -> Tensor:
    """Node-level embeddings H[..., 0, :] of a [..., P, d] stack."""
    return ops.getitem(H, (Ellipsis, 0, slice(None)))
