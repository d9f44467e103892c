"""
Nested GNN-transformer encoder.

Layer 0 encodes every node on its own. Each later layer first gathers the
[CLS] states of all nodes, runs graph aggregation over them, and feeds the
result back into token attention as a messenger row.

Bidirectional mode gives every node a messenger. Unidirectional mode gives
only the center one, so neighbours are encoded independently and their
per-layer states can be cached.
"""
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np

from graphformers.core import ops
from graphformers.core.tensor import Tensor
from graphformers.errors import CapacityError, ContractError, RangeError, StaleCacheError
from graphformers.models.schemas import EncoderMode, ModelConfig
from graphformers.nn.layers import cls_states, gnn_mha, token_embed, transformer_layer
from graphformers.nn.params import ParamSet

if TYPE_CHECKING:
    from graphformers.services.neighbor_cache import NeighborCache

logger = logging.getLogger(__name__)

PAD_ID = 0
CLS_ID = 1

TokenSeq = Tuple[int, ...]


@dataclass(frozen=True)
class GraphInput:
    """
    One encoding instance: the center sequence followed by up to K neighbour
    sequences. Node ids are optional and only used for caching.
    """

    center: TokenSeq
    neighbours: Tuple[TokenSeq, ...] = ()
    center_id: Optional[int] = None
    neighbour_ids: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(int(t) for t in self.center))
        object.__setattr__(self, "neighbours", tuple(tuple(int(t) for t in n) for n in self.neighbours))
        if self.neighbour_ids is not None:
            ids = tuple(int(i) for i in self.neighbour_ids)
            if len(ids) != len(self.neighbours):
                raise ContractError(f"{len(ids)} neighbour ids for {len(self.neighbours)} neighbour sequences")
            object.__setattr__(self, "neighbour_ids", ids)
        for seq in (self.center, *self.neighbours):
            if not seq or seq[0] != CLS_ID:
                raise ContractError("every node sequence must start with [CLS]")

    @property
    def node_count(self) -> int:
        return 1 + len(self.neighbours)

    @property
    def sequences(self) -> Tuple[TokenSeq, ...]:
        return (self.center, *self.neighbours)

    def truncated(self, cap: int) -> "GraphInput":
        """Same instance keeping only the first ``cap`` neighbours."""
        ids = self.neighbour_ids[:cap] if self.neighbour_ids is not None else None
        return GraphInput(self.center, self.neighbours[:cap], self.center_id, ids)

    def permuted(self, order: Sequence[int]) -> "GraphInput":
        ids = tuple(self.neighbour_ids[i] for i in order) if self.neighbour_ids is not None else None
        return GraphInput(self.center, tuple(self.neighbours[i] for i in order), self.center_id, ids)


@dataclass
class GraphBatch:
    """Rectangular [B, M, P] packing of GraphInputs."""

    tokens: np.ndarray  # int64 [B, M, P]
    token_mask: np.ndarray  # bool [B, M, P]
    node_mask: np.ndarray  # bool [B, M]
    inputs: List[GraphInput] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.tokens.shape[1]


def _check_capacity(inp: GraphInput, cfg: ModelConfig) -> None:
    if inp.node_count - 1 > cfg.max_neighbours:
        raise CapacityError(f"{inp.node_count - 1} neighbours exceed capacity K={cfg.max_neighbours}")


def pad_sequence(seq: Sequence[int], length: int) -> Tuple[np.ndarray, np.ndarray]:
    if len(seq) > length:
        raise RangeError(f"sequence of {len(seq)} tokens longer than P={length}")
    tokens = np.full(length, PAD_ID, dtype=np.int64)
    tokens[: len(seq)] = seq
    mask = np.zeros(length, dtype=bool)
    mask[: len(seq)] = True
    return tokens, mask


def pack_graphs(inputs: Sequence[GraphInput], cfg: ModelConfig, num_nodes: Optional[int] = None) -> GraphBatch:
    """
    Pad every instance to ``num_nodes`` node slots (default: largest M in the
    batch) and every sequence to ``cfg.max_tokens``. Empty node slots hold a
    lone [CLS] and are marked False in ``node_mask``.
    """
    if not inputs:
        raise ContractError("cannot pack an empty batch")
    for inp in inputs:
        _check_capacity(inp, cfg)
    width = num_nodes or max(inp.node_count for inp in inputs)
    P = cfg.max_tokens
    tokens = np.full((len(inputs), width, P), PAD_ID, dtype=np.int64)
    token_mask = np.zeros((len(inputs), width, P), dtype=bool)
    node_mask = np.zeros((len(inputs), width), dtype=bool)
    tokens[:, :, 0] = CLS_ID
    token_mask[:, :, 0] = True
    for b, inp in enumerate(inputs):
        if inp.node_count > width:
            raise CapacityError(f"instance {b} has {inp.node_count} nodes, batch width is {width}")
        for m, seq in enumerate(inp.sequences):
            tokens[b, m], token_mask[b, m] = pad_sequence(seq, P)
            node_mask[b, m] = True
    return GraphBatch(tokens=tokens, token_mask=token_mask, node_mask=node_mask, inputs=list(inputs))


def _run_plain(H: Tensor, params: ParamSet, key_mask: np.ndarray, layers: range) -> Tuple[Tensor, List[Tensor]]:
    states = []
    for index in layers:
        H = transformer_layer(H, None, params.layer(index), key_mask)
        states.append(cls_states(H))
    return H, states


def encode_plain_stack(tokens: Sequence[int], params: ParamSet, cfg: ModelConfig) -> List[Tensor]:
    """
    Messenger-free encoding of one node through TRM0..TRM(L-1).

    Returns:
        [z1, ..., zL], each Tensor[d], z_l = H_l[0]
    """
    ids, mask = pad_sequence(tokens, cfg.max_tokens)
    ids, mask = ids[None, None, :], mask[None, None, :]
    H = token_embed(ids, params.embeddings())
    _, states = _run_plain(H, params, mask, range(cfg.num_layers))
    return [ops.reshape(z, (cfg.hidden_size,)) for z in states]


def _encode_bidirectional(batch: GraphBatch, params: ParamSet, cfg: ModelConfig) -> Tensor:
    H = token_embed(batch.tokens, params.embeddings())
    H = transformer_layer(H, None, params.layer(0), batch.token_mask)
    for step in range(1, cfg.num_layers):
        w, bias = params.gnn(step)
        messengers = gnn_mha(cls_states(H), w, bias, batch.node_mask)
        H = transformer_layer(H, messengers, params.layer(step), batch.token_mask)
    return ops.getitem(H, (slice(None), 0, 0, slice(None)))


def _encode_unidirectional(
    batch: GraphBatch,
    params: ParamSet,
    cfg: ModelConfig,
    neighbour_states: Optional[Sequence[Tensor]] = None,
) -> Tensor:
    """
    ``neighbour_states[l-1]`` is the [B, M-1, d] stack of neighbour z_l; it is
    computed here from the batch when not supplied.
    """
    center_tokens = batch.tokens[:, 0:1]
    center_mask = batch.token_mask[:, 0:1]
    H = token_embed(center_tokens, params.embeddings())
    H = transformer_layer(H, None, params.layer(0), center_mask)

    has_neighbours = batch.num_nodes > 1
    if has_neighbours and neighbour_states is None:
        Hn = token_embed(batch.tokens[:, 1:], params.embeddings())
        _, neighbour_states = _run_plain(Hn, params, batch.token_mask[:, 1:], range(cfg.num_layers - 1))

    for step in range(1, cfg.num_layers):
        w, bias = params.gnn(step)
        Z = cls_states(H)
        if has_neighbours:
            Z = ops.concat([Z, neighbour_states[step - 1]], axis=1)
        messenger = gnn_mha(Z, w, bias, batch.node_mask, center_only=True)
        H = transformer_layer(H, messenger, params.layer(step), center_mask)
    return ops.getitem(H, (slice(None), 0, 0, slice(None)))


def encode_batch(batch: GraphBatch, params: ParamSet, cfg: ModelConfig) -> Tensor:
    """
    Center embeddings z_L for a packed batch, shape [B, d]. GNN attention is
    confined to each instance by ``batch.node_mask``.
    """
    if not cfg.is_nested:
        raise ContractError(f"encode_batch needs the nested aggregator, got {cfg.aggregator.value}")
    if cfg.mode == EncoderMode.BIDIRECTIONAL:
        return _encode_bidirectional(batch, params, cfg)
    return _encode_unidirectional(batch, params, cfg)


def encode_graph(
    inp: GraphInput,
    params: ParamSet,
    cfg: ModelConfig,
    cache: Optional["NeighborCache"] = None,
    node_states: Optional[List[List[Tensor]]] = None,
) -> Tensor:
    """
    Encode one GraphInput and return the center embedding z_L, Tensor[d].

    In unidirectional mode every neighbour goes through
    ``encode_plain_stack`` on its own (or the cache), so a neighbour's states
    never depend on the instance it appears in.

    Args:
        inp: center plus neighbours
        params: model parameters
        cfg: model configuration (mode selects the aggregation direction)
        cache: optional NeighborCache, unidirectional mode only
        node_states: when given, receives each neighbour's [z1..z(L-1)]

    Raises:
        CapacityError: more than K neighbours
        StaleCacheError: the cache is bound to another parameter version
    """
    _check_capacity(inp, cfg)
    if cache is not None:
        if cfg.mode != EncoderMode.UNIDIRECTIONAL:
            raise ContractError("a neighbour cache needs unidirectional mode")
        if cache.bound_version is not None and cache.bound_version != params.version:
            raise StaleCacheError(
                f"cache bound to version {cache.bound_version:016x}, params are {params.version_hex}"
            )
    batch = pack_graphs([inp], cfg)
    if cfg.mode == EncoderMode.BIDIRECTIONAL:
        return ops.reshape(_encode_bidirectional(batch, params, cfg), (cfg.hidden_size,))

    from graphformers.services.neighbor_cache import cache_lookup_or_encode

    neighbour_states = None
    if inp.neighbours:
        per_node = []
        for j, seq in enumerate(inp.neighbours):
            node_id = inp.neighbour_ids[j] if inp.neighbour_ids is not None else None
            if cache is not None and node_id is not None:
                states = cache_lookup_or_encode(cache, node_id, seq, params, cfg)
            else:
                states = encode_plain_stack(seq, params, cfg)[: cfg.num_layers - 1]
            per_node.append(states)
        if node_states is not None:
            node_states.extend(per_node)
        neighbour_states = [
            ops.reshape(ops.stack([states[l] for states in per_node], axis=0), (1, len(per_node), cfg.hidden_size))
            for l in range(cfg.num_layers - 1)
        ]
    out = _encode_unidirectional(batch, params, cfg, neighbour_states)
    return ops.reshape(out, (cfg.hidden_size,))
