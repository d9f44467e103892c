"""
Neighbour state cache for unidirectional encoding.

A neighbour's per-layer [CLS] states depend only on its own tokens and the
parameters, so they are stored under (node id, parameter version) and
reused across every instance the node appears in.
"""
import logging
import struct
import threading
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tenacity import (
    before_sleep_log,
    retry,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from graphformers.core.tensor import Tensor
from graphformers.errors import CacheIOError, ContractError
from graphformers.models.schemas import CacheStats, EncoderMode, ModelConfig
from graphformers.nn.encoder import encode_plain_stack
from graphformers.nn.params import ParamSet

logger = logging.getLogger(__name__)

_RECORD_HEADER = struct.Struct("<QQ")


class NeighborCache:
    """
    Map (node id, version) -> [z1..z(L-1)] as float64 arrays.

    Only the latest version of each node is kept; a lookup under another
    version is a miss and the recomputed entry overwrites it. With ``path``
    set, every insert is appended to that file and existing records are
    loaded on construction (last record per node wins).

    ``bound_version``, when set, pins the cache to one parameter version;
    encoding with different parameters is refused.
    """

    def __init__(
        self,
        num_states: int,
        hidden_size: int,
        path: Optional[Union[str, Path]] = None,
        bound_version: Optional[int] = None,
    ):
        if num_states < 1 or hidden_size < 1:
            raise ContractError(f"invalid cache geometry ({num_states} states x {hidden_size})")
        self.num_states = num_states
        self.hidden_size = hidden_size
        self.path = Path(path) if path is not None else None
        self.bound_version = bound_version
        self.hits = 0
        self.misses = 0
        self.writes = 0
        self._entries: Dict[int, Tuple[int, np.ndarray]] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    @classmethod
    def for_config(cls, cfg: ModelConfig, **kwargs) -> "NeighborCache":
        return cls(num_states=cfg.num_layers - 1, hidden_size=cfg.hidden_size, **kwargs)

    @property
    def record_size(self) -> int:
        return _RECORD_HEADER.size + 8 * self.num_states * self.hidden_size

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, node_id: int, version: int) -> Optional[np.ndarray]:
        """Cached [L-1, d] states, or None when absent or from another version."""
        entry = self._entries.get(node_id)
        if entry is None or entry[0] != version:
            return None
        return entry[1]

    def lookup(self, node_id: int, version: int) -> Optional[np.ndarray]:
        """``get`` that also counts the hit or miss."""
        with self._lock:
            states = self.get(node_id, version)
            if states is None:
                self.misses += 1
            else:
                self.hits += 1
        return states

    def put(self, node_id: int, version: int, states: np.ndarray) -> None:
        states = np.ascontiguousarray(states, dtype=np.float64)
        if states.shape != (self.num_states, self.hidden_size):
            raise ContractError(f"states shape {states.shape} != ({self.num_states}, {self.hidden_size})")
        if node_id < 0:
            raise ContractError(f"node id must be non-negative, got {node_id}")
        with self._lock:
            self._entries[node_id] = (version, states)
            self.writes += 1
            if self.path is not None:
                self._append(node_id, version, states)

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()

    def stats(self) -> CacheStats:
        return CacheStats(hits=self.hits, misses=self.misses, entries=len(self._entries), writes=self.writes)

    # --- persistence -------------------------------------------------------
    def _append(self, node_id: int, version: int, states: np.ndarray) -> None:
        record = _RECORD_HEADER.pack(node_id, version) + states.astype("<f8").tobytes()
        try:
            _append_bytes(self.path, record)
        except OSError as e:
            raise CacheIOError(f"Failed to append to neighbour cache {self.path}: {e}") from e

    def _load(self) -> None:
        try:
            blob = _read_bytes(self.path)
        except OSError as e:
            raise CacheIOError(f"Failed to read neighbour cache {self.path}: {e}") from e
        if len(blob) % self.record_size:
            raise CacheIOError(
                f"neighbour cache {self.path} holds {len(blob)} bytes, not a multiple of {self.record_size}"
            )
        count = self.num_states * self.hidden_size
        for offset in range(0, len(blob), self.record_size):
            node_id, version = _RECORD_HEADER.unpack_from(blob, offset)
            states = np.frombuffer(blob, dtype="<f8", count=count, offset=offset + _RECORD_HEADER.size)
            self._entries[node_id] = (version, states.reshape(self.num_states, self.hidden_size).copy())
        logger.info(f"Loaded {len(self._entries)} cached neighbours from {self.path}")


_io_retry = retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.1, min=0.1, max=2),
    retry=retry_if_exception_type(OSError),
    before_sleep=before_sleep_log(logger, logging.WARNING),
    reraise=True,
)


@_io_retry
def _append_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "ab") as handle:
        handle.write(payload)


@_io_retry
def _read_bytes(path: Path) -> bytes:
    return path.read_bytes()


def cache_lookup_or_encode(
    cache: NeighborCache,
    node_id: int,
    tokens: Sequence[int],
    params: ParamSet,
    cfg: ModelConfig,
) -> List[Tensor]:
    """
    Neighbour states [z1..z(L-1)] from the cache, encoding and inserting on a
    miss. Entries stored under another parameter version are recomputed and
    overwritten.
    """
    if cfg.mode != EncoderMode.UNIDIRECTIONAL:
        raise ContractError("neighbour caching needs unidirectional mode")
    version = params.version
    cached = cache.lookup(node_id, version)
    if cached is not None:
        logger.debug(f"Neighbour cache hit: node {node_id}")
        return [Tensor(row) for row in cached]

    logger.debug(f"Neighbour cache miss: node {node_id}")
    states = encode_plain_stack(tokens, params, cfg)[: cfg.num_layers - 1]
    cache.put(node_id, version, np.stack([z.data for z in states]))
    return [z.detach() for z in states]
