"""
ParamSet: every learnable tensor of a model, addressed by name.

Handles initialisation, the closed-form parameter count, the content-hash
version used to key the neighbour cache, and checkpoint I/O.
"""
import hashlib
import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from tenacity import (
    before_sleep_log,
    retry,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from graphformers.core.io import dumps, load_tensor
from graphformers.core.tensor import Tensor
from graphformers.errors import CacheIOError, ContractError
from graphformers.models.schemas import Aggregator, CheckpointManifest, ModelConfig, TensorEntry
from graphformers.nn.layers import EmbeddingTable, MhaWeights, RelationBias, TransformerLayerWeights

logger = logging.getLogger(__name__)

POOLING_AGGREGATORS = (Aggregator.MAX, Aggregator.MEAN, Aggregator.ATT)


def _truncated_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    """Normal(0, std) with values beyond 2 std redrawn."""
    values = rng.normal(0.0, std, size=shape)
    outside = np.abs(values) > 2 * std
    while outside.any():
        values[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(values) > 2 * std
    return values


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for ``cfg``."""
    d, f = cfg.hidden_size, cfg.hidden_size * cfg.ffn_multiplier
    count = cfg.vocab_size * d + cfg.max_tokens * d
    per_layer = 4 * d * d + 4 * d  # q/k/v/o weights and biases
    per_layer += d * f + f + f * d + d  # MLP
    per_layer += 4 * d  # two LayerNorms
    count += cfg.num_layers * per_layer
    per_gnn = 3 * d * d + (3 * cfg.num_heads if cfg.relation_bias else 0)
    count += cfg.num_gnn_sets * per_gnn
    if cfg.aggregator in POOLING_AGGREGATORS:
        count += 2 * d * d + d
    return count


class ParamSet:
    """
    Named parameter tensors plus the ModelConfig that shaped them.

    Iteration order is insertion order, which is fixed by ``init_params``;
    the content hash and checkpoints depend on it.
    """

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self.tensors = tensors
        self._version_key: Optional[Tuple[int, ...]] = None
        self._version: Optional[int] = None

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def __len__(self) -> int:
        return len(self.tensors)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    # --- structured views ------------------------------------------------
    def embeddings(self) -> EmbeddingTable:
        return EmbeddingTable(word=self["embed.word"], position=self["embed.position"])

    def layer(self, index: int) -> TransformerLayerWeights:
        if not 0 <= index < self.config.num_layers:
            raise ContractError(f"layer {index} outside [0, {self.config.num_layers})")
        p = f"trm.{index}"
        attn = MhaWeights(
            wq=self[f"{p}.attn.wq"], wk=self[f"{p}.attn.wk"], wv=self[f"{p}.attn.wv"],
            bq=self[f"{p}.attn.bq"], bk=self[f"{p}.attn.bk"], bv=self[f"{p}.attn.bv"],
            wo=self[f"{p}.attn.wo"], bo=self[f"{p}.attn.bo"],
            num_heads=self.config.num_heads,
        )
        return TransformerLayerWeights(
            attn=attn,
            w1=self[f"{p}.ffn.w1"], b1=self[f"{p}.ffn.b1"],
            w2=self[f"{p}.ffn.w2"], b2=self[f"{p}.ffn.b2"],
            ln1_gamma=self[f"{p}.ln1.gamma"], ln1_beta=self[f"{p}.ln1.beta"],
            ln2_gamma=self[f"{p}.ln2.gamma"], ln2_beta=self[f"{p}.ln2.beta"],
            eps=self.config.layer_norm_eps,
        )

    def gnn(self, step: int) -> Tuple[MhaWeights, Optional[RelationBias]]:
        """GNN weights for nested step ``step`` in 1..L-1."""
        if not self.config.is_nested:
            raise ContractError(f"aggregator {self.config.aggregator.value} has no GNN parameters")
        if not 1 <= step < self.config.num_layers:
            raise ContractError(f"GNN step {step} outside [1, {self.config.num_layers})")
        index = 0 if self.config.share_gnn else step - 1
        p = f"gnn.{index}"
        w = MhaWeights(
            wq=self[f"{p}.wq"], wk=self[f"{p}.wk"], wv=self[f"{p}.wv"],
            num_heads=self.config.num_heads,
        )
        bias = RelationBias(self[f"{p}.relation_bias"]) if self.config.relation_bias else None
        return w, bias

    def aggregator_weights(self) -> Tuple[Tensor, Tensor]:
        if "agg.w" not in self:
            raise ContractError(f"aggregator {self.config.aggregator.value} has no affine map")
        return self["agg.w"], self["agg.b"]

    # --- versioning ------------------------------------------------------
    @property
    def version(self) -> int:
        """
        u64 content hash of all tensors. Recomputed only when some tensor's
        version counter moved.
        """
        key = tuple(t.version for t in self.tensors.values())
        if self._version is None or key != self._version_key:
            digest = hashlib.sha256()
            for name, tensor in self.tensors.items():
                digest.update(name.encode())
                digest.update(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
            self._version = int.from_bytes(digest.digest()[:8], "little")
            self._version_key = key
        return self._version

    @property
    def version_hex(self) -> str:
        return f"{self.version:016x}"

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def copy(self) -> "ParamSet":
        tensors = OrderedDict(
            (name, Tensor(t.data, requires_grad=t.requires_grad, name=name, dtype=t.dtype))
            for name, t in self.tensors.items()
        )
        return ParamSet(self.config, tensors)

    def shapes(self) -> Dict[str, List[int]]:
        return {name: list(t.shape) for name, t in self.tensors.items()}


def init_params(cfg: ModelConfig, seed: int = 0, std: Optional[float] = None) -> ParamSet:
    """
    Build a ParamSet for ``cfg``: truncated normal projections and
    embeddings, ones/zeros LayerNorms, zero biases and relation biases.

    Args:
        cfg: model configuration
        seed: initialisation seed
        std: overrides ``cfg.init_std``

    Returns:
        ParamSet with every tensor requiring grad
    """
    rng = np.random.default_rng(seed)
    std = cfg.init_std if std is None else std
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        fill = _constant_init(name)
        if fill is None:
            data = _truncated_normal(rng, tuple(shape), std)
        else:
            data = np.full(shape, fill)
        tensors[name] = Tensor(data, requires_grad=True, name=name)

    params = ParamSet(cfg, tensors)
    logger.debug(
        f"Initialised {len(tensors)} tensors, {params.parameter_count()} parameters "
        f"(aggregator={cfg.aggregator.value}, mode={cfg.mode.value})"
    )
    return params


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.1, min=0.1, max=2),
    retry=retry_if_exception_type(OSError),
    before_sleep=before_sleep_log(logger, logging.WARNING),
    reraise=True,
)
def _write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def save_checkpoint(params: ParamSet, directory: Union[str, Path], step: int = 0, stage: int = 0) -> Path:
    """
    Write ``manifest.json`` plus one GFKT file per tensor under ``directory``.

    Returns:
        The checkpoint directory
    """
    directory = Path(directory)
    tensor_dir = directory / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    try:
        for name, tensor in params.items():
            file_name = f"{name}.gfkt"
            _write_bytes(tensor_dir / file_name, dumps(tensor))
            entries.append(TensorEntry(name=name, shape=list(tensor.shape), file=f"tensors/{file_name}"))
        manifest = CheckpointManifest(
            config=params.config,
            tensors=entries,
            version=params.version_hex,
            step=step,
            stage=stage,
        )
        _write_bytes(directory / "manifest.json", manifest.model_dump_json(indent=2).encode())
    except OSError as e:
        raise CacheIOError(f"Failed to write checkpoint {directory}: {e}") from e
    logger.info(f"Saved checkpoint {directory} (version {params.version_hex}, step {step})")
    return directory


def load_manifest(directory: Union[str, Path]) -> CheckpointManifest:
    path = Path(directory) / "manifest.json"
    return CheckpointManifest.model_validate(json.loads(path.read_text()))


def load_checkpoint(directory: Union[str, Path]) -> ParamSet:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Raises:
        ContractError: tensor shapes disagree with the manifest or the content
            hash does not match the recorded version
    """
    directory = Path(directory)
    manifest = load_manifest(directory)
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for entry in manifest.tensors:
        tensor = load_tensor(directory / entry.file, requires_grad=True)
        if list(tensor.shape) != entry.shape:
            raise ContractError(f"tensor {entry.name} has shape {tensor.shape}, manifest says {entry.shape}")
        tensor.name = entry.name
        tensors[entry.name] = tensor
    params = ParamSet(manifest.config, tensors)
    expected = param_shapes(manifest.config)
    if params.shapes() != expected:
        raise ContractError(f"checkpoint {directory} does not match its config")
    if params.version_hex != manifest.version:
        raise ContractError(
            f"checkpoint {directory} content hash {params.version_hex} != manifest {manifest.version}"
        )
    return params


_ZERO_SUFFIXES = ("bq", "bk", "bv", "bo", "b1", "b2", "beta", "relation_bias", "b")


def _constant_init(name: str) -> Optional[float]:
    """Fill value for constant-initialised tensors, None for random ones."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return 1.0
    if leaf in _ZERO_SUFFIXES:
        return 0.0
    return None


def param_shapes(cfg: ModelConfig) -> Dict[str, List[int]]:
    """Tensor name -> shape for ``cfg``, in ParamSet order."""
    d, f, h = cfg.hidden_size, cfg.hidden_size * cfg.ffn_multiplier, cfg.num_heads
    shapes: Dict[str, List[int]] = {
        "embed.word": [cfg.vocab_size, d],
        "embed.position": [cfg.max_tokens, d],
    }
    for layer in range(cfg.num_layers):
        p = f"trm.{layer}"
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{proj}"] = [d, d]
        for b in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{b}"] = [d]
        shapes[f"{p}.ffn.w1"] = [d, f]
        shapes[f"{p}.ffn.b1"] = [f]
        shapes[f"{p}.ffn.w2"] = [f, d]
        shapes[f"{p}.ffn.b2"] = [d]
        for ln in ("ln1", "ln2"):
            shapes[f"{p}.{ln}.gamma"] = [d]
            shapes[f"{p}.{ln}.beta"] = [d]
    for index in range(cfg.num_gnn_sets):
        for proj in ("wq", "wk", "wv"):
            shapes[f"gnn.{index}.{proj}"] = [d, d]
        if cfg.relation_bias:
            shapes[f"gnn.{index}.relation_bias"] = [3, h]
    if cfg.aggregator in POOLING_AGGREGATORS:
        shapes["agg.w"] = [2 * d, d]
        shapes["agg.b"] = [d]
    return shapes
