"""
Pydantic models for configuration sections and report records.
Everything read from or written to disk passes through one of these.
"""
from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator


class EncoderMode(str, Enum):
    """How neighbours take part in nested encoding."""
    BIDIRECTIONAL = "bidirectional"
    UNIDIRECTIONAL = "unidirectional"


class Aggregator(str, Enum):
    """Graph aggregation scheme. ``nested`` is GraphFormers, the rest are cascaded."""
    NESTED = "nested"
    NONE = "none"
    MAX = "max"
    MEAN = "mean"
    ATT = "att"
    GAT = "gat"


class NaiveMode(str, Enum):
    """What to do with a training pair whose partner shows up as a sampled neighbour."""
    REDRAW = "redraw"
    DROP = "drop"


class StageMode(str, Enum):
    TWO = "two"
    ONE = "one"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True, use_enum_values=False)


class ModelConfig(_Section):
    """
    Architecture hyperparameters. Parameter shapes are a pure function of this.
    """
    num_layers: int = Field(default=3, ge=2, description="L: TRM0 plus at least one nested step")
    hidden_size: int = Field(default=64, ge=1, description="d: model dimension")
    num_heads: int = Field(default=4, ge=1, description="h: attention heads")
    max_tokens: int = Field(default=16, ge=1, description="P: max tokens per node, [CLS] included")
    max_neighbours: int = Field(default=5, ge=0, description="K: max neighbours per instance")
    vocab_size: int = Field(default=1000, ge=5, description="V: vocabulary size incl. reserved ids")
    ffn_multiplier: int = Field(default=4, ge=1, description="MLP hidden width as a multiple of d")
    share_gnn: bool = Field(default=True, description="One GNN parameter set for all layers")
    relation_bias: bool = Field(default=True, description="Learnable center/neighbour position bias in the GNN")
    mode: EncoderMode = Field(default=EncoderMode.UNIDIRECTIONAL, description="Nested aggregation direction")
    aggregator: Aggregator = Field(default=Aggregator.NESTED, description="nested (GraphFormers) or a cascaded baseline")
    layer_norm_eps: float = Field(default=1e-12, gt=0.0, description="LayerNorm epsilon")
    init_std: float = Field(default=0.02, gt=0.0, description="Truncated-normal init std")

    @model_validator(mode="after")
    def validate_heads(self) -> "ModelConfig":
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} must be divisible by num_heads {self.num_heads}"
            )
        return self

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def is_nested(self) -> bool:
        return self.aggregator == Aggregator.NESTED

    @property
    def num_gnn_sets(self) -> int:
        if not self.is_nested:
            return 0
        return 1 if self.share_gnn else self.num_layers - 1


class SynthConfig(_Section):
    """
    Stochastic-block-model textual graph generator settings.
    """
    num_nodes: int = Field(default=5000, ge=2, description="N")
    num_clusters: int = Field(default=20, ge=1, description="C")
    vocab_size: int = Field(default=1000, ge=5, description="V incl. reserved ids")
    tokens_per_node: int = Field(default=12, ge=0, description="P_text: text tokens per node, [CLS] excluded")
    noise_ratio: float = Field(default=0.5, ge=0.0, le=1.0, description="rho: share of tokens from the shared noise unigram")
    cluster_mass: float = Field(default=0.9, gt=0.0, le=1.0, description="Mass a cluster unigram puts on its own block")
    p_in: float = Field(default=0.024, ge=0.0, le=1.0, description="Intra-cluster edge probability")
    p_out: float = Field(default=0.0004, ge=0.0, le=1.0, description="Inter-cluster edge probability")
    heterogeneous: bool = Field(default=False, description="Draw edges across several relation types")
    relation_types: int = Field(default=3, ge=1, description="R: relation types when heterogeneous")
    valid_fraction: float = Field(default=0.1, ge=0.0, lt=1.0, description="Share of edges held out for validation")
    test_fraction: float = Field(default=0.1, ge=0.0, lt=1.0, description="Share of edges held out for test")
    corpus: Optional[str] = Field(
        default=None, description="Text corpus (#NODE <id> <text> / #EDGE <u> <v>) tokenized instead of generating"
    )

    @model_validator(mode="after")
    def validate_block_model(self) -> "SynthConfig":
        if not self.p_in > self.p_out:
            raise ValueError(f"p_in ({self.p_in}) must exceed p_out ({self.p_out})")
        if self.num_clusters > self.num_nodes:
            raise ValueError("num_clusters cannot exceed num_nodes")
        if self.valid_fraction + self.test_fraction >= 1.0:
            raise ValueError("valid_fraction + test_fraction must be < 1")
        return self


class StageConfig(_Section):
    """One training stage: runs until the step cap or validation patience runs out."""
    max_steps: int = Field(default=2000, ge=0, description="Step cap for the stage")
    patience: int = Field(default=3, ge=1, description="Evaluations without improvement before stopping")
    min_delta: float = Field(default=1e-3, ge=0.0, description="Improvement that resets patience")
    eval_every: int = Field(default=100, ge=1, description="Steps between validation evaluations")


class TrainSchedule(_Section):
    """
    Two-stage progressive schedule: polluted inputs first, then clean inputs.
    """
    stages: StageMode = Field(default=StageMode.TWO, description="two = progressive, one = clean only")
    stage1: StageConfig = Field(default_factory=StageConfig, description="Polluted stage")
    stage2: StageConfig = Field(default_factory=StageConfig, description="Clean stage")
    learning_rate: float = Field(default=1e-3, gt=0.0, description="Adam learning rate")
    batch_size: int = Field(default=32, description="B: in-batch negatives come from the other B-1 keys")
    seed: Optional[int] = Field(default=None, description="Training seed; falls back to the run seed")
    neighbours: int = Field(default=5, ge=0, description="k: sampled neighbours per node")
    both_orientations: bool = Field(default=False, description="Emit (k, q) as well as (q, k) per edge")
    naive_mode: NaiveMode = Field(default=NaiveMode.REDRAW, description="Handling of naive pairs")
    mask_prob: float = Field(default=0.15, ge=0.0, le=1.0, description="Pollution selection probability")
    valid_pairs: int = Field(default=512, ge=2, description="Validation pairs per evaluation")
    checkpoint_every: int = Field(default=500, ge=1, description="Steps between checkpoints")
    divergence_factor: float = Field(default=10.0, gt=1.0, description="Loss/initial ratio counted as divergent")
    divergence_patience: int = Field(default=100, ge=1, description="Consecutive divergent steps before abort")
    prefetch_workers: int = Field(default=0, ge=0, description="Threads assembling batches ahead of the loop")
    timing_in_log: bool = Field(
        default=False, description="Write wall_ms into train_log.csv instead of train_timing.csv"
    )

    @field_validator("batch_size")
    @classmethod
    def validate_batch_size(cls, v: int) -> int:
        if v < 2:
            raise ValueError("batch_size must be >= 2 (B=1 has no in-batch negatives)")
        return v

    @property
    def effective_stage1_steps(self) -> int:
        return 0 if self.stages == StageMode.ONE else self.stage1.max_steps


class EvalOptions(_Section):
    """Ranking evaluation settings."""
    split: str = Field(default="test", description="Edge split to evaluate")
    n_neg: int = Field(default=99, ge=1, description="Negatives per query (299 reproduces the 300-key protocol)")
    num_instances: int = Field(default=1000, ge=1, description="Max evaluation instances")
    neighbours: int = Field(default=5, ge=0, description="k: sampled neighbours per node")
    exclude_adjacent: bool = Field(default=True, description="Negatives exclude the query's true neighbours")
    neighbour_sweep: List[int] = Field(default_factory=list, description="Neighbour caps to sweep, e.g. [1,2,3,4,5]")
    dump_ranks: bool = Field(default=False, description="Keep per-instance ranks in the report")

    @field_validator("split")
    @classmethod
    def validate_split(cls, v: str) -> str:
        allowed = ["train", "valid", "test"]
        if v not in allowed:
            raise ValueError(f"split must be one of: {allowed}")
        return v


class BenchOptions(_Section):
    """Scaling benchmark settings; the model shape here overrides ModelConfig."""
    neighbour_sizes: List[int] = Field(default_factory=lambda: [3, 5, 10, 20, 50], description="#N values")
    batch_size: int = Field(default=8, ge=1, description="Instances per mini-batch")
    reps: int = Field(default=5, ge=1, description="Timed repetitions per point")
    warmup: int = Field(default=1, ge=1, description="Untimed warm-up iterations")
    max_tokens: int = Field(default=16, ge=1, description="P")
    hidden_size: int = Field(default=64, ge=1, description="d")
    num_layers: int = Field(default=4, ge=2, description="L")
    num_heads: int = Field(default=4, ge=1, description="h")
    min_ticks: int = Field(default=100, ge=1, description="Minimum timer ticks per repetition")


class PollutionStats(BaseModel):
    """Counts from token pollution."""
    tokens_seen: int = Field(default=0, ge=0, description="Eligible tokens inspected")
    tokens_masked: int = Field(default=0, ge=0, description="Tokens selected for pollution")
    to_mask: int = Field(default=0, ge=0, description="Selected tokens replaced by [MASK]")
    to_random: int = Field(default=0, ge=0, description="Selected tokens replaced by a random id")
    kept: int = Field(default=0, ge=0, description="Selected tokens left unchanged")

    @model_validator(mode="after")
    def validate_buckets(self) -> "PollutionStats":
        if self.tokens_masked != self.to_mask + self.to_random + self.kept:
            raise ValueError("tokens_masked must equal the sum of the three buckets")
        return self

    def __add__(self, other: "PollutionStats") -> "PollutionStats":
        return PollutionStats(
            tokens_seen=self.tokens_seen + other.tokens_seen,
            tokens_masked=self.tokens_masked + other.tokens_masked,
            to_mask=self.to_mask + other.to_mask,
            to_random=self.to_random + other.to_random,
            kept=self.kept + other.kept,
        )


class RankReport(BaseModel):
    """Averaged single-relevant ranking metrics."""
    p_at_1: float = Field(..., ge=0.0, le=1.0, description="Precision@1")
    ndcg: float = Field(..., ge=0.0, le=1.0, description="NDCG with one relevant item")
    mrr: float = Field(..., ge=0.0, le=1.0, description="Mean reciprocal rank")
    num_instances: int = Field(..., ge=0, description="Instances evaluated")
    ranks: Optional[List[int]] = Field(default=None, description="Per-instance rank of the positive")
    label: Optional[str] = Field(default=None, description="Model / setting label")


class BenchRow(BaseModel):
    """Time and memory per mini-batch for one (mode, #N) point."""
    mode: str = Field(..., description="nested or cascaded")
    n_neighbours: int = Field(..., ge=0, description="#N")
    batch: int = Field(..., ge=1, description="Instances per mini-batch")
    mean_ms: float = Field(..., ge=0.0, description="Mean wall time per forward+backward")
    std_ms: float = Field(..., ge=0.0, description="Standard deviation across reps")
    peak_mib: float = Field(..., ge=0.0, description="Allocator high-water mark within the batch window")
    rss_mib: float = Field(default=0.0, ge=0.0, description="Resident set size after the window")
    reps: int = Field(default=1, ge=1, description="Timed repetitions")


class LinearFit(BaseModel):
    alpha: float = Field(..., description="Intercept (ms)")
    beta: float = Field(..., description="Slope (ms per neighbour)")
    r2: float = Field(..., description="Coefficient of determination")


class BenchSummary(BaseModel):
    """Benchmark rows plus fitted scaling lines and nested/cascaded overheads."""
    rows: List[BenchRow] = Field(default_factory=list)
    fits: Dict[str, LinearFit] = Field(default_factory=dict, description="mode -> time fit")
    overhead_ratio: Dict[int, float] = Field(default_factory=dict, description="#N -> nested/cascaded time")
    marginal_ms: Dict[str, Dict[int, float]] = Field(
        default_factory=dict, description="mode -> #N -> time minus the smallest-#N time"
    )
    marginal_mib: Dict[str, Dict[int, float]] = Field(
        default_factory=dict, description="mode -> #N -> memory minus the smallest-#N memory"
    )


class TrainLogRecord(BaseModel):
    stage: int = Field(..., ge=1, le=2)
    step: int = Field(..., ge=0)
    split: str = Field(..., description="train or valid")
    loss: float
    wall_ms: float = Field(..., ge=0.0)


class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    file: str


class CheckpointManifest(BaseModel):
    """JSON manifest stored beside the GFKT tensor files of a checkpoint."""
    format_version: int = Field(default=1)
    config: ModelConfig
    tensors: List[TensorEntry] = Field(default_factory=list)
    version: str = Field(..., description="Content hash of the parameter set")
    step: int = Field(default=0, ge=0)
    stage: int = Field(default=0, ge=0)


class CacheStats(BaseModel):
    hits: int = 0
    misses: int = 0
    entries: int = 0
    writes: int = 0

    @computed_field
    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0
