"""
Link-prediction training with in-batch negatives.

Stage 1 trains on polluted inputs (MLM-style token masking on every node of
both query and key) until validation loss stops improving; stage 2 continues
from the same parameters on clean inputs.
"""
import csv
import logging
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from graphformers.core import ops
from graphformers.core.tensor import Tensor, backward, no_grad
from graphformers.errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    EmptyBatchError,
    NonFiniteGradientError,
)
from graphformers.models.schemas import (
    NaiveMode,
    PollutionStats,
    StageConfig,
    StageMode,
    TrainLogRecord,
    TrainSchedule,
)
from graphformers.nn.encoder import GraphInput, pack_graphs
from graphformers.nn.model import forward_batch
from graphformers.nn.params import ParamSet, save_checkpoint
from graphformers.observability.tracing import get_tracer
from graphformers.services.data import EdgeSplits, TextGraph, TrainPair, build_link_pairs, pair_inputs
from graphformers.services.tokenizer import FIRST_WORD_ID, PAD_ID, Vocab

logger = logging.getLogger(__name__)

LOG_HEADER = ["stage", "step", "split", "loss"]
TIMING_HEADER = ["stage", "step", "split", "wall_ms"]
TIMING_FILE = "train_timing.csv"
_MASK_SHARE = 0.8
_RANDOM_SHARE = 0.1


def inbatch_contrastive_loss(q_emb: Tensor, k_emb: Tensor) -> Tensor:
    """
    mean_i -log softmax_j(<q_i, k_j>)[i]: row i of ``k_emb`` is the positive
    for row i of ``q_emb``; every other row is a negative. Raw inner
    products, no temperature.
    """
    if q_emb.ndim != 2 or q_emb.shape != k_emb.shape:
        raise DimensionError(f"query {q_emb.shape} and key {k_emb.shape} embeddings must both be [B, d]")
    B = q_emb.shape[0]
    if B == 0:
        raise EmptyBatchError("in-batch loss needs at least one pair")
    scores = ops.matmul(q_emb, ops.swap_last(k_emb))
    diagonal = ops.getitem(ops.log_softmax(scores), (np.arange(B), np.arange(B)))
    return ops.scale(ops.mean(diagonal), -1.0)


def pollute_tokens(
    tokens: Sequence[int],
    vocab: Vocab,
    rng: Any,
    prob: float = 0.15,
) -> Tuple[Tuple[int, ...], PollutionStats]:
    """
    Dynamic masking of one sequence. Position 0 ([CLS]) and pads are never
    candidates; each other token is selected with ``prob``, then replaced by
    [MASK] (80%), a uniformly random word id (10%) or kept (10%).
    """
    mask_id = vocab.mask_id
    out = np.asarray(tokens, dtype=np.int64).copy()
    eligible = np.flatnonzero(out != PAD_ID)
    eligible = eligible[eligible > 0]
    if eligible.size == 0:
        return tuple(int(t) for t in out), PollutionStats()

    selected = eligible[np.asarray(rng.random(eligible.size)) < prob]
    branch = np.asarray(rng.random(selected.size))
    to_mask = selected[branch < _MASK_SHARE]
    to_random = selected[(branch >= _MASK_SHARE) & (branch < _MASK_SHARE + _RANDOM_SHARE)]
    out[to_mask] = mask_id
    if to_random.size:
        out[to_random] = rng.integers(FIRST_WORD_ID, len(vocab), size=to_random.size)
    stats = PollutionStats(
        tokens_seen=int(eligible.size),
        tokens_masked=int(selected.size),
        to_mask=int(to_mask.size),
        to_random=int(to_random.size),
        kept=int(selected.size - to_mask.size - to_random.size),
    )
    return tuple(int(t) for t in out), stats


def pollute_input(inp: GraphInput, vocab: Vocab, rng: Any, prob: float = 0.15) -> Tuple[GraphInput, PollutionStats]:
    """Pollute the center and every neighbour of ``inp``."""
    center, stats = pollute_tokens(inp.center, vocab, rng, prob)
    neighbours = []
    for seq in inp.neighbours:
        polluted, s = pollute_tokens(seq, vocab, rng, prob)
        neighbours.append(polluted)
        stats = stats + s
    return GraphInput(center, tuple(neighbours), inp.center_id, inp.neighbour_ids), stats


@dataclass
class OptimizerState:
    """Adam moments per parameter name plus the step counter."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def optimizer_step(
    params: Mapping[str, Tensor],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    """
    One bias-corrected Adam update, in place, followed by zeroing the grads.

    Raises:
        NonFiniteGradientError: some gradient holds NaN/Inf; nothing is updated
    """
    named = list(params.items())
    for name, tensor in named:
        if tensor.grad is not None and not np.all(np.isfinite(tensor.grad)):
            raise NonFiniteGradientError(name, state.step + 1)

    state.step += 1
    t = state.step
    for name, tensor in named:
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(tensor.data)
            v = state.v[name] = np.zeros_like(tensor.data)
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        tensor.add_(-lr * m_hat / (np.sqrt(v_hat) + eps))
        tensor.zero_grad()
    return state


class GuardState(str, Enum):
    """Divergence guard states."""
    WATCHING = "watching"
    TRIPPED = "tripped"


class DivergenceGuard:
    """
    Trips after ``patience`` consecutive losses above ``factor`` times the
    first loss seen.
    """

    def __init__(self, factor: float = 10.0, patience: int = 100):
        self.factor = factor
        self.patience = patience
        self.initial: Optional[float] = None
        self.failure_count = 0
        self.state = GuardState.WATCHING

    def record(self, loss: float, step: int = 0) -> None:
        if self.initial is None:
            self.initial = loss
            return
        if loss > self.factor * self.initial:
            self.failure_count += 1
        else:
            self.failure_count = 0
        if self.failure_count >= self.patience:
            self.state = GuardState.TRIPPED
            logger.warning(
                f"Divergence guard tripped at step {step}: loss {loss:.4f} > "
                f"{self.factor}x initial {self.initial:.4f} for {self.failure_count} steps"
            )
            raise DivergenceError(
                f"loss above {self.factor}x initial for {self.failure_count} consecutive steps (step {step})"
            )


class TrainLog:
    """
    Append-only loss CSV ``stage,step,split,loss``. Wall time goes to the
    sibling ``train_timing.csv``, or to a fifth ``wall_ms`` column with
    ``timing_inline``.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None, timing_inline: bool = False):
        self.path = Path(path) if path is not None else None
        self.timing_inline = timing_inline
        self.timing_path: Optional[Path] = None
        self.records: List[TrainLogRecord] = []
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if timing_inline:
            self._write(self.path, LOG_HEADER + ["wall_ms"], "w")
        else:
            self.timing_path = self.path.with_name(TIMING_FILE)
            self._write(self.path, LOG_HEADER, "w")
            self._write(self.timing_path, TIMING_HEADER, "w")

    @staticmethod
    def _write(path: Path, row: List[Any], mode: str = "a") -> None:
        with open(path, mode, newline="") as handle:
            csv.writer(handle).writerow(row)

    def append(self, record: TrainLogRecord) -> None:
        self.records.append(record)
        if self.path is None:
            return
        key = [record.stage, record.step, record.split]
        wall = f"{record.wall_ms:.3f}"
        if self.timing_inline:
            self._write(self.path, key + [repr(record.loss), wall])
        else:
            self._write(self.path, key + [repr(record.loss)])
            self._write(self.timing_path, key + [wall])

    def losses(self, split: str, stage: Optional[int] = None) -> List[float]:
        return [r.loss for r in self.records if r.split == split and (stage is None or r.stage == stage)]


@dataclass
class TrainResult:
    params: ParamSet
    log: TrainLog
    optimizer: OptimizerState
    stage_versions: Dict[str, str] = field(default_factory=dict)
    pollution: PollutionStats = field(default_factory=PollutionStats)


def _step_rng(seed: int, stage: int, step: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stage, step, stream]))


class Trainer:
    """
    Owns the data, parameters and optimizer for one training run.
    """

    def __init__(
        self,
        params: ParamSet,
        graph: TextGraph,
        splits: EdgeSplits,
        schedule: TrainSchedule,
        seed: int = 0,
        output_dir: Optional[Union[str, Path]] = None,
        vocab: Optional[Vocab] = None,
    ):
        self.params = params
        self.cfg = params.config
        self.schedule = schedule
        self.seed = schedule.seed if schedule.seed is not None else seed
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.vocab = vocab or Vocab.synthetic(self.cfg.vocab_size)
        self.optimizer = OptimizerState()
        self.pollution = PollutionStats()
        self.log = TrainLog(
            self.output_dir / "train_log.csv" if self.output_dir else None, timing_inline=schedule.timing_in_log
        )
        self.global_step = 0

        k = min(schedule.neighbours, self.cfg.max_neighbours)
        self.graph = graph
        self.context = graph.without_edges(splits.held_out())
        pair_rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xDA7A]))
        self.train_pairs = build_link_pairs(
            self.context, splits.train, k, pair_rng, schedule.both_orientations, NaiveMode(schedule.naive_mode)
        )
        valid_edges = splits.valid[: schedule.valid_pairs]
        self.valid_pairs = build_link_pairs(self.context, valid_edges, k, pair_rng, False, NaiveMode(schedule.naive_mode))
        if len(self.train_pairs) < schedule.batch_size:
            raise EmptyBatchError(
                f"{len(self.train_pairs)} training pairs cannot fill a batch of {schedule.batch_size}"
            )
        if len(self.valid_pairs) < 2:
            raise ConfigError(
                f"{len(self.valid_pairs)} validation pairs from {len(splits.valid)} valid edges; "
                "patience needs at least 2 (raise data.valid_fraction or train.valid_pairs)"
            )
        logger.info(f"Trainer ready: {len(self.train_pairs)} train pairs, {len(self.valid_pairs)} valid pairs")

    # --- batches -----------------------------------------------------------
    def _inputs(self, pairs: Sequence[TrainPair], polluted: bool, rng: Optional[np.random.Generator]):
        queries, keys = [], []
        stats = PollutionStats()
        for pair in pairs:
            q, k = pair_inputs(pair, self.context, self.cfg.max_tokens)
            if polluted:
                q, sq = pollute_input(q, self.vocab, rng, self.schedule.mask_prob)
                k, sk = pollute_input(k, self.vocab, rng, self.schedule.mask_prob)
                stats = stats + sq + sk
            queries.append(q)
            keys.append(k)
        return pack_graphs(queries, self.cfg), pack_graphs(keys, self.cfg), stats

    def assemble(self, stage: int, step: int, polluted: bool):
        """Training batch for (stage, step); depends only on the seed and those two numbers."""
        rng = _step_rng(self.seed, stage, step)
        picks = rng.choice(len(self.train_pairs), size=self.schedule.batch_size, replace=False)
        return self._inputs([self.train_pairs[i] for i in picks], polluted, rng)

    def loss_on(self, q_batch, k_batch) -> Tensor:
        return inbatch_contrastive_loss(forward_batch(q_batch, self.params), forward_batch(k_batch, self.params))

    def validation_loss(self, stage: int, polluted: bool) -> float:
        """Mean in-batch loss over the fixed validation pairs (fixed pollution seed)."""
        B = self.schedule.batch_size
        pairs = self.valid_pairs
        rng = _step_rng(self.seed, stage, 0, stream=1) if polluted else None
        losses = []
        with no_grad():
            for start in range(0, len(pairs), B):
                chunk = pairs[start:start + B]
                if len(chunk) < 2:
                    continue
                q_batch, k_batch, _ = self._inputs(chunk, polluted, rng)
                losses.append(self.loss_on(q_batch, k_batch).item())
        return float(np.mean(losses))

    # --- loop --------------------------------------------------------------
    def _record(self, stage: int, step: int, split: str, loss: float, started: float) -> None:
        self.log.append(
            TrainLogRecord(stage=stage, step=step, split=split, loss=loss, wall_ms=(time.perf_counter() - started) * 1000)
        )

    def run_stage(self, stage: int, stage_cfg: StageConfig, polluted: bool) -> int:
        """
        Train until the step cap or until validation loss has not improved by
        ``min_delta`` for ``patience`` consecutive evaluations.

        Returns:
            Number of optimizer steps taken
        """
        started = time.perf_counter()
        guard = DivergenceGuard(self.schedule.divergence_factor, self.schedule.divergence_patience)
        best = self.validation_loss(stage, polluted)
        self._record(stage, 0, "valid", best, started)
        logger.info(f"Stage {stage} ({'polluted' if polluted else 'clean'}): initial valid loss {best:.4f}")
        stale = 0
        workers = self.schedule.prefetch_workers
        pool = ThreadPoolExecutor(max_workers=workers) if workers > 0 else None
        pending: Dict[int, Future] = {}

        def fetch(step: int):
            if pool is None:
                return self.assemble(stage, step, polluted)
            for ahead in range(step, min(step + workers + 1, stage_cfg.max_steps + 1)):
                if ahead not in pending:
                    pending[ahead] = pool.submit(self.assemble, stage, ahead, polluted)
            return pending.pop(step).result()

        steps = 0
        try:
            for step in range(1, stage_cfg.max_steps + 1):
                q_batch, k_batch, stats = fetch(step)
                self.pollution = self.pollution + stats
                loss = self.loss_on(q_batch, k_batch)
                backward(loss, inputs=list(self.params))
                optimizer_step(self.params.tensors, self.optimizer, self.schedule.learning_rate)
                steps = step
                self.global_step += 1
                value = loss.item()
                self._record(stage, step, "train", value, started)
                guard.record(value, step)

                if self.output_dir is not None and step % self.schedule.checkpoint_every == 0:
                    save_checkpoint(self.params, self.output_dir / "checkpoints" / f"stage{stage}-step{step}", step, stage)

                if step % stage_cfg.eval_every == 0:
                    current = self.validation_loss(stage, polluted)
                    self._record(stage, step, "valid", current, started)
                    logger.info(f"Stage {stage} step {step}: train {value:.4f} valid {current:.4f}")
                    if current < best - stage_cfg.min_delta:
                        best = current
                        stale = 0
                    else:
                        stale += 1
                        if stale >= stage_cfg.patience:
                            logger.info(f"Stage {stage} converged after {step} steps (best valid {best:.4f})")
                            break
        finally:
            if pool is not None:
                pool.shutdown(wait=True, cancel_futures=True)
        return steps

    def train(self) -> TrainResult:
        tracer = get_tracer()
        versions: Dict[str, str] = {}
        stage1_steps = self.schedule.effective_stage1_steps
        if stage1_steps > 0:
            with tracer.trace_span("stage1", "train", {"polluted": True}) as span:
                span["output"] = {"steps": self.run_stage(1, self.schedule.stage1, polluted=True)}
            versions["stage1_end"] = self.params.version_hex
            if self.output_dir is not None:
                save_checkpoint(self.params, self.output_dir / "checkpoints" / "stage1-final", self.global_step, 1)
        versions["stage2_start"] = self.params.version_hex
        with tracer.trace_span("stage2", "train", {"polluted": False}) as span:
            span["output"] = {"steps": self.run_stage(2, self.schedule.stage2, polluted=False)}
        versions["final"] = self.params.version_hex
        if self.output_dir is not None:
            save_checkpoint(self.params, self.output_dir / "checkpoints" / "final", self.global_step, 2)
        return TrainResult(
            params=self.params,
            log=self.log,
            optimizer=self.optimizer,
            stage_versions=versions,
            pollution=self.pollution,
        )


def train_two_stage(
    params: ParamSet,
    graph: TextGraph,
    splits: EdgeSplits,
    schedule: TrainSchedule,
    seed: int = 0,
    output_dir: Optional[Union[str, Path]] = None,
    vocab: Optional[Vocab] = None,
) -> TrainResult:
    """
    Polluted stage then clean stage (or clean only with ``stages=one`` or a
    zero-step stage 1). ``params`` are updated in place. ``vocab`` sets the
    [MASK] id and random-replacement range; synthetic ids are assumed
    without it.
    """
    if schedule.stages == StageMode.ONE:
        logger.info("Single-stage training (clean inputs only)")
    return Trainer(params, graph, splits, schedule, seed=seed, output_dir=output_dir, vocab=vocab).train()
