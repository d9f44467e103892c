import csv
import math

import numpy as np
import pytest

from graphformers.core import ops
from graphformers.core.tensor import Tensor, backward
from graphformers.errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    EmptyBatchError,
    NonFiniteGradientError,
)
from graphformers.models.schemas import ModelConfig, StageConfig, StageMode, SynthConfig, TrainSchedule
from graphformers.nn.encoder import GraphInput
from graphformers.nn.params import init_params, load_checkpoint
from graphformers.services.data import EdgeSplits, generate_synthetic_graph
from graphformers.services.tokenizer import CLS_ID, MASK_ID, PAD_ID, Vocab
from graphformers.services.training import (
    DivergenceGuard,
    GuardState,
    OptimizerState,
    Trainer,
    inbatch_contrastive_loss,
    optimizer_step,
    pollute_input,
    pollute_tokens,
    train_two_stage,
)


class ConstantRng:
    """Stand-in generator whose uniform draws are all ``value``."""

    def __init__(self, value: float):
        self.value = value

    def random(self, size):
        return np.full(size, self.value)

    def integers(self, low, high, size):
        return np.full(size, low)


class TestInBatchLoss:
    def test_two_orthonormal_pairs(self):
        q = Tensor(np.eye(2))
        loss = inbatch_contrastive_loss(q, Tensor(np.eye(2))).item()
        assert loss == pytest.approx(math.log(1.0 + math.exp(-1.0)), abs=1e-12)

    def test_identical_rows_give_log_batch(self):
        rows = Tensor(np.ones((5, 3)))
        assert inbatch_contrastive_loss(rows, rows).item() == pytest.approx(math.log(5), abs=1e-12)

    @pytest.mark.parametrize("B", [2, 4, 8])
    def test_zero_embeddings(self, B):
        zeros = Tensor(np.zeros((B, 6)))
        assert abs(inbatch_contrastive_loss(zeros, zeros).item() - math.log(B)) < 1e-10

    def test_single_pair_has_zero_loss(self, rng):
        assert inbatch_contrastive_loss(Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4)))).item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            inbatch_contrastive_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))

    def test_gradient_pulls_positive_closer(self, rng):
        q = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 4)))
        backward(inbatch_contrastive_loss(q, k))
        stepped = Tensor(q.numpy() - 0.01 * q.grad)
        assert inbatch_contrastive_loss(stepped, k).item() < inbatch_contrastive_loss(q, k).item()


class TestPollution:
    vocab = Vocab.synthetic(40)

    def test_never_selected(self):
        seq = (CLS_ID, 5, 6, 7)
        out, stats = pollute_tokens(seq, self.vocab, ConstantRng(1.0))
        assert out == seq
        assert stats.tokens_seen == 3 and stats.tokens_masked == 0

    def test_always_selected_masks_everything_but_cls_and_pads(self):
        seq = (CLS_ID, 5, 6, PAD_ID, PAD_ID)
        out, stats = pollute_tokens(seq, self.vocab, ConstantRng(0.0))
        assert out == (CLS_ID, MASK_ID, MASK_ID, PAD_ID, PAD_ID)
        assert stats.tokens_masked == stats.to_mask == 2

    def test_cls_only_sequence(self):
        out, stats = pollute_tokens((CLS_ID,), self.vocab, ConstantRng(0.0))
        assert out == (CLS_ID,) and stats.tokens_seen == 0

    def test_branch_shares(self):
        rng = np.random.default_rng(99)
        seq = (CLS_ID,) + tuple(int(t) for t in rng.integers(4, 40, size=100000))
        out, stats = pollute_tokens(seq, self.vocab, rng, prob=0.15)
        sigma = math.sqrt(100000 * 0.15 * 0.85)
        assert abs(stats.tokens_masked - 15000) < 4.5 * sigma
        assert abs(stats.tokens_masked / stats.tokens_seen - 0.15) < 0.005
        assert stats.tokens_masked == stats.to_mask + stats.to_random + stats.kept
        assert abs(stats.to_mask / stats.tokens_masked - 0.8) < 0.015
        assert abs(stats.to_random / stats.tokens_masked - 0.1) < 0.015
        assert abs(stats.kept / stats.tokens_masked - 0.1) < 0.015
        assert out[0] == CLS_ID
        assert all(4 <= t < 40 or t == MASK_ID for t in out[1:])
        changed = sum(a != b for a, b in zip(seq, out))
        assert changed <= stats.to_mask + stats.to_random

    def test_input_pollution_covers_every_node(self):
        inp = GraphInput((CLS_ID, 5, 6), ((CLS_ID, 7), (CLS_ID, 8, 9)), center_id=0, neighbour_ids=(1, 2))
        out, stats = pollute_input(inp, self.vocab, ConstantRng(0.0))
        assert out.center == (CLS_ID, MASK_ID, MASK_ID)
        assert out.neighbours == ((CLS_ID, MASK_ID), (CLS_ID, MASK_ID, MASK_ID))
        assert out.neighbour_ids == (1, 2)
        assert stats.tokens_seen == 5


class TestOptimizer:
    def test_minimises_quadratic(self):
        theta = Tensor([1.0], requires_grad=True)
        state = OptimizerState()
        for _ in range(200):
            backward(ops.sum(ops.mul(theta, theta)), inputs=[theta])
            optimizer_step({"theta": theta}, state, lr=0.05)
        assert abs(theta.numpy()[0]) < 0.05
        assert state.step == 200

    def test_first_step_moves_by_learning_rate(self):
        theta = Tensor([2.0, -3.0], requires_grad=True)
        backward(ops.sum(ops.mul(theta, theta)), inputs=[theta])
        optimizer_step({"theta": theta}, OptimizerState(), lr=0.1)
        assert np.allclose(theta.numpy(), [1.9, -2.9], atol=1e-6)
        assert np.all(theta.grad == 0.0)

    def test_non_finite_gradient_aborts_without_update(self):
        good = Tensor([1.0], requires_grad=True)
        bad = Tensor([1.0, 2.0], requires_grad=True)
        good.grad = np.array([0.5])
        bad.grad = np.array([0.1, np.inf])
        state = OptimizerState(step=6)
        with pytest.raises(NonFiniteGradientError) as info:
            optimizer_step({"good": good, "bad": bad}, state, lr=0.1)
        assert info.value.param_name == "bad"
        assert info.value.step == 7
        assert good.numpy().tolist() == [1.0] and state.step == 6


class TestDivergenceGuard:
    def test_trips_after_patience(self):
        guard = DivergenceGuard(factor=10.0, patience=3)
        guard.record(1.0)
        guard.record(20.0, step=1)
        guard.record(20.0, step=2)
        with pytest.raises(DivergenceError):
            guard.record(20.0, step=3)
        assert guard.state == GuardState.TRIPPED

    def test_recovery_resets_count(self):
        guard = DivergenceGuard(factor=10.0, patience=3)
        for step, loss in enumerate([1.0, 20.0, 20.0, 5.0, 20.0, 20.0]):
            guard.record(loss, step)
        assert guard.state == GuardState.WATCHING
        assert guard.failure_count == 2


class TestTrainer:
    def test_two_stage_run(self, synth_dataset, train_cfg, quick_schedule, tmp_path):
        graph, splits = synth_dataset
        params = init_params(train_cfg, seed=1)
        start = params.version_hex
        result = train_two_stage(params, graph, splits, quick_schedule, output_dir=tmp_path)

        versions = result.stage_versions
        assert versions["stage1_end"] == versions["stage2_start"]
        assert versions["stage1_end"] != start
        assert versions["final"] != versions["stage2_start"]
        assert result.pollution.tokens_masked > 0
        assert len(result.log.losses("train", stage=1)) == 4
        assert len(result.log.losses("train", stage=2)) == 4
        assert all(np.isfinite(result.log.losses("valid")))

        with open(tmp_path / "train_log.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["stage", "step", "split", "loss"]
        assert len(rows) - 1 == len(result.log.records)
        with open(tmp_path / "train_timing.csv", newline="") as handle:
            timing = list(csv.reader(handle))
        assert timing[0] == ["stage", "step", "split", "wall_ms"]
        assert [row[:3] for row in timing[1:]] == [row[:3] for row in rows[1:]]
        final = load_checkpoint(tmp_path / "checkpoints" / "final")
        assert final.version_hex == versions["final"]
        assert (tmp_path / "checkpoints" / "stage1-final" / "manifest.json").exists()
        assert (tmp_path / "checkpoints" / "stage1-step2" / "manifest.json").exists()

    def test_loss_log_is_byte_identical_across_runs(self, synth_dataset, train_cfg, quick_schedule, tmp_path):
        graph, splits = synth_dataset
        for name in ("a", "b"):
            train_two_stage(init_params(train_cfg, seed=1), graph, splits, quick_schedule, output_dir=tmp_path / name)
        assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()

    def test_inline_timing_column(self, synth_dataset, train_cfg, quick_schedule, tmp_path):
        graph, splits = synth_dataset
        schedule = quick_schedule.model_copy(update={"timing_in_log": True})
        result = train_two_stage(init_params(train_cfg, seed=1), graph, splits, schedule, output_dir=tmp_path)
        with open(tmp_path / "train_log.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["stage", "step", "split", "loss", "wall_ms"]
        assert all(float(row[4]) >= 0.0 for row in rows[1:])
        assert len(rows) - 1 == len(result.log.records)
        assert not (tmp_path / "train_timing.csv").exists()

    @pytest.mark.parametrize("valid_edges", [0, 1])
    def test_too_few_validation_pairs(self, synth_dataset, train_cfg, quick_schedule, valid_edges):
        graph, splits = synth_dataset
        short = EdgeSplits(train=splits.train, valid=splits.valid[:valid_edges], test=splits.test)
        with pytest.raises(ConfigError, match="validation pairs"):
            Trainer(init_params(train_cfg), graph, short, quick_schedule)

    def test_single_stage(self, synth_dataset, train_cfg, quick_schedule):
        graph, splits = synth_dataset
        schedule = quick_schedule.model_copy(update={"stages": StageMode.ONE})
        result = train_two_stage(init_params(train_cfg, seed=1), graph, splits, schedule)
        assert "stage1_end" not in result.stage_versions
        assert result.log.losses("train", stage=1) == []
        assert result.pollution.tokens_masked == 0

    def test_same_seed_same_run(self, synth_dataset, train_cfg, quick_schedule):
        graph, splits = synth_dataset
        first = train_two_stage(init_params(train_cfg, seed=1), graph, splits, quick_schedule)
        second = train_two_stage(init_params(train_cfg, seed=1), graph, splits, quick_schedule)
        assert first.log.losses("train") == second.log.losses("train")
        assert first.stage_versions == second.stage_versions

    def test_prefetch_does_not_change_the_run(self, synth_dataset, train_cfg, quick_schedule):
        graph, splits = synth_dataset
        threaded = quick_schedule.model_copy(update={"prefetch_workers": 2})
        plain = train_two_stage(init_params(train_cfg, seed=1), graph, splits, quick_schedule)
        ahead = train_two_stage(init_params(train_cfg, seed=1), graph, splits, threaded)
        assert plain.log.losses("train") == ahead.log.losses("train")

    def test_batches_depend_only_on_stage_and_step(self, synth_dataset, train_cfg, quick_schedule):
        graph, splits = synth_dataset
        trainer = Trainer(init_params(train_cfg), graph, splits, quick_schedule)
        q1, k1, s1 = trainer.assemble(1, 3, polluted=True)
        trainer.assemble(1, 4, polluted=True)
        q2, k2, s2 = trainer.assemble(1, 3, polluted=True)
        assert np.array_equal(q1.tokens, q2.tokens) and np.array_equal(k1.tokens, k2.tokens)
        assert s1 == s2

    def test_held_out_edges_never_used_for_context(self, synth_dataset, train_cfg, quick_schedule):
        graph, splits = synth_dataset
        trainer = Trainer(init_params(train_cfg), graph, splits, quick_schedule)
        held = {(min(u, v), max(u, v)) for u, v in splits.held_out()}
        for pair in trainer.train_pairs:
            for node, sample in ((pair.query, pair.query_neighbours), (pair.key, pair.key_neighbours)):
                assert not any((min(node, n), max(node, n)) in held for n in sample)

    def test_batch_larger_than_pairs(self, synth_dataset, train_cfg, quick_schedule):
        graph, splits = synth_dataset
        with pytest.raises(EmptyBatchError):
            Trainer(init_params(train_cfg), graph, splits, quick_schedule.model_copy(update={"batch_size": 10000}))

    def test_patience_stops_a_stage(self, synth_dataset, train_cfg, quick_schedule):
        graph, splits = synth_dataset
        stage = StageConfig(max_steps=50, patience=1, min_delta=1e6, eval_every=1)
        schedule = quick_schedule.model_copy(update={"stage1": stage, "stage2": stage})
        result = train_two_stage(init_params(train_cfg, seed=1), graph, splits, schedule)
        assert len(result.log.losses("train", stage=1)) == 1
        assert len(result.log.losses("train", stage=2)) == 1


@pytest.mark.slow
def test_training_halves_clean_validation_loss():
    data = SynthConfig(num_nodes=500, num_clusters=20, vocab_size=200, tokens_per_node=8, p_in=0.2, p_out=0.001)
    graph, splits = generate_synthetic_graph(data, seed=0)
    cfg = ModelConfig(num_layers=2, hidden_size=32, num_heads=4, max_tokens=9, max_neighbours=3, vocab_size=200)
    stage = StageConfig(max_steps=300, patience=5, eval_every=50)
    schedule = TrainSchedule(
        stage1=stage, stage2=stage, learning_rate=3e-3, batch_size=16, neighbours=3, valid_pairs=64, seed=0
    )
    trainer = Trainer(init_params(cfg, seed=0), graph, splits, schedule)
    initial_clean = trainer.validation_loss(2, polluted=False)
    result = trainer.train()
    final_clean = result.log.losses("valid", stage=2)[-1]
    assert final_clean <= 0.5 * initial_clean
