"""
Shared fixtures: tiny model configs and parameters, toy graphs and a small
synthetic dataset.
"""
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pytest
from faker import Faker

from graphformers.models.schemas import ModelConfig, StageConfig, SynthConfig, TrainSchedule
from graphformers.nn.encoder import CLS_ID, GraphInput
from graphformers.nn.params import init_params
from graphformers.services.data import TextGraph, generate_synthetic_graph


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def random_sequence(rng: np.random.Generator, length: int, vocab_size: int) -> Tuple[int, ...]:
    """[CLS] followed by ``length - 1`` word ids (never reserved ids)."""
    return (CLS_ID,) + tuple(int(t) for t in rng.integers(4, vocab_size, size=length - 1))


def random_input(
    rng: np.random.Generator,
    cfg: ModelConfig,
    num_neighbours: int,
    lengths: Sequence[int] = (),
    first_id: int = 0,
) -> GraphInput:
    """GraphInput with random texts; node ids ``first_id .. first_id + M - 1``."""
    M = num_neighbours + 1
    lengths = list(lengths) or [int(rng.integers(2, cfg.max_tokens + 1)) for _ in range(M)]
    seqs = [random_sequence(rng, n, cfg.vocab_size) for n in lengths]
    return GraphInput(
        center=seqs[0],
        neighbours=tuple(seqs[1:]),
        center_id=first_id,
        neighbour_ids=tuple(range(first_id + 1, first_id + M)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(
        num_layers=2,
        hidden_size=8,
        num_heads=2,
        max_tokens=6,
        max_neighbours=3,
        vocab_size=12,
    )


@pytest.fixture
def tiny_params(tiny_cfg):
    """Larger init so every activation path carries signal."""
    params = init_params(tiny_cfg, seed=0, std=0.3)
    bias_rng = np.random.default_rng(7)
    for name, tensor in params.items():
        if name.endswith("relation_bias"):
            tensor.assign_(bias_rng.normal(0.0, 0.5, size=tensor.shape))
    return params


@pytest.fixture
def small_cfg():
    return ModelConfig(
        num_layers=3,
        hidden_size=16,
        num_heads=4,
        max_tokens=8,
        max_neighbours=4,
        vocab_size=40,
    )


def toy_graph(edges: List[Tuple[int, int]], num_nodes: int, length: int = 4) -> TextGraph:
    nodes: Dict[int, Tuple[int, ...]] = {
        i: (CLS_ID,) + tuple(4 + (i * 3 + j) % 8 for j in range(length - 1)) for i in range(num_nodes)
    }
    return TextGraph.from_edges(nodes, edges)


@pytest.fixture
def triangle():
    return toy_graph([(0, 1), (1, 2), (0, 2)], 3)


@pytest.fixture
def path3():
    return toy_graph([(0, 1), (1, 2)], 3)


@pytest.fixture
def star():
    """Center 0 with leaves 1..5."""
    return toy_graph([(0, i) for i in range(1, 6)], 6)


@pytest.fixture
def synth_cfg():
    return SynthConfig(
        num_nodes=60,
        num_clusters=3,
        vocab_size=40,
        tokens_per_node=5,
        p_in=0.3,
        p_out=0.01,
    )


@pytest.fixture
def synth_dataset(synth_cfg):
    return generate_synthetic_graph(synth_cfg, seed=3)


@pytest.fixture
def train_cfg():
    """Model matching ``synth_cfg`` (5 words + [CLS] per node)."""
    return ModelConfig(
        num_layers=2,
        hidden_size=8,
        num_heads=2,
        max_tokens=6,
        max_neighbours=3,
        vocab_size=40,
    )


@pytest.fixture
def quick_schedule():
    stage = StageConfig(max_steps=4, patience=2, min_delta=1e-3, eval_every=2)
    return TrainSchedule(
        stage1=stage,
        stage2=stage,
        learning_rate=1e-3,
        batch_size=4,
        seed=11,
        neighbours=3,
        valid_pairs=8,
        checkpoint_every=2,
    )


def write_text_corpus(path, num_nodes: int = 30, seed: int = 1234):
    """Corpus file of Faker sentences on a ring with +5 chords (degree 4 everywhere)."""
    fake = Faker()
    fake.seed_instance(seed)
    lines = [f"#NODE {i} {fake.sentence(nb_words=8)}" for i in range(num_nodes)]
    for i in range(num_nodes):
        lines.append(f"#EDGE {i} {(i + 1) % num_nodes}")
        lines.append(f"#EDGE {i} {(i + 5) % num_nodes}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def text_corpus(tmp_path):
    return write_text_corpus(tmp_path / "corpus.txt")
