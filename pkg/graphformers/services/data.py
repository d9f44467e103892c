"""
Textual graphs: synthetic generation, neighbour sampling, training pairs,
evaluation instances and on-disk format.

Graph file::

    #NODE <id> <tok> <tok> ...
    #EDGE <u> <v>

plus a JSON sidecar with the generator config, seed and cluster labels.
Corpus files use the same records with free text after the node id; a
dataset built from one also carries its ``vocab.json``.
Split files hold one ``u v`` edge per line.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import networkx as nx
import numpy as np

from graphformers.errors import ContractError, NodeNotFoundError
from graphformers.models.schemas import NaiveMode, SynthConfig
from graphformers.nn.encoder import GraphInput
from graphformers.services.tokenizer import CLS_ID, FIRST_WORD_ID, Vocab, tokenize_text

logger = logging.getLogger(__name__)

Edge = Tuple[int, int]
SPLITS = ("train", "valid", "test")
VOCAB_FILE = "vocab.json"


@dataclass
class TextGraph:
    """
    Node id -> token sequence (leading [CLS] included) plus undirected
    adjacency stored as sorted neighbour lists.
    """

    nodes: Dict[int, Tuple[int, ...]]
    adjacency: Dict[int, List[int]]
    clusters: Dict[int, int] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_edges(cls, nodes: Dict[int, Sequence[int]], edges: Iterable[Edge], **kwargs) -> "TextGraph":
        adjacency: Dict[int, Set[int]] = {node: set() for node in nodes}
        for u, v in edges:
            if u == v:
                raise ContractError(f"self-loop on node {u}")
            if u not in adjacency or v not in adjacency:
                raise NodeNotFoundError(f"edge ({u}, {v}) references an unknown node")
            adjacency[u].add(v)
            adjacency[v].add(u)
        return cls(
            nodes={node: tuple(seq) for node, seq in nodes.items()},
            adjacency={node: sorted(nbrs) for node, nbrs in adjacency.items()},
            **kwargs,
        )

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return sum(len(n) for n in self.adjacency.values()) // 2

    def neighbours(self, node: int) -> List[int]:
        try:
            return self.adjacency[node]
        except KeyError:
            raise NodeNotFoundError(f"unknown node {node}") from None

    def degree(self, node: int) -> int:
        return len(self.neighbours(node))

    def tokens(self, node: int) -> Tuple[int, ...]:
        try:
            return self.nodes[node]
        except KeyError:
            raise NodeNotFoundError(f"unknown node {node}") from None

    def edges(self) -> List[Edge]:
        return [(u, v) for u in sorted(self.adjacency) for v in self.adjacency[u] if u < v]

    def without_edges(self, removed: Iterable[Edge]) -> "TextGraph":
        """Same nodes, adjacency minus ``removed`` (used as the sampling context)."""
        drop = {(min(u, v), max(u, v)) for u, v in removed}
        kept = [e for e in self.edges() if e not in drop]
        return TextGraph.from_edges(self.nodes, kept, clusters=self.clusters, metadata=self.metadata)

    def validate(self) -> None:
        """Full scan: symmetric adjacency, no self-loops, no dangling ids."""
        for u, nbrs in self.adjacency.items():
            if u not in self.nodes:
                raise NodeNotFoundError(f"adjacency lists unknown node {u}")
            for v in nbrs:
                if v == u:
                    raise ContractError(f"self-loop on node {u}")
                if v not in self.adjacency or u not in self.adjacency[v]:
                    raise ContractError(f"edge ({u}, {v}) is not symmetric")

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(sorted(self.nodes))
        graph.add_edges_from(self.edges())
        return graph


@dataclass
class EdgeSplits:
    train: List[Edge]
    valid: List[Edge]
    test: List[Edge]

    def get(self, name: str) -> List[Edge]:
        if name not in SPLITS:
            raise ContractError(f"unknown split {name!r}, expected one of {SPLITS}")
        return getattr(self, name)

    def held_out(self) -> List[Edge]:
        return self.valid + self.test


@dataclass(frozen=True)
class TrainPair:
    query: int
    key: int
    query_neighbours: Tuple[int, ...] = ()
    key_neighbours: Tuple[int, ...] = ()

    @property
    def is_naive(self) -> bool:
        return self.key in self.query_neighbours or self.query in self.key_neighbours


@dataclass
class EvalInstance:
    """One query with 1 positive + n_neg negative candidates."""

    query: GraphInput
    candidates: List[GraphInput]
    positive_index: int = 0
    query_id: Optional[int] = None
    candidate_ids: List[int] = field(default_factory=list)


# --- generation ------------------------------------------------------------
def _block_sizes(num_nodes: int, num_clusters: int) -> List[int]:
    base, extra = divmod(num_nodes, num_clusters)
    return [base + (1 if c < extra else 0) for c in range(num_clusters)]


def _block_probabilities(cfg: SynthConfig, rng: np.random.Generator) -> List[np.ndarray]:
    """One symmetric C x C probability matrix per relation type."""
    C = cfg.num_clusters
    if not cfg.heterogeneous:
        probs = np.full((C, C), cfg.p_out)
        np.fill_diagonal(probs, cfg.p_in)
        return [probs]
    matrices = []
    R = cfg.relation_types
    for r in range(R):
        partner = np.arange(C) if r == 0 else rng.permutation(C)
        probs = np.full((C, C), cfg.p_out / R)
        probs[np.arange(C), partner] = cfg.p_in / R
        matrices.append(np.maximum(probs, probs.T))
    return matrices


def _unigrams(cfg: SynthConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cluster unigrams (C x W) with disjoint high-mass blocks, and a shared
    Zipfian noise unigram over all W word ids.
    """
    W = cfg.vocab_size - FIRST_WORD_ID
    if W < cfg.num_clusters:
        raise ContractError(f"{W} word ids cannot give {cfg.num_clusters} clusters disjoint blocks")
    blocks = np.array_split(np.arange(W), cfg.num_clusters)
    cluster = np.full((cfg.num_clusters, W), (1.0 - cfg.cluster_mass) / W)
    for c, block in enumerate(blocks):
        cluster[c, block] += cfg.cluster_mass / len(block)
    noise = 1.0 / np.arange(1, W + 1)
    return cluster / cluster.sum(axis=1, keepdims=True), noise / noise.sum()


def expected_degree(cfg: SynthConfig) -> float:
    size = cfg.num_nodes / cfg.num_clusters
    return cfg.p_in * (size - 1) + cfg.p_out * (cfg.num_nodes - size)


def generate_synthetic_graph(cfg: SynthConfig, seed: int = 0) -> Tuple[TextGraph, EdgeSplits]:
    """
    Stochastic-block-model textual graph.

    Each node belongs to a cluster; each of its tokens comes from the shared
    noise unigram with probability ``noise_ratio`` and from its cluster's
    unigram otherwise. Edges follow the block model (one layer per relation
    type when heterogeneous).

    Returns:
        (graph, edge splits)
    """
    if expected_degree(cfg) < 1.0:
        logger.warning(f"Expected degree {expected_degree(cfg):.2f} < 1; the graph will be very sparse")
    rng = np.random.default_rng(seed)
    sizes = _block_sizes(cfg.num_nodes, cfg.num_clusters)
    labels = np.repeat(np.arange(cfg.num_clusters), sizes)

    edges: Set[Edge] = set()
    for probs in _block_probabilities(cfg, rng):
        layer = nx.stochastic_block_model(sizes, probs.tolist(), seed=int(rng.integers(2**31 - 1)), sparse=True)
        edges.update((min(u, v), max(u, v)) for u, v in layer.edges() if u != v)

    cluster_p, noise_p = _unigrams(cfg)
    W = noise_p.size
    shape = (cfg.num_nodes, cfg.tokens_per_node)
    from_noise = rng.random(shape) < cfg.noise_ratio
    words = rng.choice(W, size=shape, p=noise_p)
    for c in range(cfg.num_clusters):
        members = np.flatnonzero(labels == c)
        words[members] = np.where(
            from_noise[members],
            words[members],
            rng.choice(W, size=(members.size, cfg.tokens_per_node), p=cluster_p[c]),
        )
    nodes = {i: (CLS_ID,) + tuple(int(w) + FIRST_WORD_ID for w in words[i]) for i in range(cfg.num_nodes)}

    graph = TextGraph.from_edges(
        nodes,
        sorted(edges),
        clusters={i: int(labels[i]) for i in range(cfg.num_nodes)},
        metadata={"generator": cfg.model_dump(mode="json"), "seed": seed},
    )
    splits = split_edges(graph, cfg.valid_fraction, cfg.test_fraction, rng)
    logger.info(
        f"Generated graph: {graph.num_nodes} nodes, {graph.num_edges} edges, "
        f"splits {len(splits.train)}/{len(splits.valid)}/{len(splits.test)}"
    )
    return graph, splits


def read_corpus(path: Union[str, Path]) -> Tuple[Dict[int, str], List[Edge]]:
    """Node texts and edges from a ``#NODE <id> <text>`` / ``#EDGE <u> <v>`` file."""
    path = Path(path)
    texts: Dict[int, str] = {}
    edges: List[Edge] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split(maxsplit=2)
        if not parts:
            continue
        try:
            if parts[0] == "#NODE":
                texts[int(parts[1])] = parts[2] if len(parts) > 2 else ""
            elif parts[0] == "#EDGE":
                u, v = line.split()[1:]
                edges.append((min(int(u), int(v)), max(int(u), int(v))))
            else:
                raise ContractError(f"{path}:{lineno}: unrecognised record {parts[0]!r}")
        except (IndexError, ValueError) as e:
            raise ContractError(f"{path}:{lineno}: malformed {parts[0]} record") from e
    return texts, sorted(set(edges))


def corpus_graph(
    path: Union[str, Path],
    cfg: SynthConfig,
    max_tokens: int,
    vocab_size: int,
    seed: int = 0,
) -> Tuple[TextGraph, EdgeSplits, Vocab]:
    """
    Tokenized textual graph from a corpus file.

    The vocabulary is built from all node texts and capped at ``vocab_size``
    ids; rarer words map to [UNK]. Each node keeps [CLS] plus at most
    ``max_tokens - 1`` word ids. Edges are split with the fractions in ``cfg``.

    Returns:
        (graph, edge splits, vocabulary)
    """
    texts, edges = read_corpus(path)
    if not texts:
        raise ContractError(f"corpus {path} holds no #NODE records")
    vocab = Vocab.build((texts[node] for node in sorted(texts)), max_size=vocab_size)
    nodes = {node: tuple(tokenize_text(text, vocab, max_tokens)) for node, text in texts.items()}
    graph = TextGraph.from_edges(nodes, edges, metadata={"corpus": str(path), "seed": seed})
    splits = split_edges(graph, cfg.valid_fraction, cfg.test_fraction, np.random.default_rng(seed))
    logger.info(
        f"Tokenized corpus {path}: {graph.num_nodes} nodes, {graph.num_edges} edges, {len(vocab)} ids, "
        f"splits {len(splits.train)}/{len(splits.valid)}/{len(splits.test)}"
    )
    return graph, splits, vocab


def split_edges(
    graph: TextGraph,
    valid_fraction: float,
    test_fraction: float,
    rng: np.random.Generator,
) -> EdgeSplits:
    """
    Partition edges into train/valid/test. An edge is held out only if both
    endpoints keep at least one training edge.
    """
    edges = graph.edges()
    n_test = int(round(len(edges) * test_fraction))
    n_valid = int(round(len(edges) * valid_fraction))
    remaining = {node: graph.degree(node) for node in graph.nodes}
    test, valid, train = [], [], []
    for index in rng.permutation(len(edges)):
        u, v = edges[index]
        holdable = remaining[u] > 1 and remaining[v] > 1
        if holdable and len(test) < n_test:
            test.append((u, v))
        elif holdable and len(valid) < n_valid:
            valid.append((u, v))
        else:
            train.append((u, v))
            continue
        remaining[u] -= 1
        remaining[v] -= 1
    if len(test) < n_test or len(valid) < n_valid:
        logger.warning(f"Held out {len(test)}/{n_test} test and {len(valid)}/{n_valid} valid edges")
    return EdgeSplits(train=sorted(train), valid=sorted(valid), test=sorted(test))


# --- sampling --------------------------------------------------------------
def sample_neighbors(
    graph: TextGraph,
    node: int,
    k: int,
    rng: np.random.Generator,
    exclude: Iterable[int] = (),
) -> List[int]:
    """min(k, degree) distinct neighbours, uniformly without replacement."""
    if k < 0:
        raise ContractError(f"k must be >= 0, got {k}")
    skip = set(exclude)
    pool = [n for n in graph.neighbours(node) if n not in skip]
    if k == 0:
        return []
    if len(pool) <= k:
        return pool
    picks = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in picks]


def _redraw(graph: TextGraph, node: int, sample: Tuple[int, ...], partner: int, rng: np.random.Generator) -> Tuple[int, ...]:
    """Replace ``partner`` in ``node``'s sample by an unused neighbour, or drop it."""
    if partner not in sample:
        return sample
    used = set(sample)
    alternatives = [n for n in graph.neighbours(node) if n not in used and n != partner]
    kept = [n for n in sample if n != partner]
    if alternatives:
        kept.append(alternatives[int(rng.integers(len(alternatives)))])
    return tuple(kept)


def filter_naive_pairs(
    pairs: Iterable[TrainPair],
    graph: TextGraph,
    rng: np.random.Generator,
    mode: NaiveMode = NaiveMode.REDRAW,
) -> List[TrainPair]:
    """
    Remove the trivial cases where the key is among the query's sampled
    neighbours or the other way round. ``drop`` discards the pair; ``redraw``
    replaces the offending neighbour when the graph offers another one and
    otherwise just removes it.
    """
    out = []
    dropped = 0
    for pair in pairs:
        if not pair.is_naive:
            out.append(pair)
            continue
        if NaiveMode(mode) == NaiveMode.DROP:
            dropped += 1
            continue
        out.append(
            TrainPair(
                query=pair.query,
                key=pair.key,
                query_neighbours=_redraw(graph, pair.query, pair.query_neighbours, pair.key, rng),
                key_neighbours=_redraw(graph, pair.key, pair.key_neighbours, pair.query, rng),
            )
        )
    if dropped:
        logger.debug(f"Dropped {dropped} naive pairs")
    return out


def build_link_pairs(
    graph: TextGraph,
    edges: Sequence[Edge],
    k: int,
    rng: np.random.Generator,
    both_orientations: bool = False,
    naive_mode: NaiveMode = NaiveMode.REDRAW,
) -> List[TrainPair]:
    """One TrainPair per edge (two with ``both_orientations``), naive cases filtered."""
    pairs = []
    for u, v in edges:
        orientations = [(u, v), (v, u)] if both_orientations else [(u, v)]
        for q, key in orientations:
            pairs.append(
                TrainPair(
                    query=q,
                    key=key,
                    query_neighbours=tuple(sample_neighbors(graph, q, k, rng)),
                    key_neighbours=tuple(sample_neighbors(graph, key, k, rng)),
                )
            )
    return filter_naive_pairs(pairs, graph, rng, naive_mode)


def make_graph_input(
    graph: TextGraph,
    node: int,
    neighbours: Sequence[int],
    max_tokens: Optional[int] = None,
) -> GraphInput:
    """GraphInput for ``node``; sequences longer than ``max_tokens`` are cut."""

    def seq(n: int) -> Tuple[int, ...]:
        tokens = graph.tokens(n)
        return tokens[:max_tokens] if max_tokens else tokens

    return GraphInput(
        center=seq(node),
        neighbours=tuple(seq(n) for n in neighbours),
        center_id=node,
        neighbour_ids=tuple(neighbours),
    )


def pair_inputs(pair: TrainPair, graph: TextGraph, max_tokens: Optional[int] = None) -> Tuple[GraphInput, GraphInput]:
    return (
        make_graph_input(graph, pair.query, pair.query_neighbours, max_tokens),
        make_graph_input(graph, pair.key, pair.key_neighbours, max_tokens),
    )


def make_eval_instances(
    graph: TextGraph,
    edges: Sequence[Edge],
    n_neg: int,
    k: int,
    rng: np.random.Generator,
    context: Optional[TextGraph] = None,
    exclude_adjacent: bool = True,
    max_instances: Optional[int] = None,
    max_tokens: Optional[int] = None,
) -> List[EvalInstance]:
    """
    Ranking instances: per edge (q, k+), the positive first, then ``n_neg``
    negatives drawn uniformly from nodes other than q (and, with
    ``exclude_adjacent``, not adjacent to q in ``graph``).

    Neighbourhoods come from ``context`` (default ``graph``) and are drawn once
    per node per call, so a node always carries the same neighbourhood.
    """
    if n_neg < 1:
        raise ContractError(f"n_neg must be >= 1, got {n_neg}")
    context = context or graph
    all_nodes = np.array(sorted(graph.nodes), dtype=np.int64)
    order = rng.permutation(len(edges))
    if max_instances is not None:
        order = order[:max_instances]

    neighbourhoods: Dict[int, GraphInput] = {}

    def node_input(node: int) -> GraphInput:
        if node not in neighbourhoods:
            neighbourhoods[node] = make_graph_input(
                graph, node, sample_neighbors(context, node, k, rng), max_tokens
            )
        return neighbourhoods[node]

    instances = []
    for index in order:
        q, positive = edges[index]
        banned = {q, positive}
        if exclude_adjacent:
            banned.update(graph.neighbours(q))
        pool = all_nodes[~np.isin(all_nodes, list(banned))]
        if pool.size < n_neg:
            logger.warning(f"Skipping edge ({q}, {positive}): only {pool.size} eligible negatives")
            continue
        negatives = [int(n) for n in rng.choice(pool, size=n_neg, replace=False)]
        candidate_ids = [positive] + negatives
        instances.append(
            EvalInstance(
                query=node_input(q),
                candidates=[node_input(c) for c in candidate_ids],
                positive_index=0,
                query_id=q,
                candidate_ids=candidate_ids,
            )
        )
    return instances


def truncate_neighbours(instances: Sequence[EvalInstance], cap: int) -> List[EvalInstance]:
    """Copies of ``instances`` with every neighbour list cut to ``cap``."""
    return [
        EvalInstance(
            query=inst.query.truncated(cap),
            candidates=[c.truncated(cap) for c in inst.candidates],
            positive_index=inst.positive_index,
            query_id=inst.query_id,
            candidate_ids=list(inst.candidate_ids),
        )
        for inst in instances
    ]


# --- persistence -----------------------------------------------------------
def write_graph(graph: TextGraph, path: Union[str, Path]) -> None:
    path = Path(path)
    lines = []
    for node in sorted(graph.nodes):
        words = " ".join(str(t) for t in graph.nodes[node][1:])
        lines.append(f"#NODE {node} {words}".rstrip())
    lines.extend(f"#EDGE {u} {v}" for u, v in graph.edges())
    path.write_text("\n".join(lines) + "\n")
    sidecar = {
        "metadata": graph.metadata,
        "clusters": [graph.clusters.get(n, -1) for n in sorted(graph.nodes)] if graph.clusters else [],
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read_graph(path: Union[str, Path]) -> TextGraph:
    path = Path(path)
    nodes: Dict[int, Tuple[int, ...]] = {}
    edges: List[Edge] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "#NODE":
            nodes[int(parts[1])] = (CLS_ID,) + tuple(int(t) for t in parts[2:])
        elif parts[0] == "#EDGE":
            edges.append((int(parts[1]), int(parts[2])))
        else:
            raise ContractError(f"{path}:{lineno}: unrecognised record {parts[0]!r}")
    clusters: Dict[int, int] = {}
    metadata: Dict[str, Any] = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        info = json.loads(sidecar.read_text())
        metadata = info.get("metadata", {})
        clusters = {n: c for n, c in zip(sorted(nodes), info.get("clusters", []))}
    return TextGraph.from_edges(nodes, edges, clusters=clusters, metadata=metadata)


def write_edges(edges: Sequence[Edge], path: Union[str, Path]) -> None:
    Path(path).write_text("".join(f"{u} {v}\n" for u, v in edges))


def read_edges(path: Union[str, Path]) -> List[Edge]:
    edges = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            u, v = line.split()
            edges.append((int(u), int(v)))
    return edges


def save_dataset(
    directory: Union[str, Path],
    graph: TextGraph,
    splits: EdgeSplits,
    vocab: Optional[Vocab] = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_graph(graph, directory / "graph.txt")
    for name in SPLITS:
        write_edges(splits.get(name), directory / f"{name}.edges")
    if vocab is not None:
        vocab.save(directory / VOCAB_FILE)
    return directory


def load_vocab(directory: Union[str, Path]) -> Optional[Vocab]:
    """The dataset's vocabulary, or None for synthetic datasets."""
    path = Path(directory) / VOCAB_FILE
    return Vocab.load(path) if path.exists() else None


def load_dataset(directory: Union[str, Path]) -> Tuple[TextGraph, EdgeSplits]:
    directory = Path(directory)
    graph_path = directory / "graph.txt"
    if not graph_path.exists():
        raise FileNotFoundError(f"graph file not found: {graph_path}")
    graph = read_graph(graph_path)
    splits = EdgeSplits(**{name: read_edges(directory / f"{name}.edges") for name in SPLITS})
    return graph, splits


def graph_summary(graph: TextGraph) -> Dict[str, Any]:
    """Counts, degree statistics, components and cluster homophily."""
    nxg = graph.to_networkx()
    degrees = np.array([graph.degree(n) for n in graph.nodes]) if graph.nodes else np.zeros(1)
    summary: Dict[str, Any] = {
        "nodes": graph.num_nodes,
        "edges": graph.num_edges,
        "mean_degree": float(degrees.mean()),
        "max_degree": int(degrees.max()),
        "isolated": int(nx.number_of_isolates(nxg)),
        "components": int(nx.number_connected_components(nxg)) if graph.nodes else 0,
    }
    if graph.clusters and graph.num_edges:
        intra = sum(1 for u, v in graph.edges() if graph.clusters[u] == graph.clusters[v])
        summary["homophily"] = intra / graph.num_edges
    if graph.metadata:
        summary["seed"] = graph.metadata.get("seed")
    return summary
