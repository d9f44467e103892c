import logging
from collections import Counter

import numpy as np
import pytest
from faker import Faker
from pydantic import ValidationError

from graphformers.errors import ConfigError, ContractError, NodeNotFoundError
from graphformers.models.schemas import NaiveMode, SynthConfig
from graphformers.services.data import (
    VOCAB_FILE,
    TrainPair,
    build_link_pairs,
    corpus_graph,
    filter_naive_pairs,
    generate_synthetic_graph,
    graph_summary,
    load_dataset,
    load_vocab,
    make_eval_instances,
    read_corpus,
    read_graph,
    sample_neighbors,
    save_dataset,
    truncate_neighbours,
    write_graph,
)
from graphformers.services.tokenizer import (
    CLS_ID,
    FIRST_WORD_ID,
    UNK_ID,
    Vocab,
    split_words,
    tokenize_text,
)
from tests.conftest import toy_graph


class TestSyntheticGraph:
    def test_node_texts(self, synth_dataset, synth_cfg):
        graph, _ = synth_dataset
        assert graph.num_nodes == synth_cfg.num_nodes
        for seq in graph.nodes.values():
            assert seq[0] == CLS_ID
            assert len(seq) == synth_cfg.tokens_per_node + 1
            assert all(FIRST_WORD_ID <= t < synth_cfg.vocab_size for t in seq[1:])
        graph.validate()

    def test_same_seed_same_graph(self, synth_cfg):
        first, first_splits = generate_synthetic_graph(synth_cfg, seed=3)
        second, second_splits = generate_synthetic_graph(synth_cfg, seed=3)
        assert first.nodes == second.nodes and first.edges() == second.edges()
        assert first_splits == second_splits
        other, _ = generate_synthetic_graph(synth_cfg, seed=4)
        assert other.edges() != first.edges()

    def test_edges_follow_clusters(self, synth_dataset):
        graph, _ = synth_dataset
        assert graph_summary(graph)["homophily"] > 0.8

    def test_noise_free_tokens_stay_in_cluster_block(self, synth_cfg):
        cfg = synth_cfg.model_copy(update={"noise_ratio": 0.0, "cluster_mass": 1.0})
        graph, _ = generate_synthetic_graph(cfg, seed=0)
        block = (cfg.vocab_size - FIRST_WORD_ID) // cfg.num_clusters
        for node, seq in graph.nodes.items():
            low = FIRST_WORD_ID + block * graph.clusters[node]
            assert all(low <= t < low + block for t in seq[1:])

    def test_heterogeneous_relations(self, synth_cfg):
        cfg = synth_cfg.model_copy(update={"heterogeneous": True, "relation_types": 3})
        graph, splits = generate_synthetic_graph(cfg, seed=1)
        graph.validate()
        assert graph.num_edges > 0
        assert len(splits.train) + len(splits.valid) + len(splits.test) == graph.num_edges

    def test_splits_partition_edges(self, synth_dataset):
        graph, splits = synth_dataset
        all_edges = splits.train + splits.valid + splits.test
        assert sorted(all_edges) == graph.edges()
        assert len(splits.valid) > 0 and len(splits.test) > 0
        train_graph = graph.without_edges(splits.held_out())
        for u, v in splits.held_out():
            assert train_graph.degree(u) >= 1 and train_graph.degree(v) >= 1

    @pytest.mark.parametrize("update", [{"p_in": 0.01, "p_out": 0.02}, {"valid_fraction": 0.6, "test_fraction": 0.5}])
    def test_invalid_generator_config(self, update):
        with pytest.raises(ValidationError):
            SynthConfig(**update)


class TestTextGraph:
    def test_self_loop(self):
        with pytest.raises(ContractError):
            toy_graph([(1, 1)], 2)

    def test_unknown_node(self, triangle):
        with pytest.raises(NodeNotFoundError):
            toy_graph([(0, 9)], 2)
        with pytest.raises(KeyError):
            triangle.neighbours(42)

    def test_without_edges(self, triangle):
        trimmed = triangle.without_edges([(2, 0)])
        assert trimmed.edges() == [(0, 1), (1, 2)]
        assert triangle.num_edges == 3

    def test_summary(self, star):
        summary = graph_summary(star)
        assert summary["nodes"] == 6 and summary["edges"] == 5
        assert summary["max_degree"] == 5 and summary["components"] == 1


class TestSampling:
    def test_small_degree_returns_all(self, star, rng):
        assert sample_neighbors(star, 1, 5, rng) == [0]
        assert sorted(sample_neighbors(star, 0, 9, rng)) == [1, 2, 3, 4, 5]

    def test_zero_and_negative_k(self, star, rng):
        assert sample_neighbors(star, 0, 0, rng) == []
        with pytest.raises(ContractError):
            sample_neighbors(star, 0, -1, rng)

    def test_uniform_without_replacement(self, star, rng):
        draws = 20000
        counts = Counter()
        for _ in range(draws):
            sample = sample_neighbors(star, 0, 2, rng)
            assert len(set(sample)) == 2
            counts.update(sample)
        sigma = np.sqrt(0.4 * 0.6 / draws)
        for leaf in range(1, 6):
            assert abs(counts[leaf] / draws - 0.4) < 4.5 * sigma

    def test_exclude(self, star, rng):
        assert sorted(sample_neighbors(star, 0, 5, rng, exclude=[2, 3])) == [1, 4, 5]


class TestNaivePairs:
    def test_redraw_replaces_partner(self, star, rng):
        pair = TrainPair(query=0, key=1, query_neighbours=(1, 2), key_neighbours=(0,))
        (fixed,) = filter_naive_pairs([pair], star, rng, NaiveMode.REDRAW)
        assert len(fixed.query_neighbours) == 2
        assert 2 in fixed.query_neighbours and fixed.query_neighbours[-1] in (3, 4, 5)
        assert fixed.key_neighbours == ()
        assert not fixed.is_naive

    def test_drop_mode(self, star, rng):
        naive = TrainPair(0, 1, (1, 2), (0,))
        clean = TrainPair(0, 2, (3,), ())
        assert filter_naive_pairs([naive, clean], star, rng, NaiveMode.DROP) == [clean]

    def test_triangle_pairs_exclude_partner(self, triangle, rng):
        pairs = build_link_pairs(triangle, triangle.edges(), 2, rng, both_orientations=True)
        assert len(pairs) == 6
        for pair in pairs:
            assert pair.key not in pair.query_neighbours
            assert pair.query not in pair.key_neighbours

    def test_single_edge(self, rng):
        graph = toy_graph([(0, 1)], 2)
        (pair,) = build_link_pairs(graph, [(0, 1)], 3, rng)
        assert pair.query_neighbours == () and pair.key_neighbours == ()


class TestEvalInstances:
    def test_path_negatives(self, path3, rng, caplog):
        with caplog.at_level(logging.WARNING, logger="graphformers.services.data"):
            instances = make_eval_instances(path3, path3.edges(), 1, 2, rng)
        assert len(instances) == 1
        assert instances[0].candidate_ids == [1, 2]
        assert instances[0].query_id == 0
        assert "Skipping edge (1, 2)" in caplog.text

    def test_adjacent_negatives_allowed_when_asked(self, path3, rng):
        instances = make_eval_instances(path3, path3.edges(), 1, 2, rng, exclude_adjacent=False)
        assert len(instances) == 2

    def test_negatives_avoid_query_and_its_neighbours(self, synth_dataset, rng):
        graph, splits = synth_dataset
        for inst in make_eval_instances(graph, splits.test, 20, 3, rng):
            negatives = inst.candidate_ids[1:]
            assert len(set(negatives)) == 20
            assert inst.query_id not in negatives
            assert not set(negatives) & set(graph.neighbours(inst.query_id))

    def test_node_keeps_one_neighbourhood(self, synth_dataset, rng):
        graph, splits = synth_dataset
        seen = {}
        for inst in make_eval_instances(graph, splits.test, 30, 3, rng):
            for node_id, inp in zip([inst.query_id] + inst.candidate_ids, [inst.query] + inst.candidates):
                assert seen.setdefault(node_id, inp) == inp

    def test_context_supplies_neighbourhoods(self, synth_dataset, rng):
        graph, splits = synth_dataset
        context = graph.without_edges(splits.held_out())
        for inst in make_eval_instances(graph, splits.test, 5, 5, rng, context=context):
            assert set(inst.query.neighbour_ids) <= set(context.neighbours(inst.query_id))
            assert inst.candidate_ids[0] not in inst.query.neighbour_ids

    def test_truncate(self, synth_dataset, rng):
        graph, splits = synth_dataset
        instances = make_eval_instances(graph, splits.test, 5, 3, rng, max_instances=4)
        assert len(instances) <= 4
        for inst in truncate_neighbours(instances, 1):
            assert all(len(c.neighbours) <= 1 for c in [inst.query] + inst.candidates)

    def test_bad_negative_count(self, path3, rng):
        with pytest.raises(ContractError):
            make_eval_instances(path3, path3.edges(), 0, 2, rng)


class TestDatasetFiles:
    def test_round_trip(self, synth_dataset, tmp_path):
        graph, splits = synth_dataset
        save_dataset(tmp_path, graph, splits)
        loaded, loaded_splits = load_dataset(tmp_path)
        assert loaded.nodes == graph.nodes
        assert loaded.edges() == graph.edges()
        assert loaded.clusters == graph.clusters
        assert loaded_splits == splits

    def test_byte_identical_rewrite(self, synth_cfg, tmp_path):
        for name in ("a", "b"):
            save_dataset(tmp_path / name, *generate_synthetic_graph(synth_cfg, seed=8))
        for file in ("graph.txt", "graph.json", "train.edges", "valid.edges", "test.edges"):
            assert (tmp_path / "a" / file).read_bytes() == (tmp_path / "b" / file).read_bytes()

    def test_record_format(self, path3, tmp_path):
        write_graph(path3, tmp_path / "graph.txt")
        lines = (tmp_path / "graph.txt").read_text().splitlines()
        assert lines[0].startswith("#NODE 0 ")
        assert lines[-2:] == ["#EDGE 0 1", "#EDGE 1 2"]

    def test_unrecognised_record(self, tmp_path):
        (tmp_path / "graph.txt").write_text("#NODE 0 5 6\n#BOGUS 1\n")
        with pytest.raises(ContractError):
            read_graph(tmp_path / "graph.txt")

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nowhere")


class TestCorpus:
    def test_nodes_are_tokenized_with_the_corpus_vocabulary(self, text_corpus):
        texts, edges = read_corpus(text_corpus)
        graph, splits, vocab = corpus_graph(text_corpus, SynthConfig(), max_tokens=6, vocab_size=40, seed=2)
        assert len(vocab) <= 40
        assert graph.num_nodes == len(texts) == 30 and graph.edges() == edges
        for node, text in texts.items():
            assert graph.tokens(node) == tuple(tokenize_text(text, vocab, 6))
            assert graph.tokens(node)[0] == CLS_ID and len(graph.tokens(node)) <= 6
        assert sorted(splits.train + splits.valid + splits.test) == edges
        assert len(graph.edges()) == 60 and 0 < len(splits.test) <= 6 and 0 < len(splits.valid) <= 6
        assert graph.metadata == {"corpus": str(text_corpus), "seed": 2}

    def test_rare_words_become_unknown(self, tmp_path):
        path = tmp_path / "corpus.txt"
        path.write_text("#NODE 0 apple apple pear\n#NODE 1 apple plum\n#NODE 2\n#EDGE 1 0\n")
        graph, _, vocab = corpus_graph(path, SynthConfig(), max_tokens=8, vocab_size=FIRST_WORD_ID + 1)
        assert vocab.itos[FIRST_WORD_ID:] == ["apple"]
        assert graph.tokens(0) == (CLS_ID, FIRST_WORD_ID, FIRST_WORD_ID, UNK_ID)
        assert graph.tokens(2) == (CLS_ID,)
        assert graph.edges() == [(0, 1)]

    @pytest.mark.parametrize("text", ["#NODE x words\n", "#EDGE 1\n", "#NODES 0 a\n"])
    def test_malformed_records(self, tmp_path, text):
        (tmp_path / "corpus.txt").write_text(text)
        with pytest.raises(ContractError):
            read_corpus(tmp_path / "corpus.txt")

    def test_empty_corpus(self, tmp_path):
        (tmp_path / "corpus.txt").write_text("\n")
        with pytest.raises(ContractError):
            corpus_graph(tmp_path / "corpus.txt", SynthConfig(), max_tokens=6, vocab_size=40)

    def test_vocabulary_is_saved_with_the_dataset(self, text_corpus, synth_dataset, tmp_path):
        graph, splits, vocab = corpus_graph(text_corpus, SynthConfig(), max_tokens=6, vocab_size=40)
        save_dataset(tmp_path / "text", graph, splits, vocab)
        assert (tmp_path / "text" / VOCAB_FILE).exists()
        assert load_vocab(tmp_path / "text").itos == vocab.itos
        loaded, _ = load_dataset(tmp_path / "text")
        assert loaded.nodes == graph.nodes

        save_dataset(tmp_path / "synthetic", *synth_dataset)
        assert load_vocab(tmp_path / "synthetic") is None


class TestTokenizer:
    @pytest.fixture
    def corpus(self):
        fake = Faker()
        fake.seed_instance(1234)
        return [fake.paragraph(nb_sentences=5, variable_nb_sentences=False) for _ in range(40)]

    def test_reserved_ids_and_frequency_order(self, corpus):
        vocab = Vocab.build(corpus)
        assert vocab.itos[:FIRST_WORD_ID] == ["[PAD]", "[CLS]", "[MASK]", "[UNK]"]
        counts = Counter(w for text in corpus for w in split_words(text))
        most_common = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        assert vocab.id_of(most_common) == FIRST_WORD_ID
        assert len(vocab) == FIRST_WORD_ID + len(counts)

    def test_max_size(self, corpus):
        assert len(Vocab.build(corpus, max_size=20)) == 20

    def test_tokenize(self, corpus):
        vocab = Vocab.build(corpus[:10])
        ids = tokenize_text(corpus[0], vocab, max_tokens=8)
        assert ids[0] == CLS_ID and len(ids) == 8
        assert all(i >= FIRST_WORD_ID for i in ids[1:])
        assert tokenize_text("", vocab) == [CLS_ID]
        assert tokenize_text("zzzqqq", vocab) == [CLS_ID, UNK_ID]

    def test_split_words(self):
        assert split_words("Hello, World! it's") == ["hello", "world", "it", "s"]

    def test_save_load(self, corpus, tmp_path):
        vocab = Vocab.build(corpus)
        vocab.save(tmp_path / "vocab.json")
        restored = Vocab.load(tmp_path / "vocab.json")
        assert restored.itos == vocab.itos and restored.mask_id == vocab.mask_id

    def test_synthetic_vocab(self):
        vocab = Vocab.synthetic(10)
        assert len(vocab) == 10 and vocab.mask_id == 2

    def test_missing_mask_token(self):
        with pytest.raises(ConfigError):
            Vocab(["a"], reserved=["[PAD]", "[CLS]"]).mask_id

    def test_bad_max_tokens(self):
        with pytest.raises(ConfigError):
            tokenize_text("a b", Vocab.synthetic(10), max_tokens=0)
