import itertools

import numpy as np
import pytest

from data_access_layer.entity_linker import Gazetteer
from data_access_layer.graph_builder import (
    build_graphs,
    build_hewe_graph,
    build_vocabulary,
    deserialize_graph,
    normalize_adjacency,
    normalize_dense,
    retained_words,
    serialize_graph,
)
from data_object_model.errors import DegenerateDocumentError, EmptySetError, GraphParseError
from data_object_model.hewe import HeweGraph, NodeRole
from tests.conftest import make_doc


def _graph(tokens, window=2, gazetteer=None, min_count=1, max_words=128):
    gazetteer = gazetteer or Gazetteer()
    doc = make_doc("d", tokens)
    vocab = build_vocabulary([doc], min_count=min_count, max_words_per_doc=max_words, gazetteer=gazetteer)
    return build_hewe_graph(doc, vocab, window, gazetteer, max_words), vocab


def _word_edges(graph, vocab):
    words = vocab.words_by_id()
    name = {}
    for node in graph.nodes_with_role(NodeRole.WORD):
        name[node] = words[graph.feature_ids[node] - 1]
    return {frozenset((name[i], name[j])) for i, j in graph.edges if i in name and j in name}


def _brute_force_pairs(tokens, window):
    pairs = set()
    for start in range(max(1, len(tokens) - window + 1)):
        for a, b in itertools.combinations(tokens[start:start + window], 2):
            if a != b:
                pairs.add(frozenset((a, b)))
    return pairs


# --- vocabulary ------------------------------------------------------------------


def test_vocabulary_threshold_boundary():
    vocab = build_vocabulary([make_doc("d", "a a b")], min_count=2)
    assert vocab.word_to_id == {"a": 0}


def test_vocabulary_counts_across_documents():
    vocab = build_vocabulary([make_doc("d0", "a b"), make_doc("d1", "a c")], min_count=2)
    assert set(vocab.word_to_id) == {"a"}
    assert vocab.counts == {"a": 2}


def test_vocabulary_without_filter_keeps_every_token():
    vocab = build_vocabulary([make_doc("d0", "x y z y"), make_doc("d1", "w")], min_count=1)
    assert set(vocab.word_to_id) == {"w", "x", "y", "z"}
    assert sorted(vocab.word_to_id.values()) == [0, 1, 2, 3]
    # most frequent first, then first occurrence
    assert vocab.words_by_id() == ["y", "x", "z", "w"]


def test_vocabulary_rejects_empty_corpus():
    with pytest.raises(EmptySetError):
        build_vocabulary([])


def test_entity_ids_follow_word_order(toy_vocab):
    assert toy_vocab.n_entities == 2
    fever_first = toy_vocab.word_to_id["fever"] < toy_vocab.word_to_id["cough"]
    expected = ["Pyrexia", "Cough"] if fever_first else ["Cough", "Pyrexia"]
    assert toy_vocab.entities_by_id() == expected
    assert toy_vocab.feature_size == 1 + 5 + 2


def test_retained_words_keeps_most_frequent():
    doc = make_doc("d", "a a a b b c")
    vocab = build_vocabulary([doc], min_count=1)
    assert retained_words(doc, vocab, 2) == ["a", "b"]
    assert retained_words(doc, vocab, 10) == ["a", "b", "c"]


# --- graph construction ----------------------------------------------------------


def test_window_two_over_repeated_token():
    graph, vocab = _graph("a b c a")
    assert graph.roles == [NodeRole.EHR, NodeRole.WORD, NodeRole.WORD, NodeRole.WORD]
    assert _word_edges(graph, vocab) == {frozenset("ab"), frozenset("bc"), frozenset("ca")}
    assert {(0, 1), (0, 2), (0, 3)} <= set(graph.edges)
    assert len(graph.edges) == 6


def test_minimal_graph_with_entity():
    graph, _ = _graph("a", gazetteer=Gazetteer({"a": "A"}))
    assert graph.n == 3
    assert graph.roles == [NodeRole.EHR, NodeRole.WORD, NodeRole.ENTITY]
    assert graph.edges == [(0, 1), (1, 2)]


def test_window_covering_document_gives_complete_word_graph():
    tokens = "p q r s q t".split()
    graph, vocab = _graph(tokens, window=len(tokens))
    distinct = sorted(set(tokens))
    assert _word_edges(graph, vocab) == {frozenset(p) for p in itertools.combinations(distinct, 2)}


def test_edges_match_window_enumeration_on_random_documents():
    rng = np.random.default_rng(11)
    alphabet = list("abcdefg")
    for _ in range(1000):
        length = int(rng.integers(1, 21))
        window = int(rng.integers(1, 6))
        tokens = [alphabet[i] for i in rng.integers(len(alphabet), size=length)]
        graph, vocab = _graph(tokens, window=window)
        assert _word_edges(graph, vocab) == _brute_force_pairs(tokens, window)


def test_entity_edges_link_to_their_word(toy_corpus, toy_vocab, toy_gazetteer):
    graph = build_hewe_graph(toy_corpus[0], toy_vocab, 2, toy_gazetteer, 16)
    entities = graph.nodes_with_role(NodeRole.ENTITY)
    assert len(entities) == 2
    for node in entities:
        neighbours = graph.neighbors(node)
        assert len(neighbours) == 1
        assert graph.roles[neighbours[0]] == NodeRole.WORD


def test_built_graphs_satisfy_structural_invariants(toy_graphs):
    for graph in toy_graphs.values():
        a = graph.dense_adjacency()
        assert np.array_equal(a, a.T)
        assert not np.any(np.diag(a))
        counts = [graph.roles.count(role) for role in NodeRole]
        assert counts[0] == 1
        assert sum(counts) == graph.n
        assert graph.roles[0] == NodeRole.EHR
        assert graph.roles == sorted(graph.roles)
        assert graph.edges == sorted(set(graph.edges))


def test_degenerate_document_is_skipped():
    vocab = build_vocabulary([make_doc("d0", "a a")], min_count=2)
    lonely = make_doc("d1", "zzz", seq_index=1)
    with pytest.raises(DegenerateDocumentError):
        build_hewe_graph(lonely, vocab, 2, Gazetteer(), 8)
    graphs = build_graphs([make_doc("d0", "a a"), lonely], vocab, Gazetteer(), 2, 8)
    assert list(graphs) == ["d0"]


def test_node_order_is_invariant_under_token_permutation():
    base, vocab = _graph("a b c d a b")
    shuffled = build_hewe_graph(make_doc("d", "d b a c b a"), vocab, 2, Gazetteer(), 128)
    assert shuffled.roles == base.roles
    assert shuffled.feature_ids == base.feature_ids


def test_construction_is_deterministic(toy_corpus, toy_vocab, toy_gazetteer):
    once = build_graphs(toy_corpus, toy_vocab, toy_gazetteer, 2, 16)
    twice = build_graphs(toy_corpus, toy_vocab, toy_gazetteer, 2, 16, workers=2)
    assert list(once) == list(twice)
    for doc_id in once:
        assert serialize_graph(once[doc_id]) == serialize_graph(twice[doc_id])


# --- normalisation ---------------------------------------------------------------


def test_normalize_single_node():
    graph = HeweGraph(doc_id="x", roles=[NodeRole.EHR], feature_ids=[0], edges=[])
    assert normalize_adjacency(graph).tolist() == [[1.0]]


def test_normalize_one_edge():
    assert np.allclose(normalize_dense(np.array([[0.0, 1.0], [1.0, 0.0]])), [[0.5, 0.5], [0.5, 0.5]])


def test_normalized_adjacency_is_symmetric_and_bounded(toy_graphs):
    for graph in toy_graphs.values():
        a = normalize_adjacency(graph)
        assert np.allclose(a, a.T)
        assert a.max() <= 1.0


# --- codec -----------------------------------------------------------------------


def test_codec_round_trip():
    graph, _ = _graph("a", gazetteer=Gazetteer({"a": "A"}))
    assert deserialize_graph(serialize_graph(graph)) == graph


def test_empty_payload_is_rejected():
    with pytest.raises(GraphParseError) as err:
        deserialize_graph(b"")
    assert err.value.offset == 0


@pytest.mark.parametrize("mutate", ["magic", "truncate", "trailing", "edge"])
def test_malformed_payloads_are_rejected(mutate):
    graph, _ = _graph("a b c")
    payload = bytearray(serialize_graph(graph))
    if mutate == "magic":
        payload[:4] = b"NOPE"
    elif mutate == "truncate":
        payload = payload[:-3]
    elif mutate == "trailing":
        payload += b"\x00"
    else:
        payload[-8:] = np.asarray([3, 1], dtype="<u4").tobytes()
    with pytest.raises(GraphParseError):
        deserialize_graph(bytes(payload))
