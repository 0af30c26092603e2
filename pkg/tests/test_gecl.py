import math

import numpy as np
import pytest

from data_object_model.errors import SequenceTooShortError
from data_object_model.hewe import GraphSequence
from model_access_layer import autodiff as ad
from model_access_layer import gecl
from model_access_layer.gecl import (
    BiGruParams,
    BilinearScorer,
    GruParams,
    auxiliary_state,
    bce_with_logits,
    bilinear_score,
    encode_history,
    gecl_batch_loss,
    gru_cell,
    load_auxiliary,
    run_gru,
    score_matrix,
)
from model_access_layer.pretrain import build_sequences
from tests.gradcheck import assert_gradients_match


@pytest.fixture
def gru():
    return BiGruParams.initialize(5, 3, np.random.default_rng(3), scale=0.5)


@pytest.fixture
def scorer():
    return BilinearScorer.initialize(6, 5, np.random.default_rng(4), scale=0.5)


@pytest.fixture
def sequences(toy_corpus, toy_graphs):
    return build_sequences(toy_corpus, toy_graphs)


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def _np_cell(x, h, p):
    v = {name: getattr(p, name).values for name in ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_n", "U_n", "b_n")}
    sig = lambda a: 1.0 / (1.0 + np.exp(-a))
    z = sig(x @ v["W_z"] + h @ v["U_z"] + v["b_z"])
    r = sig(x @ v["W_r"] + h @ v["U_r"] + v["b_r"])
    n = np.tanh(x @ v["W_n"] + (r * h) @ v["U_n"] + v["b_n"])
    return (1 - z) * n + z * h


# --- GRU -------------------------------------------------------------------------


def test_zero_parameters_keep_state_at_zero():
    params = GruParams.initialize(2, 2, np.random.default_rng(0), 0.1, "g")
    for p in params.parameters():
        p.values[...] = 0.0
    out = gru_cell(ad.constant(np.zeros(2)), ad.constant(np.zeros(2)), params)
    assert out.values.tolist() == [0.0, 0.0]


def test_first_step_is_bounded(gru, rng):
    out = run_gru([ad.constant(rng.normal(size=5) * 10)], gru.forward)[0]
    assert np.all(np.abs(out.values) < 1.0)


def test_scalar_cell_matches_hand_trace():
    params = GruParams.initialize(1, 1, np.random.default_rng(0), 0.1, "g")
    w = {"W_z": 0.5, "U_z": -0.3, "b_z": 0.1, "W_r": -0.2, "U_r": 0.4, "b_r": 0.0,
         "W_n": 0.9, "U_n": 0.7, "b_n": -0.1}
    shapes = {"W": (1, 1), "U": (1, 1), "b": (1,)}
    for name, value in w.items():
        getattr(params, name).values[...] = np.full(shapes[name[0]], value)

    h = 0.0
    for x in (1.0, -2.0):
        z = _sigmoid(w["W_z"] * x + w["U_z"] * h + w["b_z"])
        r = _sigmoid(w["W_r"] * x + w["U_r"] * h + w["b_r"])
        n = math.tanh(w["W_n"] * x + w["U_n"] * r * h + w["b_n"])
        h = (1 - z) * n + z * h
    states = run_gru([ad.constant([1.0]), ad.constant([-2.0])], params)
    assert states[-1].values[0] == pytest.approx(h, abs=1e-14)


def test_history_of_two_graphs_feeds_one_input_to_each_direction(gru, toy_graphs, toy_encoder):
    seq = GraphSequence("p", [toy_graphs["d0"], toy_graphs["d1"]], [0, 1])
    g1 = np.array([0.3, -0.1, 0.2, 0.5, 0.0])
    context = encode_history(seq, toy_encoder, gru, embed=lambda graph: ad.constant(g1))
    expected = np.concatenate([_np_cell(g1, np.zeros(3), gru.forward), _np_cell(g1, np.zeros(3), gru.backward)])
    assert context.shape == (6,)
    assert np.allclose(context.values, expected, rtol=0, atol=1e-14)


def test_history_matches_manual_unroll(gru, toy_graphs, toy_encoder, rng):
    seq = GraphSequence("p", [toy_graphs["d0"], toy_graphs["d1"], toy_graphs["d2"]], [0, 1, 2])
    vectors = {doc_id: rng.normal(size=5) for doc_id in ("d0", "d1", "d2")}
    context = encode_history(seq, toy_encoder, gru, embed=lambda graph: ad.constant(vectors[graph.doc_id]))

    h_fwd = _np_cell(vectors["d1"], _np_cell(vectors["d0"], np.zeros(3), gru.forward), gru.forward)
    h_bwd = _np_cell(vectors["d1"], np.zeros(3), gru.backward)
    assert np.allclose(context.values, np.concatenate([h_fwd, h_bwd]), rtol=0, atol=1e-14)


def test_short_sequence_is_rejected(gru, toy_graphs, toy_encoder, scorer):
    short = GraphSequence("lonely", [toy_graphs["d0"]], [0])
    with pytest.raises(SequenceTooShortError) as err:
        encode_history(short, toy_encoder, gru)
    assert err.value.patient_ids == ["lonely"]

    ok = GraphSequence("p", [toy_graphs["d1"], toy_graphs["d2"]], [0, 1])
    with pytest.raises(SequenceTooShortError, match="lonely"):
        gecl_batch_loss([ok, short], toy_encoder, gru, scorer)


# --- bilinear scoring ------------------------------------------------------------


def test_bilinear_hand_example():
    scorer = BilinearScorer(ad.parameter([[1.0, 1.0, 1.0, 1.0]]))
    assert bilinear_score(ad.constant([1.0, 0.0]), ad.constant([0.0, 1.0]), scorer).item() == 1.0


def test_zero_scorer_gives_half_probability():
    scorer = BilinearScorer(ad.parameter(np.zeros((1, 4))))
    u = bilinear_score(ad.constant([0.4, 2.0]), ad.constant([1.0, -3.0]), scorer)
    assert u.item() == 0.0
    assert ad.sigmoid(u).item() == 0.5


def test_bilinear_score_is_linear_in_context(scorer, rng):
    h = rng.normal(size=6)
    g = ad.constant(rng.normal(size=5))
    once = bilinear_score(ad.constant(h), g, scorer).item()
    assert bilinear_score(ad.constant(2 * h), g, scorer).item() == pytest.approx(2 * once, abs=1e-12)


def test_score_matrix_equals_pairwise_scores(scorer, rng):
    contexts = rng.normal(size=(3, 6))
    futures = rng.normal(size=(3, 5))
    matrix = score_matrix(ad.constant(contexts), ad.constant(futures), scorer).values
    for i in range(3):
        for j in range(3):
            pair = bilinear_score(ad.constant(contexts[i]), ad.constant(futures[j]), scorer).item()
            assert matrix[i, j] == pytest.approx(pair, abs=1e-12)


# --- loss ------------------------------------------------------------------------


def test_three_sequences_give_nine_pairs(sequences, toy_encoder, gru, scorer, monkeypatch):
    assert len(sequences) == 3
    seen = {}

    def capture(logits, targets):
        seen["shape"] = logits.shape
        seen["positives"] = int(targets.sum())
        return bce_with_logits(logits, targets)

    monkeypatch.setattr(gecl, "bce_with_logits", capture)
    gecl_batch_loss(sequences, toy_encoder, gru, scorer)
    assert seen == {"shape": (3, 3), "positives": 3}


def test_zero_scorer_gives_log_two(sequences, toy_encoder, gru, scorer):
    scorer.W_u.values[...] = 0.0
    loss = gecl_batch_loss(sequences, toy_encoder, gru, scorer)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_is_stable_for_large_logits():
    logits = ad.constant(np.array([[800.0, -800.0], [-800.0, 800.0]]))
    loss = bce_with_logits(logits, np.eye(2))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)
    wrong = bce_with_logits(logits, 1 - np.eye(2))
    assert wrong.item() == pytest.approx(800.0)


def test_bce_label_flip_antisymmetry(rng):
    u = rng.normal(size=(3, 3)) * 4
    y = (rng.random((3, 3)) > 0.5).astype(float)
    a = bce_with_logits(ad.constant(u), y).item()
    b = bce_with_logits(ad.constant(-u), 1 - y).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_loss_is_invariant_to_batch_order(sequences, toy_encoder, gru, scorer):
    forward = gecl_batch_loss(sequences, toy_encoder, gru, scorer).item()
    reversed_ = gecl_batch_loss(sequences[::-1], toy_encoder, gru, scorer).item()
    assert forward == pytest.approx(reversed_, abs=1e-12)


def test_needs_two_sequences(sequences, toy_encoder, gru, scorer):
    with pytest.raises(ValueError):
        gecl_batch_loss(sequences[:1], toy_encoder, gru, scorer)


def test_gradients_match_finite_differences(sequences, toy_encoder, gru, scorer):
    batch = sequences[1:]
    params = toy_encoder.parameters() + gru.parameters() + scorer.parameters()
    assert_gradients_match(lambda: gecl_batch_loss(batch, toy_encoder, gru, scorer), params)


def test_auxiliary_state_round_trip(gru, scorer):
    tensors = auxiliary_state(gru, scorer)
    assert len(tensors) == 19
    restored_gru, restored_scorer = load_auxiliary(tensors)
    for a, b in zip(gru.parameters() + scorer.parameters(),
                    restored_gru.parameters() + restored_scorer.parameters()):
        assert a.name == b.name
        assert np.array_equal(a.values, b.values)
    assert load_auxiliary({}) is None
