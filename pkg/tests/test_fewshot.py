import math

import numpy as np
import pytest

from data_object_model.episode import Episode, LabeledGraphSet
from data_object_model.errors import EmptySetError, EpisodeSamplingError
from data_object_model.run_state import FewShotConfig
from model_access_layer import autodiff as ad
from model_access_layer.fewshot import (
    PREDICTOR_NAME,
    PredictorParams,
    class_scores,
    compute_prototypes,
    episode_loss,
    evaluate,
    evaluate_with,
    fewshot_state,
    graph_embedder,
    k_sweep,
    load_fewshot,
    model_predict_fn,
    predict,
    restrict_classes,
    sample_episode,
    score_matrix,
    split_dataset,
    train_fewshot,
)
from tests.conftest import make_doc
from tests.gradcheck import assert_gradients_match


def _dataset(sizes, split="train"):
    return LabeledGraphSet(split, {label: [f"{label}{i:03d}" for i in range(n)] for label, n in sizes.items()})


def _zero_predictor(dim):
    return PredictorParams(ad.parameter(np.zeros((1, 2 * dim))))


@pytest.fixture
def toy_split(toy_graphs):
    return LabeledGraphSet("train", {"A": ["d0", "d1", "d2"], "B": ["d3", "d4"], "C": ["d5", "d6"]})


# --- splits ----------------------------------------------------------------------


def test_split_dataset_thresholds_and_validation_share():
    corpus = [make_doc(f"b{i:02d}", "x", f"p{i}", 0, labels=["BIG"]) for i in range(30)]
    corpus += [make_doc(f"s{i}", "x", f"q{i}", 0, labels=["SMALL"]) for i in range(5)]
    corpus += [make_doc("r0", "x", "r", 0, labels=["RARE"]), make_doc("u0", "x", "u", 0, labels=[])]
    graphs = {doc.doc_id: None for doc in corpus}
    cfg = FewShotConfig(train_min_count=20, test_min_count=2, val_fraction=0.3, seed=3)

    train, validation, test = split_dataset(corpus, graphs, cfg)
    assert train.classes == validation.classes == ["BIG"]
    assert test.classes == ["SMALL"]
    assert len(validation.graph_ids) == 9
    assert len(train.graph_ids) == 21
    assert not set(train.graph_ids) & set(validation.graph_ids)
    assert sorted(train.graph_ids + validation.graph_ids) == [f"b{i:02d}" for i in range(30)]
    assert split_dataset(corpus, graphs, cfg)[1] == validation


def test_split_dataset_lists_multi_label_graphs_under_each_label():
    corpus = [make_doc(f"d{i}", "x", f"p{i}", 0, labels=["X", "Y"] if i < 3 else ["X"]) for i in range(5)]
    graphs = {doc.doc_id: None for doc in corpus}
    _, _, test = split_dataset(corpus, graphs, FewShotConfig(train_min_count=20, test_min_count=2))
    assert test.class_index == {"X": ["d0", "d1", "d2", "d3", "d4"], "Y": ["d0", "d1", "d2"]}


def test_split_dataset_skips_documents_without_graphs():
    corpus = [make_doc(f"d{i}", "x", f"p{i}", 0, labels=["X"]) for i in range(3)]
    _, _, test = split_dataset(corpus, {"d0": None, "d1": None}, FewShotConfig())
    assert test.class_index == {"X": ["d0", "d1"]}


def test_restrict_classes_on_top_keeps_largest():
    data = _dataset({"a": 5, "b": 9, "c": 7, "d": 2})
    assert restrict_classes(data, 2, "on_top", np.random.default_rng(0)).classes == ["b", "c"]
    picked = restrict_classes(data, 3, "random", np.random.default_rng(0))
    assert len(picked.classes) == 3 and set(picked.classes) <= set(data.classes)
    assert restrict_classes(data, 0, "random", np.random.default_rng(0)) is data


# --- episodes --------------------------------------------------------------------


def test_episode_sizes(rng):
    data = _dataset({f"c{i}": 25 for i in range(8)})
    episode = sample_episode(data, 5, 5, 15, "random", rng)
    assert len(episode.support) == 25
    assert len(episode.query) == 75
    assert len(set(episode.classes)) == 5
    assert [len(ids) for ids in episode.support_by_class()] == [5] * 5


def test_class_with_k_plus_one_graphs_gets_one_query(rng):
    episode = sample_episode(_dataset({"a": 6, "b": 30}), 2, 5, 15, "on_top", rng)
    per_class = [sum(1 for _, local in episode.query if local == c) for c in range(2)]
    assert dict(zip(episode.classes, per_class)) == {"b": 15, "a": 1}


def test_on_top_takes_the_most_frequent_classes(rng):
    sizes = {"s50": 50, "s40": 40, "s30": 30, "s20": 20, "s10": 10, "s5": 5}
    episode = sample_episode(_dataset(sizes), 3, 1, 1, "on_top", rng)
    assert episode.classes == ["s50", "s40", "s30"]


def test_too_few_eligible_classes(rng):
    with pytest.raises(EpisodeSamplingError, match="need 3 classes"):
        sample_episode(_dataset({"a": 6, "b": 6, "c": 5}), 3, 5, 1, "random", rng)
    with pytest.raises(ValueError):
        sample_episode(_dataset({"a": 6}), 1, 1, 1, "sideways", rng)


def test_support_and_query_never_overlap(rng):
    data = _dataset({f"c{i}": int(n) for i, n in enumerate(rng.integers(6, 13, size=7))})
    # shared graphs appear under two labels
    data.class_index["c0"] += data.class_index["c1"][:2]
    for _ in range(1000):
        episode = sample_episode(data, 3, 2, 4, "random", rng)
        support = [g for g, _ in episode.support]
        query = [g for g, _ in episode.query]
        assert not set(support) & set(query)
        assert len(set(support + query)) == len(support) + len(query)
        assert [len(ids) for ids in episode.support_by_class()] == [2, 2, 2]
        for graph_id, local in episode.support + episode.query:
            assert graph_id in data.class_index[episode.classes[local]]


# --- prototypes and prediction ---------------------------------------------------


def test_prototype_of_identical_vectors():
    v = [0.2, -1.0, 3.0]
    (proto,) = compute_prototypes([[ad.constant(v)] * 4])
    assert np.allclose(proto.values, v, rtol=0, atol=1e-14)


def test_prototype_of_orthonormal_pair_is_midpoint():
    (proto,) = compute_prototypes([[ad.constant([1.0, 0.0]), ad.constant([0.0, 1.0])]])
    assert proto.values.tolist() == [0.5, 0.5]


def test_prototype_matches_mean_rows_and_ignores_order(rng):
    rows = rng.normal(size=(5, 300))
    (proto,) = compute_prototypes([[ad.constant(r) for r in rows]])
    assert np.array_equal(proto.values, ad.mean_rows(ad.constant(rows)).values)
    (shuffled,) = compute_prototypes([[ad.constant(r) for r in rows[[3, 0, 4, 1, 2]]]])
    assert np.allclose(shuffled.values, proto.values, rtol=0, atol=1e-12)


def test_empty_support_class():
    with pytest.raises(EmptySetError):
        compute_prototypes([[ad.constant([1.0])], []])


def test_zero_predictor_is_uniform_and_picks_class_zero(rng):
    prototypes = [ad.constant(rng.normal(size=4)) for _ in range(5)]
    prediction = predict(ad.constant(rng.normal(size=4)), prototypes, _zero_predictor(4), "concat")
    assert np.allclose(prediction.probabilities, 0.2, rtol=0, atol=1e-15)
    assert prediction.predicted == 0
    assert np.allclose(prediction.sigmoid, 0.5)


def test_single_class_probability_is_one(rng):
    predictor = PredictorParams.initialize(3, rng)
    prediction = predict(ad.constant(rng.normal(size=3)), [ad.constant(rng.normal(size=3))], predictor, "concat")
    assert prediction.probabilities.tolist() == [1.0]
    assert prediction.predicted == 0


def test_softmax_and_sigmoid_agree_on_argmax(rng):
    for _ in range(200):
        scores = rng.normal(size=6) * 5
        assert np.argmax(ad.softmax(ad.constant(scores)).values) == np.argmax(ad.sigmoid(ad.constant(scores)).values)


def test_concat_head_prediction_ignores_the_query(rng):
    predictor = PredictorParams.initialize(4, rng, scale=1.0)
    prototypes = [ad.constant(rng.normal(size=4)) for _ in range(4)]
    picks = {predict(ad.constant(rng.normal(size=4) * 3), prototypes, predictor, "concat").predicted
             for _ in range(50)}
    assert len(picks) == 1
    picks = {predict(ad.constant(p.values), prototypes, _zero_predictor(4), "concat_distance").predicted
             for p in prototypes}
    assert picks == {0, 1, 2, 3}


@pytest.mark.parametrize("head", ["concat", "concat_distance"])
def test_score_matrix_equals_per_query_scores(head, rng):
    predictor = PredictorParams.initialize(3, rng, scale=1.0)
    queries = rng.normal(size=(4, 3))
    prototypes = rng.normal(size=(2, 3))
    matrix = score_matrix(ad.constant(queries), ad.constant(prototypes), predictor, head).values
    for q in range(4):
        expected = class_scores(ad.constant(queries[q]), [ad.constant(p) for p in prototypes], predictor, head).values
        assert np.allclose(matrix[q], expected, rtol=0, atol=1e-12)


# --- loss ------------------------------------------------------------------------


def _basis_episode(n_way, scale):
    vectors = {}
    support, query = [], []
    for c in range(n_way):
        vectors[f"s{c}"] = np.eye(n_way)[c] * scale
        vectors[f"q{c}"] = np.eye(n_way)[c] * scale
        support.append((f"s{c}", c))
        query.append((f"q{c}", c))
    episode = Episode(classes=[f"k{c}" for c in range(n_way)], support=support, query=query)
    return episode, lambda graph_id: ad.constant(vectors[graph_id])


def test_uniform_scores_give_log_c():
    episode, embed = _basis_episode(5, 1.0)
    loss = episode_loss(episode, embed, _zero_predictor(5), head="concat")
    assert loss.item() == pytest.approx(math.log(5), abs=1e-12)
    assert math.log(5) == pytest.approx(1.60944, abs=1e-5)


def test_separated_scores_saturate():
    episode, embed = _basis_episode(5, 50.0)
    assert episode_loss(episode, embed, _zero_predictor(5), head="concat_distance").item() < 1e-3


def test_episode_loss_gradients_match_finite_differences(toy_graphs, toy_encoder, rng):
    episode = Episode(classes=["A", "B"], support=[("d0", 0), ("d3", 1)], query=[("d1", 0), ("d4", 1)])
    predictor = PredictorParams.initialize(toy_encoder.output_dim, rng, scale=0.5)
    params = toy_encoder.parameters() + [predictor.W_c]
    assert_gradients_match(
        lambda: episode_loss(episode, graph_embedder(toy_graphs, toy_encoder), predictor, "concat_distance"), params
    )


def test_renaming_global_classes_leaves_episodes_unchanged(rng):
    data = _dataset({f"c{i}": 10 for i in range(6)})
    names = {f"c{i}": f"Z{i:02d}" for i in range(6)}
    renamed = LabeledGraphSet("train", {names[label]: ids for label, ids in data.class_index.items()})
    embeddings = {g: rng.normal(size=4) for g in data.graph_ids}

    def embed(graph_id):
        return ad.constant(embeddings[graph_id])

    predictor = PredictorParams.initialize(4, rng, scale=1.0)
    predict_fn = model_predict_fn(predictor, "concat_distance")

    for seed in range(20):
        a = sample_episode(data, 4, 2, 3, "random", np.random.default_rng(seed))
        b = sample_episode(renamed, 4, 2, 3, "random", np.random.default_rng(seed))
        assert b.classes == [names[label] for label in a.classes]
        assert (b.support, b.query) == (a.support, a.query)
        assert sorted({local for _, local in a.support + a.query}) == [0, 1, 2, 3]
        assert episode_loss(b, embed, predictor, "concat_distance").item() == \
            episode_loss(a, embed, predictor, "concat_distance").item()
        assert predict_fn(b, embeddings) == predict_fn(a, embeddings)


def test_reordering_episode_classes_permutes_predictions_only(rng):
    data = _dataset({f"c{i}": 10 for i in range(6)})
    embeddings = {g: rng.normal(size=4) for g in data.graph_ids}

    def embed(graph_id):
        return ad.constant(embeddings[graph_id])

    predictor = PredictorParams.initialize(4, rng, scale=1.0)
    predict_fn = model_predict_fn(predictor, "concat")
    episode = sample_episode(data, 4, 3, 5, "random", rng)

    order = [2, 0, 3, 1]
    new_local = {old: new for new, old in enumerate(order)}
    reordered = Episode(
        classes=[episode.classes[old] for old in order],
        support=[(g, new_local[local]) for g, local in episode.support],
        query=[(g, new_local[local]) for g, local in episode.query],
    )
    for head in ("concat", "concat_distance"):
        assert episode_loss(reordered, embed, predictor, head).item() == pytest.approx(
            episode_loss(episode, embed, predictor, head).item(), rel=1e-12)
    assert predict_fn(reordered, embeddings) == [new_local[p] for p in predict_fn(episode, embeddings)]


def test_unknown_score_head(rng):
    prototypes = [ad.constant(rng.normal(size=3)) for _ in range(2)]
    with pytest.raises(ValueError, match="unknown score head 'cosine'"):
        predict(ad.constant(rng.normal(size=3)), prototypes, _zero_predictor(3), "cosine")
    with pytest.raises(ValueError, match="unknown score head"):
        score_matrix(ad.constant(rng.normal(size=(2, 3))), ad.stack_rows(prototypes), _zero_predictor(3), "cosine")


def test_episode_without_queries():
    episode = Episode(classes=["a"], support=[("s", 0)], query=[])
    with pytest.raises(EmptySetError):
        episode_loss(episode, lambda g: ad.constant([1.0]), _zero_predictor(1), "concat")


# --- evaluation ------------------------------------------------------------------


def _label_embeddings(data):
    """One-hot of the class name, so a predictor can read the gold label back."""
    index = {label: i for i, label in enumerate(data.classes)}
    return {g: np.eye(len(index))[index[label]] for label, ids in data.class_index.items() for g in ids}


def test_oracle_predictor_scores_perfectly(rng):
    data = _dataset({f"c{i}": 12 for i in range(6)}, split="test")
    embeddings = _label_embeddings(data)

    def oracle(episode, emb):
        lookup = {label: local for local, label in enumerate(episode.classes)}
        return [lookup[data.classes[int(np.argmax(emb[g]))]] for g, _ in episode.query]

    report = evaluate_with(data, embeddings, oracle, 20, 5, 5, 5, "random", rng)
    assert report.acc == report.precision == report.recall == report.f1 == 1.0
    assert report.acc_stderr == 0.0
    assert report.n_episodes == len(report.episodes) == 20


def test_constant_predictor_on_balanced_queries(rng):
    data = _dataset({f"c{i}": 20 for i in range(5)}, split="test")
    report = evaluate_with(data, _label_embeddings(data), lambda ep, emb: [0] * len(ep.query), 7, 5, 5, 15,
                           "random", rng)
    assert report.acc == pytest.approx(0.2)
    assert report.recall == pytest.approx(0.2)
    assert report.precision == pytest.approx(0.04)
    assert [r.episode for r in report.episodes] == list(range(7))
    assert all(r.n_queries == 75 for r in report.episodes)


def test_evaluate_is_reproducible(toy_split, toy_graphs, toy_encoder, rng):
    predictor = PredictorParams.initialize(toy_encoder.output_dim, rng)
    cfg = FewShotConfig(C=2, K=1, L=1)
    first = evaluate(toy_split, toy_graphs, toy_encoder, predictor, cfg, n_episodes=25)
    second = evaluate(toy_split, toy_graphs, toy_encoder, predictor, cfg, n_episodes=25)
    assert first.n_episodes == 25
    assert first == second
    assert 0.0 <= first.acc <= 1.0


def test_k_sweep_skips_unreachable_support_sizes(toy_split, toy_graphs, toy_encoder, rng):
    predictor = PredictorParams.initialize(toy_encoder.output_dim, rng)
    reports = k_sweep(toy_split, toy_graphs, toy_encoder, predictor, FewShotConfig(C=2, K=1, L=1), [1, 2, 3], 5)
    assert list(reports) == [1]


# --- training --------------------------------------------------------------------


def _train_cfg(**overrides):
    values = dict(C=2, K=1, L=1, episode_batch=2, epochs=3, steps_per_epoch=2, val_episodes=5,
                  learning_rate=0.01, seed=11)
    values.update(overrides)
    return FewShotConfig(**values)


def test_train_fewshot_records_and_keeps_best(toy_split, toy_graphs, toy_vocab, tiny_encoder_cfg, tmp_path):
    result = train_fewshot(toy_split, toy_split, toy_graphs, _train_cfg(), tiny_encoder_cfg, toy_vocab.feature_size,
                           checkpoint_path=tmp_path / "fewshot.ckpt", log_path=tmp_path / "fewshot.jsonl")
    assert [r["epoch"] for r in result.records] == [1, 2, 3]
    assert result.best_val_acc == max(r["val_acc"] for r in result.records)
    assert PREDICTOR_NAME in result.checkpoint
    assert (tmp_path / "fewshot.ckpt").exists()

    encoder, predictor = load_fewshot(result.checkpoint)
    assert np.array_equal(predictor.W_c.values, result.predictor.W_c.values)
    assert np.array_equal(encoder.W1.values, result.encoder.W1.values)


def test_train_fewshot_is_deterministic(toy_split, toy_graphs, toy_vocab, tiny_encoder_cfg, tmp_path):
    logs = []
    for name in ("a", "b"):
        train_fewshot(toy_split, toy_split, toy_graphs, _train_cfg(), tiny_encoder_cfg, toy_vocab.feature_size,
                      log_path=tmp_path / f"{name}.jsonl")
        logs.append((tmp_path / f"{name}.jsonl").read_bytes())
    assert logs[0] == logs[1]


def test_train_fewshot_starts_from_pretrained_encoder(toy_split, toy_graphs, toy_vocab, tiny_encoder_cfg, toy_encoder):
    cfg = _train_cfg(learning_rate=0.0, val_episodes=0, epochs=1)
    result = train_fewshot(toy_split, toy_split, toy_graphs, cfg, tiny_encoder_cfg, toy_vocab.feature_size,
                           pretrained=toy_encoder.state_dict())
    assert result.best_val_acc is None
    assert all(r["val_acc"] is None for r in result.records)
    for name, values in toy_encoder.state_dict().items():
        assert np.array_equal(result.checkpoint[name], values)


def test_load_fewshot_needs_the_predictor(toy_encoder):
    with pytest.raises(KeyError, match=PREDICTOR_NAME):
        load_fewshot(toy_encoder.state_dict())
    tensors = fewshot_state(toy_encoder, _zero_predictor(toy_encoder.output_dim))
    assert load_fewshot(tensors)[1].dim == toy_encoder.output_dim
