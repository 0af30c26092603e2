"""
Episodic C-way K-shot training and evaluation on top of the shared graph encoder.

Scores for class c given a query graph g_q and prototype p_c (mean support embedding):

* ``concat``           s_c = W_c · (g_q ∥ p_c)
* ``concat_distance``  s_c = W_c · (g_q ∥ p_c) - ‖g_q - p_c‖²

The class distribution is softmax(s). Under ``concat`` the query half of W_c adds the same
amount to every class, so the predicted class is the same for every query;
``concat_distance`` adds the prototypical-network matching term and is the default.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import data_access_layer.data_store as db
from data_object_model.corpus import Document
from data_object_model.episode import Episode, LabeledGraphSet
from data_object_model.errors import EmptySetError, EpisodeSamplingError, TrainingDivergedError
from data_object_model.hewe import HeweGraph
from data_object_model.run_state import SCORE_HEADS, EncoderConfig, EpisodeResult, FewShotConfig, MetricsReport
from model_access_layer import autodiff as ad
from model_access_layer.autodiff import DiffValue
from model_access_layer.graph_encoder import EncoderParams, encode
from model_access_layer.metrics import macro_metrics
from model_access_layer.optimizer import AdamState, adam_step

logger = logging.getLogger(__name__)

PREDICTOR_NAME = "predictor.W_c"

# (episode, graph id -> embedding) -> predicted local label per query
PredictFn = Callable[[Episode, Mapping[str, np.ndarray]], List[int]]


# --- Data splits -----------------------------------------------------------------


def split_dataset(
        corpus: Iterable[Document],
        graphs: Mapping[str, HeweGraph],
        cfg: FewShotConfig) -> Tuple[LabeledGraphSet, LabeledGraphSet, LabeledGraphSet]:
    """
    Train classes occur more than ``train_min_count`` times, test classes between
    ``test_min_count`` and ``train_min_count`` times; everything rarer is dropped. The train
    graphs are then split 7:3 (``val_fraction``) into train and validation at random.
    """
    docs = [d for d in corpus if d.doc_id in graphs and d.labels]
    frequency: Dict[str, int] = {}
    for doc in docs:
        for label in set(doc.labels):
            frequency[label] = frequency.get(label, 0) + 1
    train_classes = {c for c, n in frequency.items() if n > cfg.train_min_count}
    test_classes = {c for c, n in frequency.items() if cfg.test_min_count <= n <= cfg.train_min_count}

    train_index: Dict[str, List[str]] = {}
    test_index: Dict[str, List[str]] = {}
    for doc in sorted(docs, key=lambda d: d.doc_id):
        for label in sorted(set(doc.labels)):
            if label in train_classes:
                train_index.setdefault(label, []).append(doc.doc_id)
            elif label in test_classes:
                test_index.setdefault(label, []).append(doc.doc_id)

    train_ids = sorted({g for ids in train_index.values() for g in ids})
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7301]))
    n_val = int(round(cfg.val_fraction * len(train_ids)))
    val_ids = {train_ids[i] for i in rng.permutation(len(train_ids))[:n_val]}

    train = LabeledGraphSet("train", {c: [g for g in ids if g not in val_ids] for c, ids in sorted(train_index.items())})
    validation = LabeledGraphSet("validation", {c: [g for g in ids if g in val_ids] for c, ids in sorted(train_index.items())})
    test = LabeledGraphSet("test", dict(sorted(test_index.items())))
    logger.info(
        "splits: %d train classes (%d graphs train / %d validation), %d test classes (%d graphs)",
        len(train.class_index), len(train.graph_ids), len(validation.graph_ids),
        len(test.class_index), len(test.graph_ids),
    )
    return train, validation, test


def _ranked_by_size(data: LabeledGraphSet, classes: Iterable[str]) -> List[str]:
    return sorted(classes, key=lambda c: (-data.count(c), c))


def restrict_classes(data: LabeledGraphSet, n: int, strategy: str, rng: np.random.Generator) -> LabeledGraphSet:
    """Limit the class pool to ``n`` classes, drawn at random or the ``n`` largest (``on_top``)."""
    classes = data.classes
    if n <= 0 or n >= len(classes):
        return data
    if strategy == "on_top":
        chosen = _ranked_by_size(data, classes)[:n]
    elif strategy == "random":
        chosen = [classes[i] for i in sorted(rng.choice(len(classes), size=n, replace=False))]
    else:
        raise ValueError(f"unknown class strategy {strategy!r}")
    return data.restricted_to(chosen)


# --- Episodes --------------------------------------------------------------------


def sample_episode(
        data: LabeledGraphSet,
        C: int,
        K: int,
        L: int,
        strategy: str,
        rng: np.random.Generator) -> Episode:
    """
    Draw C classes (uniformly, or the C largest for ``on_top``), then per class K support and
    up to L query graphs without replacement. A graph is used at most once per episode, so a
    multi-label graph never ends up in both support and query.
    """
    eligible = [c for c in data.classes if data.count(c) >= K + 1]
    if len(eligible) < C:
        raise EpisodeSamplingError(
            f"{data.split}: need {C} classes with at least {K + 1} graphs, only {len(eligible)} available"
        )
    if strategy == "on_top":
        classes = _ranked_by_size(data, eligible)[:C]
    elif strategy == "random":
        classes = [eligible[i] for i in rng.choice(len(eligible), size=C, replace=False)]
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")

    used = set()
    support: List[Tuple[str, int]] = []
    query: List[Tuple[str, int]] = []
    for local, label in enumerate(classes):
        pool = [g for g in data.class_index[label] if g not in used]
        if len(pool) < K + 1:
            raise EpisodeSamplingError(
                f"{data.split}: class {label!r} has {len(pool)} unused graphs left, need {K + 1}"
            )
        drawn = [pool[i] for i in rng.permutation(len(pool))[:K + L]]
        support.extend((g, local) for g in sorted(drawn[:K]))
        query.extend((g, local) for g in drawn[K:])
        used.update(drawn)
    return Episode(classes=classes, support=support, query=query)


# --- Prototypes + prediction -----------------------------------------------------


@dataclass
class PredictorParams:
    W_c: DiffValue

    @classmethod
    def initialize(cls, dim: int, rng: np.random.Generator, scale: float = 0.1) -> "PredictorParams":
        return cls(ad.uniform_parameter((1, 2 * dim), rng, scale, PREDICTOR_NAME))

    @property
    def dim(self) -> int:
        return self.W_c.shape[1] // 2


@dataclass
class Prediction:
    probabilities: np.ndarray
    predicted: int
    sigmoid: np.ndarray
    scores: np.ndarray


def compute_prototypes(support: Sequence[Sequence[DiffValue]]) -> List[DiffValue]:
    """Mean support embedding per class, in class order."""
    prototypes = []
    for c, embeddings in enumerate(support):
        if not embeddings:
            raise EmptySetError(f"class {c} has no support embeddings")
        prototypes.append(ad.mean_rows(ad.stack_rows(list(embeddings))))
    return prototypes


def _check_head(head: str) -> None:
    if head not in SCORE_HEADS:
        raise ValueError(f"unknown score head {head!r}, expected one of {SCORE_HEADS}")


def class_scores(g_q: DiffValue, prototypes: Sequence[DiffValue], predictor: PredictorParams,
                 head: str) -> DiffValue:
    """Raw score per class, one concatenation per prototype."""
    _check_head(head)
    scores = []
    for p in prototypes:
        s = ad.reshape(ad.matmul(predictor.W_c, ad.concat(g_q, p)), (1,))
        if head == "concat_distance":
            diff = ad.sub(g_q, p)
            s = ad.sub(s, ad.reshape(ad.matmul(diff, diff), (1,)))
        scores.append(s)
    return ad.reshape(ad.stack_rows(scores), (len(prototypes),))


def predict(g_q: DiffValue, prototypes: Sequence[DiffValue], predictor: PredictorParams,
            head: str) -> Prediction:
    """softmax over class scores; ties go to the lowest class index. Sigmoids are diagnostic only."""
    s = class_scores(g_q, prototypes, predictor, head)
    probs = ad.softmax(s).values
    return Prediction(
        probabilities=probs,
        predicted=int(np.argmax(s.values)),
        sigmoid=ad.sigmoid(s).values,
        scores=s.values.copy(),
    )


def score_matrix(queries: DiffValue, prototypes: DiffValue, predictor: PredictorParams, head: str) -> DiffValue:
    """
    Scores for every (query, class) pair: S[q, c] equals ``class_scores(queries[q], ...)[c]``.

    W_c is split row-major into its query half and prototype half, so the concatenation
    becomes two matrix-vector products.
    """
    _check_head(head)
    n_q, n_c = queries.shape[0], prototypes.shape[0]
    halves = ad.reshape(predictor.W_c, (2, predictor.dim))
    a = ad.matmul(queries, ad.pick_row(halves, 0))
    b = ad.matmul(prototypes, ad.pick_row(halves, 1))
    s = ad.add(ad.outer_product(a, ad.constant(np.ones(n_c))), ad.outer_product(ad.constant(np.ones(n_q)), b))
    if head == "concat_distance":
        ones_d = ad.constant(np.ones(queries.shape[1]))
        q_sq = ad.matmul(ad.mul(queries, queries), ones_d)
        p_sq = ad.matmul(ad.mul(prototypes, prototypes), ones_d)
        cross = ad.mul_scalar(ad.matmul(queries, ad.transpose(prototypes)), 2.0)
        sq_dist = ad.sub(
            ad.add(ad.outer_product(q_sq, ad.constant(np.ones(n_c))), ad.outer_product(ad.constant(np.ones(n_q)), p_sq)),
            cross,
        )
        s = ad.sub(s, sq_dist)
    return s


def _episode_logits(episode: Episode, embed: Callable[[str], DiffValue], predictor: PredictorParams,
                    head: str) -> DiffValue:
    prototypes = compute_prototypes([[embed(g) for g in ids] for ids in episode.support_by_class()])
    queries = ad.stack_rows([embed(g) for g, _ in episode.query])
    return score_matrix(queries, ad.stack_rows(prototypes), predictor, head)


def episode_loss(episode: Episode, embed: Callable[[str], DiffValue], predictor: PredictorParams,
                 head: str) -> DiffValue:
    """Mean over query graphs of -log softmax(S)[true class]."""
    if not episode.query:
        raise EmptySetError("episode has no query graphs")
    logits = _episode_logits(episode, embed, predictor, head)
    targets = np.zeros(logits.shape)
    for row, (_, local) in enumerate(episode.query):
        targets[row, local] = 1.0
    log_probs = ad.log_softmax(logits)
    return ad.mul_scalar(ad.sum_all(ad.mul(log_probs, ad.constant(targets))), -1.0 / len(episode.query))


def graph_embedder(graphs: Mapping[str, HeweGraph], encoder: EncoderParams) -> Callable[[str], DiffValue]:
    """Encode each graph id once; later uses share the recorded value so gradients accumulate."""
    cache: Dict[str, DiffValue] = {}

    def embed(graph_id: str) -> DiffValue:
        if graph_id not in cache:
            cache[graph_id] = encode(graphs[graph_id], encoder).g
        return cache[graph_id]

    return embed


def embed_all(graph_ids: Iterable[str], graphs: Mapping[str, HeweGraph], encoder: EncoderParams) -> Dict[str, np.ndarray]:
    with ad.no_grad():
        return {g: encode(graphs[g], encoder).g.values.copy() for g in sorted(set(graph_ids))}


# --- Evaluation ------------------------------------------------------------------


def model_predict_fn(predictor: PredictorParams, head: str) -> PredictFn:
    def predict_fn(episode: Episode, embeddings: Mapping[str, np.ndarray]) -> List[int]:
        with ad.no_grad():
            logits = _episode_logits(episode, lambda g: ad.constant(embeddings[g]), predictor, head)
        return [int(i) for i in np.argmax(logits.values, axis=1)]

    return predict_fn


def _stderr(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def evaluate_with(
        data: LabeledGraphSet,
        embeddings: Mapping[str, np.ndarray],
        predict_fn: PredictFn,
        n_episodes: int,
        C: int,
        K: int,
        L: int,
        strategy: str,
        rng: np.random.Generator,
        config: Optional[dict] = None) -> MetricsReport:
    """Sample ``n_episodes`` episodes, score their queries, and aggregate macro metrics."""
    results: List[EpisodeResult] = []
    for index in range(n_episodes):
        episode = sample_episode(data, C, K, L, strategy, rng)
        preds = predict_fn(episode, embeddings)
        golds = [local for _, local in episode.query]
        m = macro_metrics(preds, golds, list(range(episode.n_way)))
        results.append(EpisodeResult(index, m["acc"], m["precision"], m["recall"], m["f1"], len(golds)))

    def column(name: str) -> List[float]:
        return [getattr(r, name) for r in results]

    def mean(name: str) -> float:
        return float(np.mean(column(name))) if results else 0.0

    return MetricsReport(
        acc=mean("acc"), precision=mean("precision"), recall=mean("recall"), f1=mean("f1"),
        acc_stderr=_stderr(column("acc")), precision_stderr=_stderr(column("precision")),
        recall_stderr=_stderr(column("recall")), f1_stderr=_stderr(column("f1")),
        n_episodes=len(results), episodes=results, config=config or {},
    )


def evaluate(
        data: LabeledGraphSet,
        graphs: Mapping[str, HeweGraph],
        encoder: EncoderParams,
        predictor: PredictorParams,
        cfg: FewShotConfig,
        n_episodes: Optional[int] = None,
        K: Optional[int] = None,
        config: Optional[dict] = None) -> MetricsReport:
    """Test-time episodes use the configured C, K and L; each split graph is encoded once."""
    embeddings = embed_all(data.graph_ids, graphs, encoder)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 9001]))
    return evaluate_with(
        data, embeddings, model_predict_fn(predictor, cfg.head),
        cfg.eval_episodes if n_episodes is None else n_episodes,
        cfg.C, cfg.K if K is None else K, cfg.L, cfg.strategy, rng, config,
    )


# --- Training --------------------------------------------------------------------


@dataclass
class FewShotResult:
    checkpoint: Dict[str, np.ndarray]
    records: List[dict] = field(default_factory=list)
    best_val_acc: Optional[float] = None
    encoder: Optional[EncoderParams] = None
    predictor: Optional[PredictorParams] = None


def fewshot_state(encoder: EncoderParams, predictor: PredictorParams) -> Dict[str, np.ndarray]:
    return {**encoder.state_dict(), PREDICTOR_NAME: predictor.W_c.values.copy()}


def load_fewshot(tensors: Mapping[str, np.ndarray]) -> Tuple[EncoderParams, PredictorParams]:
    if PREDICTOR_NAME not in tensors:
        raise KeyError(f"checkpoint lacks {PREDICTOR_NAME}; was it written by the train stage?")
    return EncoderParams.from_state_dict(tensors), PredictorParams(ad.parameter(tensors[PREDICTOR_NAME], name=PREDICTOR_NAME))


def _validation_accuracy(validation: LabeledGraphSet, graphs: Mapping[str, HeweGraph], encoder: EncoderParams,
                         predictor: PredictorParams, cfg: FewShotConfig, seed) -> Optional[float]:
    if cfg.val_episodes <= 0:
        return None
    eligible = [c for c in validation.classes if validation.count(c) >= cfg.K + 1]
    if len(eligible) < cfg.C:
        return None
    embeddings = embed_all(validation.graph_ids, graphs, encoder)
    report = evaluate_with(validation, embeddings, model_predict_fn(predictor, cfg.head), cfg.val_episodes,
                           cfg.C, cfg.K, cfg.L, cfg.strategy, np.random.default_rng(seed))
    return report.acc


def train_fewshot(
        train: LabeledGraphSet,
        validation: LabeledGraphSet,
        graphs: Mapping[str, HeweGraph],
        cfg: FewShotConfig,
        encoder_cfg: EncoderConfig,
        n_features: int,
        pretrained: Optional[Mapping[str, np.ndarray]] = None,
        checkpoint_path=None,
        log_path=None) -> FewShotResult:
    """
    Episodic training. Each Adam step averages ``episode_batch`` episode losses; an epoch is
    ``steps_per_epoch`` steps followed by validation. The checkpoint with the best validation
    accuracy is kept (the last one when validation cannot run).
    """
    cfg.validate()
    init_seed, episode_seed, val_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng = np.random.default_rng(init_seed)
    if pretrained is not None:
        encoder = EncoderParams.from_state_dict(pretrained)
    else:
        encoder = EncoderParams.initialize(n_features, encoder_cfg, init_rng)
    predictor = PredictorParams.initialize(encoder.output_dim, init_rng, encoder_cfg.init_scale)
    episode_rng = np.random.default_rng(episode_seed)

    params = encoder.parameters() + [predictor.W_c]
    state = AdamState(learning_rate=cfg.learning_rate)
    records: List[dict] = []
    best_acc: Optional[float] = None
    best_state = fewshot_state(encoder, predictor)

    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for step in range(cfg.steps_per_epoch):
            embed = graph_embedder(graphs, encoder)
            batch = [episode_loss(sample_episode(train, cfg.C, cfg.K, cfg.L, cfg.strategy, episode_rng),
                                  embed, predictor, cfg.head)
                     for _ in range(cfg.episode_batch)]
            total = batch[0]
            for loss in batch[1:]:
                total = ad.add(total, loss)
            total = ad.mul_scalar(total, 1.0 / len(batch))
            value = total.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite few-shot loss at epoch {epoch}, step {step + 1}")
            ad.backward(total)
            adam_step(params, state)
            losses.append(value)

        val_acc = _validation_accuracy(validation, graphs, encoder, predictor, cfg, val_seed)
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "val_acc": val_acc}
        records.append(record)
        logger.info("fewshot epoch %d: loss=%.5f val_acc=%s", epoch, record["loss"],
                    "n/a" if val_acc is None else f"{val_acc:.4f}")
        if val_acc is None or best_acc is None or val_acc > best_acc:
            if val_acc is not None:
                best_acc = val_acc
            best_state = fewshot_state(encoder, predictor)

    if checkpoint_path is not None:
        db.save_checkpoint(checkpoint_path, best_state)
    if log_path is not None:
        db.write_jsonl(log_path, records)
    best_encoder, best_predictor = load_fewshot(best_state)
    return FewShotResult(best_state, records, best_acc, best_encoder, best_predictor)


# --- Sweeps ----------------------------------------------------------------------


def k_sweep(data: LabeledGraphSet, graphs: Mapping[str, HeweGraph], encoder: EncoderParams,
            predictor: PredictorParams, cfg: FewShotConfig, k_values: Sequence[int],
            n_episodes: int) -> Dict[int, MetricsReport]:
    """Evaluate the same model with different support sizes; classes too small for K are skipped."""
    out: Dict[int, MetricsReport] = {}
    for k in k_values:
        try:
            out[k] = evaluate(data, graphs, encoder, predictor, cfg, n_episodes=n_episodes, K=k)
        except EpisodeSamplingError as e:
            logger.warning("K=%d skipped: %s", k, e)
    return out


def class_count_sweep(
        train: LabeledGraphSet, validation: LabeledGraphSet, test: LabeledGraphSet,
        graphs: Mapping[str, HeweGraph], cfg: FewShotConfig, encoder_cfg: EncoderConfig, n_features: int,
        counts: Sequence[int], pretrained: Optional[Mapping[str, np.ndarray]], n_episodes: int,
        strategies: Sequence[str] = ("random", "on_top")) -> List[Tuple[str, int, MetricsReport]]:
    """Retrain with only ``n`` training classes, chosen per strategy, and evaluate on the test split."""
    rows = []
    for strategy in strategies:
        for n in counts:
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, n, len(strategy)]))
            pool = restrict_classes(train, n, strategy, rng)
            result = train_fewshot(pool, validation.restricted_to([c for c in pool.classes if c in validation.class_index]),
                                   graphs, cfg, encoder_cfg, n_features, pretrained=pretrained)
            report = evaluate(test, graphs, result.encoder, result.predictor, cfg, n_episodes=n_episodes)
            rows.append((strategy, n, report))
            logger.info("class sweep %s n=%d: acc=%.4f", strategy, n, report.acc)
    return rows
