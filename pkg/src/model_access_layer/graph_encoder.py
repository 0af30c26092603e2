""" Two-layer GCN shared by pre-training and few-shot learning; the central node embedding represents the graph. """
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

import numpy as np

from data_access_layer.graph_builder import normalize_adjacency
from data_object_model.corpus import Vocabulary
from data_object_model.errors import DimensionError, IndexOutOfRangeError
from data_object_model.run_state import EncoderConfig
from model_access_layer import autodiff as ad
from model_access_layer.autodiff import DiffValue

logger = logging.getLogger(__name__)

PARAM_NAMES = ("encoder.embedding", "encoder.W0", "encoder.b0", "encoder.W1", "encoder.b1")


@dataclass
class EncoderParams:
    embedding_table: DiffValue
    W0: DiffValue
    b0: DiffValue
    W1: DiffValue
    b1: DiffValue

    @classmethod
    def initialize(cls, n_features: int, cfg: EncoderConfig, rng: np.random.Generator) -> "EncoderParams":
        r = cfg.init_scale
        return cls(
            embedding_table=ad.uniform_parameter((n_features, cfg.embedding_dim), rng, r, PARAM_NAMES[0]),
            W0=ad.uniform_parameter((cfg.embedding_dim, cfg.hidden_dim), rng, r, PARAM_NAMES[1]),
            b0=ad.uniform_parameter((cfg.hidden_dim,), rng, r, PARAM_NAMES[2]),
            W1=ad.uniform_parameter((cfg.hidden_dim, cfg.output_dim), rng, r, PARAM_NAMES[3]),
            b1=ad.uniform_parameter((cfg.output_dim,), rng, r, PARAM_NAMES[4]),
        )

    @property
    def n_features(self) -> int:
        return self.embedding_table.shape[0]

    @property
    def output_dim(self) -> int:
        return self.W1.shape[1]

    def parameters(self) -> List[DiffValue]:
        return [self.embedding_table, self.W0, self.b0, self.W1, self.b1]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in zip(PARAM_NAMES, self.parameters())}

    @classmethod
    def from_state_dict(cls, tensors: Mapping[str, np.ndarray]) -> "EncoderParams":
        missing = [n for n in PARAM_NAMES if n not in tensors]
        if missing:
            raise KeyError(f"checkpoint lacks encoder tensors: {missing}")
        return cls(*(ad.parameter(tensors[n], name=n) for n in PARAM_NAMES))

    def validate(self) -> None:
        d = self.embedding_table.shape[1]
        d0 = self.W0.shape[1]
        if self.W0.shape[0] != d or self.b0.shape != (d0,) or self.W1.shape[0] != d0 \
                or self.b1.shape != (self.W1.shape[1],):
            raise DimensionError("EncoderParams", self.embedding_table.shape, self.W0.shape,
                                 self.b0.shape, self.W1.shape, self.b1.shape)


@dataclass
class GraphEmbedding:
    H: DiffValue
    g: DiffValue


def encode(graph, params: EncoderParams, adjacency: Optional[np.ndarray] = None) -> GraphEmbedding:
    """
    L = ReLU(Ā (X W0 + b0)), H = ReLU(Ā (L W1 + b1)), g = H[central].

    ``graph`` is a HeweGraph or SubGraph. ``adjacency`` may carry a precomputed Ā.
    """
    ids = graph.feature_ids
    if ids and max(ids) >= params.n_features:
        raise IndexOutOfRangeError(
            f"graph {graph.doc_id!r} uses feature id {max(ids)}, table has {params.n_features} rows"
        )
    a_bar = ad.constant(normalize_adjacency(graph) if adjacency is None else adjacency)
    x = ad.gather_rows(params.embedding_table, ids)
    hidden = ad.relu(ad.matmul(a_bar, ad.add_bias(ad.matmul(x, params.W0), params.b0)))
    h = ad.relu(ad.matmul(a_bar, ad.add_bias(ad.matmul(hidden, params.W1), params.b1)))
    return GraphEmbedding(H=h, g=pick_central(h, graph.central))


def pick_central(h: DiffValue, central: int) -> DiffValue:
    return ad.pick_row(h, central)


def seed_from_pretrained(params: EncoderParams, vocab: Vocabulary, vectors: Mapping[str, np.ndarray]) -> int:
    """Overwrite word rows of the embedding table with pre-trained vectors; returns rows replaced."""
    table = params.embedding_table.values
    replaced = 0
    for word in vocab.words_by_id():
        vec = vectors.get(word)
        if vec is None:
            continue
        if vec.shape != (table.shape[1],):
            raise DimensionError("seed_from_pretrained", vec.shape, (table.shape[1],))
        table[vocab.word_feature(word)] = vec
        replaced += 1
    logger.info("seeded %d/%d word embeddings from pre-trained vectors", replaced, vocab.n_words)
    return replaced
