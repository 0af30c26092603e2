""" Graph sampling contrastive learning: masked sub-graph pairs scored with NT-Xent. """
from __future__ import annotations

from typing import List, Sequence

import numpy as np

from data_object_model.errors import EmptySetError
from data_object_model.hewe import HeweGraph, SubGraph
from model_access_layer import autodiff as ad
from model_access_layer.autodiff import DiffValue
from model_access_layer.graph_encoder import EncoderParams, encode

DEFAULT_TAU = 0.5


def sample_subgraph(graph: HeweGraph, rng: np.random.Generator) -> SubGraph:
    """Mask floor(deg/2) word neighbours of the central node, chosen uniformly without replacement."""
    neighbours = graph.word_neighbors_of_central()
    k = len(neighbours) // 2
    if k == 0:
        return SubGraph(graph, frozenset())
    chosen = rng.choice(len(neighbours), size=k, replace=False)
    return SubGraph(graph, frozenset(neighbours[i] for i in sorted(chosen)))


def nt_xent_pair_loss(i: int, j: int, embeddings: Sequence[DiffValue], tau: float = DEFAULT_TAU) -> DiffValue:
    """
    -log( exp(sim(g_i, g_j)/tau) / sum_{k != i} exp(sim(g_i, g_k)/tau) ), one cosine op per term.

    Reference form of the objective; ``nt_xent_loss`` is the batched equivalent used in training.
    """
    if i == j:
        raise ValueError("anchor and positive must differ")
    if tau <= 0:
        raise ValueError("tau must be positive")
    sims = [ad.cosine_similarity(embeddings[i], embeddings[k]) for k in range(len(embeddings)) if k != i]
    positive = j if j < i else j - 1
    logits = ad.mul_scalar(ad.stack_rows([ad.reshape(s, (1,)) for s in sims]), 1.0 / tau)
    log_probs = ad.log_softmax(ad.reshape(logits, (len(sims),)))
    one_hot = np.zeros(len(sims))
    one_hot[positive] = 1.0
    return ad.mul_scalar(ad.sum_all(ad.mul(log_probs, ad.constant(one_hot))), -1.0)


def nt_xent_loss(embeddings: Sequence[DiffValue], tau: float = DEFAULT_TAU) -> DiffValue:
    """
    Mean NT-Xent over all 2N anchors, where rows (2k, 2k+1) are the positive pairs.

    Computed from a single row-normalised similarity matrix with the diagonal excluded.
    """
    two_n = len(embeddings)
    if two_n == 0 or two_n % 2:
        raise ValueError(f"expected an even, non-zero number of embeddings, got {two_n}")
    z = ad.l2_normalize_rows(ad.stack_rows(list(embeddings)))
    logits = ad.mul_scalar(ad.matmul(z, ad.transpose(z)), 1.0 / tau)
    log_probs = ad.log_softmax(logits, mask=np.eye(two_n, dtype=bool))
    positives = np.zeros((two_n, two_n))
    for k in range(0, two_n, 2):
        positives[k, k + 1] = 1.0
        positives[k + 1, k] = 1.0
    return ad.mul_scalar(ad.sum_all(ad.mul(log_probs, ad.constant(positives))), -1.0 / two_n)


def subgraph_pairs(graphs: Sequence[HeweGraph], rng: np.random.Generator) -> List[SubGraph]:
    """Two independent maskings per source graph, adjacent in the returned list."""
    out: List[SubGraph] = []
    for graph in graphs:
        out.append(sample_subgraph(graph, rng))
        out.append(sample_subgraph(graph, rng))
    return out


def gscl_batch_loss(
        graphs: Sequence[HeweGraph],
        params: EncoderParams,
        tau: float = DEFAULT_TAU,
        rng: np.random.Generator = None) -> DiffValue:
    if not graphs:
        raise EmptySetError("GSCL batch is empty")
    rng = rng if rng is not None else np.random.default_rng()
    return gscl_loss_from_views(subgraph_pairs(graphs, rng), params, tau)


def gscl_loss_from_views(views: Sequence[SubGraph], params: EncoderParams, tau: float = DEFAULT_TAU) -> DiffValue:
    embeddings = [encode(view, params).g for view in views]
    return nt_xent_loss(embeddings, tau)
