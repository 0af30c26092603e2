""" Graph evolution contrastive learning: BiGRU history context vs. candidate future graphs, bilinear scores, BCE. """
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from data_object_model.errors import SequenceTooShortError
from data_object_model.hewe import GraphSequence, HeweGraph
from model_access_layer import autodiff as ad
from model_access_layer.autodiff import DiffValue
from model_access_layer.graph_encoder import EncoderParams, encode

Embedder = Callable[[HeweGraph], DiffValue]

_GATES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_n", "U_n", "b_n")


@dataclass
class GruParams:
    """One direction. Gates: update (z), reset (r), candidate (n)."""
    W_z: DiffValue
    U_z: DiffValue
    b_z: DiffValue
    W_r: DiffValue
    U_r: DiffValue
    b_r: DiffValue
    W_n: DiffValue
    U_n: DiffValue
    b_n: DiffValue

    @classmethod
    def initialize(cls, input_dim: int, hidden: int, rng: np.random.Generator, scale: float,
                   prefix: str) -> "GruParams":
        shapes = {"W": (input_dim, hidden), "U": (hidden, hidden), "b": (hidden,)}
        return cls(**{
            gate: ad.uniform_parameter(shapes[gate[0]], rng, scale, f"{prefix}.{gate}") for gate in _GATES
        })

    @property
    def hidden(self) -> int:
        return self.U_z.shape[0]

    def parameters(self) -> List[DiffValue]:
        return [getattr(self, gate) for gate in _GATES]


@dataclass
class BiGruParams:
    forward: GruParams
    backward: GruParams

    @classmethod
    def initialize(cls, input_dim: int, hidden: int, rng: np.random.Generator, scale: float = 0.1) -> "BiGruParams":
        return cls(
            forward=GruParams.initialize(input_dim, hidden, rng, scale, "gru.forward"),
            backward=GruParams.initialize(input_dim, hidden, rng, scale, "gru.backward"),
        )

    @property
    def context_dim(self) -> int:
        return 2 * self.forward.hidden

    def parameters(self) -> List[DiffValue]:
        return self.forward.parameters() + self.backward.parameters()


@dataclass
class BilinearScorer:
    W_u: DiffValue

    @classmethod
    def initialize(cls, context_dim: int, graph_dim: int, rng: np.random.Generator,
                   scale: float = 0.1) -> "BilinearScorer":
        return cls(ad.uniform_parameter((1, context_dim * graph_dim), rng, scale, "scorer.W_u"))

    def parameters(self) -> List[DiffValue]:
        return [self.W_u]


def auxiliary_state(gru: BiGruParams, scorer: BilinearScorer) -> Dict[str, np.ndarray]:
    return {p.name: p.values.copy() for p in gru.parameters() + scorer.parameters()}


def load_auxiliary(tensors: Mapping[str, np.ndarray]) -> Optional[tuple]:
    """Rebuild (BiGruParams, BilinearScorer) from checkpoint tensors, or None if absent."""
    if "scorer.W_u" not in tensors:
        return None
    directions = {
        d: GruParams(**{g: ad.parameter(tensors[f"gru.{d}.{g}"], name=f"gru.{d}.{g}") for g in _GATES})
        for d in ("forward", "backward")
    }
    return (BiGruParams(directions["forward"], directions["backward"]),
            BilinearScorer(ad.parameter(tensors["scorer.W_u"], name="scorer.W_u")))


def gru_cell(x: DiffValue, h_prev: DiffValue, params: GruParams) -> DiffValue:
    """
    z = σ(x W_z + h U_z + b_z)
    r = σ(x W_r + h U_r + b_r)
    n = tanh(x W_n + (r ⊙ h) U_n + b_n)
    h' = (1 - z) ⊙ n + z ⊙ h
    """
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, params.W_z), ad.matmul(h_prev, params.U_z)), params.b_z))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, params.W_r), ad.matmul(h_prev, params.U_r)), params.b_r))
    n = ad.tanh(ad.add(ad.add(ad.matmul(x, params.W_n), ad.matmul(ad.mul(r, h_prev), params.U_n)), params.b_n))
    return ad.add(n, ad.mul(z, ad.sub(h_prev, n)))


def run_gru(inputs: Sequence[DiffValue], params: GruParams) -> List[DiffValue]:
    """Hidden state after each input, starting from zeros."""
    h = ad.constant(np.zeros(params.hidden))
    states = []
    for x in inputs:
        h = gru_cell(x, h, params)
        states.append(h)
    return states


def _default_embedder(encoder: EncoderParams) -> Embedder:
    return lambda graph: encode(graph, encoder).g


def encode_history(
        seq: GraphSequence,
        encoder: EncoderParams,
        gru: BiGruParams,
        embed: Optional[Embedder] = None) -> DiffValue:
    """
    Context for predicting G_T: [→h_{T-1}, ←h_{T-1}] over the prefix G_1..G_{T-1}.

    The backward unit reads the prefix from G_{T-1} down to G_1; its output aligned with
    position T-1 is the state after its first step, so later backward steps cannot reach
    the context and are not computed.
    """
    if seq.length < 2:
        raise SequenceTooShortError([seq.patient_id])
    embed = embed or _default_embedder(encoder)
    prefix = [embed(graph) for graph in seq.graphs[:-1]]
    forward_last = run_gru(prefix, gru.forward)[-1]
    backward_at_last = run_gru([prefix[-1]], gru.backward)[0]
    return ad.concat(forward_last, backward_at_last)


def bilinear_score(h: DiffValue, g: DiffValue, scorer: BilinearScorer) -> DiffValue:
    """u = W_u · rowmajor(h ⊗ g)."""
    z = ad.reshape_rowmajor(ad.outer_product(h, g))
    return ad.reshape(ad.matmul(scorer.W_u, z), ())


def score_matrix(contexts: DiffValue, futures: DiffValue, scorer: BilinearScorer) -> DiffValue:
    """
    All context × future scores at once: U[i, j] = bilinear_score(contexts[i], futures[j]).

    W_u · rowmajor(h ⊗ g) = h · W · g with W the row-major 600×300 reshape of W_u.
    """
    w = ad.reshape(scorer.W_u, (contexts.shape[1], futures.shape[1]))
    return ad.matmul(ad.matmul(contexts, w), ad.transpose(futures))


def bce_with_logits(logits: DiffValue, targets: np.ndarray) -> DiffValue:
    """Mean of softplus(u) - y·u, i.e. -[y log σ(u) + (1 - y) log(1 - σ(u))] without overflow."""
    per_pair = ad.sub(ad.softplus(logits), ad.mul(logits, ad.constant(targets)))
    return ad.mul_scalar(ad.sum_all(per_pair), 1.0 / logits.size)


def gecl_batch_loss(
        sequences: Sequence[GraphSequence],
        encoder: EncoderParams,
        gru: BiGruParams,
        scorer: BilinearScorer,
        embed: Optional[Embedder] = None) -> DiffValue:
    """
    Every sequence's context is paired with every sequence's true future (N² pairs); the
    pair is positive exactly when both come from the same patient.
    """
    if len(sequences) < 2:
        raise ValueError(f"GECL needs at least 2 sequences per batch, got {len(sequences)}")
    short = [s.patient_id for s in sequences if s.length < 2]
    if short:
        raise SequenceTooShortError(short)
    embed = embed or _default_embedder(encoder)
    contexts = ad.stack_rows([encode_history(s, encoder, gru, embed) for s in sequences])
    futures = ad.stack_rows([embed(s.graphs[-1]) for s in sequences])
    logits = score_matrix(contexts, futures, scorer)
    return bce_with_logits(logits, np.eye(len(sequences)))
