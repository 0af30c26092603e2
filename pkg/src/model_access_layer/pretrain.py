""" Joint pre-training of the graph encoder: L = L_gecl + alpha * L_gscl. """
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import data_access_layer.data_store as db
from data_object_model.corpus import Document
from data_object_model.errors import TrainingDivergedError
from data_object_model.hewe import GraphSequence, HeweGraph
from data_object_model.run_state import ABLATION_MODES, EncoderConfig, PretrainConfig
from model_access_layer import autodiff as ad
from model_access_layer.autodiff import DiffValue
from model_access_layer.gecl import BiGruParams, BilinearScorer, auxiliary_state, gecl_batch_loss
from model_access_layer.graph_encoder import EncoderParams, encode
from model_access_layer.gscl import gscl_batch_loss
from model_access_layer.optimizer import AdamState, adam_step

logger = logging.getLogger(__name__)


@dataclass
class PretrainModel:
    encoder: EncoderParams
    gru: BiGruParams
    scorer: BilinearScorer

    @classmethod
    def initialize(cls, n_features: int, encoder_cfg: EncoderConfig, cfg: PretrainConfig,
                   rng: np.random.Generator) -> "PretrainModel":
        encoder = EncoderParams.initialize(n_features, encoder_cfg, rng)
        gru = BiGruParams.initialize(encoder_cfg.output_dim, cfg.gru_hidden, rng, encoder_cfg.init_scale)
        scorer = BilinearScorer.initialize(gru.context_dim, encoder_cfg.output_dim, rng, encoder_cfg.init_scale)
        return cls(encoder, gru, scorer)

    def parameters(self) -> List[DiffValue]:
        return self.encoder.parameters() + self.gru.parameters() + self.scorer.parameters()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {**self.encoder.state_dict(), **auxiliary_state(self.gru, self.scorer)}


@dataclass
class PretrainResult:
    checkpoint: Dict[str, np.ndarray]
    records: List[dict] = field(default_factory=list)
    model: Optional[PretrainModel] = None


def build_sequences(corpus: Iterable[Document], graphs: Mapping[str, HeweGraph]) -> List[GraphSequence]:
    """Per-patient graph sequences ordered by seq_index; patients with fewer than 2 graphs are dropped."""
    by_patient: Dict[str, List[Document]] = {}
    for doc in corpus:
        if doc.doc_id in graphs:
            by_patient.setdefault(doc.patient_id, []).append(doc)
    sequences = []
    for patient_id in sorted(by_patient):
        docs = sorted(by_patient[patient_id], key=lambda d: d.seq_index)
        if len(docs) >= 2:
            sequences.append(GraphSequence(
                patient_id=patient_id,
                graphs=[graphs[d.doc_id] for d in docs],
                seq_indices=[d.seq_index for d in docs],
            ))
    return sequences


def _graph_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a lone trailing graph has no negatives; fold it into the previous batch
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


class _SequenceCycler:
    """Endless reshuffled passes over the sequences, independent of the graph epochs."""

    def __init__(self, sequences: Sequence[GraphSequence], batch_size: int, rng: np.random.Generator):
        self.sequences = list(sequences)
        self.batch_size = min(batch_size, len(self.sequences))
        self.rng = rng
        self._order: List[int] = []

    def next_batch(self) -> List[GraphSequence]:
        picked: List[int] = []
        while len(picked) < self.batch_size:
            if not self._order:
                self._order = self.rng.permutation(len(self.sequences)).tolist()
            candidate = self._order.pop(0)
            if candidate not in picked:
                picked.append(candidate)
        return [self.sequences[i] for i in picked]


def _cached_embedder(encoder: EncoderParams):
    cache: Dict[str, DiffValue] = {}

    def embed(graph: HeweGraph) -> DiffValue:
        if graph.doc_id not in cache:
            cache[graph.doc_id] = encode(graph, encoder).g
        return cache[graph.doc_id]

    return embed


def _check_finite(value: float, epoch: int, step: int, parts: Mapping[str, float]) -> None:
    if not math.isfinite(value):
        detail = ", ".join(f"{k}={v!r}" for k, v in parts.items())
        raise TrainingDivergedError(f"non-finite pre-training loss at epoch {epoch}, step {step}: {detail}")


def cotrain(
        graphs: Sequence[HeweGraph],
        sequences: Sequence[GraphSequence],
        cfg: PretrainConfig,
        encoder_cfg: EncoderConfig,
        n_features: int,
        use_gscl: bool = True,
        use_gecl: bool = True,
        model: Optional[PretrainModel] = None,
        checkpoint_path=None,
        log_path=None) -> PretrainResult:
    """
    Minimise L_gecl + alpha * L_gscl with one GSCL batch and one GECL batch per Adam step.

    An epoch is one pass over ``graphs``; sequence batches cycle independently. With fewer
    than two usable sequences the GECL term is dropped (GSCL-only) and a warning record is
    written ahead of the epoch records.
    """
    cfg.validate()
    if not graphs:
        raise ValueError("pre-training needs at least one graph")
    init_seed, batch_seed, mask_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    model = model or PretrainModel.initialize(n_features, encoder_cfg, cfg, np.random.default_rng(init_seed))
    batch_rng = np.random.default_rng(batch_seed)
    mask_rng = np.random.default_rng(mask_seed)

    records: List[dict] = []
    usable = [s for s in sequences if s.length >= 2]
    if use_gecl and len(usable) < 2:
        if not use_gscl:
            raise ValueError(
                f"GECL-only pre-training (mode 'no_gscl') needs at least 2 patient sequences with two or "
                f"more graphs, found {len(usable)} of {len(sequences)}"
            )
        message = f"only {len(usable)} usable graph sequences; training GSCL only"
        logger.warning(message)
        records.append({"event": "gecl_disabled", "reason": message})
        use_gecl = False
    if not use_gscl and not use_gecl:
        raise ValueError("nothing to pre-train: both GSCL and GECL are disabled")

    cycler = _SequenceCycler(usable, cfg.batch_size, batch_rng) if use_gecl else None
    params = model.parameters()
    state = AdamState(learning_rate=cfg.learning_rate)

    for epoch in range(1, cfg.epochs + 1):
        sums = {"l_gscl": 0.0, "l_gecl": 0.0, "l_total": 0.0}
        batches = _graph_batches(len(graphs), cfg.batch_size, batch_rng)
        for step, batch in enumerate(batches, start=1):
            terms: List[DiffValue] = []
            parts: Dict[str, float] = {}
            if use_gecl:
                l_gecl = gecl_batch_loss(cycler.next_batch(), model.encoder, model.gru, model.scorer,
                                         embed=_cached_embedder(model.encoder))
                terms.append(l_gecl)
                parts["l_gecl"] = l_gecl.item()
            if use_gscl:
                l_gscl = gscl_batch_loss([graphs[i] for i in batch], model.encoder, cfg.tau, mask_rng)
                terms.append(ad.mul_scalar(l_gscl, cfg.alpha))
                parts["l_gscl"] = l_gscl.item()
            total = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
            parts["l_total"] = total.item()
            _check_finite(parts["l_total"], epoch, step, parts)

            ad.backward(total)
            adam_step(params, state)
            for key, value in parts.items():
                sums[key] += value

        record = {"epoch": epoch, **{k: sums[k] / len(batches) for k in ("l_gscl", "l_gecl", "l_total")}}
        records.append(record)
        logger.info("pretrain epoch %d: l_gscl=%.5f l_gecl=%.5f l_total=%.5f",
                    epoch, record["l_gscl"], record["l_gecl"], record["l_total"])

    checkpoint = model.state_dict()
    if checkpoint_path is not None:
        db.save_checkpoint(checkpoint_path, checkpoint)
    if log_path is not None:
        db.write_jsonl(log_path, records)
    return PretrainResult(checkpoint=checkpoint, records=records, model=model)


def ablation_flags(mode: str) -> Optional[Tuple[bool, bool]]:
    """(use_gscl, use_gecl) for a mode; None for ``none`` (no pre-training)."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}, expected one of {ABLATION_MODES}")
    return {
        "full": (True, True),
        "no_gscl": (False, True),
        "no_gecl": (True, False),
        "none": None,
    }[mode]


def ablation_mode(
        graphs: Sequence[HeweGraph],
        sequences: Sequence[GraphSequence],
        cfg: PretrainConfig,
        encoder_cfg: EncoderConfig,
        n_features: int,
        mode: str,
        model: Optional[PretrainModel] = None,
        checkpoint_path=None,
        log_path=None) -> Optional[PretrainResult]:
    """Pre-train with the loss subset of ``mode``; ``none`` trains nothing and returns None."""
    flags = ablation_flags(mode)
    if flags is None:
        logger.info("ablation mode 'none': skipping pre-training, few-shot stage starts from random init")
        return None
    use_gscl, use_gecl = flags
    return cotrain(graphs, sequences, cfg, encoder_cfg, n_features, use_gscl=use_gscl, use_gecl=use_gecl,
                   model=model, checkpoint_path=checkpoint_path, log_path=log_path)
