"""
Deterministic synthetic corpus: labeled documents grouped into patient sequences.

Every class owns a disjoint set of signal tokens. A document mixes its class's signal tokens
with noise tokens drawn uniformly from one vocabulary shared by all classes and patients, and
each later document of a patient keeps at least a ``coherence`` share of the previous
document's token positions. Patients carry a single class, so the class-frequency histogram
matches the configured counts exactly.
"""
import logging
from typing import Dict, List, Tuple

import numpy as np

import data_access_layer.data_store as db
from data_access_layer.entity_linker import Gazetteer
from data_object_model.corpus import Document
from data_object_model.errors import ConfigError
from data_object_model.run_state import SynthConfig

logger = logging.getLogger(__name__)


def class_code(index: int) -> str:
    return f"D{index + 1:03d}"


def signal_token(class_index: int, j: int) -> str:
    return f"c{class_index:02d}_s{j:02d}"


def noise_token(j: int) -> str:
    return f"w{j:04d}"


def _even_split(n_docs: int, n_parts: int) -> List[int]:
    base, extra = divmod(n_docs, n_parts)
    return [base + 1 if i < extra else base for i in range(n_parts)]


def _largest_remainder(total: int, weights: List[int], floor: int = 1) -> List[int]:
    """Integer shares of ``total`` proportional to ``weights``, each at least ``floor``."""
    spare = total - floor * len(weights)
    raw = [spare * w / sum(weights) for w in weights]
    shares = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(weights)), key=lambda i: (-(raw[i] - shares[i]), i))
    for i in order[:spare - sum(shares)]:
        shares[i] += 1
    return [floor + s for s in shares]


def patient_lengths(cfg: SynthConfig, docs_per_class: List[int]) -> List[List[int]]:
    """
    Sequence lengths per class. With ``n_patients = 0`` every class gets the fewest patients
    whose sequences fit ``seq_len_max``; otherwise patients are shared out in proportion to
    the class sizes.
    """
    if cfg.n_patients == 0:
        counts = [-(-n // cfg.seq_len_max) for n in docs_per_class]
    else:
        if cfg.n_patients < len(docs_per_class):
            raise ConfigError(
                f"synth.n_patients={cfg.n_patients} is below the number of classes ({len(docs_per_class)})"
            )
        counts = _largest_remainder(cfg.n_patients, docs_per_class)

    lengths = []
    for c, (n_docs, n_patients) in enumerate(zip(docs_per_class, counts)):
        split = _even_split(n_docs, n_patients)
        if min(split) < cfg.seq_len_min or max(split) > cfg.seq_len_max:
            raise ConfigError(
                f"class {class_code(c)}: {n_docs} documents over {n_patients} patients gives sequence lengths "
                f"{min(split)}..{max(split)}, outside [{cfg.seq_len_min}, {cfg.seq_len_max}]"
            )
        lengths.append(split)
    return lengths


class _PatientWriter:
    """Draws one patient's documents, each derived from the previous one."""

    def __init__(self, cfg: SynthConfig, signals: List[str], rng: np.random.Generator):
        self.cfg = cfg
        self.signals = signals
        self.rng = rng

    def _fresh_token(self) -> str:
        if self.rng.random() < self.cfg.noise_rate:
            return noise_token(int(self.rng.integers(self.cfg.vocab_size)))
        return self.signals[int(self.rng.integers(len(self.signals)))]

    def _ensure_signal(self, tokens: List[str], free: List[int]) -> None:
        signal_set = set(self.signals)
        if any(t in signal_set for t in tokens):
            return
        position = free[int(self.rng.integers(len(free)))]
        tokens[position] = self.signals[int(self.rng.integers(len(self.signals)))]

    def first(self) -> List[str]:
        tokens = [self._fresh_token() for _ in range(self.cfg.doc_length)]
        self._ensure_signal(tokens, list(range(len(tokens))))
        return tokens

    def next(self, previous: List[str]) -> List[str]:
        length = len(previous)
        n_keep = min(length, int(np.ceil(self.cfg.coherence * length - 1e-9)))
        kept = set(self.rng.choice(length, size=n_keep, replace=False).tolist()) if n_keep else set()
        tokens = [previous[i] if i in kept else self._fresh_token() for i in range(length)]
        free = [i for i in range(length) if i not in kept]
        if free:
            self._ensure_signal(tokens, free)
        return tokens


def build_gazetteer(cfg: SynthConfig) -> Gazetteer:
    """The first ``entity_fraction`` of each class's signal tokens link to entities, two words per entity."""
    n_linked = int(round(cfg.entity_fraction * cfg.signal_tokens_per_class))
    mapping: Dict[str, str] = {}
    for c in range(cfg.n_train_classes + cfg.n_test_classes):
        for j in range(n_linked):
            mapping[signal_token(c, j)] = f"E{c:02d}_{j // 2:02d}"
    return Gazetteer(mapping)


def generate_corpus(cfg: SynthConfig) -> Tuple[List[Document], Gazetteer]:
    cfg.validate()
    n_classes = cfg.n_train_classes + cfg.n_test_classes
    docs_per_class = [cfg.docs_per_train_class] * cfg.n_train_classes + [cfg.docs_per_test_class] * cfg.n_test_classes
    lengths = patient_lengths(cfg, docs_per_class)
    rng = np.random.default_rng(cfg.seed)

    docs: List[Document] = []
    patient_no = 0
    for c in range(n_classes):
        signals = [signal_token(c, j) for j in range(cfg.signal_tokens_per_class)]
        for length in lengths[c]:
            patient_id = f"p{patient_no:04d}"
            patient_no += 1
            writer = _PatientWriter(cfg, signals, rng)
            tokens = writer.first()
            for seq_index in range(length):
                if seq_index:
                    tokens = writer.next(tokens)
                docs.append(Document(
                    doc_id=f"doc{len(docs):05d}",
                    patient_id=patient_id,
                    seq_index=seq_index,
                    tokens=tokens,
                    labels=[class_code(c)],
                ))
    gazetteer = build_gazetteer(cfg)
    logger.info("synthetic corpus: %d documents, %d patients, %d classes (%d train / %d test), %d gazetteer entries",
                len(docs), patient_no, n_classes, cfg.n_train_classes, cfg.n_test_classes, len(gazetteer))
    return docs, gazetteer


def write_synthetic_corpus(cfg: SynthConfig, layout: db.RunLayout) -> Tuple[List[Document], Gazetteer]:
    docs, gazetteer = generate_corpus(cfg)
    db.write_corpus(layout.corpus, docs)
    db.write_gazetteer(layout.gazetteer, gazetteer)
    return docs, gazetteer
