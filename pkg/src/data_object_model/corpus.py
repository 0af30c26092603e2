from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol


@dataclass
class Document:
    doc_id: str
    patient_id: str
    seq_index: int
    tokens: List[str]
    labels: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.tokens:
            raise ValueError(f"document {self.doc_id!r} has no tokens")
        if int(self.seq_index) < 0:
            raise ValueError(f"document {self.doc_id!r} has negative seq_index {self.seq_index}")
        self.seq_index = int(self.seq_index)
        self.tokens = [str(t) for t in self.tokens]
        self.labels = [str(label) for label in self.labels]

    def to_primitive(self) -> dict:
        """Key order is fixed so that JSONL output is byte-stable."""
        return {
            "doc_id": self.doc_id,
            "patient_id": self.patient_id,
            "seq_index": self.seq_index,
            "tokens": list(self.tokens),
            "labels": list(self.labels),
        }

    @classmethod
    def from_primitive(cls, data: dict) -> "Document":
        return cls(
            doc_id=str(data["doc_id"]),
            patient_id=str(data["patient_id"]),
            seq_index=data["seq_index"],
            tokens=data["tokens"],
            labels=data.get("labels", []),
        )


@dataclass
class Vocabulary:
    """
    Word and entity ids, each dense from 0.

    Embedding-table rows are laid out as: row 0 for the virtual EHR node, then one row
    per word, then one row per entity (see ``word_feature`` / ``entity_feature``).
    """
    word_to_id: Dict[str, int]
    entity_to_id: Dict[str, int]
    counts: Dict[str, int]

    EHR_FEATURE = 0

    @property
    def n_words(self) -> int:
        return len(self.word_to_id)

    @property
    def n_entities(self) -> int:
        return len(self.entity_to_id)

    @property
    def feature_size(self) -> int:
        return 1 + self.n_words + self.n_entities

    def word_feature(self, word: str) -> int:
        return 1 + self.word_to_id[word]

    def entity_feature(self, entity: str) -> int:
        return 1 + self.n_words + self.entity_to_id[entity]

    def words_by_id(self) -> List[str]:
        return sorted(self.word_to_id, key=self.word_to_id.__getitem__)

    def entities_by_id(self) -> List[str]:
        return sorted(self.entity_to_id, key=self.entity_to_id.__getitem__)

    def to_primitive(self) -> dict:
        return {
            "words": self.words_by_id(),
            "entities": self.entities_by_id(),
            "counts": {w: self.counts[w] for w in self.words_by_id()},
        }

    @classmethod
    def from_primitive(cls, data: dict) -> "Vocabulary":
        return cls(
            word_to_id={w: i for i, w in enumerate(data["words"])},
            entity_to_id={e: i for i, e in enumerate(data["entities"])},
            counts={w: int(c) for w, c in data["counts"].items()},
        )


class EntityLookup(Protocol):
    """Word → entity contract shared by the offline gazetteer and remote linkers."""

    def lookup(self, word: str) -> Optional[str]:
        ...
