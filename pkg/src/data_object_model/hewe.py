from dataclasses import dataclass, field
from enum import IntEnum
from typing import FrozenSet, List, Tuple

import numpy as np


class NodeRole(IntEnum):
    EHR = 0
    WORD = 1
    ENTITY = 2


@dataclass
class HeweGraph:
    """
    One document's heterogeneous graph.

    Nodes are ordered EHR (index 0), then words by vocabulary id, then entities by entity id.
    ``edges`` holds each undirected edge once as (i, j) with i < j, sorted. All weights are 1.
    """
    doc_id: str
    roles: List[NodeRole]
    feature_ids: List[int]
    edges: List[Tuple[int, int]]
    central: int = 0

    @property
    def n(self) -> int:
        return len(self.roles)

    def nodes_with_role(self, role: NodeRole) -> List[int]:
        return [i for i, r in enumerate(self.roles) if r == role]

    def neighbors(self, node: int) -> List[int]:
        out = []
        for i, j in self.edges:
            if i == node:
                out.append(j)
            elif j == node:
                out.append(i)
        return sorted(out)

    def word_neighbors_of_central(self) -> List[int]:
        return [i for i in self.neighbors(self.central) if self.roles[i] == NodeRole.WORD]

    def dense_adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n), dtype=np.float64)
        for i, j in self.edges:
            a[i, j] = 1.0
            a[j, i] = 1.0
        return a


@dataclass
class SubGraph:
    """A HEWE graph with some word neighbours of the central node masked out (edges zeroed)."""
    base: HeweGraph
    masked: FrozenSet[int] = field(default_factory=frozenset)

    @property
    def doc_id(self) -> str:
        return self.base.doc_id

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def central(self) -> int:
        return self.base.central

    @property
    def feature_ids(self) -> List[int]:
        return self.base.feature_ids

    def dense_adjacency(self) -> np.ndarray:
        a = self.base.dense_adjacency()
        if self.masked:
            idx = sorted(self.masked)
            a[idx, :] = 0.0
            a[:, idx] = 0.0
        return a


@dataclass
class GraphSequence:
    """One patient's graphs ordered by seq_index."""
    patient_id: str
    graphs: List[HeweGraph]
    seq_indices: List[int]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.seq_indices, self.seq_indices[1:])):
            raise ValueError(f"sequence for patient {self.patient_id!r} is not strictly increasing")

    @property
    def length(self) -> int:
        return len(self.graphs)
