from dataclasses import dataclass, field
from typing import Dict, List, Tuple


@dataclass
class LabeledGraphSet:
    """
    Graph ids grouped by ICD class for one split (train, validation or test).

    A graph carrying several labels is listed under each of them.
    """
    split: str
    class_index: Dict[str, List[str]] = field(default_factory=dict)

    @property
    def classes(self) -> List[str]:
        return sorted(self.class_index)

    @property
    def graph_ids(self) -> List[str]:
        return sorted({g for ids in self.class_index.values() for g in ids})

    def count(self, label: str) -> int:
        return len(self.class_index.get(label, []))

    def restricted_to(self, classes: List[str]) -> "LabeledGraphSet":
        return LabeledGraphSet(self.split, {c: list(self.class_index[c]) for c in sorted(classes)})


@dataclass
class Episode:
    """
    A C-way K-shot task. ``classes[i]`` is the global class behind episode-local label i;
    support and query hold (graph_id, local label) pairs.
    """
    classes: List[str]
    support: List[Tuple[str, int]]
    query: List[Tuple[str, int]]

    @property
    def n_way(self) -> int:
        return len(self.classes)

    def support_by_class(self) -> List[List[str]]:
        grouped: List[List[str]] = [[] for _ in self.classes]
        for graph_id, local in self.support:
            grouped[local].append(graph_id)
        return grouped
