""" Macro-averaged ACC / precision / recall / F1 over one set of predictions. """
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Sequence


@dataclass
class ConfusionCounts:
    tp: Dict[Hashable, int] = field(default_factory=dict)
    fp: Dict[Hashable, int] = field(default_factory=dict)
    fn: Dict[Hashable, int] = field(default_factory=dict)
    correct: int = 0
    total: int = 0


def confusion_counts(preds: Sequence[Hashable], golds: Sequence[Hashable], classes: Sequence[Hashable]) -> ConfusionCounts:
    if len(preds) != len(golds):
        raise ValueError(f"preds and golds differ in length: {len(preds)} != {len(golds)}")
    known = set(classes)
    missing = [g for g in golds if g not in known]
    if missing:
        raise ValueError(f"gold labels outside the class list: {sorted(set(map(str, missing)))}")

    counts = ConfusionCounts(
        tp={c: 0 for c in classes}, fp={c: 0 for c in classes}, fn={c: 0 for c in classes}
    )
    for p, g in zip(preds, golds):
        counts.total += 1
        if p == g:
            counts.tp[g] += 1
            counts.correct += 1
        else:
            counts.fn[g] += 1
            # predictions outside the class list only cost recall
            if p in counts.fp:
                counts.fp[p] += 1
    return counts


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def macro_metrics(preds: Sequence[Hashable], golds: Sequence[Hashable], classes: Sequence[Hashable]) -> Dict[str, float]:
    """
    Per-class P = TP/(TP+FP), R = TP/(TP+FN), F1 = 2PR/(P+R), each 0 on a zero denominator,
    averaged without weights over ``classes``. ACC is correct / total.
    """
    counts = confusion_counts(preds, golds, classes)
    precisions: List[float] = []
    recalls: List[float] = []
    f1s: List[float] = []
    for c in classes:
        p = _ratio(counts.tp[c], counts.tp[c] + counts.fp[c])
        r = _ratio(counts.tp[c], counts.tp[c] + counts.fn[c])
        precisions.append(p)
        recalls.append(r)
        f1s.append(_ratio(2 * p * r, p + r))
    n = len(classes)
    return {
        "acc": _ratio(counts.correct, counts.total),
        "precision": _ratio(sum(precisions), n),
        "recall": _ratio(sum(recalls), n),
        "f1": _ratio(sum(f1s), n),
    }
