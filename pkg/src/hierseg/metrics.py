"""Confusion matrices, mean pixel accuracy and mean IoU."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np


class ConfusionAccumulator:
    """Square count matrix ``M[gt, pred]`` over ``n_classes`` labels."""

    def __init__(self, n_classes: int, names: Optional[Sequence[str]] = None):
        self.n_classes = int(n_classes)
        self.matrix = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)
        self.names = list(names) if names is not None else [str(i) for i in range(self.n_classes)]
        if len(self.names) != self.n_classes:
            raise ValueError("one name per class expected")

    def accumulate(self, gt, pred, ignore_id: Optional[int] = 255) -> "ConfusionAccumulator":
        gt = np.asarray(gt).ravel()
        pred = np.asarray(pred).ravel()
        if gt.shape != pred.shape:
            raise ValueError(f"gt and prediction extents differ: {gt.shape} vs {pred.shape}")
        keep = gt != ignore_id if ignore_id is not None else np.ones_like(gt, dtype=bool)
        gt, pred = gt[keep], pred[keep]
        n = self.n_classes
        bad = (gt < 0) | (gt >= n) | (pred < 0) | (pred >= n)
        if bad.any():
            raise ValueError(f"label outside the {n}x{n} matrix: "
                             f"gt {np.unique(gt[bad])[:5]}, pred {np.unique(pred[bad])[:5]}")
        self.matrix += np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.n_classes != self.n_classes:
            raise ValueError("cannot merge accumulators of different size")
        out = ConfusionAccumulator(self.n_classes, self.names)
        out.matrix = self.matrix + other.matrix
        return out

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.matrix.sum())


@dataclass
class ScopeScore:
    mpa: float
    miou: float
    pa: Dict[int, float] = field(default_factory=dict)
    iou: Dict[int, float] = field(default_factory=dict)

    def table(self, names: Optional[Sequence[str]] = None) -> List[str]:
        rows = []
        for c in self.pa:
            label = names[c] if names is not None else str(c)
            rows.append(f"{label}, {self.pa[c]:.6f}, {self.iou[c]:.6f}")
        return rows


def mpa_miou(acc, classes: Optional[Iterable[int]] = None) -> ScopeScore:
    """Mean PA and IoU over ``classes`` that have ground-truth pixels."""
    m = acc.matrix if isinstance(acc, ConfusionAccumulator) else np.asarray(acc)
    classes = list(range(m.shape[0])) if classes is None else [int(c) for c in classes]
    if not classes:
        raise ValueError("empty class filter")
    if any(c < 0 or c >= m.shape[0] for c in classes):
        raise ValueError("class filter names classes outside the matrix")
    rows = m.sum(axis=1)
    cols = m.sum(axis=0)
    pa, iou = {}, {}
    for c in classes:
        if rows[c] == 0:
            continue
        tp = m[c, c]
        pa[c] = tp / rows[c]
        iou[c] = tp / (rows[c] + cols[c] - tp)
    if not pa:
        return ScopeScore(float("nan"), float("nan"))
    return ScopeScore(float(np.mean(list(pa.values()))), float(np.mean(list(iou.values()))), pa, iou)


def flat_protocol_score(gt: np.ndarray, sigma: np.ndarray, superclass: int,
                        subclasses: Sequence[int]) -> np.ndarray:
    """Argmax map where a superclass decision defers to the runner-up subclass.

    ``sigma`` has classes on axis 0. On pixels whose ground truth is one of
    ``subclasses``, an argmax of ``superclass`` followed by a subclass in
    second place is replaced by that subclass, right or wrong. Other pixels
    keep the plain argmax.
    """
    k = sigma.shape[0]
    subs = np.asarray(list(subclasses))
    if not 0 <= superclass < k or (subs < 0).any() or (subs >= k).any():
        raise ValueError("superclass/subclass ids must index the flat space")
    order = np.argsort(-sigma, axis=0, kind="stable")
    first, second = order[0], order[1]
    pred = first.copy()
    on_sub = np.isin(gt, subs)
    rewrite = on_sub & (first == superclass) & np.isin(second, subs)
    pred[rewrite] = second[rewrite]
    return pred


def filter_evaluated_classes(train_counts: Mapping[int, int],
                             val_counts: Sequence[Mapping[int, int]] = (),
                             threshold: int = 0, direction: str = "above") -> List[int]:
    """Classes whose pixel counts pass ``threshold`` on the train and every validation split.

    ``above`` keeps counts strictly greater than the threshold; ``below``
    keeps nonzero counts strictly smaller than it.
    """
    if direction not in ("above", "below"):
        raise ValueError("direction must be 'above' or 'below'")

    def ok(n: int) -> bool:
        return n > threshold if direction == "above" else 0 < n < threshold

    keep = []
    for c in sorted(train_counts):
        if ok(train_counts[c]) and all(ok(v.get(c, 0)) for v in val_counts):
            keep.append(c)
    return keep
