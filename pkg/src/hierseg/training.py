"""Supervision routing, hierarchical loss and the SGD training loop."""

from __future__ import annotations

import configparser
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .hierarchy import FlatSpace, LabelHierarchy, flatten_union
from .inference import DecisionMaps, decide
from .metrics import ConfusionAccumulator, ScopeScore, flat_protocol_score, mpa_miou
from .network import SegNet
from .optim import OptimizerState, WeightEMA, halving_schedule, lr_at, sgd_step
from .synth import IGNORE_ID, Corpus, Sample, batch_indices, bbox_to_pseudo_mask, downscale_and_crop
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_EPS = 1e-12


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# label lookup
# ---------------------------------------------------------------------------

def path_table(h: LabelHierarchy) -> np.ndarray:
    """``table[j, node]`` = class of classifier ``j`` on the path to ``node``, else -1."""
    table = np.full((len(h.classifiers), len(h.nodes)), -1, dtype=np.int64)
    for node in h.nodes:
        for j, y in h.path_encode(node):
            table[j, node.index] = y
    return table


def node_lut(h: LabelHierarchy, dataset: str) -> np.ndarray:
    """Dataset label id (0..255) -> node index, -1 where unbound or ignored."""
    lut = np.full(256, -1, dtype=np.int64)
    for label_id, name in h.bindings.get(dataset, {}).items():
        if 0 <= label_id < 256 and label_id != IGNORE_ID:
            lut[label_id] = h.node(name).index
    return lut


@dataclass
class Batch:
    """Stacked images with per-pixel node indices from dense labels and from box masks."""

    images: np.ndarray
    dense_nodes: np.ndarray
    box_nodes: np.ndarray
    datasets: List[str]


def make_batch(samples: Sequence[Sample], h: LabelHierarchy) -> Batch:
    luts: Dict[str, np.ndarray] = {}
    images, dense, boxes = [], [], []
    for s in samples:
        lut = luts.setdefault(s.dataset, node_lut(h, s.dataset))
        hw = s.shape
        images.append(s.image)
        if s.dense_labels is not None:
            dense.append(lut[np.clip(s.dense_labels, 0, 255)])
        else:
            dense.append(np.full(hw, -1, dtype=np.int64))
        if s.boxes:
            pm = bbox_to_pseudo_mask(s.boxes, hw)
            b = np.full(hw, -1, dtype=np.int64)
            b[pm.covered] = lut[pm.labels[pm.covered]]
            boxes.append(b)
        else:
            boxes.append(np.full(hw, -1, dtype=np.int64))
    return Batch(np.stack(images).astype(T.DEFAULT_DTYPE), np.stack(dense), np.stack(boxes),
                 [s.dataset for s in samples])


# ---------------------------------------------------------------------------
# routing and losses
# ---------------------------------------------------------------------------

@dataclass
class PixelSet:
    index: Tuple[np.ndarray, np.ndarray, np.ndarray]
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    @classmethod
    def from_mask(cls, mask: np.ndarray, targets: np.ndarray) -> "PixelSet":
        idx = np.nonzero(mask)
        return cls(idx, targets[idx])

    def as_set(self) -> set:
        return {(int(n), int(r), int(c), int(y)) for n, r, c, y in zip(*self.index, self.targets)}


@dataclass
class SupervisionSets:
    p1: List[PixelSet]
    p2: List[PixelSet]


def route_supervision(batch: Batch, decisions: Optional[DecisionMaps], h: LabelHierarchy,
                      use_pseudo: bool = True, table: Optional[np.ndarray] = None) -> SupervisionSets:
    """Split supervised pixels per classifier into per-pixel (P1) and box-derived (P2) sets.

    A box pixel joins P2 of a non-root classifier only where the current
    top-down decisions route it to that classifier. The root classifier
    learns from per-pixel annotations alone.
    """
    table = path_table(h) if table is None else table
    g, b = batch.dense_nodes, batch.box_nodes
    g_ok, b_ok = g >= 0, b >= 0
    gi, bi = np.where(g_ok, g, 0), np.where(b_ok, b, 0)
    p1, p2 = [], []
    empty = np.zeros(g.shape, dtype=bool)
    for clf in h.classifiers:
        tg = table[clf.id][gi]
        m1 = g_ok & (tg >= 0)
        p1.append(PixelSet.from_mask(m1, tg))
        if not use_pseudo or clf.parent is None or decisions is None:
            p2.append(PixelSet.from_mask(empty, tg))
            continue
        tb = table[clf.id][bi]
        m2 = b_ok & (tb >= 0) & decisions.masks[clf.id] & ~m1
        p2.append(PixelSet.from_mask(m2, tb))
    return SupervisionSets(p1, p2)


def _nll(sigma: Tensor, pixels: PixelSet) -> Tensor:
    n, r, c = pixels.index
    picked = T.take(sigma, (n, pixels.targets, r, c))
    return T.neg(T.mean(T.log(picked, eps=LOG_EPS)))


def hierarchical_loss(sigma: Tensor, p1: PixelSet, p2: PixelSet) -> Tensor:
    """Mean NLL over per-pixel targets plus mean NLL over pseudo targets; empty terms are 0."""
    loss = Tensor(np.zeros((), dtype=sigma.data.dtype))
    if len(p1):
        loss = loss + _nll(sigma, p1)
    if len(p2):
        loss = loss + _nll(sigma, p2)
    return loss


def regularizer(params: Dict[str, Tensor], decay: float, exclude: Sequence[str] = ()) -> float:
    skip = set(exclude)
    return decay * float(sum(np.sum(p.data ** 2) for k, p in params.items() if k not in skip))


def level_weight(weights: Sequence[float], level: int) -> float:
    return float(weights[min(level, len(weights)) - 1])


def total_loss(losses: Sequence[Optional[Tensor]], h: LabelHierarchy,
               weights: Sequence[float] = (1.0, 0.1, 0.1), reg: float = 0.0) -> Tensor:
    """Level-weighted sum of classifier losses plus a (constant) regularizer value."""
    if any(w < 0 for w in weights):
        raise ValueError("loss weights must be nonnegative")
    total = Tensor(np.asarray(float(reg)))
    for clf, loss in zip(h.classifiers, losses):
        if loss is None:
            continue
        total = total + level_weight(weights, clf.level) * loss
    return total


def flat_targets(batch: Batch, space: FlatSpace, h: LabelHierarchy) -> np.ndarray:
    """Flat class per pixel: dense labels, then box masks, else unlabeled/ignore (-1)."""
    to_flat = np.full(len(h.nodes), -1, dtype=np.int64)
    for i, name in enumerate(space.classes):
        to_flat[h.node(name).index] = i
    out = np.full(batch.dense_nodes.shape, -1, dtype=np.int64)
    g, b = batch.dense_nodes, batch.box_nodes
    out[g >= 0] = to_flat[g[g >= 0]]
    from_box = (b >= 0) & (out < 0)
    out[from_box] = to_flat[b[from_box]]
    if space.unlabeled:
        no_dense = np.array([not (g[n] >= 0).any() for n in range(len(g))])
        bg = no_dense[:, None, None] & (b < 0)
        out[bg] = space.unlabeled_index
    return out


def flat_space_for(h: LabelHierarchy, datasets: Sequence[Corpus], unlabeled_class: bool = True) -> FlatSpace:
    """Union of the datasets' bound nodes; an 'unlabeled' class only if some set is box-only."""
    box_only = any(c.spec.annotation_type == "bbox" for c in datasets)
    return flatten_union(h, [c.name for c in datasets], unlabeled=unlabeled_class and box_only)


def flat_loss(sigma: Tensor, targets: np.ndarray) -> Tensor:
    """Cross entropy averaged over pixels with a target (>= 0)."""
    mask = targets >= 0
    if not mask.any():
        return Tensor(np.zeros((), dtype=sigma.data.dtype))
    return _nll(sigma, PixelSet.from_mask(mask, targets))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class Evaluation:
    scopes: Dict[str, ScopeScore]
    accumulators: Dict[str, ConfusionAccumulator]

    def metrics(self) -> Dict[str, float]:
        out = {}
        for name, s in self.scopes.items():
            out[f"{name}/mPA"] = s.mpa
            out[f"{name}/mIoU"] = s.miou
        return out


def predict_sigmas(net: SegNet, images: np.ndarray, batch_size: int = 8) -> List[np.ndarray]:
    outs: List[List[np.ndarray]] = [[] for _ in net.heads]
    for i in range(0, len(images), batch_size):
        sig = net.forward(images[i:i + batch_size], training=False)
        for k, s in enumerate(sig):
            outs[k].append(s.data)
    return [np.concatenate(o) for o in outs]


def _level_scores(h: LabelHierarchy, accs: Dict[int, ConfusionAccumulator]) -> Dict[str, ScopeScore]:
    scopes: Dict[str, ScopeScore] = {}
    by_level: Dict[int, List[Tuple[str, ScopeScore]]] = {}
    for clf in h.classifiers:
        s = mpa_miou(accs[clf.id], range(clf.n_classes))
        scopes[f"clf/{clf.name}"] = s
        by_level.setdefault(clf.level, []).append((clf.name, s))
    for lv, items in sorted(by_level.items()):
        pa = [v for _, s in items for v in s.pa.values()]
        iou = [v for _, s in items for v in s.iou.values()]
        if pa:
            scopes[f"L{lv}"] = ScopeScore(float(np.mean(pa)), float(np.mean(iou)))
    return scopes


def evaluate(net: SegNet, h: LabelHierarchy, corpora: Sequence[Corpus], mode: str = "hier",
             space: Optional[FlatSpace] = None, batch_size: int = 8) -> Evaluation:
    """Score each classifier on pixels whose ground-truth path reaches it.

    In flat mode a prediction counts for classifier ``j`` when the predicted
    flat class lies under ``j`` on the same branch; when ``j``'s own node is a
    flat class, the runner-up rule of :func:`flat_protocol_score` applies.
    """
    table = path_table(h)
    accs = {clf.id: ConfusionAccumulator(clf.n_classes + 1, clf.classes + ["<other>"]) for clf in h.classifiers}
    if mode == "flat":
        if space is None:
            raise ValueError("flat evaluation needs the flat label space")
        flat_nodes = np.array([h.node(n).index for n in space.classes] + [-1] * int(space.unlabeled))
    for corpus in corpora:
        samples = [s for s in corpus.samples if s.dense_labels is not None]
        if not samples:
            continue
        batch = make_batch(samples, h)
        sig = predict_sigmas(net, batch.images, batch_size)
        g = batch.dense_nodes
        ok = g >= 0
        gi = np.where(ok, g, 0)
        for clf in h.classifiers:
            gt = table[clf.id][gi]
            sel = ok & (gt >= 0)
            if not sel.any():
                continue
            if mode == "hier":
                pred = np.argmax(sig[clf.id], axis=1)
            else:
                s = sig[0]
                pred_flat = np.argmax(s, axis=1)
                if clf.name in space.classes:
                    sup = space.index(clf.name)
                    subs = [i for i, name in enumerate(space.classes)
                            if table[clf.id][h.node(name).index] >= 0]
                    gt_flat = np.full(g.shape, -1, dtype=np.int64)
                    to_flat = {h.node(name).index: i for i, name in enumerate(space.classes)}
                    for node_idx, fi in to_flat.items():
                        gt_flat[g == node_idx] = fi
                    if subs:
                        pred_flat = np.stack([flat_protocol_score(gt_flat[n], s[n], sup, subs)
                                              for n in range(len(s))])
                pred_nodes = flat_nodes[pred_flat]
                pred = np.where(pred_nodes >= 0, table[clf.id][np.where(pred_nodes >= 0, pred_nodes, 0)], -1)
            pred = np.where(pred >= 0, pred, clf.n_classes)
            accs[clf.id].accumulate(gt[sel], pred[sel], ignore_id=None)
    scopes = _level_scores(h, accs)
    return Evaluation(scopes, {h.classifiers[j].name: a for j, a in accs.items()})


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 300
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.00017
    halvings: int = 3
    level_weights: Tuple[float, ...] = (1.0, 0.1, 0.1)
    ratios: Tuple[int, ...] = (1,)
    crop: Tuple[int, int] = (64, 64)
    warmup: Optional[int] = None
    eval_every: int = 50
    patience: int = 3
    seed: int = 0
    mode: str = "hier"
    unlabeled_class: bool = True
    weight_ema: bool = False
    ema_decay: float = 0.9

    def __post_init__(self):
        if self.mode not in ("hier", "flat"):
            raise ValueError(f"mode must be 'hier' or 'flat', got {self.mode!r}")
        self.level_weights = tuple(float(x) for x in self.level_weights)
        self.ratios = tuple(int(x) for x in self.ratios)
        self.crop = tuple(int(x) for x in self.crop)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{f.name} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        """Parse a ``key = value`` document; unknown keys are an error."""
        cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
        cp.read_string("[train]\n" + text)
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in cp["train"].items():
            if key not in fields:
                raise ValueError(f"unknown training option {key!r}")
            kwargs[key] = _coerce(fields[key], raw)
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)


def _coerce(f: dataclasses.Field, raw: str):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    default = f.default
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        parts = [p for p in raw.replace(":", ",").split(",") if p.strip()]
        kind = float if f.name == "level_weights" else int
        return tuple(kind(p) for p in parts)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, int) or f.name == "warmup":
        return int(raw)
    return raw


@dataclass
class TrainResult:
    net: SegNet
    records: List[Tuple[int, str, str, float]]
    final: Dict[str, float]
    lr_trace: List[float]
    steps_run: int
    losses: List[float] = field(default_factory=list)
    state: Optional[OptimizerState] = None

    def log_text(self) -> str:
        return format_records(self.records)


def format_records(records: Sequence[Tuple[int, str, str, float]]) -> str:
    return "".join(f"{step}, {split}, {metric}, {value:.6f}\n" for step, split, metric, value in records)


def default_warmup(datasets: Sequence[Corpus], ratios: Sequence[int]) -> int:
    """One epoch of the dataset with the most per-pixel annotated pixels."""
    best, steps = -1, 0
    for corpus, r in zip(datasets, ratios):
        if r <= 0:
            continue
        dense = sum(int((s.dense_labels != IGNORE_ID).sum()) for s in corpus.samples if s.dense_labels is not None)
        if dense > best:
            best, steps = dense, math.ceil(len(corpus) / r)
    return steps


def selection_score(metrics: Dict[str, float]) -> float:
    vals = [v for k, v in metrics.items() if k.startswith("L") and k.endswith("/mPA") and not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def train(net: SegNet, h: LabelHierarchy, datasets: Sequence[Corpus], cfg: TrainConfig,
          validation: Sequence[Corpus] = (), space: Optional[FlatSpace] = None) -> TrainResult:
    """SGD training of ``net`` (hierarchical heads, or one flat head with ``space``)."""
    if len(cfg.ratios) != len(datasets):
        raise ValueError(f"{len(cfg.ratios)} ratios for {len(datasets)} datasets")
    if cfg.mode == "flat" and space is None:
        raise ValueError("flat training needs a flat label space")
    if cfg.mode == "hier" and len(net.heads) != len(h.classifiers):
        raise ValueError("network heads do not match the hierarchy's classifiers")

    state = OptimizerState(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    milestones = halving_schedule(cfg.learning_rate, cfg.steps, cfg.halvings)
    warmup = cfg.warmup if cfg.warmup is not None else default_warmup(datasets, cfg.ratios)
    table = path_table(h)
    ema = WeightEMA(net.params, cfg.ema_decay) if cfg.weight_ema else None

    records: List[Tuple[int, str, str, float]] = []
    lr_trace: List[float] = []
    losses: List[float] = []
    evals: List[Dict[str, float]] = []
    best, stale = -np.inf, 0
    sizes = [len(c) for c in datasets]
    th, tw = cfg.crop
    step = 0
    for step in range(cfg.steps):
        state.learning_rate = lr_at(step, cfg.learning_rate, milestones)
        lr_trace.append(state.learning_rate)
        idx = batch_indices(sizes, cfg.ratios, step, cfg.seed)
        samples = [downscale_and_crop(datasets[d][i], th, tw, seed=(cfg.seed * 1_000_003 + step) * 64 + k)
                   for k, (d, i) in enumerate(idx)]
        batch = make_batch(samples, h)

        if cfg.mode == "hier":
            rep = net.forward_shared(batch.images, training=True)
            sigmas = [net.forward_head(hd, rep, th, tw, training=True) for hd in net.heads]
            decisions = decide([s.data for s in sigmas], h)
            sets = route_supervision(batch, decisions, h, use_pseudo=step >= warmup, table=table)
            per = [hierarchical_loss(s, a, b) if (len(a) or len(b)) else None
                   for s, a, b in zip(sigmas, sets.p1, sets.p2)]
            loss = total_loss(per, h, cfg.level_weights)
        else:
            (sigma,) = net.forward(batch.images, training=True)
            loss = flat_loss(sigma, flat_targets(batch, space, h))

        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {step}")
        losses.append(value)
        if loss.requires_grad:
            T.backward(loss)
        for p in net.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        sgd_step(net.params, state, net.no_decay)
        if ema is not None:
            ema.update(net.params)

        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.steps:
            window = losses[-cfg.eval_every:]
            reg = regularizer(net.params, cfg.weight_decay, net.no_decay)
            records.append((done, "train", "loss", float(np.mean(window))))
            records.append((done, "train", "regularizer", reg))
            records.append((done, "train", "lr", state.learning_rate))
            if validation:
                ev = evaluate(net, h, validation, cfg.mode, space).metrics()
                evals.append(ev)
                for k in sorted(ev):
                    records.append((done, "val", k, ev[k]))
                score = selection_score(ev)
                if score > best + 1e-9:
                    best, stale = score, 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        log.info("early stop at step %d", done)
                        break

    final: Dict[str, float] = {}
    if evals:
        last = evals[-2:]
        for k in last[-1]:
            final[k] = float(np.mean([e[k] for e in last]))
    if ema is not None:
        for k, p in net.params.items():
            p.data = ema.shadow[k].copy()
    return TrainResult(net, records, final, lr_trace, step + 1, losses, state)
