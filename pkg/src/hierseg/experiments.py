"""Scripted desk-scale comparisons on synthetic corpora.

``ab_compare`` trains a flat classifier and the classifier tree on the same
imbalanced two-level corpus. ``bbox_vs_dense`` trains the subclass level
once from dense labels and once from boxes only (the hierarchical loss with
pseudo ground truth), on identical images.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .hierarchy import DatasetSpec, LabelHierarchy, bind_dataset, flatten_union
from .network import NetworkConfig, build_flat_network, build_network
from .presets import load_config
from .synth import Corpus, generate_corpus
from .training import TrainConfig, TrainResult, train

REGIONS = {0: "road", 1: "building", 2: "vegetation", 3: "sky"}
SIGNS = {4: "sign_a", 5: "sign_b", 6: "sign_c", 7: "sign_d"}


@dataclass
class Scale:
    """Corpus sizes and schedule of one experiment run."""

    n_train: int = 256
    n_signs: int = 128
    n_val: int = 64
    steps: int = 600
    learning_rate: float = 0.03
    eval_every: int = 100
    subclass_share: float = 0.0025
    bbox_share: float = 0.02


DESK = Scale()
QUICK = Scale(n_train=32, n_signs=16, n_val=8, steps=20, eval_every=10)


@dataclass
class RunSummary:
    seed: int
    mode: str
    final: Dict[str, float]
    seconds: float
    log: str


@dataclass
class ExperimentReport:
    name: str
    runs: List[RunSummary] = field(default_factory=list)

    def modes(self) -> List[str]:
        return list(dict.fromkeys(r.mode for r in self.runs))

    def mean(self, mode: str, metric: str) -> float:
        vals = [r.final[metric] for r in self.runs if r.mode == mode and metric in r.final]
        return float(np.mean(vals)) if vals else float("nan")

    def metric_names(self) -> List[str]:
        names = {k for r in self.runs for k in r.final if k.startswith("L")}
        return sorted(names)

    def table(self) -> str:
        metrics = self.metric_names()
        header = ["mode"] + metrics
        rows = [[m] + [f"{self.mean(m, k):.4f}" for k in metrics] for m in self.modes()]
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths))  # noqa: E731
        seeds = sorted({r.seed for r in self.runs})
        lines = [f"{self.name}: mean over seeds {seeds}", fmt(header), fmt(["-" * w for w in widths])]
        return "\n".join(lines + [fmt(r) for r in rows]) + "\n"

    def write_logs(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        for r in self.runs:
            with open(os.path.join(directory, f"{self.name}_{r.mode}_seed{r.seed}.log"), "w") as fh:
                fh.write(r.log)
        with open(os.path.join(directory, f"{self.name}_summary.txt"), "w") as fh:
            fh.write(self.table())


def toy_hierarchy() -> LabelHierarchy:
    return load_config("toy")


def _train_config(scale: Scale, seed: int, mode: str, ratios: Sequence[int]) -> TrainConfig:
    # patience larger than the number of evaluations: every run uses the full schedule
    return TrainConfig(steps=scale.steps, learning_rate=scale.learning_rate, ratios=tuple(ratios),
                       eval_every=scale.eval_every, patience=scale.steps, seed=seed, mode=mode)


def _run(name: str, seed: int, fn) -> RunSummary:
    t0 = time.perf_counter()
    res: TrainResult = fn()
    return RunSummary(seed, name, res.final, time.perf_counter() - t0, res.log_text())


def imbalanced_corpora(scale: Scale, seed: int):
    """Region bands plus four rare sign subclasses, each at ``subclass_share`` of the pixels."""
    labels = {**REGIONS, **SIGNS}
    shares = {k: scale.subclass_share for k in SIGNS}
    train_spec = DatasetSpec("extended", labels, "dense", shares=shares, objects=tuple(SIGNS),
                             n_images=scale.n_train)
    h = bind_dataset(toy_hierarchy(), train_spec)
    train_set = generate_corpus(train_spec, h, seed=2 * seed + 1)
    val_set = generate_corpus(train_spec, h, seed=2 * seed + 2, n_images=scale.n_val)
    return h, train_set, val_set


def ab_compare(seeds: Sequence[int] = (0, 1, 2), scale: Scale = DESK,
               net_cfg: Optional[NetworkConfig] = None) -> ExperimentReport:
    report = ExperimentReport("ab-compare")
    for seed in seeds:
        h, tr, va = imbalanced_corpora(scale, seed)
        cfg = replace(net_cfg or NetworkConfig(), seed=seed)
        space = flatten_union(h)

        def flat():
            net = build_flat_network(space, cfg)
            return train(net, h, [tr], _train_config(scale, seed, "flat", (4,)), [va], space=space)

        def hier():
            net = build_network(h, cfg)
            return train(net, h, [tr], _train_config(scale, seed, "hier", (4,)), [va])

        report.runs.append(_run("flat", seed, flat))
        report.runs.append(_run("hier", seed, hier))
    return report


def cross_dataset_corpora(scale: Scale, seed: int):
    """A coarse dense set, a sign set with boxes (and its dense twin) and a dense validation set.

    The coarse set labels every sign as ``traffic_sign`` only; the sign set
    draws the same regions but annotates nothing except its sign boxes.
    """
    coarse = DatasetSpec("coarse", {**REGIONS, 4: "traffic_sign"}, "dense", shares={4: 0.01},
                         objects=(4,), n_images=scale.n_train)
    signs = DatasetSpec("signs", {**REGIONS, **SIGNS}, "bbox", shares={k: scale.bbox_share for k in SIGNS},
                        objects=tuple(SIGNS), n_images=scale.n_signs)
    val = DatasetSpec("extended", {**REGIONS, **SIGNS}, "dense",
                      shares={k: scale.subclass_share for k in SIGNS}, objects=tuple(SIGNS),
                      n_images=scale.n_val)
    h = toy_hierarchy()
    for spec in (coarse, signs, val):
        h = bind_dataset(h, spec)
    base = 10 * seed
    c = generate_corpus(coarse, h, seed=base + 1)
    boxes = generate_corpus(signs, h, seed=base + 2)
    dense = generate_corpus(signs, h, seed=base + 2, annotate="dense")
    v = generate_corpus(val, h, seed=base + 3)
    return h, c, boxes, dense, v


def bbox_vs_dense(seeds: Sequence[int] = (0, 1, 2), scale: Scale = DESK,
                  net_cfg: Optional[NetworkConfig] = None) -> ExperimentReport:
    """Dense-supervised run first (the reference), then the box-supervised run."""
    report = ExperimentReport("bbox-vs-dense")
    for seed in seeds:
        h, coarse, boxes, dense, val = cross_dataset_corpora(scale, seed)
        cfg = replace(net_cfg or NetworkConfig(), seed=seed)
        for mode, sign_set in (("dense", dense), ("bbox", boxes)):
            def run(sign_set: Corpus = sign_set):
                net = build_network(h, cfg)
                return train(net, h, [coarse, sign_set], _train_config(scale, seed, "hier", (2, 2)), [val])

            report.runs.append(_run(mode, seed, run))
    return report


EXPERIMENTS = {"ab-compare": ab_compare, "bbox-vs-dense": bbox_vs_dense}
