"""Scikit-learn style front end: ``fit`` on corpora, ``predict`` on images."""

from __future__ import annotations

from typing import List, Optional, Union

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_model, save_model
from .hierarchy import LabelHierarchy, bind_dataset, validate
from .inference import compose, decide, flat_segmentation
from .network import NetworkConfig, build_flat_network, build_network
from .presets import load_config
from .training import TrainConfig, evaluate, flat_space_for, predict_sigmas, selection_score, train
from .validation import check_corpora, check_images, check_ratios, pad_to_multiple


class _Segmenter(BaseEstimator):
    _mode = "hier"

    def __init__(self, hierarchy: Union[str, LabelHierarchy] = "toy", widths=(16, 24, 32, 32),
                 output_stride: int = 4, rep_depth: int = 32, bottleneck: int = 16, steps: int = 300,
                 learning_rate: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.00017,
                 level_weights=(1.0, 0.1, 0.1), ratios=None, crop=(64, 64), warmup: Optional[int] = None,
                 eval_every: int = 50, patience: int = 3, unlabeled_class: bool = True,
                 batch_size: int = 8, random_state: int = 0):
        self.hierarchy = hierarchy
        self.widths = widths
        self.output_stride = output_stride
        self.rep_depth = rep_depth
        self.bottleneck = bottleneck
        self.steps = steps
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.level_weights = level_weights
        self.ratios = ratios
        self.crop = crop
        self.warmup = warmup
        self.eval_every = eval_every
        self.patience = patience
        self.unlabeled_class = unlabeled_class
        self.batch_size = batch_size
        self.random_state = random_state

    # -- configuration -----------------------------------------------------
    def _network_config(self) -> NetworkConfig:
        return NetworkConfig(widths=tuple(self.widths), output_stride=self.output_stride,
                             rep_depth=self.rep_depth, bottleneck=self.bottleneck, seed=self.random_state)

    def _train_config(self, n_datasets: int) -> TrainConfig:
        return TrainConfig(steps=self.steps, learning_rate=self.learning_rate, momentum=self.momentum,
                           weight_decay=self.weight_decay, level_weights=tuple(self.level_weights),
                           ratios=check_ratios(self.ratios, n_datasets), crop=tuple(self.crop),
                           warmup=self.warmup, eval_every=self.eval_every, patience=self.patience,
                           seed=self.random_state, mode=self._mode, unlabeled_class=self.unlabeled_class)

    def _base_hierarchy(self) -> LabelHierarchy:
        if isinstance(self.hierarchy, LabelHierarchy):
            return self.hierarchy
        return load_config(str(self.hierarchy))

    # -- fitting -----------------------------------------------------------
    def fit(self, X, y=None, validation=None):
        """Train on one or more corpora. ``y`` is unused: annotations live in the corpora."""
        datasets = check_corpora(X)
        val = check_corpora(validation) if validation is not None else []
        h = self._base_hierarchy()
        for c in datasets + val:
            h = bind_dataset(h, c.spec)
        validate(h, [c.spec for c in datasets]).raise_if_invalid()
        cfg = self._train_config(len(datasets))
        net_cfg = self._network_config()
        space = None
        if self._mode == "flat":
            space = flat_space_for(h, datasets, self.unlabeled_class)
            net = build_flat_network(space, net_cfg)
        else:
            net = build_network(h, net_cfg)
        result = train(net, h, datasets, cfg, val, space=space)
        self.hierarchy_ = h
        self.net_ = net
        self.space_ = space
        self.history_ = result.records
        self.final_metrics_ = result.final
        self.n_steps_ = result.steps_run
        self.optimizer_state_ = result.state
        self.class_names_ = [n.name for n in h.nodes]
        return self

    # -- inference ---------------------------------------------------------
    def _sigmas(self, X) -> List[np.ndarray]:
        check_is_fitted(self, "net_")
        images = check_images(X, self.net_.cfg.in_channels)
        padded, (h, w) = pad_to_multiple(images, self.net_.cfg.output_stride)
        return [s[..., :h, :w] for s in predict_sigmas(self.net_, padded, self.batch_size)]

    def predict_proba(self, X) -> List[np.ndarray]:
        """One ``(N, K_j, H, W)`` probability map per classifier (a single one when flat)."""
        return self._sigmas(X)

    def predict(self, X, level: Optional[int] = None) -> np.ndarray:
        """Node index per pixel (see ``class_names_``); ``level`` truncates to that depth."""
        sig = self._sigmas(X)
        h = self.hierarchy_
        if self._mode == "hier":
            seg = compose(decide(sig, h), h, "finest" if level is None else level)
            return seg.nodes
        return flat_segmentation(sig[0], self.space_, h, "finest" if level is None else level).nodes

    def predict_names(self, X, level: Optional[int] = None) -> np.ndarray:
        return np.asarray(self.class_names_, dtype=object)[self.predict(X, level)]

    def transform(self, X) -> np.ndarray:
        """Shared representation ``(N, D, H/s, W/s)`` from the extractor."""
        check_is_fitted(self, "net_")
        images = check_images(X, self.net_.cfg.in_channels)
        padded, _ = pad_to_multiple(images, self.net_.cfg.output_stride)
        out = [self.net_.forward_shared(padded[i:i + self.batch_size]).data
               for i in range(0, len(padded), self.batch_size)]
        return np.concatenate(out)

    # -- scoring -----------------------------------------------------------
    def evaluate(self, X):
        """Per-classifier and per-level scores on annotated corpora."""
        check_is_fitted(self, "net_")
        corpora = check_corpora(X)
        h = self.hierarchy_
        for c in corpora:
            h = bind_dataset(h, c.spec)
        return evaluate(self.net_, h, corpora, self._mode, self.space_, self.batch_size)

    def score(self, X, y=None) -> float:
        """Mean over hierarchy levels of the level mPA."""
        return selection_score(self.evaluate(X).metrics())

    # -- persistence -------------------------------------------------------
    def save(self, path) -> None:
        check_is_fitted(self, "net_")
        save_model(path, self.net_, self.hierarchy_, self._mode, self.space_,
                   extra={"estimator": {k: _jsonable(v) for k, v in self.get_params().items()
                                        if k != "hierarchy"}},
                   state=self.optimizer_state_)

    @classmethod
    def load(cls, path) -> "_Segmenter":
        m = load_model(path)
        if m.mode != cls._mode:
            raise ValueError(f"{path} holds a {m.mode!r} model, not {cls._mode!r}")
        params = dict(m.meta.get("estimator", {}))
        est = cls(hierarchy=m.hierarchy, **params)
        est.hierarchy_ = m.hierarchy
        est.net_ = m.net
        est.space_ = m.space
        est.history_ = []
        est.final_metrics_ = {}
        est.n_steps_ = 0
        est.optimizer_state_ = m.state
        est.class_names_ = [n.name for n in m.hierarchy.nodes]
        return est


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


class HierarchicalSegmenter(_Segmenter):
    """Tree of softmax classifiers over a shared extractor, trained with the hierarchical loss.

    >>> from hierseg.presets import toy_presets
    >>> from hierseg.synth import generate_corpus
    >>> from hierseg.hierarchy import bind_dataset
    >>> spec = toy_presets()["extended"]
    >>> est = HierarchicalSegmenter(steps=2, eval_every=1)
    >>> corpus = generate_corpus(spec, bind_dataset(est._base_hierarchy(), spec), seed=0, n_images=4)
    >>> est.fit(corpus).predict(corpus[0].image).shape
    (1, 64, 64)
    """

    _mode = "hier"


class FlatSegmenter(_Segmenter):
    """Single softmax over the union of all bound labels (the baseline)."""

    _mode = "flat"
