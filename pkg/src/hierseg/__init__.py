"""Hierarchical per-pixel classification over heterogeneous datasets.

A label hierarchy compiles to a tree of softmax classifiers that share one
convolutional extractor. Each dataset supervises only the classifiers its
labels reach, either per pixel or through bounding boxes refined by the
parent classifier's decisions.
"""

from .estimator import FlatSegmenter, HierarchicalSegmenter
from .hierarchy import (DatasetSpec, FlatSpace, HierarchyError, LabelHierarchy, bind_dataset, flatten_union,
                        load_hierarchy, parse_hierarchy, validate)
from .inference import compose, decide
from .network import NetworkConfig, SegNet, build_flat_network, build_network
from .presets import load_config
from .synth import Corpus, Sample, generate_corpus, load_corpus, save_corpus
from .training import TrainConfig, evaluate, train

__all__ = [
    "Corpus", "DatasetSpec", "FlatSegmenter", "FlatSpace", "HierarchicalSegmenter", "HierarchyError",
    "LabelHierarchy", "NetworkConfig", "Sample", "SegNet", "TrainConfig", "bind_dataset", "build_flat_network",
    "build_network", "compose", "decide", "evaluate", "flatten_union", "generate_corpus", "load_config",
    "load_corpus", "load_hierarchy", "parse_hierarchy", "save_corpus", "train", "validate",
]
