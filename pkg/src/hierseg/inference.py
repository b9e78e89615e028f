"""Top-down hierarchical decisions and their composition into a segmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .hierarchy import FlatSpace, LabelHierarchy

UNROUTED = -1


@dataclass
class DecisionMaps:
    """Per classifier: argmax decisions (``-1`` outside its pixel set) and routing mask."""

    decisions: List[np.ndarray]
    masks: List[np.ndarray]


@dataclass
class Segmentation:
    nodes: np.ndarray
    levels: Dict[int, np.ndarray] = field(default_factory=dict)


def _to_numpy(x) -> np.ndarray:
    return x.data if hasattr(x, "data") and not isinstance(x, np.ndarray) else np.asarray(x)


def decide(sigmas: Sequence, h: LabelHierarchy) -> DecisionMaps:
    """Argmax of each classifier on the pixels its parent routes to it.

    ``sigmas[j]`` has the classes of classifier ``j`` on axis -3. Ties go to
    the lowest class index.
    """
    if len(sigmas) != len(h.classifiers):
        raise ValueError(f"{len(sigmas)} probability maps for {len(h.classifiers)} classifiers")
    arrays = [_to_numpy(s) for s in sigmas]
    spatial = arrays[0].shape[:-3] + arrays[0].shape[-2:]
    decisions: List[np.ndarray] = []
    masks: List[np.ndarray] = []
    for clf, s in zip(h.classifiers, arrays):
        if s.shape[:-3] + s.shape[-2:] != spatial:
            raise ValueError("probability maps must share spatial extents")
        if s.shape[-3] != clf.n_classes:
            raise ValueError(f"classifier {clf.name!r} expects {clf.n_classes} channels, got {s.shape[-3]}")
        if clf.parent is None:
            mask = np.ones(spatial, dtype=bool)
        else:
            mask = masks[clf.parent] & (decisions[clf.parent] == clf.parent_class)
        dec = np.argmax(s, axis=-3)
        decisions.append(np.where(mask, dec, UNROUTED))
        masks.append(mask)
    return DecisionMaps(decisions, masks)


def level_lut(h: LabelHierarchy, level: int) -> np.ndarray:
    """Node index -> index of its ancestor at ``level`` (itself if shallower)."""
    return np.array([h.ancestor_at_level(n, level).index for n in h.nodes], dtype=np.int64)


def compose(d: DecisionMaps, h: LabelHierarchy,
            detail: Union[str, int] = "finest") -> Segmentation:
    """Chain decisions from the root into one node index per pixel."""
    if detail != "finest" and not isinstance(detail, (int, np.integer)):
        raise ValueError("detail must be 'finest' or a level number")
    if isinstance(detail, (int, np.integer)) and not 1 <= detail <= h.depth:
        raise ValueError(f"level {detail} is outside the hierarchy (depth {h.depth})")
    nodes = np.full(d.masks[0].shape, h.root.index, dtype=np.int64)
    child_index = [np.array([c.index for c in clf.node.children]) for clf in h.classifiers]
    for clf in h.classifiers:
        m = d.masks[clf.id]
        nodes[m] = child_index[clf.id][d.decisions[clf.id][m]]
    levels = {lv: level_lut(h, lv)[nodes] for lv in range(1, h.depth + 1)}
    if detail == "finest":
        return Segmentation(nodes, levels)
    return Segmentation(levels[int(detail)], levels)


def default_palette(h: LabelHierarchy) -> Dict[str, Tuple[int, int, int]]:
    from .synth import node_color

    return {n.name: tuple(int(v) for v in np.round(node_color(n.name) * 255)) for n in h.nodes}


def colorize(nodes: np.ndarray, h: LabelHierarchy, palette: Mapping[str, Tuple[int, int, int]]) -> np.ndarray:
    if nodes.size == 0:
        raise ValueError("cannot export an empty segmentation")
    lut = np.zeros((len(h.nodes), 3), dtype=np.uint8)
    for idx in np.unique(nodes):
        name = h.nodes[int(idx)].name
        if name not in palette:
            raise KeyError(f"palette has no entry for {name!r}")
        lut[int(idx)] = palette[name]
    return lut[nodes]


def histogram(nodes: np.ndarray, h: LabelHierarchy) -> Dict[str, int]:
    ids, counts = np.unique(nodes, return_counts=True)
    return {h.nodes[int(i)].name: int(c) for i, c in zip(ids, counts)}


def export(seg: Segmentation, h: LabelHierarchy, palette: Mapping[str, Tuple[int, int, int]],
           directory, stem: str = "seg") -> Dict[str, int]:
    """Write ``<stem>_finest.ppm`` and one ``<stem>_L<k>.ppm`` per level; return the finest histogram."""
    if seg.nodes.ndim != 2:
        raise ValueError("export expects a single (H, W) segmentation")
    os.makedirs(directory, exist_ok=True)
    Image.fromarray(colorize(seg.nodes, h, palette), "RGB").save(os.path.join(directory, f"{stem}_finest.ppm"))
    for lv, m in sorted(seg.levels.items()):
        Image.fromarray(colorize(m, h, palette), "RGB").save(os.path.join(directory, f"{stem}_L{lv}.ppm"))
    return histogram(seg.nodes, h)


def flat_segmentation(sigma: np.ndarray, space: FlatSpace, h: LabelHierarchy,
                      detail: Union[str, int] = "finest") -> Segmentation:
    """Segmentation from a flat ``(K, H, W)`` or ``(N, K, H, W)`` probability map.

    The 'unlabeled' class, if present, maps to the root node.
    """
    flat_nodes = np.array([h.node(n).index for n in space.classes] + [h.root.index] * int(space.unlabeled))
    nodes = flat_nodes[np.argmax(sigma, axis=-3)]
    if detail != "finest" and not 1 <= int(detail) <= h.depth:
        raise ValueError(f"level {detail} is outside the hierarchy (depth {h.depth})")
    levels = {lv: level_lut(h, lv)[nodes] for lv in range(1, h.depth + 1)}
    return Segmentation(nodes if detail == "finest" else levels[int(detail)], levels)
