"""Synthetic heterogeneous street-scene corpora.

Scenes are wavy horizontal bands of textured region classes with small
shape-coded sign objects pasted on top. A sign's rim color comes from its
level-1 ancestor and its interior color from its own (leaf) class, so the
subclass is only visible inside the shape.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .hierarchy import ANNOTATION_TYPES, ConceptNode, DatasetSpec, LabelHierarchy

log = logging.getLogger(__name__)

IGNORE_ID = 255
SHAPES = ("circle", "triangle", "hexagon", "rectangle")
SIGN_SHAPES = SHAPES[:3]
_FILL = {"circle": np.pi / 4, "triangle": 0.5, "hexagon": 0.75, "rectangle": 1.0}


@dataclass(frozen=True)
class Box:
    """Half-open pixel box ``[x0, x1) x [y0, y1)`` with the inscribed shape kind."""

    label: int
    x0: int
    y0: int
    x1: int
    y1: int
    shape: str = "rectangle"

    @property
    def area(self) -> int:
        return max(self.x1 - self.x0, 0) * max(self.y1 - self.y0, 0)

    def to_line(self) -> str:
        return f"{self.label} {self.x0} {self.y0} {self.x1} {self.y1} {self.shape}"

    @classmethod
    def from_line(cls, line: str) -> "Box":
        parts = line.split()
        if len(parts) != 6 or parts[5] not in SHAPES:
            raise ValueError(f"bad box line {line!r}")
        return cls(int(parts[0]), *(int(p) for p in parts[1:5]), parts[5])


@dataclass
class Sample:
    image: np.ndarray
    dense_labels: Optional[np.ndarray] = None
    boxes: List[Box] = field(default_factory=list)
    dataset: str = ""

    def __post_init__(self):
        if self.dense_labels is None and not self.boxes:
            raise ValueError("a sample needs dense labels or at least one box")
        h, w = self.image.shape[-2:]
        if self.dense_labels is not None and self.dense_labels.shape != (h, w):
            raise ValueError(f"label map {self.dense_labels.shape} does not match image {(h, w)}")
        for b in self.boxes:
            if b.x0 < 0 or b.y0 < 0 or b.x1 > w or b.y1 > h:
                raise ValueError(f"box {b} lies outside a {w}x{h} image")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.image.shape[-2:]


@dataclass
class PseudoMask:
    labels: np.ndarray
    covered: np.ndarray
    from_bbox: bool = True


@dataclass
class Corpus:
    spec: DatasetSpec
    samples: List[Sample]

    @property
    def name(self) -> str:
        return self.spec.name

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

def shape_mask(shape: str, x0: float, y0: float, x1: float, y1: float,
               height: int, width: int) -> np.ndarray:
    """Pixels whose centers fall inside ``shape`` inscribed in the box."""
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    inside_box = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
    if shape == "rectangle":
        return inside_box
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    rx, ry = (x1 - x0) / 2, (y1 - y0) / 2
    if shape == "circle":
        return inside_box & (((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0)
    if shape == "triangle":
        verts = [(x0, y1), (cx, y0), (x1, y1)]
    elif shape == "hexagon":
        ang = np.deg2rad(np.arange(6) * 60.0)
        verts = list(zip(cx + rx * np.cos(ang), cy + ry * np.sin(ang)))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return inside_box & _in_convex(xs, ys, verts)


def _in_convex(xs, ys, verts) -> np.ndarray:
    sign = None
    inside = np.ones(np.broadcast(xs, ys).shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        (ax, ay), (bx, by) = verts[i], verts[(i + 1) % n]
        cross = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
        if sign is None:
            cx = sum(v[0] for v in verts) / n
            cy = sum(v[1] for v in verts) / n
            sign = np.sign((bx - ax) * (cy - ay) - (by - ay) * (cx - ax))
        inside &= cross * sign >= 0
    return inside


def bbox_to_pseudo_mask(boxes: Sequence[Box], extents: Tuple[int, int],
                        ignore_id: int = IGNORE_ID) -> PseudoMask:
    """Rasterize each box's shape into a per-pixel label map; later boxes win."""
    h, w = extents
    labels = np.full((h, w), ignore_id, dtype=np.int32)
    covered = np.zeros((h, w), dtype=bool)
    for b in boxes:
        if b.area == 0:
            log.warning("skipping zero-area box %s", b)
            continue
        m = shape_mask(b.shape, b.x0, b.y0, b.x1, b.y1, h, w)
        labels[m] = b.label
        covered |= m
    return PseudoMask(labels, covered)


def separate_instances(mask: np.ndarray) -> List[np.ndarray]:
    """Split a binary mask into 8-connected components, in raster order of first pixel."""
    lab, n = ndimage.label(np.asarray(mask, dtype=bool), structure=np.ones((3, 3), dtype=int))
    return [lab == i for i in range(1, n + 1)]


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def node_color(name: str) -> np.ndarray:
    digest = hashlib.sha256(name.encode()).digest()
    return np.frombuffer(digest[:3], dtype=np.uint8).astype(np.float64) / 255.0


def sign_style(leaf: ConceptNode) -> Tuple[str, np.ndarray]:
    """Shape and interior color of a sign leaf.

    Siblings cycle through the shapes and get evenly spaced hues, so every
    subclass is distinguishable from the others under the same parent.
    """
    siblings = leaf.parent.children if leaf.parent is not None else [leaf]
    i = next(k for k, c in enumerate(siblings) if c is leaf)
    base = hashlib.sha256(leaf.parent.name.encode() if leaf.parent is not None else b"").digest()[0] / 255.0
    hue = (base + i / len(siblings)) % 1.0
    value = 0.95 if (i // len(SIGN_SHAPES)) % 2 == 0 else 0.6
    return SIGN_SHAPES[i % len(SIGN_SHAPES)], np.array(colorsys.hsv_to_rgb(hue, 0.85, value))


def _leaves_under(node: ConceptNode) -> List[ConceptNode]:
    if node.is_leaf:
        return [node]
    out: List[ConceptNode] = []
    for c in node.children:
        out.extend(_leaves_under(c))
    return out


def _level1(node: ConceptNode) -> ConceptNode:
    while node.level > 1:
        node = node.parent
    return node


def _scene_rng(seed: int, spec: DatasetSpec) -> np.random.Generator:
    salt = int.from_bytes(hashlib.sha256(spec.name.encode()).digest()[:4], "little")
    return np.random.default_rng([seed, salt])


def generate_scene(seed: int, spec: DatasetSpec, hierarchy: LabelHierarchy,
                   noise: float = 0.06, annotate: Optional[str] = None) -> Sample:
    """Render one deterministic scene and annotate it the way ``spec`` says.

    ``annotate`` swaps the annotation type of the output without touching the
    rendering, e.g. to get dense labels for the scenes of a bbox dataset.
    """
    if annotate is not None and annotate not in ANNOTATION_TYPES:
        raise ValueError(f"annotate must be one of {ANNOTATION_TYPES}, got {annotate!r}")
    table = hierarchy.bindings.get(spec.name)
    if table is None:
        raise ValueError(f"dataset {spec.name!r} is not bound in the hierarchy")
    for label_id in spec.labels:
        if label_id not in table:
            raise ValueError(f"label {label_id} of {spec.name!r} is not bound")
    rng = _scene_rng(seed, spec)
    base_h, base_w = spec.image_size
    j = spec.size_jitter
    h = base_h + (int(rng.integers(0, j + 1)) if j else 0)
    w = base_w + (int(rng.integers(0, j + 1)) if j else 0)

    objects = [k for k in spec.objects]
    regions = [k for k in spec.labels if k not in spec.objects]
    obj_share = sum(spec.shares.get(k, 0.0) for k in objects)
    fixed = sum(spec.shares.get(k, 0.0) for k in regions)
    if obj_share + fixed > 1.0 + 1e-9 or obj_share >= 1.0:
        raise ValueError(f"shares of {spec.name!r} exceed the canvas")
    # regions without an explicit share split whatever the canvas has left
    free = [k for k in regions if k not in spec.shares]
    rest = max(1.0 - obj_share - fixed, 0.0) / len(free) if free else 0.0
    region_share = {k: spec.shares.get(k, rest) for k in regions}
    if regions and sum(region_share.values()) <= 0:
        region_share = dict.fromkeys(regions, 1.0)
    if not regions and spec.annotation_type != "bbox":
        raise ValueError(f"dense dataset {spec.name!r} needs at least one region label")

    labels = np.full((h, w), IGNORE_ID, dtype=np.int32)
    image = np.zeros((3, h, w))

    # region bands
    if regions:
        order = rng.permutation(len(regions))
        weights = np.array([region_share[regions[i]] for i in order])
        cuts = np.concatenate([[0.0], np.cumsum(weights) / weights.sum()])
        xs = np.arange(w)
        amp = rng.uniform(0.5, 2.0, size=len(regions) + 1)
        freq = rng.uniform(0.5, 2.0, size=len(regions) + 1) * 2 * np.pi / w
        phase = rng.uniform(0, 2 * np.pi, size=len(regions) + 1)
        bounds = [cuts[i] * h + (0 if i in (0, len(regions)) else amp[i] * np.sin(freq[i] * xs + phase[i]))
                  for i in range(len(regions) + 1)]
        rows = np.arange(h)[:, None] + 0.5
        for pos, i in enumerate(order):
            label_id = regions[i]
            band = (rows >= bounds[pos]) & (rows < bounds[pos + 1])
            leaf = _pick_leaf(hierarchy.node(table[label_id]), rng)
            labels[band] = label_id
            tex = rng.uniform(-0.08, 0.08, size=(3, 1, 1))
            image[:, band] = (node_color(leaf.name)[:, None] + tex[:, :, 0])
    else:
        image[:] = rng.uniform(0.2, 0.8, size=(3, 1, 1))

    # sign objects
    boxes: List[Box] = []
    occupied = np.zeros((h, w), dtype=bool)
    counts = []
    for label_id in objects:
        side_lo, side_hi = _object_side(h, w)
        mean_area = np.mean([_FILL[s] for s in SIGN_SHAPES]) * ((side_lo + side_hi) / 2) ** 2
        expected = spec.shares.get(label_id, 0.0) * h * w / mean_area
        counts.append(int(np.floor(expected + rng.uniform())))
    if spec.annotation_type == "bbox" and objects and sum(counts) == 0:
        counts[int(rng.integers(len(objects)))] = 1
    for label_id, count in zip(objects, counts):
        node = hierarchy.node(table[label_id])
        side_lo, side_hi = _object_side(h, w)
        for _ in range(count):
            leaf = _pick_leaf(node, rng)
            shape, inner_color = sign_style(leaf)
            for _attempt in range(20):
                side = int(rng.integers(side_lo, side_hi + 1))
                x0 = int(rng.integers(0, w - side + 1))
                y0 = int(rng.integers(0, h - side + 1))
                if not occupied[max(y0 - 1, 0):y0 + side + 1, max(x0 - 1, 0):x0 + side + 1].any():
                    break
            m = shape_mask(shape, x0, y0, x0 + side, y0 + side, h, w)
            rim = m & ~ndimage.binary_erosion(m, structure=np.ones((3, 3)))
            occupied[y0:y0 + side, x0:x0 + side] = True
            inner = m & ~rim
            image[:, rim] = node_color(_level1(leaf).name)[:, None]
            image[:, inner] = inner_color[:, None]
            labels[m] = label_id
            boxes.append(Box(label_id, x0, y0, x0 + side, y0 + side, shape))

    image = image + noise * rng.standard_normal(image.shape)
    image = np.clip(image, 0.0, 1.0)

    kind = annotate or spec.annotation_type
    if kind == "dense":
        return Sample(image, labels, [], spec.name)
    if kind == "bbox":
        return Sample(image, None, boxes, spec.name)
    dense = labels.copy()
    for label_id in objects:
        dense[labels == label_id] = IGNORE_ID
    return Sample(image, dense, boxes, spec.name)


def _object_side(h: int, w: int) -> Tuple[int, int]:
    small = min(h, w)
    return max(small // 10, 4), max(small // 7, 6)


def _pick_leaf(node: ConceptNode, rng: np.random.Generator) -> ConceptNode:
    leaves = _leaves_under(node)
    return leaves[int(rng.integers(len(leaves)))] if len(leaves) > 1 else leaves[0]


def generate_corpus(spec: DatasetSpec, hierarchy: LabelHierarchy, seed: int,
                    n_images: Optional[int] = None, annotate: Optional[str] = None) -> Corpus:
    n = spec.n_images if n_images is None else n_images
    samples = [generate_scene(seed * 100003 + i, spec, hierarchy, annotate=annotate) for i in range(n)]
    if annotate is not None:
        spec = replace(spec, annotation_type=annotate)
    return Corpus(spec, samples)


# ---------------------------------------------------------------------------
# batching and resizing
# ---------------------------------------------------------------------------

def batch_indices(sizes: Sequence[int], ratios: Sequence[int], step: int, seed: int = 0,
                  shuffle: bool = True) -> List[Tuple[int, int]]:
    """(dataset, sample index) pairs of batch ``step``; ratio_d draws from dataset d."""
    if len(sizes) != len(ratios):
        raise ValueError(f"{len(ratios)} ratios given for {len(sizes)} datasets")
    out = []
    for d, (n, r) in enumerate(zip(sizes, ratios)):
        if n == 0:
            raise ValueError(f"dataset {d} is empty")
        if r < 0:
            raise ValueError("ratios must be nonnegative")
        for k in range(r):
            t = step * r + k
            epoch, pos = divmod(t, n)
            if shuffle:
                perm = np.random.default_rng([seed, d, epoch]).permutation(n)
                out.append((d, int(perm[pos])))
            else:
                out.append((d, pos))
    return out


def sample_batch(datasets: Sequence[Corpus], ratios: Sequence[int], step: int,
                 seed: int = 0, shuffle: bool = True) -> List[Sample]:
    idx = batch_indices([len(c) for c in datasets], ratios, step, seed, shuffle)
    return [datasets[d][i] for d, i in idx]


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Averaging weights of input cells over each output cell."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        k0, k1 = int(np.floor(lo)), min(int(np.ceil(hi)), n_in)
        for k in range(k0, k1):
            m[i, k] = min(hi, k + 1) - max(lo, k)
    return m / m.sum(axis=1, keepdims=True)


def resize_area(image: np.ndarray, h: int, w: int) -> np.ndarray:
    mh = _area_matrix(image.shape[-2], h)
    mw = _area_matrix(image.shape[-1], w)
    return np.einsum("ih,chw,jw->cij", mh, image, mw)


def resize_nearest(labels: np.ndarray, h: int, w: int) -> np.ndarray:
    sh, sw = labels.shape
    rows = np.minimum(((np.arange(h) + 0.5) * sh / h).astype(int), sh - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * sw / w).astype(int), sw - 1)
    return labels[rows][:, cols]


def downscale_and_crop(sample: Sample, target_h: int, target_w: int, seed: int) -> Sample:
    """Aspect-preserving downscale so the image just covers the target, then a random crop."""
    h, w = sample.shape
    if target_h > h or target_w > w:
        raise ValueError(f"target {(target_h, target_w)} is larger than source {(h, w)}")
    scale = max(target_h / h, target_w / w)
    nh = max(int(round(h * scale)), target_h)
    nw = max(int(round(w * scale)), target_w)
    rng = np.random.default_rng(seed)
    oy = int(rng.integers(0, nh - target_h + 1))
    ox = int(rng.integers(0, nw - target_w + 1))

    image = sample.image if (nh, nw) == (h, w) else resize_area(sample.image, nh, nw)
    image = image[:, oy:oy + target_h, ox:ox + target_w]
    dense = None
    if sample.dense_labels is not None:
        dense = sample.dense_labels if (nh, nw) == (h, w) else resize_nearest(sample.dense_labels, nh, nw)
        dense = dense[oy:oy + target_h, ox:ox + target_w].copy()
    sy, sx = nh / h, nw / w
    boxes = []
    for b in sample.boxes:
        x0 = int(np.floor(b.x0 * sx)) - ox
        x1 = int(np.ceil(b.x1 * sx)) - ox
        y0 = int(np.floor(b.y0 * sy)) - oy
        y1 = int(np.ceil(b.y1 * sy)) - oy
        x0, x1 = max(x0, 0), min(x1, target_w)
        y0, y1 = max(y0, 0), min(y1, target_h)
        if x1 <= x0 or y1 <= y0:
            continue
        boxes.append(replace(b, x0=x0, y0=y0, x1=x1, y1=y1))
    if dense is None and not boxes:
        # every box fell outside the crop: keep an all-ignore map so the sample stays valid
        dense = np.full((target_h, target_w), IGNORE_ID, dtype=np.int32)
    return Sample(np.ascontiguousarray(image), dense, boxes, sample.dataset)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def pixel_counts(corpus: Corpus, hierarchy: Optional[LabelHierarchy] = None) -> Dict[int, int]:
    """Pixels per label id: dense pixels plus pseudo-mask pixels of boxes."""
    counts: Dict[int, int] = {k: 0 for k in corpus.spec.labels}
    for s in corpus.samples:
        if s.dense_labels is not None:
            ids, n = np.unique(s.dense_labels, return_counts=True)
            for i, c in zip(ids, n):
                if int(i) != IGNORE_ID:
                    counts[int(i)] = counts.get(int(i), 0) + int(c)
        if s.boxes:
            pm = bbox_to_pseudo_mask(s.boxes, s.shape)
            ids, n = np.unique(pm.labels[pm.covered], return_counts=True)
            for i, c in zip(ids, n):
                counts[int(i)] = counts.get(int(i), 0) + int(c)
    return counts


def pixel_shares(corpus: Corpus) -> Dict[int, float]:
    total = sum(int(np.prod(s.shape)) for s in corpus.samples)
    return {k: v / total for k, v in pixel_counts(corpus).items()}


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, directory) -> None:
    """One directory: ``spec.json``, ``NNNNN.ppm`` images, ``.pgm`` labels, ``.txt`` boxes."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "spec.json"), "w", encoding="utf-8") as fh:
        json.dump({**corpus.spec.to_dict(), "n_images": len(corpus)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for i, s in enumerate(corpus.samples):
        stem = os.path.join(directory, f"{i:05d}")
        rgb = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb, "RGB").save(stem + ".ppm")
        if s.dense_labels is not None:
            Image.fromarray(s.dense_labels.astype(np.uint8), "L").save(stem + ".pgm")
        if s.boxes:
            with open(stem + ".txt", "w", encoding="utf-8") as fh:
                fh.writelines(b.to_line() + "\n" for b in s.boxes)


def load_corpus(directory) -> Corpus:
    with open(os.path.join(directory, "spec.json"), encoding="utf-8") as fh:
        spec = DatasetSpec.from_dict(json.load(fh))
    samples = []
    for i in range(spec.n_images):
        stem = os.path.join(directory, f"{i:05d}")
        samples.append(load_sample(stem, spec.name))
    return Corpus(spec, samples)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0


def load_sample(stem: str, dataset: str = "") -> Sample:
    image = load_image(stem + ".ppm")
    dense = None
    if os.path.exists(stem + ".pgm"):
        with Image.open(stem + ".pgm") as im:
            dense = np.asarray(im, dtype=np.int32).copy()
    boxes = []
    if os.path.exists(stem + ".txt"):
        with open(stem + ".txt", encoding="utf-8") as fh:
            boxes = [Box.from_line(line) for line in fh if line.strip()]
    return Sample(image, dense, boxes, dataset)
