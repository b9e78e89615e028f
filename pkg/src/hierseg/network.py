"""Shared fully convolutional extractor plus one softmax branch per classifier."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .hierarchy import FlatSpace, LabelHierarchy
from .tensor import BatchNormStats, Tensor


@dataclass
class NetworkConfig:
    """Desk-scale stand-in for a dilated ResNet backbone.

    ``widths`` gives one residual block per entry (4 to 8 blocks). Blocks
    downsample by 2 until ``output_stride`` is reached; the remaining
    blocks use dilation instead of stride.
    """

    widths: Tuple[int, ...] = (16, 24, 32, 32)
    output_stride: int = 4
    rep_depth: int = 32
    bottleneck: int = 16
    dilation: int = 1
    branch_overrides: Dict[str, Dict[str, int]] = field(default_factory=dict)
    in_channels: int = 3
    bn_decay: float = 0.9
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.output_stride not in (4, 8):
            raise ValueError(f"output_stride must be 4 or 8, got {self.output_stride}")
        if not 4 <= len(self.widths) <= 8:
            raise ValueError(f"the extractor takes 4 to 8 blocks, got {len(self.widths)}")

    def branch(self, name: str) -> Tuple[int, int]:
        o = self.branch_overrides.get(name, {})
        return int(o.get("bottleneck", self.bottleneck)), int(o.get("dilation", self.dilation))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def block_plan(cfg: NetworkConfig) -> List[Tuple[int, int]]:
    """(stride, dilation) per residual block; the stem already halves the input."""
    plan = []
    reached, dilation = 2, 1
    for i in range(len(cfg.widths)):
        if i == 0:
            plan.append((1, 1))
        elif reached < cfg.output_stride:
            plan.append((2, 1))
            reached *= 2
        else:
            dilation = min(dilation * 2, 4)
            plan.append((1, dilation))
    if reached != cfg.output_stride:
        raise ValueError(f"{len(cfg.widths)} blocks cannot reach output stride {cfg.output_stride}")
    return plan


class _Registry:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: Dict[str, Tensor] = {}
        self.bn: Dict[str, BatchNormStats] = {}
        self.no_decay: set = set()

    def conv(self, name: str, cout: int, cin: int, k: int) -> None:
        w = T.uniform_init((cout, cin, k, k), cin * k * k, self.rng)
        self.params[name] = T.parameter(w, name)

    def bias(self, name: str, n: int) -> None:
        self.params[name] = T.parameter(np.zeros(n), name)

    def norm(self, name: str, n: int, decay: float) -> None:
        self.params[name + ".gamma"] = T.parameter(np.ones(n), name + ".gamma")
        self.params[name + ".beta"] = T.parameter(np.zeros(n), name + ".beta")
        self.no_decay.update({name + ".gamma", name + ".beta"})
        self.bn[name] = BatchNormStats(n, decay)


@dataclass
class ClassifierHead:
    """Adaptation subnetwork, 1x1 projection and hybrid upsampling for one classifier."""

    id: int
    name: str
    n_classes: int
    rep_depth: int
    bottleneck: int
    dilation: int
    parent: Optional[int] = None
    parent_class: Optional[int] = None
    params: Dict[str, Tensor] = field(default_factory=dict)
    bn: Dict[str, BatchNormStats] = field(default_factory=dict)
    no_decay: set = field(default_factory=set)

    @property
    def prefix(self) -> str:
        return f"head.{self.name}."

    def init(self, rng: np.random.Generator, bn_decay: float = 0.9) -> "ClassifierHead":
        reg = _Registry(0)
        reg.rng = rng
        p = self.prefix
        reg.conv(p + "adapt.conv3", self.bottleneck, self.rep_depth, 3)
        reg.norm(p + "adapt.bn3", self.bottleneck, bn_decay)
        reg.conv(p + "adapt.conv1", self.rep_depth, self.bottleneck, 1)
        reg.norm(p + "adapt.bn1", self.rep_depth, bn_decay)
        reg.conv(p + "proj.w", self.n_classes, self.rep_depth, 1)
        reg.bias(p + "proj.b", self.n_classes)
        up = np.zeros((self.n_classes, self.n_classes, 2, 2))
        up[np.arange(self.n_classes), np.arange(self.n_classes)] = 1.0
        reg.params[p + "up.w"] = T.parameter(up, p + "up.w")
        reg.bias(p + "up.b", self.n_classes)
        self.params, self.bn, self.no_decay = reg.params, reg.bn, reg.no_decay
        return self

    def stage_parameter_count(self, stage: str) -> int:
        keys = {"adapt3x3": ("adapt.conv3", "adapt.bn3"), "adapt1x1": ("adapt.conv1", "adapt.bn1"),
                "proj": ("proj.",), "up": ("up.",)}[stage]
        return sum(t.size for k, t in self.params.items() if k[len(self.prefix):].startswith(keys))

    @property
    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def logits(self, rep: Tensor, out_h: int, out_w: int, training: bool) -> Tensor:
        p, P = self.prefix, self.params
        a = T.conv2d(rep, P[p + "adapt.conv3"], dilation=self.dilation, padding="same")
        a = T.batch_norm_relu(a, P[p + "adapt.bn3.gamma"], P[p + "adapt.bn3.beta"], self.bn[p + "adapt.bn3"], training)
        a = T.conv2d(a, P[p + "adapt.conv1"])
        a = T.batch_norm(a, P[p + "adapt.bn1.gamma"], P[p + "adapt.bn1.beta"], self.bn[p + "adapt.bn1"], training)
        a = T.relu(a + rep)
        z = T.conv2d(a, P[p + "proj.w"]) + T.reshape(P[p + "proj.b"], (1, -1, 1, 1))
        z = T.conv2d_transpose(z, P[p + "up.w"], stride=2) + T.reshape(P[p + "up.b"], (1, -1, 1, 1))
        return T.bilinear_upsample(z, out_h, out_w)

    def forward(self, rep: Tensor, out_h: int, out_w: int, training: bool = False) -> Tensor:
        """Per-pixel class probabilities, shape (N, |C|, out_h, out_w)."""
        return T.softmax_map(self.logits(rep, out_h, out_w, training))


class SegNet:
    """Shared extractor feeding a list of classifier heads."""

    def __init__(self, cfg: NetworkConfig, heads: Sequence[ClassifierHead]):
        self.cfg = cfg
        reg = _Registry(cfg.seed)
        self.plan = block_plan(cfg)
        reg.conv("extractor.stem.conv", cfg.widths[0], cfg.in_channels, 3)
        reg.norm("extractor.stem.bn", cfg.widths[0], cfg.bn_decay)
        cin = cfg.widths[0]
        for i, (cout, (stride, _)) in enumerate(zip(cfg.widths, self.plan)):
            b = f"extractor.block{i}."
            reg.conv(b + "conv_a", cout, cin, 3)
            reg.norm(b + "bn_a", cout, cfg.bn_decay)
            reg.conv(b + "conv_b", cout, cout, 3)
            reg.norm(b + "bn_b", cout, cfg.bn_decay)
            if stride != 1 or cin != cout:
                reg.conv(b + "skip", cout, cin, 1)
                reg.norm(b + "bn_skip", cout, cfg.bn_decay)
            cin = cout
        reg.conv("extractor.rep.conv", cfg.rep_depth, cin, 1)
        reg.norm("extractor.rep.bn", cfg.rep_depth, cfg.bn_decay)
        self.params: Dict[str, Tensor] = reg.params
        self.bn: Dict[str, BatchNormStats] = reg.bn
        self.no_decay: set = set(reg.no_decay)
        self.heads: List[ClassifierHead] = []
        for head in heads:
            if not head.params:
                head.init(reg.rng, cfg.bn_decay)
            self.add_head(head)
        self.shared_evaluations = 0

    def add_head(self, head: ClassifierHead) -> None:
        clash = set(head.params) & set(self.params)
        if clash:
            raise ValueError(f"duplicate parameter names {sorted(clash)[:3]}")
        self.heads.append(head)
        self.params.update(head.params)
        self.bn.update(head.bn)
        self.no_decay |= head.no_decay

    @property
    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def forward_shared(self, images, training: bool = False) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=T.DEFAULT_DTYPE))
        h, w = x.shape[-2:]
        s = self.cfg.output_stride
        if h % s or w % s:
            raise ValueError(f"input extents {(h, w)} are not divisible by the output stride {s}; "
                             f"pad to {(-(-h // s) * s, -(-w // s) * s)}")
        P, B = self.params, self.bn
        x = T.conv2d(x, P["extractor.stem.conv"], stride=2, padding="same")
        x = T.batch_norm_relu(x, P["extractor.stem.bn.gamma"], P["extractor.stem.bn.beta"], B["extractor.stem.bn"], training)
        for i, (stride, dil) in enumerate(self.plan):
            b = f"extractor.block{i}."
            y = T.conv2d(x, P[b + "conv_a"], stride=stride, dilation=dil, padding="same")
            y = T.batch_norm_relu(y, P[b + "bn_a.gamma"], P[b + "bn_a.beta"], B[b + "bn_a"], training)
            y = T.conv2d(y, P[b + "conv_b"], dilation=dil, padding="same")
            y = T.batch_norm(y, P[b + "bn_b.gamma"], P[b + "bn_b.beta"], B[b + "bn_b"], training)
            if b + "skip" in P:
                x = T.conv2d(x, P[b + "skip"], stride=stride, padding="same")
                x = T.batch_norm(x, P[b + "bn_skip.gamma"], P[b + "bn_skip.beta"], B[b + "bn_skip"], training)
            x = T.relu(y + x)
        x = T.conv2d(x, P["extractor.rep.conv"])
        x = T.batch_norm_relu(x, P["extractor.rep.bn.gamma"], P["extractor.rep.bn.beta"], B["extractor.rep.bn"], training)
        self.shared_evaluations += 1
        return x

    def forward_head(self, head: ClassifierHead, rep: Tensor, out_h: int, out_w: int,
                     training: bool = False) -> Tensor:
        return head.forward(rep, out_h, out_w, training)

    def forward(self, images, training: bool = False) -> List[Tensor]:
        """Probability maps of every head, sharing one extractor pass."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=T.DEFAULT_DTYPE))
        rep = self.forward_shared(x, training)
        h, w = x.shape[-2:]
        return [head.forward(rep, h, w, training) for head in self.heads]

    # -- persistence --------------------------------------------------------
    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        for k, s in self.bn.items():
            out[f"bn/{k}/mean"] = s.mean
            out[f"bn/{k}/var"] = s.var
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            key = f"param/{k}"
            if key not in arrays:
                raise KeyError(f"checkpoint is missing {key}")
            if arrays[key].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {arrays[key].shape} vs {v.shape}")
            v.data = np.array(arrays[key], dtype=T.DEFAULT_DTYPE)
        for k, s in self.bn.items():
            s.mean = np.array(arrays[f"bn/{k}/mean"], dtype=T.DEFAULT_DTYPE)
            s.var = np.array(arrays[f"bn/{k}/var"], dtype=T.DEFAULT_DTYPE)

    def describe(self) -> str:
        cfg = self.cfg
        lines = [f"input channels {cfg.in_channels}, output stride {cfg.output_stride}, "
                 f"shared depth {cfg.rep_depth}"]
        lines.append(f"stem: conv3x3 {cfg.in_channels}->{cfg.widths[0]} stride 2")
        cin = cfg.widths[0]
        for i, (w, (s, d)) in enumerate(zip(cfg.widths, self.plan)):
            lines.append(f"block{i}: residual {cin}->{w} stride {s} dilation {d}")
            cin = w
        lines.append(f"shared representation: conv1x1 {cin}->{cfg.rep_depth}")
        n_extractor = sum(v.size for k, v in self.params.items() if k.startswith("extractor."))
        lines.append(f"extractor parameters: {n_extractor}")
        for hd in self.heads:
            anchor = "root" if hd.parent is None else f"parent {hd.parent} class {hd.parent_class}"
            lines.append(f"head {hd.id} {hd.name}: |C|={hd.n_classes} bottleneck {hd.bottleneck} "
                         f"dilation {hd.dilation} ({anchor}), parameters {hd.parameter_count}")
        lines.append(f"total parameters: {self.parameter_count}")
        return "\n".join(lines)


def build_network(h: LabelHierarchy, cfg: Optional[NetworkConfig] = None) -> SegNet:
    """One head per classifier node of ``h``, anchored to its parent decision."""
    cfg = cfg or NetworkConfig()
    heads = []
    for clf in h.classifiers:
        width, dil = cfg.branch(clf.name)
        heads.append(ClassifierHead(clf.id, clf.name, clf.n_classes, cfg.rep_depth, width, dil,
                                    clf.parent, clf.parent_class))
    return SegNet(cfg, heads)


def build_flat_head(space: FlatSpace, cfg: Optional[NetworkConfig] = None,
                    rng: Optional[np.random.Generator] = None) -> ClassifierHead:
    cfg = cfg or NetworkConfig()
    width, dil = cfg.branch("flat")
    head = ClassifierHead(0, "flat", space.n_classes, cfg.rep_depth, width, dil)
    return head.init(rng or np.random.default_rng(cfg.seed + 1), cfg.bn_decay)


def build_flat_network(space: FlatSpace, cfg: Optional[NetworkConfig] = None) -> SegNet:
    cfg = cfg or NetworkConfig()
    width, dil = cfg.branch("flat")
    return SegNet(cfg, [ClassifierHead(0, "flat", space.n_classes, cfg.rep_depth, width, dil)])
