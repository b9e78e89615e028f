"""Semantic label hierarchy and the classifier tree it induces.

A ``.hier`` document holds an indented tree (two spaces per level, one
node name per line) followed by optional ``[bind <dataset>]`` sections
of ``<label id> = <node name>`` lines. ``#`` starts a comment. A node
written with a trailing ``:`` promises children.

    root
      road
      traffic_sign
        speed_limit_50
        stop

    [bind cityscapes]
    7 = road
    20 = traffic_sign
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

INDENT = 2


class HierarchyError(ValueError):
    """Malformed hierarchy document or binding."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(eq=False)
class ConceptNode:
    name: str
    level: int
    parent: Optional["ConceptNode"] = None
    children: List["ConceptNode"] = field(default_factory=list)
    index: int = -1

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def child_index(self, name: str) -> int:
        for i, c in enumerate(self.children):
            if c.name == name:
                return i
        raise KeyError(name)

    def __repr__(self) -> str:
        return f"ConceptNode({self.name!r}, level={self.level}, children={len(self.children)})"


@dataclass(frozen=True)
class Classifier:
    """Softmax over the children of one inner node."""

    id: int
    node: ConceptNode
    parent: Optional[int]
    parent_class: Optional[int]

    @property
    def name(self) -> str:
        return self.node.name

    @property
    def classes(self) -> List[str]:
        return [c.name for c in self.node.children]

    @property
    def n_classes(self) -> int:
        return len(self.node.children)

    @property
    def level(self) -> int:
        """Hierarchy level of the classes this classifier decides (root classifier = 1)."""
        return self.node.level + 1


LabelPath = List[Tuple[int, int]]


class LabelHierarchy:
    """Immutable-after-build tree of concepts plus dataset label bindings."""

    def __init__(self, root: ConceptNode, bindings: Optional[Dict[str, Dict[int, str]]] = None):
        self.root = root
        self.nodes: List[ConceptNode] = []
        self.by_name: Dict[str, ConceptNode] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if node.name in self.by_name:
                raise HierarchyError(f"duplicate node name {node.name!r}")
            node.index = len(self.nodes)
            self.nodes.append(node)
            self.by_name[node.name] = node
            stack.extend(reversed(node.children))

        self.classifiers: List[Classifier] = []
        self._clf_of: Dict[int, int] = {}
        for node in self.nodes:
            if len(node.children) >= 2:
                parent_clf = parent_cls = None
                anc, child = node.parent, node
                while anc is not None:
                    if anc.index in self._clf_of:
                        parent_clf = self._clf_of[anc.index]
                        parent_cls = anc.children.index(child)
                        break
                    anc, child = anc.parent, anc
                j = len(self.classifiers)
                self._clf_of[node.index] = j
                self.classifiers.append(Classifier(j, node, parent_clf, parent_cls))
        self.bindings: Dict[str, Dict[int, str]] = {}
        for ds, table in (bindings or {}).items():
            self.bindings[ds] = dict(table)

    # -- queries ----------------------------------------------------------
    def node(self, name: str) -> ConceptNode:
        try:
            return self.by_name[name]
        except KeyError:
            hint = difflib.get_close_matches(name, list(self.by_name), n=3)
            extra = f"; did you mean {', '.join(hint)}?" if hint else ""
            raise HierarchyError(f"unknown node {name!r}{extra}") from None

    def classifier_of(self, node: ConceptNode) -> Optional[Classifier]:
        j = self._clf_of.get(node.index)
        return None if j is None else self.classifiers[j]

    @property
    def leaves(self) -> List[ConceptNode]:
        return [n for n in self.nodes if n.is_leaf]

    @property
    def depth(self) -> int:
        return max(n.level for n in self.nodes)

    def path_encode(self, node) -> LabelPath:
        """(classifier id, class index) pairs from the root down to ``node``."""
        if isinstance(node, str):
            node = self.node(node)
        steps: LabelPath = []
        child = node
        while child.parent is not None:
            parent = child.parent
            j = self._clf_of.get(parent.index)
            if j is not None:
                steps.append((j, parent.children.index(child)))
            child = parent
        steps.reverse()
        return steps

    def path_decode(self, path: LabelPath) -> ConceptNode:
        node = self.root
        for j, y in path:
            clf = self.classifiers[j]
            if clf.node is not node and not _is_ancestor(node, clf.node):
                raise HierarchyError(f"path step {(j, y)} does not continue from {node.name!r}")
            node = clf.node.children[y]
        return node

    def ancestor_at_level(self, node: ConceptNode, level: int) -> ConceptNode:
        if level < 0:
            raise ValueError("level must be nonnegative")
        while node.level > level:
            node = node.parent
        return node

    def classifiers_on_path(self, node: ConceptNode) -> List[int]:
        return [j for j, _ in self.path_encode(node)]

    def copy_with_bindings(self, bindings: Dict[str, Dict[int, str]]) -> "LabelHierarchy":
        merged = {**self.bindings, **bindings}
        return LabelHierarchy(_clone(self.root), merged)

    def __repr__(self) -> str:
        return (f"LabelHierarchy(nodes={len(self.nodes)}, leaves={len(self.leaves)}, "
                f"classifiers={len(self.classifiers)})")


def _is_ancestor(a: ConceptNode, b: ConceptNode) -> bool:
    while b is not None:
        if b is a:
            return True
        b = b.parent
    return False


def _clone(node: ConceptNode, parent: Optional[ConceptNode] = None) -> ConceptNode:
    twin = ConceptNode(node.name, node.level, parent)
    twin.children = [_clone(c, twin) for c in node.children]
    return twin


# ---------------------------------------------------------------------------
# parse / serialize
# ---------------------------------------------------------------------------

def parse_hierarchy(text: str) -> LabelHierarchy:
    root: Optional[ConceptNode] = None
    stack: List[ConceptNode] = []
    promised: Dict[int, Tuple[ConceptNode, int]] = {}
    seen: Dict[str, int] = {}
    bindings: Dict[str, Dict[int, str]] = {}
    bind_lines: List[Tuple[str, int, str, int]] = []
    section: Optional[str] = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            parts = stripped[1:-1].split()
            if len(parts) != 2 or parts[0] != "bind":
                raise HierarchyError(f"bad section header {stripped!r}", lineno)
            section = parts[1]
            if section in bindings:
                raise HierarchyError(f"dataset {section!r} bound twice", lineno)
            bindings[section] = {}
            continue
        if section is not None:
            if "=" not in stripped:
                raise HierarchyError(f"expected '<label id> = <node>' in [bind {section}]", lineno)
            key, value = (s.strip() for s in stripped.split("=", 1))
            try:
                label_id = int(key)
            except ValueError:
                raise HierarchyError(f"label id {key!r} is not an integer", lineno) from None
            if label_id in bindings[section]:
                raise HierarchyError(f"label {label_id} of {section!r} bound to two nodes", lineno)
            bindings[section][label_id] = value
            bind_lines.append((section, label_id, value, lineno))
            continue

        indent = len(line) - len(line.lstrip(" "))
        if "\t" in line[:indent + 1] or indent % INDENT:
            raise HierarchyError("indentation must be a multiple of two spaces", lineno)
        depth = indent // INDENT
        name = stripped
        wants_children = name.endswith(":")
        if wants_children:
            name = name[:-1].strip()
        if not name or " " in name:
            raise HierarchyError(f"bad node name {stripped!r}", lineno)
        if name in seen:
            raise HierarchyError(f"duplicate node name {name!r} (first on line {seen[name]})", lineno)
        seen[name] = lineno
        if root is None:
            if depth != 0:
                raise HierarchyError("the first node must be the unindented root", lineno)
            root = ConceptNode(name, 0)
            stack = [root]
        else:
            if depth == 0:
                raise HierarchyError("only one root node is allowed", lineno)
            if depth > len(stack):
                raise HierarchyError("indentation jumps more than one level", lineno)
            del stack[depth:]
            parent = stack[-1]
            node = ConceptNode(name, depth, parent)
            parent.children.append(node)
            stack.append(node)
        if wants_children:
            promised[id(stack[-1])] = (stack[-1], lineno)

    if root is None:
        raise HierarchyError("document contains no nodes")
    for node, lineno in promised.values():
        if not node.children:
            raise HierarchyError(f"empty children block for {node.name!r}", lineno)
    for ds, label_id, node_name, lineno in bind_lines:
        if node_name not in seen:
            hint = difflib.get_close_matches(node_name, list(seen), n=3)
            extra = f"; did you mean {', '.join(hint)}?" if hint else ""
            raise HierarchyError(f"[bind {ds}] label {label_id} names unknown node {node_name!r}{extra}", lineno)
    return LabelHierarchy(root, bindings)


def load_hierarchy(path) -> LabelHierarchy:
    with open(path, encoding="utf-8") as fh:
        return parse_hierarchy(fh.read())


def serialize(h: LabelHierarchy) -> str:
    lines: List[str] = []

    def walk(node: ConceptNode) -> None:
        lines.append(" " * (INDENT * node.level) + node.name)
        for c in node.children:
            walk(c)

    walk(h.root)
    for ds, table in h.bindings.items():
        lines.append("")
        lines.append(f"[bind {ds}]")
        for label_id in sorted(table):
            lines.append(f"{label_id} = {table[label_id]}")
    return "\n".join(lines) + "\n"


def same_tree(a: ConceptNode, b: ConceptNode) -> bool:
    if a.name != b.name or a.level != b.level or len(a.children) != len(b.children):
        return False
    return all(same_tree(x, y) for x, y in zip(a.children, b.children))


# ---------------------------------------------------------------------------
# datasets, binding and validation
# ---------------------------------------------------------------------------

ANNOTATION_TYPES = ("dense", "bbox", "mixed")


@dataclass
class DatasetSpec:
    """Label space and annotation style of one (synthetic) dataset.

    ``labels`` maps dataset label ids to hierarchy node names. ``objects``
    lists the label ids drawn as small inscribed shapes; for ``bbox`` and
    ``mixed`` datasets these are the box-annotated labels. ``shares`` gives
    the target pixel fraction of each label.
    """

    name: str
    labels: Dict[int, str]
    annotation_type: str = "dense"
    shares: Dict[int, float] = field(default_factory=dict)
    objects: Tuple[int, ...] = ()
    n_images: int = 16
    image_size: Tuple[int, int] = (64, 64)
    size_jitter: int = 0

    def __post_init__(self):
        if self.annotation_type not in ANNOTATION_TYPES:
            raise ValueError(f"annotation_type must be one of {ANNOTATION_TYPES}, got {self.annotation_type!r}")
        self.labels = {int(k): v for k, v in self.labels.items()}
        self.shares = {int(k): float(v) for k, v in self.shares.items()}
        self.objects = tuple(int(k) for k in self.objects)
        self.image_size = tuple(self.image_size)
        for k, v in self.shares.items():
            if v <= 0:
                raise ValueError(f"share of label {k} must be positive, got {v}")
            if k not in self.labels:
                raise ValueError(f"share given for unknown label {k}")
        for k in self.objects:
            if k not in self.labels:
                raise ValueError(f"object label {k} is not in the label space")

    def annotation_of(self, label_id: int) -> Optional[str]:
        """'dense' or 'bbox' for the way ``label_id`` is annotated."""
        if self.annotation_type == "dense":
            return "dense"
        if self.annotation_type == "bbox":
            return "bbox" if label_id in self.objects else None
        return "bbox" if label_id in self.objects else "dense"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "labels": {str(k): v for k, v in self.labels.items()},
            "annotation_type": self.annotation_type,
            "shares": {str(k): v for k, v in self.shares.items()},
            "objects": list(self.objects),
            "n_images": self.n_images,
            "image_size": list(self.image_size),
            "size_jitter": self.size_jitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(
            name=d["name"],
            labels={int(k): v for k, v in d["labels"].items()},
            annotation_type=d.get("annotation_type", "dense"),
            shares={int(k): v for k, v in d.get("shares", {}).items()},
            objects=tuple(d.get("objects", ())),
            n_images=int(d.get("n_images", 16)),
            image_size=tuple(d.get("image_size", (64, 64))),
            size_jitter=int(d.get("size_jitter", 0)),
        )


def bind_dataset(h: LabelHierarchy, spec: DatasetSpec) -> LabelHierarchy:
    """Return a copy of ``h`` with ``spec``'s labels resolved to nodes.

    A label bound to an inner node supervises only the classifiers on the
    path down to that node, never the node's own subclasses.
    """
    table: Dict[int, str] = {}
    used: Dict[str, int] = {}
    for label_id, node_name in spec.labels.items():
        h.node(node_name)
        table[label_id] = node_name
        used.setdefault(node_name, label_id)
    existing = h.bindings.get(spec.name)
    if existing is not None and existing != table:
        for label_id, node_name in table.items():
            prev = existing.get(label_id)
            if prev is not None and prev != node_name:
                raise HierarchyError(
                    f"label {label_id} of {spec.name!r} already bound to {prev!r}, cannot rebind to {node_name!r}")
        table = {**existing, **table}
    return h.copy_with_bindings({spec.name: table})


def supervised_classifiers(h: LabelHierarchy, dataset: str) -> Dict[int, set]:
    """classifier id -> set of label ids of ``dataset`` that supervise it."""
    out: Dict[int, set] = {}
    for label_id, node_name in h.bindings.get(dataset, {}).items():
        for j in h.classifiers_on_path(h.node(node_name)):
            out.setdefault(j, set()).add(label_id)
    return out


@dataclass
class ValidationIssue:
    rule: str
    node: str
    message: str


@dataclass
class ValidationReport:
    issues: List[ValidationIssue] = field(default_factory=list)
    supervision: Dict[str, List[Tuple[str, str]]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.issues

    def rules(self) -> List[str]:
        return [i.rule for i in self.issues]

    def raise_if_invalid(self) -> None:
        if self.issues:
            text = "; ".join(f"[{i.rule}] {i.node}: {i.message}" for i in self.issues)
            raise HierarchyError(f"hierarchy validation failed: {text}")

    def format(self) -> str:
        lines = []
        for clf, rows in self.supervision.items():
            desc = ", ".join(f"{ds}({kind})" for ds, kind in rows) or "-"
            lines.append(f"{clf}: {desc}")
        for i in self.issues:
            lines.append(f"ERROR [{i.rule}] {i.node}: {i.message}")
        return "\n".join(lines)


def validate(h: LabelHierarchy, datasets: Sequence[DatasetSpec]) -> ValidationReport:
    """Check the tree invariants and that every root class has dense supervision."""
    report = ValidationReport()
    for node in h.nodes:
        if len(node.children) == 1:
            report.issues.append(ValidationIssue(
                "degenerate classifier", node.name, "inner node has a single child; |C| must be >= 2"))
    if not h.classifiers:
        report.issues.append(ValidationIssue("no classifier", h.root.name, "root needs at least two children"))

    for spec in datasets:
        table = h.bindings.get(spec.name)
        if table is None:
            report.issues.append(ValidationIssue("unbound dataset", spec.name, "no [bind] section for dataset"))
            continue
        for label_id in spec.labels:
            if label_id not in table:
                report.issues.append(ValidationIssue(
                    "unbound label", spec.name, f"label {label_id} has no node binding"))

    dense_cover = [False] * len(h.root.children)
    rows: Dict[str, List[Tuple[str, str]]] = {c.name: [] for c in h.classifiers}
    for spec in datasets:
        table = h.bindings.get(spec.name, {})
        per_clf: Dict[int, set] = {}
        for label_id, node_name in table.items():
            if label_id not in spec.labels:
                continue
            kind = spec.annotation_of(label_id)
            if kind is None:
                continue
            node = h.node(node_name)
            path = h.path_encode(node)
            for j, _ in path:
                per_clf.setdefault(j, set()).add(kind)
            if kind == "dense" and path and path[0][0] == 0:
                dense_cover[path[0][1]] = True
        for j, kinds in sorted(per_clf.items()):
            kind = kinds.pop() if len(kinds) == 1 else "mixed"
            rows[h.classifiers[j].name].append((spec.name, kind))
    report.supervision = rows
    if h.classifiers and h.classifiers[0].node is h.root:
        for i, covered in enumerate(dense_cover):
            if not covered:
                report.issues.append(ValidationIssue(
                    "root coverage", h.root.children[i].name,
                    "root class has no per-pixel annotated dataset"))
    return report


@dataclass(frozen=True)
class FlatSpace:
    """Single-softmax label space: bound nodes in tree order, optional 'unlabeled' last."""

    classes: Tuple[str, ...]
    unlabeled: bool = False

    @property
    def n_classes(self) -> int:
        return len(self.classes) + int(self.unlabeled)

    @property
    def unlabeled_index(self) -> Optional[int]:
        return len(self.classes) if self.unlabeled else None

    def index(self, name: str) -> int:
        return self.classes.index(name)

    def names(self) -> List[str]:
        return list(self.classes) + (["unlabeled"] if self.unlabeled else [])


def flatten_union(h: LabelHierarchy, datasets: Optional[Iterable[str]] = None,
                  unlabeled: bool = False) -> FlatSpace:
    names = set(datasets) if datasets is not None else set(h.bindings)
    bound = {node for ds, table in h.bindings.items() if ds in names for node in table.values()}
    ordered = tuple(n.name for n in h.nodes if n.name in bound)
    return FlatSpace(ordered, unlabeled)


def format_tree(h: LabelHierarchy) -> str:
    """Text dump of the tree with levels, classifier ids and bindings."""
    bound_by: Dict[str, List[str]] = {}
    for ds, table in h.bindings.items():
        for label_id, node in sorted(table.items()):
            bound_by.setdefault(node, []).append(f"{ds}:{label_id}")
    lines = []
    for node in h.nodes:
        clf = h.classifier_of(node)
        tag = f"  [classifier {clf.id}, |C|={clf.n_classes}]" if clf else ""
        binds = f"  <- {', '.join(bound_by[node.name])}" if node.name in bound_by else ""
        lines.append(f"{'  ' * node.level}{node.name} (L{node.level}){tag}{binds}")
    lines.append("")
    lines.append(f"nodes: {len(h.nodes)}  leaves: {len(h.leaves)}  classifiers: {len(h.classifiers)}")
    return "\n".join(lines)
