import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierseg.hierarchy import (DatasetSpec, HierarchyError, bind_dataset, flatten_union, format_tree,
                               parse_hierarchy, same_tree, serialize, supervised_classifiers, validate)
from hierseg.presets import street_presets

TWO_LEVEL = """
root
  a
    a1
    a2
  b
"""


def test_street_config_counts(street):
    assert len(street.leaves) == 108
    assert len({n.name for n in street.nodes}) == len(street.nodes)
    assert street.depth == 3
    assert [c.name for c in street.classifiers] == ["root", "driveable", "rider", "traffic_sign",
                                                     "traffic_sign_front"]


def test_flat_degenerate_tree():
    h = parse_hierarchy("root\n  a\n  b\n")
    assert len(h.classifiers) == 1
    assert h.classifiers[0].classes == ["a", "b"]


def test_two_level_paths():
    h = parse_hierarchy(TWO_LEVEL)
    assert len(h.classifiers) == 2
    assert h.path_encode("a2") == [(0, 0), (1, 1)]
    assert h.path_encode("root") == []
    assert h.path_encode("b") == [(0, 1)]
    assert h.path_decode([(0, 0), (1, 1)]).name == "a2"


def test_level_one_child_at_index_two(street):
    third = street.root.children[2]
    assert street.path_encode(third) == [(0, 2)]


def test_level_three_leaf_manual_traversal(street):
    node = street.node("speed_limit_50")
    # walk up by hand, recording each parent's child index
    steps = []
    while node.parent is not None:
        steps.append((node.parent.name, node.parent.children.index(node)))
        node = node.parent
    steps.reverse()
    expected = [(street.classifier_of(street.node(name)).id, idx) for name, idx in steps]
    assert street.path_encode("speed_limit_50") == expected
    assert len(expected) == 3


def test_every_leaf_path_replays(street):
    for leaf in street.leaves:
        path = street.path_encode(leaf)
        node = street.root
        for j, y in path:
            assert street.classifiers[j].node is node
            node = node.children[y]
        assert node is leaf


def test_classifiers_are_inner_nodes(street):
    inner = {n.name for n in street.nodes if len(n.children) >= 2}
    assert {c.name for c in street.classifiers} == inner


def test_classifier_anchors(street):
    for clf in street.classifiers[1:]:
        parent = street.classifiers[clf.parent]
        assert parent.node.children[clf.parent_class] is clf.node


def test_round_trip(street):
    again = parse_hierarchy(serialize(street))
    assert same_tree(street.root, again.root)
    assert again.bindings == street.bindings


@st.composite
def trees(draw, depth=3):
    counter = iter(range(10 ** 6))

    def node(level):
        n_children = draw(st.integers(0 if level else 2, 3)) if level < depth else 0
        if n_children == 1:
            n_children = 2
        return (f"n{next(counter)}", [node(level + 1) for _ in range(n_children)])

    return node(0)


def _render(tree, level=0):
    name, children = tree
    return [" " * (2 * level) + name] + [line for c in children for line in _render(c, level + 1)]


@settings(max_examples=60, deadline=None)
@given(trees())
def test_round_trip_property(tree):
    h = parse_hierarchy("\n".join(_render(tree)) + "\n")
    again = parse_hierarchy(serialize(h))
    assert same_tree(h.root, again.root)
    for leaf in h.leaves:
        assert h.path_decode(h.path_encode(leaf)) is leaf


@pytest.mark.parametrize("text,needle,line", [
    ("root\n  a\n  a\n", "duplicate", 3),
    ("root\n  a:\n  b\n", "empty", 2),
    ("root\n   a\n  b\n", "indent", 2),
    ("root\n  a\n  b\n\n[bind ds]\n0 = c\n", "unknown", 6),
    ("root\n  a\n  b\n\n[bind ds]\n0 = a\n0 = b\n", "bound", 7),
])
def test_parse_errors_carry_line_numbers(text, needle, line):
    with pytest.raises(HierarchyError, match=needle) as info:
        parse_hierarchy(text)
    assert info.value.line == line


def test_unknown_node_suggests_names(street):
    with pytest.raises(HierarchyError, match="speed_limit_50"):
        street.node("speed_limit_5O")


def _spec(name, labels, kind="dense", objects=()):
    return DatasetSpec(name, labels, kind, objects=objects)


def test_validate_root_coverage_error():
    h = parse_hierarchy(TWO_LEVEL)
    h = bind_dataset(h, _spec("boxes", {0: "a1", 1: "b"}, "bbox", objects=(0, 1)))
    report = validate(h, [_spec("boxes", {0: "a1", 1: "b"}, "bbox", objects=(0, 1))])
    assert "root coverage" in report.rules()
    with pytest.raises(HierarchyError):
        report.raise_if_invalid()


def test_validate_dense_root_plus_level_two_bbox():
    dense = _spec("dense", {0: "a", 1: "b"})
    boxes = _spec("boxes", {0: "a1", 1: "a2"}, "bbox", objects=(0, 1))
    h = parse_hierarchy(TWO_LEVEL)
    h = bind_dataset(bind_dataset(h, dense), boxes)
    report = validate(h, [dense, boxes])
    assert report.ok, report.format()
    assert ("boxes", "bbox") in report.supervision["a"]
    assert ("dense", "dense") in report.supervision["root"]


def test_validate_degenerate_classifier():
    h = parse_hierarchy("root\n  a\n    only\n  b\n")
    assert "degenerate classifier" in validate(h, []).rules()


def test_validate_unbound_dataset_and_label():
    h = parse_hierarchy(TWO_LEVEL)
    assert "unbound dataset" in validate(h, [_spec("x", {0: "a"})]).rules()
    h = parse_hierarchy(TWO_LEVEL + "\n[bind x]\n0 = a\n")
    assert "unbound label" in validate(h, [_spec("x", {0: "a", 1: "b"})]).rules()


def test_validate_accepts_shipped_config(street):
    report = validate(street, list(street_presets(street).values()))
    assert report.ok, report.format()


def test_coarse_binding_supervises_path_only(street):
    sup = supervised_classifiers(street, "cityscapes")
    sign = next(k for k, v in street.bindings["cityscapes"].items() if v == "traffic_sign")
    assert sign in sup[0]
    front = street.classifier_of(street.node("traffic_sign_front")).id
    sign_clf = street.classifier_of(street.node("traffic_sign")).id
    assert sign not in sup.get(sign_clf, set())
    assert front not in sup


def test_fine_binding_supervises_full_path(street):
    sup = supervised_classifiers(street, "gtsdb")
    label = next(k for k, v in street.bindings["gtsdb"].items() if v == "speed_limit_50")
    for j, _ in street.path_encode("speed_limit_50"):
        assert label in sup[j]


def test_bind_dataset_errors():
    h = parse_hierarchy(TWO_LEVEL)
    with pytest.raises(HierarchyError, match="did you mean"):
        bind_dataset(h, _spec("x", {0: "a3"}))
    h = bind_dataset(h, _spec("x", {0: "a"}))
    with pytest.raises(HierarchyError, match="rebind"):
        bind_dataset(h, _spec("x", {0: "b"}))


def test_bind_dataset_returns_copy():
    h = parse_hierarchy(TWO_LEVEL)
    h2 = bind_dataset(h, _spec("x", {0: "a"}))
    assert "x" not in h.bindings
    assert h2.bindings["x"] == {0: "a"}


def test_flatten_counts():
    text = "root\n  p\n    p1\n    p2\n  q\n    q1\n    q2\n    q3\n  r\n    r1\n    r2\n    r3\n"
    h = parse_hierarchy(text)
    h = bind_dataset(h, _spec("d1", {i: n for i, n in enumerate(["p1", "p2", "q1", "q2", "q3"])}))
    h = bind_dataset(h, _spec("d2", {0: "r1", 1: "r2", 2: "r3"}))
    assert flatten_union(h, ["d1"]).n_classes == 5
    both = flatten_union(h)
    assert both.n_classes == 8
    assert flatten_union(h, unlabeled=True).n_classes == 9
    assert flatten_union(h, unlabeled=True).names()[-1] == "unlabeled"


def test_flatten_keeps_coarse_and_fine(street):
    space = flatten_union(street)
    assert "traffic_sign" in space.classes
    assert "speed_limit_50" in space.classes
    bound = {n for table in street.bindings.values() for n in table.values()}
    assert space.n_classes == len(bound)


def test_format_tree_mentions_classifiers(street):
    text = format_tree(street)
    assert "[classifier 4, |C|=43]" in text
    assert "leaves: 108" in text
