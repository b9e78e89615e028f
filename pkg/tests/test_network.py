import numpy as np
import pytest

from hierseg.hierarchy import bind_dataset, flatten_union, parse_hierarchy, DatasetSpec
from hierseg.network import (ClassifierHead, NetworkConfig, block_plan, build_flat_head, build_flat_network,
                             build_network)

from gradcheck import end_to_end_gradient_error

TINY = NetworkConfig(widths=(4, 4, 6, 6), rep_depth=4, bottleneck=3)
TWO_HEADS = "root\n  a\n    a1\n    a2\n  b\n"


def test_shapes_and_counts(street):
    net = build_network(street, NetworkConfig(output_stride=8, rep_depth=32))
    assert len(net.heads) == 5
    rep = net.forward_shared(np.zeros((1, 3, 64, 64)))
    assert rep.shape == (1, 32, 8, 8)
    assert [h.n_classes for h in net.heads] == [c.n_classes for c in street.classifiers]


def test_root_head_has_no_anchor(street):
    net = build_network(street, TINY)
    assert net.heads[0].parent is None
    assert all(h.parent is not None for h in net.heads[1:])


def test_single_classifier_topology():
    h = parse_hierarchy("root\n  a\n  b\n  c\n")
    net = build_network(h, TINY)
    assert len(net.heads) == 1


def test_flat_head_matches_single_head_hierarchy():
    h = parse_hierarchy("root\n  a\n  b\n  c\n")
    h = bind_dataset(h, DatasetSpec("d", {0: "a", 1: "b", 2: "c"}, "dense"))
    hier = build_network(h, TINY)
    flat = build_flat_network(flatten_union(h), TINY)
    assert {k: v.shape for k, v in hier.params.items() if k.startswith("extractor.")} == \
           {k: v.shape for k, v in flat.params.items() if k.startswith("extractor.")}
    assert [v.shape for k, v in sorted(hier.heads[0].params.items())] == \
           [v.shape for k, v in sorted(flat.heads[0].params.items())]


def test_flat_head_with_unlabeled_has_nine_channels():
    text = "root\n  p\n    p1\n    p2\n  q\n    q1\n    q2\n    q3\n  r\n    r1\n    r2\n    r3\n"
    h = parse_hierarchy(text)
    h = bind_dataset(h, DatasetSpec("d1", dict(enumerate(["p1", "p2", "q1", "q2", "q3"])), "dense"))
    h = bind_dataset(h, DatasetSpec("d2", {0: "r1", 1: "r2", 2: "r3"}, "dense"))
    head = build_flat_head(flatten_union(h, unlabeled=True), TINY)
    assert head.n_classes == 9
    net = build_network(parse_hierarchy(TWO_HEADS), TINY)
    sigma = head.forward(net.forward_shared(np.random.default_rng(0).random((1, 3, 8, 8))), 8, 8)
    np.testing.assert_allclose(sigma.data.sum(axis=1), 1.0, atol=1e-12)


def test_doubling_bottleneck_doubles_three_by_three_stage():
    h = parse_hierarchy(TWO_HEADS)
    a = build_network(h, NetworkConfig(rep_depth=8, bottleneck=4))
    b = build_network(h, NetworkConfig(rep_depth=8, bottleneck=4,
                                       branch_overrides={"a": {"bottleneck": 8}}))
    # conv 3x3 (w*d*9) plus the norm's gamma and beta (2*w), all linear in w
    assert a.heads[1].stage_parameter_count("adapt3x3") == 4 * 8 * 9 + 8
    assert b.heads[1].stage_parameter_count("adapt3x3") == 2 * a.heads[1].stage_parameter_count("adapt3x3")
    assert b.heads[0].parameter_count == a.heads[0].parameter_count


def test_parameter_names_unique(street):
    net = build_network(street, TINY)
    names = [k for k in net.params]
    assert len(names) == len(set(names))
    assert net.parameter_count == sum(v.size for v in net.params.values())


def test_output_is_distribution(toy):
    net = build_network(toy, TINY)
    x = np.random.default_rng(1).random((2, 3, 16, 12))
    for head, sigma in zip(net.heads, net.forward(x)):
        assert sigma.shape == (2, head.n_classes, 16, 12)
        np.testing.assert_allclose(sigma.data.sum(axis=1), 1.0, atol=1e-12)


def test_zero_head_gives_uniform(toy):
    net = build_network(toy, TINY)
    for head in net.heads:
        for k in head.params:
            if ".proj." in k:
                head.params[k].data[...] = 0.0
    for head, sigma in zip(net.heads, net.forward(np.random.default_rng(2).random((1, 3, 8, 8)))):
        np.testing.assert_allclose(sigma.data, 1.0 / head.n_classes, atol=1e-12)


def test_shared_representation_computed_once(street):
    net = build_network(street, TINY)
    net.forward(np.zeros((1, 3, 8, 8)))
    assert net.shared_evaluations == 1
    net.forward(np.zeros((1, 3, 8, 8)))
    assert net.shared_evaluations == 2


def test_heads_read_same_representation(toy, monkeypatch):
    net = build_network(toy, TINY)
    seen = []
    original = ClassifierHead.forward

    def spy(self, rep, *args, **kwargs):
        seen.append(rep)
        return original(self, rep, *args, **kwargs)

    monkeypatch.setattr(ClassifierHead, "forward", spy)
    net.forward(np.random.default_rng(0).random((1, 3, 8, 8)))
    assert len(seen) == len(net.heads)
    assert all(r is seen[0] for r in seen)


def test_eval_forward_deterministic(toy):
    net = build_network(toy, TINY)
    x = np.random.default_rng(3).random((1, 3, 16, 16))
    a = [s.data.copy() for s in net.forward(x)]
    b = [s.data for s in net.forward(x)]
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


def test_indivisible_extent_suggests_padding(toy):
    net = build_network(toy, TINY)
    with pytest.raises(ValueError, match="pad to \\(12, 8\\)"):
        net.forward_shared(np.zeros((1, 3, 10, 8)))


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(output_stride=16)
    with pytest.raises(ValueError):
        NetworkConfig(widths=(4, 4, 4))
    assert block_plan(NetworkConfig(widths=(4, 4, 4, 4, 4), output_stride=8)) == \
        [(1, 1), (2, 1), (2, 1), (1, 2), (1, 4)]


def test_config_dict_round_trip():
    cfg = NetworkConfig(widths=(8, 8, 8, 8, 8), output_stride=8, branch_overrides={"a": {"dilation": 2}})
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_describe_lists_heads(street):
    text = build_network(street, TINY).describe()
    assert "output stride 4" in text
    assert text.count("\nhead ") == 5
    assert "total parameters" in text


@pytest.mark.parametrize("seed", range(5))
def test_end_to_end_gradient(seed):
    err, _, unchecked = end_to_end_gradient_error(seed)
    assert err < 1e-3
    assert unchecked == 0
