"""Zoo construction, surgery invariants, and whole-graph gradients."""

import numpy as np
import pytest

from conftest import max_rel_err

from refconv.checkpoint import Checkpoint, CheckpointError
from refconv.layer import cost_report
from refconv.models import (LayerDescriptor, ModelGraph, SurgeryOptions, ZOO_IDS,
                            build_zoo, graph_from_checkpoint, merge_model, surgery)
from refconv.network import (backward, forward, init_params, param_shapes,
                             parameter_count, trainable_entries)
from refconv.ops import softmax_crossentropy
from refconv.tensor import ConvSpec, ShapeError, finite_diff_grad


def baseline_checkpoint(model_id, seed=0, dtype=np.float32):
    graph = build_zoo(model_id)
    params = init_params(graph, seed, dtype=dtype)
    return graph, Checkpoint(model_id=model_id, stage="baseline",
                             precision=str(np.dtype(dtype)), seed=seed, params=params)


def test_zoo_ids_and_unknown():
    for mid in ZOO_IDS:
        g = build_zoo(mid)
        assert g.model_id == mid and g.num_classes == 10 and g.input_shape == (3, 32, 32)
    with pytest.raises(ValueError):
        build_zoo("resnet152")


def test_tiny_dw_convs_are_depthwise():
    g = build_zoo("tiny_dw")
    for d in g.conv_layers():
        if d.spec.kernel == 3:
            assert d.spec.c_in == d.spec.c_out == d.spec.groups


def test_tiny_group_3x3_are_group2():
    g = build_zoo("tiny_group")
    assert any(d.spec.kernel == 3 for d in g.conv_layers())
    for d in g.conv_layers():
        if d.spec.kernel == 3:
            assert d.spec.groups == 2


def test_tiny_dense_convs_are_dense():
    g = build_zoo("tiny_dense")
    ks = [d.spec.kernel for d in g.conv_layers()]
    assert ks == [3, 3, 3, 3]
    for d in g.conv_layers():
        assert d.spec.groups == 1


@pytest.mark.parametrize("mid", ZOO_IDS)
def test_parameter_count_matches_hand_enumeration(mid):
    g = build_zoo(mid)
    manual = 0
    for d in g.layers:
        if d.kind == "conv":
            s = d.spec
            manual += s.c_out * (s.c_in // s.groups) * s.kernel ** 2
            if d.has_bias:
                manual += s.c_out
        elif d.kind == "batchnorm":
            manual += 2 * d.features
        elif d.kind == "linear":
            manual += d.out_features * d.in_features + d.out_features
    assert parameter_count(g) == manual
    assert manual < 300_000  # desk scale


@pytest.mark.parametrize("mid", ZOO_IDS)
def test_forward_shapes(mid):
    g = build_zoo(mid)
    params = init_params(g, 0)
    x = np.random.default_rng(0).standard_normal((4, 3, 32, 32)).astype(np.float32)
    logits, caches = forward(g, params, x, training=True)
    assert logits.shape == (4, 10)
    assert len(caches) == len(g.layers)


def test_refconv_descriptor_rejects_1x1():
    with pytest.raises(ShapeError):
        LayerDescriptor("refconv", "bad", spec=ConvSpec(4, 4, 1))


def test_graph_validation_errors():
    with pytest.raises(ShapeError):  # duplicate names
        ModelGraph(layers=(
            LayerDescriptor("relu", "a"), LayerDescriptor("relu", "a"),
            LayerDescriptor("global_pool", "p"),
            LayerDescriptor("linear", "fc", in_features=3, out_features=10),
        ), input_shape=(3, 8, 8), num_classes=10)
    with pytest.raises(ShapeError):  # no classifier
        ModelGraph(layers=(LayerDescriptor("relu", "a"),),
                   input_shape=(3, 8, 8), num_classes=10)
    with pytest.raises(ShapeError):  # channel mismatch
        ModelGraph(layers=(
            LayerDescriptor("conv", "c", spec=ConvSpec(4, 8, 3)),
            LayerDescriptor("global_pool", "p"),
            LayerDescriptor("linear", "fc", in_features=8, out_features=10),
        ), input_shape=(3, 8, 8), num_classes=10)


@pytest.mark.parametrize("mid", ZOO_IDS)
def test_surgery_replaces_exactly_the_wide_kernels(mid):
    graph, ckpt = baseline_checkpoint(mid)
    before = [d for d in graph.conv_layers() if d.spec.kernel >= 2]
    sg, sc = surgery(graph, ckpt, SurgeryOptions())
    refs = [d for d in sg.layers if d.kind == "refconv"]
    assert len(refs) == len(before)
    for d in sg.layers:  # no 1x1 ever wrapped
        if d.kind == "refconv":
            assert d.spec.kernel >= 2
        if d.kind == "conv":
            assert d.spec.kernel == 1
    assert sc.stage == "refconv"


def test_surgery_zero_init_preserves_forward_exactly():
    graph, ckpt = baseline_checkpoint("tiny_dw")
    sg, sc = surgery(graph, ckpt, SurgeryOptions(init="zero"))
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)
        base, _ = forward(graph, ckpt.params, x, training=False, need_caches=False)
        ref, _ = forward(sg, sc.params, x, training=False, need_caches=False)
        np.testing.assert_array_equal(base, ref)


def test_surgery_pretrained_basis_is_bitexact():
    graph, ckpt = baseline_checkpoint("tiny_dense")
    sg, sc = surgery(graph, ckpt, SurgeryOptions())
    for d in sg.layers:
        if d.kind == "refconv":
            assert np.array_equal(sc.params[d.name]["basis"], ckpt.params[d.name]["weight"])


def test_surgery_random_basis_differs():
    graph, ckpt = baseline_checkpoint("tiny_dense")
    _, sc = surgery(graph, ckpt, SurgeryOptions(basis="random"))
    diffs = [not np.array_equal(sc.params[d.name]["basis"], ckpt.params[d.name]["weight"])
             for d in graph.conv_layers() if d.spec.kernel >= 2]
    assert all(diffs)


def test_surgery_param_overhead_is_sum_of_cost_reports():
    graph, ckpt = baseline_checkpoint("tiny_dw")
    sg, _ = surgery(graph, ckpt, SurgeryOptions())
    extra = sum(cost_report(d.spec, batch=1, h=32, w=32).params_refocus
                for d in graph.conv_layers() if d.spec.kernel >= 2)
    assert parameter_count(sg) == parameter_count(graph) + extra


def test_surgery_requires_baseline_and_matching_checkpoint():
    graph, ckpt = baseline_checkpoint("tiny_dw")
    _, sc = surgery(graph, ckpt, SurgeryOptions())
    with pytest.raises(CheckpointError):
        surgery(graph, sc, SurgeryOptions())  # already refconv stage
    other_graph, _ = baseline_checkpoint("tiny_dense")
    with pytest.raises(CheckpointError):
        surgery(other_graph, ckpt, SurgeryOptions())


@pytest.mark.parametrize("mid", ZOO_IDS)
def test_merge_inverts_surgery_structure(mid):
    graph, ckpt = baseline_checkpoint(mid)
    sg, sc = surgery(graph, ckpt, SurgeryOptions())
    mg, mc = merge_model(sg, sc)
    assert [(d.kind, d.name) for d in mg.layers] == [(d.kind, d.name) for d in graph.layers]
    for d in mg.conv_layers():
        assert mc.params[d.name]["weight"].shape == d.spec.weight_shape()
    assert mc.stage == "merged"
    assert mc.param_count() == ckpt.param_count()


def test_graph_from_checkpoint_roundtrip():
    graph, ckpt = baseline_checkpoint("tiny_group")
    sg, sc = surgery(graph, ckpt, SurgeryOptions(shortcut=False, map_kernel=1))
    rebuilt = graph_from_checkpoint(sc)
    assert [(d.kind, d.name, d.map_kernel, d.use_shortcut) for d in rebuilt.layers] == \
           [(d.kind, d.name, d.map_kernel, d.use_shortcut) for d in sg.layers]


def test_freeze_untouched_option():
    graph, ckpt = baseline_checkpoint("tiny_dw")
    sg, _ = surgery(graph, ckpt, SurgeryOptions(freeze_untouched=True))
    entries = trainable_entries(sg)
    assert entries and all(role == "refocus" for _, role in entries)


def test_whole_graph_gradients_match_finite_differences():
    # small two-conv net in float64, checked parameter by parameter
    layers = (
        LayerDescriptor("conv", "c1", spec=ConvSpec(2, 4, 3, padding=1)),
        LayerDescriptor("batchnorm", "bn1", features=4),
        LayerDescriptor("relu", "r1"),
        LayerDescriptor("conv", "c2", spec=ConvSpec(4, 4, 3, padding=1, groups=4)),
        LayerDescriptor("relu", "r2"),
        LayerDescriptor("global_pool", "p"),
        LayerDescriptor("linear", "fc", in_features=4, out_features=3),
    )
    g = ModelGraph(layers=layers, input_shape=(2, 6, 6), num_classes=3)
    params = init_params(g, 0, dtype=np.float64)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((4, 2, 6, 6))
    labels = rng.integers(0, 3, size=4)

    def loss_with(name, role, value):
        old = params[name][role]
        params[name][role] = value
        try:
            logits, _ = forward(g, params, x, training=True)
            return softmax_crossentropy(logits, labels)[0]
        finally:
            params[name][role] = old

    logits, caches = forward(g, params, x, training=True)
    _, gl = softmax_crossentropy(logits, labels)
    grads = backward(g, params, caches, gl)
    for (name, role) in trainable_entries(g):
        fd = finite_diff_grad(lambda v, n=name, r=role: loss_with(n, r, v),
                              params[name][role], step=1e-3)
        assert max_rel_err(grads[(name, role)], fd) < 1e-4, (name, role)


def test_refconv_graph_gradients_match_finite_differences():
    layers = (
        LayerDescriptor("refconv", "rc", spec=ConvSpec(2, 2, 3, padding=1, groups=2),
                        basis_trainable=True),
        LayerDescriptor("relu", "r"),
        LayerDescriptor("global_pool", "p"),
        LayerDescriptor("linear", "fc", in_features=2, out_features=2),
    )
    g = ModelGraph(layers=layers, input_shape=(2, 5, 5), num_classes=2)
    params = init_params(g, 3, dtype=np.float64)
    rng = np.random.default_rng(10)
    x = rng.standard_normal((3, 2, 5, 5))
    labels = rng.integers(0, 2, size=3)

    def loss_with(name, role, value):
        old = params[name][role]
        params[name][role] = value
        try:
            logits, _ = forward(g, params, x, training=True)
            return softmax_crossentropy(logits, labels)[0]
        finally:
            params[name][role] = old

    logits, caches = forward(g, params, x, training=True)
    _, gl = softmax_crossentropy(logits, labels)
    grads = backward(g, params, caches, gl)
    for (name, role) in trainable_entries(g):
        fd = finite_diff_grad(lambda v, n=name, r=role: loss_with(n, r, v),
                              params[name][role], step=1e-3)
        assert max_rel_err(grads[(name, role)], fd) < 1e-4, (name, role)


def test_param_shapes_cover_all_kinds():
    d = LayerDescriptor("batchnorm", "bn", features=7)
    assert set(param_shapes(d)) == {"gamma", "beta", "running_mean", "running_var"}
    assert param_shapes(LayerDescriptor("relu", "r")) == {}
