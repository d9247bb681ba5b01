"""Executes a descriptor graph: parameter init, forward, reverse-mode backward.

The parameter store is a plain dict {layer name: {role: array}} owned by the
trainer; forward in training mode updates batchnorm running buffers in place.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import _kernels, ops
from .layer import map_conv_spec, refconv_backward_parts, refocusing_transform
from .models import LayerDescriptor, ModelGraph, refconv_layer_from_params
from .tensor import Array, ShapeError, conv2d_backward, conv2d_forward_ctx

Params = dict[str, dict[str, np.ndarray]]

BN_MOMENTUM = 0.1

# roles that are state, not optimizable parameters
BUFFER_ROLES = ("running_mean", "running_var")
# roles exempt from weight decay (biases and batchnorm affine terms)
DECAY_EXEMPT_ROLES = ("bias", "gamma", "beta")


def param_shapes(d: LayerDescriptor) -> dict[str, tuple]:
    """Expected role -> shape map for one descriptor (buffers included)."""
    if d.kind == "conv":
        shapes = {"weight": d.spec.weight_shape()}
        if d.has_bias:
            shapes["bias"] = (d.spec.c_out,)
        return shapes
    if d.kind == "refconv":
        mspec = map_conv_spec(d.spec, d.map_kernel)
        shapes = {"basis": d.spec.weight_shape(), "refocus": mspec.weight_shape()}
        if d.has_bias:
            shapes["bias"] = (d.spec.c_out,)
        return shapes
    if d.kind == "batchnorm":
        f = (d.features,)
        return {"gamma": f, "beta": f, "running_mean": f, "running_var": f}
    if d.kind == "linear":
        return {"weight": (d.out_features, d.in_features), "bias": (d.out_features,)}
    return {}


def trainable_roles(d: LayerDescriptor) -> tuple[str, ...]:
    if not d.trainable:
        return ()
    if d.kind == "conv":
        return ("weight", "bias") if d.has_bias else ("weight",)
    if d.kind == "refconv":
        # inherited bias stays frozen; basis only under the trainable-basis ablation
        return ("refocus", "basis") if d.basis_trainable else ("refocus",)
    if d.kind == "batchnorm":
        return ("gamma", "beta")
    if d.kind == "linear":
        return ("weight", "bias")
    return ()


def trainable_entries(graph: ModelGraph) -> list[tuple[str, str]]:
    return [(d.name, role) for d in graph.layers for role in trainable_roles(d)]


def init_params(graph: ModelGraph, seed: int, dtype=np.float32) -> Params:
    """He-normal conv weights, xavier-uniform classifier, identity batchnorm."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1217]))
    params: Params = {}
    for d in graph.layers:
        roles: dict[str, np.ndarray] = {}
        if d.kind in ("conv", "refconv"):
            spec = d.spec
            fan_out = spec.c_out * spec.kernel ** 2 // spec.groups
            w = rng.standard_normal(spec.weight_shape()) * np.sqrt(2.0 / fan_out)
            roles["weight" if d.kind == "conv" else "basis"] = w.astype(dtype)
            if d.kind == "refconv":
                mspec = map_conv_spec(spec, d.map_kernel)
                fan = (mspec.c_in // mspec.groups) * d.map_kernel ** 2
                bound = np.sqrt(3.0 / fan)
                roles["refocus"] = rng.uniform(
                    -bound, bound, mspec.weight_shape()).astype(dtype)
            if d.has_bias:
                roles["bias"] = np.zeros(spec.c_out, dtype=dtype)
        elif d.kind == "batchnorm":
            roles = {"gamma": np.ones(d.features, dtype=dtype),
                     "beta": np.zeros(d.features, dtype=dtype),
                     "running_mean": np.zeros(d.features, dtype=dtype),
                     "running_var": np.ones(d.features, dtype=dtype)}
        elif d.kind == "linear":
            bound = np.sqrt(6.0 / (d.in_features + d.out_features))
            roles = {"weight": rng.uniform(
                         -bound, bound, (d.out_features, d.in_features)).astype(dtype),
                     "bias": np.zeros(d.out_features, dtype=dtype)}
        params[d.name] = roles
    return params


def forward(graph: ModelGraph, params: Params, x: Array, training: bool,
            need_caches: bool = True, bn_momentum: float = BN_MOMENTUM
            ) -> tuple[Array, Optional[list]]:
    """Run the graph; returns (logits, caches). Training mode mutates the
    batchnorm running buffers in params."""
    caches: Optional[list] = [] if need_caches else None
    out = x
    for idx, d in enumerate(graph.layers):
        roles = params[d.name]
        cache = None
        if d.kind == "conv":
            x_in = out
            out, ctx = conv2d_forward_ctx(x_in, roles["weight"], d.spec,
                                          roles.get("bias"), want_ctx=need_caches)
            cache = (x_in, ctx)
        elif d.kind == "refconv":
            layer = refconv_layer_from_params(d, roles)
            w_t = refocusing_transform(layer)
            x_in = out
            out, ctx = conv2d_forward_ctx(x_in, w_t, d.spec, roles.get("bias"),
                                          want_ctx=need_caches)
            cache = (x_in, w_t, ctx)
        elif d.kind == "batchnorm":
            out, cache = ops.batchnorm_forward(
                out, roles["gamma"], roles["beta"],
                roles["running_mean"], roles["running_var"],
                training=training, momentum=bn_momentum)
        elif d.kind == "relu":
            if idx == 0:
                out = ops.relu_forward(out)
            else:
                # safe in place: the previous layer's output is not aliased by
                # any cache (convs cache inputs, batchnorm caches xhat), and
                # the backward mask (x > 0) is unchanged by clipping
                out = np.maximum(out, 0.0, out=out)
            cache = out
        elif d.kind == "global_pool":
            cache = out.shape
            out = ops.global_avg_pool_forward(out)
        elif d.kind == "linear":
            cache = out
            out = ops.linear_forward(out, roles["weight"], roles["bias"])
        if need_caches:
            caches.append(cache)
    return out, caches


def backward(graph: ModelGraph, params: Params, caches: list, grad_logits: Array
             ) -> dict[tuple[str, str], np.ndarray]:
    """Reverse pass; returns gradients for every trainable (layer, role)."""
    grads: dict[tuple[str, str], np.ndarray] = {}
    g = grad_logits
    for idx in range(len(graph.layers) - 1, -1, -1):
        d = graph.layers[idx]
        roles = params[d.name]
        cache = caches[idx]
        wanted = trainable_roles(d)
        need_gx = idx > 0
        if d.kind == "conv":
            x_in, ctx = cache
            gx, gw, gb = conv2d_backward(x_in, roles["weight"], d.spec, g,
                                         need_grad_x=need_gx, ctx=ctx,
                                         need_grad_bias=d.has_bias)
            if "weight" in wanted:
                grads[(d.name, "weight")] = gw
            if "bias" in wanted:
                grads[(d.name, "bias")] = gb
            g = gx
        elif d.kind == "refconv":
            x_in, w_t, ctx = cache
            layer = refconv_layer_from_params(d, roles)
            gx, gwr, gwb = refconv_backward_parts(
                layer, x_in, g, need_grad_x=need_gx,
                need_basis_grad=("basis" in wanted), w_t=w_t, outer_ctx=ctx)
            if "refocus" in wanted:
                grads[(d.name, "refocus")] = gwr
            if "basis" in wanted:
                grads[(d.name, "basis")] = gwb
            g = gx
        elif d.kind == "batchnorm":
            if cache is None:
                raise ShapeError(f"{d.name}: backward through inference-mode batchnorm")
            g, ggamma, gbeta = ops.batchnorm_backward(cache, g)
            if "gamma" in wanted:
                grads[(d.name, "gamma")] = ggamma
                grads[(d.name, "beta")] = gbeta
        elif d.kind == "relu":
            if _kernels.HAVE_NUMBA and g.flags.c_contiguous and cache.flags.c_contiguous:
                _kernels.relu_backward_inplace(cache, g)  # g is owned here
            else:
                g = ops.relu_backward(cache, g)
        elif d.kind == "global_pool":
            g = ops.global_avg_pool_backward(cache, g)
        elif d.kind == "linear":
            g, gw, gb = ops.linear_backward(cache, roles["weight"], g)
            if "weight" in wanted:
                grads[(d.name, "weight")] = gw
                grads[(d.name, "bias")] = gb
    return grads


def parameter_count(graph: ModelGraph, trainable_only: bool = False,
                    include_buffers: bool = False) -> int:
    total = 0
    for d in graph.layers:
        shapes = param_shapes(d)
        roles = trainable_roles(d) if trainable_only else shapes.keys()
        for role in roles:
            if not include_buffers and role in BUFFER_ROLES:
                continue
            total += int(np.prod(shapes[role]))
    return total
