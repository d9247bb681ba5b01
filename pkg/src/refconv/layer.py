"""Re-parameterized refocusing convolution.

A trained conv kernel is frozen as basis weights W_b and treated as a
one-sample multi-channel image; a small trainable map convolution W_r runs
over it to produce transformed weights W_t = W_b * W_r + W_b, which are what
actually convolve the features. After training, W_t is computed once and the
map convolution is discarded, leaving a layer structurally identical to the
original.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Array, ConvSpec, ShapeError, conv2d_backward, conv2d_forward


def compute_groups(spec: ConvSpec) -> int:
    """Group count of the map convolution: G = c_out * c_in / g^2.

    Complements the sparsity of the wrapped conv: depthwise specs give G = 1
    (a dense map over kernel channels), dense specs give G = c_out * c_in
    (a depthwise map). Non-divisible configurations are an error, never
    rounded.
    """
    num = spec.c_out * spec.c_in
    g2 = spec.groups * spec.groups
    if num % g2 != 0:
        raise ShapeError(
            f"c_out*c_in={num} is not divisible by groups^2={g2}; "
            "no valid map-conv group count exists for this layer")
    return num // g2


def num_kernel_channels(spec: ConvSpec) -> int:
    """2D kernel slices in the weight tensor: c_out * c_in / g."""
    return spec.c_out * spec.c_in // spec.groups


def map_conv_spec(spec: ConvSpec, map_kernel: int, map_groups: Optional[int] = None) -> ConvSpec:
    """Geometry of the convolution that runs over the kernel image.

    Stride 1 and padding floor(k/2) are forced by the same-shape requirement
    on the transformed weights.
    """
    if map_kernel < 1 or map_kernel % 2 == 0:
        raise ShapeError(f"map kernel must be odd and positive, got {map_kernel}")
    if map_kernel > spec.kernel:
        raise ShapeError(f"map kernel {map_kernel} larger than wrapped kernel {spec.kernel}")
    n2 = num_kernel_channels(spec)
    groups = compute_groups(spec) if map_groups is None else map_groups
    if n2 % groups != 0:
        raise ShapeError(f"map groups {groups} must divide kernel channels {n2}")
    return ConvSpec(c_in=n2, c_out=n2, kernel=map_kernel,
                    stride=1, padding=map_kernel // 2, groups=groups)


@dataclass
class BasisWeights:
    """Frozen kernel inherited from a pre-trained layer."""

    w_b: Array
    frozen: bool = True


@dataclass
class RefocusingWeights:
    """Trainable kernel of the map convolution over the basis weights."""

    w_r: Array
    map_kernel: int
    map_groups: int


@dataclass
class RefConvLayer:
    spec: ConvSpec
    basis: BasisWeights
    refocus: RefocusingWeights
    use_identity_shortcut: bool = True
    bias: Optional[Array] = None  # inherited frozen, re-attached at merge

    def __post_init__(self):
        if self.basis.w_b.shape != self.spec.weight_shape():
            raise ShapeError(f"basis shape {self.basis.w_b.shape} does not match "
                             f"spec {self.spec.weight_shape()}")
        mspec = self.map_spec()
        if self.refocus.w_r.shape != mspec.weight_shape():
            raise ShapeError(f"refocusing weights shape {self.refocus.w_r.shape}, "
                             f"expected {mspec.weight_shape()}")
        if self.bias is not None and self.bias.shape != (self.spec.c_out,):
            raise ShapeError(f"bias shape {self.bias.shape}")

    def map_spec(self) -> ConvSpec:
        return map_conv_spec(self.spec, self.refocus.map_kernel, self.refocus.map_groups)


def init_refocusing_weights(spec: ConvSpec, map_kernel: int = 3, init: str = "xavier",
                            rng: Optional[np.random.Generator] = None,
                            dtype=np.float32,
                            map_groups: Optional[int] = None) -> RefocusingWeights:
    """Fresh map-conv weights: xavier-uniform (fans from the map-conv shape)
    or zeros (makes the wrapped layer exactly equal the pre-trained one)."""
    mspec = map_conv_spec(spec, map_kernel, map_groups)
    shape = mspec.weight_shape()
    if init == "zero":
        w_r = np.zeros(shape, dtype=dtype)
    elif init == "xavier":
        if rng is None:
            raise ValueError("xavier init needs an rng")
        fan = (mspec.c_in // mspec.groups) * map_kernel * map_kernel
        bound = float(np.sqrt(3.0 / fan))  # sqrt(6/(fan_in+fan_out)), fans equal
        w_r = rng.uniform(-bound, bound, size=shape).astype(dtype)
    else:
        raise ValueError(f"unknown init {init!r} (want 'xavier' or 'zero')")
    return RefocusingWeights(w_r=w_r, map_kernel=map_kernel, map_groups=mspec.groups)


def kernel_image(w_b: Array, spec: ConvSpec) -> Array:
    """View the kernel as a single-sample feature map: (1, c_out*c_in/g, K, K)."""
    return w_b.reshape(1, num_kernel_channels(spec), spec.kernel, spec.kernel)


def refocusing_transform(layer: RefConvLayer) -> Array:
    """Transformed weights W_t = W_b * W_r (+ W_b with the shortcut).

    The basis kernel is reshaped to a kernel image, convolved with the map
    weights (stride 1, padding k//2, groups G, no bias) and reshaped back,
    so shape(W_t) == shape(W_b) for every legal spec.
    """
    wb = layer.basis.w_b
    wb_img = kernel_image(wb, layer.spec)
    wt_img = conv2d_forward(wb_img, layer.refocus.w_r, layer.map_spec())
    wt = wt_img.reshape(wb.shape)
    if layer.use_identity_shortcut:
        wt = wt + wb
    return wt


def refconv_forward(layer: RefConvLayer, x: Array) -> Array:
    return conv2d_forward(x, refocusing_transform(layer), layer.spec, layer.bias)


def refconv_backward(layer: RefConvLayer, x: Array, grad_out: Array) -> tuple[Array, Array]:
    """Gradients of refconv_forward w.r.t. the input and the map weights.

    The basis receives no parameter update here; it only mediates grad_x.
    """
    grad_x, grad_w_r, _ = refconv_backward_parts(layer, x, grad_out,
                                                 need_grad_x=True, need_basis_grad=False)
    return grad_x, grad_w_r


def refconv_backward_parts(layer: RefConvLayer, x: Array, grad_out: Array,
                           need_grad_x: bool = True, need_basis_grad: bool = False,
                           w_t: Optional[Array] = None, outer_ctx: Optional[tuple] = None
                           ) -> tuple[Optional[Array], Array, Optional[Array]]:
    """Full backward: (grad_x, grad_w_r, grad_w_b).

    grad_w_b is only computed on request (trainable-basis ablation); it is the
    map-conv input gradient plus, with the shortcut, the transformed-weight
    gradient itself. Pass w_t / outer_ctx to reuse the forward's work.
    """
    if w_t is None:
        w_t = refocusing_transform(layer)
    grad_x, grad_wt, _ = conv2d_backward(x, w_t, layer.spec, grad_out,
                                         need_grad_x=need_grad_x, ctx=outer_ctx,
                                         need_grad_bias=False)
    spec = layer.spec
    wb_img = kernel_image(layer.basis.w_b, spec)
    gwt_img = grad_wt.reshape(wb_img.shape)
    gwb_img, grad_w_r, _ = conv2d_backward(wb_img, layer.refocus.w_r, layer.map_spec(),
                                           gwt_img, need_grad_x=need_basis_grad,
                                           need_grad_bias=False)
    grad_w_b = None
    if need_basis_grad:
        grad_w_b = gwb_img.reshape(layer.basis.w_b.shape)
        if layer.use_identity_shortcut:
            grad_w_b = grad_w_b + grad_wt
    return grad_x, grad_w_r, grad_w_b


def merge(layer: RefConvLayer) -> tuple[Array, Optional[Array]]:
    """Collapse to a plain conv parameter set for the original spec.

    The merged layer's forward equals refconv_forward on every input; the map
    weights leave no residue, so the parameter count returns to baseline.
    """
    w_t = refocusing_transform(layer)
    bias = None if layer.bias is None else layer.bias.copy()
    return w_t, bias


@dataclass(frozen=True)
class CostReport:
    """Training-cost accounting for one wrapped layer (MAC counts)."""

    flops_original: int
    flops_refocus: int
    params_original: int
    params_refocus: int


def cost_report(spec: ConvSpec, batch: int, h: int, w: int, map_kernel: int = 3,
                map_groups: Optional[int] = None) -> CostReport:
    """MACs/parameters of the wrapped conv vs. its refocusing transform.

    The original-conv figure uses the input spatial size (the convention of
    the usual closed-form count; strided layers make it an upper bound). The
    refocusing figure is per training step and independent of batch size:
    the map conv runs over the kernel image, not the feature maps.
    """
    mspec = map_conv_spec(spec, map_kernel, map_groups)
    k2 = spec.kernel * spec.kernel
    params_refocus = mspec.c_out * (mspec.c_in // mspec.groups) * map_kernel * map_kernel
    return CostReport(
        flops_original=batch * h * w * spec.c_in * spec.c_out * k2 // spec.groups,
        flops_refocus=k2 * params_refocus,
        params_original=spec.c_out * (spec.c_in // spec.groups) * k2,
        params_refocus=params_refocus,
    )
