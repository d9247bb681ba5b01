"""Kernel diagnostics for trained models.

Four procedures: connection-degree matrices (how strongly each transformed
kernel channel attends to each basis channel), KL channel-redundancy matrices
(pairwise divergence of softmax-normalized kernel channels), skeleton
magnitude maps (average absolute weight per kernel position), and
filter-normalized loss-landscape slices. Everything is a pure function of a
checkpoint snapshot; outputs go to CSV plus a JSON sidecar for plotting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import Dataset, normalize
from .layer import RefConvLayer, refocusing_transform
from .models import ModelGraph, refconv_layer_from_params
from .network import forward, trainable_entries
from .ops import BN_EPS, softmax_crossentropy
from .tensor import Array, NonFiniteError, ShapeError

DEFAULT_CHANNELS = 64
NORM_EPS = 1e-10


class AnalysisError(ValueError):
    pass


@dataclass
class SquareMatrix:
    values: Array          # (n, n)
    layer: str
    statistic: str
    meta: dict = field(default_factory=dict)

    @property
    def order(self) -> int:
        return self.values.shape[0]

    def mean_offdiagonal(self) -> float:
        n = self.order
        if n < 2:
            return 0.0
        total = self.values.sum() - np.trace(self.values)
        return float(total / (n * n - n))


@dataclass
class LandscapeGrid:
    values: Array          # (resolution, resolution), +inf where loss blew up
    alphas: Array
    betas: Array
    span: float
    resolution: int
    seed: int
    center_loss: float
    meta: dict = field(default_factory=dict)


def connection_degree(layer: RefConvLayer, n_channels: Optional[int] = None,
                      name: str = "") -> SquareMatrix:
    """Entry (i, j) = sum |map filter linking basis channel j to transformed
    channel i|. Only defined for depthwise layers, where the map conv is dense
    over kernel channels (one k x k filter per (i, j) pair)."""
    if not layer.spec.depthwise:
        raise AnalysisError("connection degree needs a depthwise layer "
                            "(the (i, j) filter indexing requires map groups == 1)")
    c = layer.spec.c_out
    n = min(n_channels or DEFAULT_CHANNELS, c)
    w_r = layer.refocus.w_r  # (C, C, k, k)
    values = np.abs(w_r[:n, :n]).sum(axis=(2, 3)).astype(np.float64)
    return SquareMatrix(values=values, layer=name, statistic="connection_degree",
                        meta={"map_kernel": layer.refocus.map_kernel, "channels": n})


def kernel_channels(kernel: Array) -> Array:
    """Flatten a weight tensor to its 2D kernel channels: (count, K, K)."""
    if kernel.ndim != 4:
        raise ShapeError(f"expected a rank-4 kernel, got {kernel.shape}")
    return kernel.reshape(-1, kernel.shape[2], kernel.shape[3])


def kl_redundancy(kernel: Array, n_channels: Optional[int] = None,
                  name: str = "", statistic: str = "kl_redundancy") -> SquareMatrix:
    """Pairwise channel divergence: softmax each K x K channel, then
    entry (i, j) = log10(1 + KL(p_i || p_j)) with natural-log KL.

    The diagonal is exactly zero; the matrix is generally asymmetric and both
    directions are emitted as-is.
    """
    chans = kernel_channels(kernel)
    n = min(n_channels or DEFAULT_CHANNELS, chans.shape[0])
    flat = chans[:n].reshape(n, -1).astype(np.float64)
    z = flat - flat.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    logp = np.log(p)  # softmax output is strictly positive
    ent = (p * logp).sum(axis=1)
    kl = ent[:, None] - p @ logp.T
    np.fill_diagonal(kl, 0.0)      # KL(p, p) == 0 identically
    kl = np.maximum(kl, 0.0)       # clip float residue; KL is non-negative
    values = np.log10(1.0 + kl)
    return SquareMatrix(values=values, layer=name, statistic=statistic,
                        meta={"channels": n, "kl_base": "natural",
                              "display_transform": "log10(1 + kl)"})


def redundancy_summary(w_b: Array, w_t: Array,
                       n_channels: Optional[int] = None) -> tuple[float, float]:
    """Mean off-diagonal redundancy entries for (basis, transformed) kernels."""
    mb = kl_redundancy(w_b, n_channels)
    mt = kl_redundancy(w_t, n_channels)
    return mb.mean_offdiagonal(), mt.mean_offdiagonal()


def skeleton_magnitude(kernel: Array) -> Array:
    """Average |weight| at each K x K position over all kernel channels,
    max-normalized so the strongest position reads 1.000."""
    chans = kernel_channels(kernel)
    mag = np.abs(chans).mean(axis=0)
    peak = mag.max()
    if peak == 0.0:
        raise AnalysisError("all-zero kernel: skeleton normalization undefined")
    return (mag / peak).astype(np.float64)


def delta_weights(w_t: Array, w_b: Array) -> Array:
    """Increment the transformation learned on top of the basis: W_t - W_b."""
    if w_t.shape != w_b.shape:
        raise ShapeError(f"shape mismatch: {w_t.shape} vs {w_b.shape}")
    return w_t - w_b


# loss landscape ---------------------------------------------------------------

def filter_normalized_direction(params: dict, entries: list[tuple[str, str]],
                                rng: np.random.Generator) -> dict:
    """Gaussian direction with every filter rescaled to the norm of the
    matching model filter (whole-array norm for rank-0/1 parameters)."""
    direction = {}
    for name, role in entries:
        w = params[name][role]
        d = rng.standard_normal(w.shape).astype(w.dtype)
        if w.ndim >= 2:
            axes = tuple(range(1, w.ndim))
            wn = np.sqrt((w.astype(np.float64) ** 2).sum(axis=axes))
            dn = np.sqrt((d.astype(np.float64) ** 2).sum(axis=axes))
            scale = (wn / (dn + NORM_EPS)).astype(w.dtype)
            d *= scale.reshape((-1,) + (1,) * (w.ndim - 1))
        else:
            wn = float(np.linalg.norm(w))
            d *= w.dtype.type(wn / (np.linalg.norm(d) + NORM_EPS))
        direction[(name, role)] = d
    return direction


def perturbed_loss_grid(params: dict, d1: dict, d2: dict,
                        loss_fn: Callable[[dict], float],
                        alphas: Array, betas: Array) -> Array:
    """Evaluate loss_fn at params + a*d1 + b*d2 over the grid.

    Cells where the loss comes out non-finite are recorded as +inf. a = b = 0
    evaluates the unperturbed parameters bit-exactly.
    """
    values = np.full((len(alphas), len(betas)), np.inf)
    probe = {name: dict(roles) for name, roles in params.items()}
    for ia, a in enumerate(alphas):
        a = float(a)  # weak scalars keep float32 parameters float32
        for ib, b in enumerate(betas):
            b = float(b)
            for (name, role), dd in d1.items():
                probe[name][role] = params[name][role] + a * dd + b * d2[(name, role)]
            try:
                v = loss_fn(probe)
                values[ia, ib] = v if np.isfinite(v) else np.inf
            except NonFiniteError:
                values[ia, ib] = np.inf
    return values


def fold_inference_ops(graph: ModelGraph, params: dict) -> list[tuple]:
    """Rewrite the graph for inference: batchnorm after a conv folds into the
    conv's weight and bias (scale * W, shift), refocusing layers collapse to
    their transformed weights. Exact up to float re-association."""
    ops = []
    layers = graph.layers
    i = 0
    while i < len(layers):
        d = layers[i]
        roles = params[d.name]
        if d.kind in ("conv", "refconv"):
            if d.kind == "conv":
                w = roles["weight"]
            else:
                w = refocusing_transform(refconv_layer_from_params(d, roles))
            b = roles.get("bias")
            if i + 1 < len(layers) and layers[i + 1].kind == "batchnorm":
                bn = params[layers[i + 1].name]
                scale = bn["gamma"] / np.sqrt(bn["running_var"] + BN_EPS)
                shift = bn["beta"] - bn["running_mean"] * scale
                w = w * scale.reshape(-1, 1, 1, 1)
                b = shift if b is None else scale * b + shift
                i += 1
            ops.append(("conv", d.spec, w, b))
        elif d.kind == "batchnorm":  # not preceded by a conv: plain affine
            scale = roles["gamma"] / np.sqrt(roles["running_var"] + BN_EPS)
            shift = roles["beta"] - roles["running_mean"] * scale
            ops.append(("affine", scale, shift))
        elif d.kind == "relu":
            ops.append(("relu",))
        elif d.kind == "global_pool":
            ops.append(("pool",))
        elif d.kind == "linear":
            ops.append(("linear", roles["weight"], roles["bias"]))
        i += 1
    return ops


def folded_forward(ops: list[tuple], x: Array) -> Array:
    from . import ops as O
    from .tensor import conv2d_forward
    out = x
    for op in ops:
        kind = op[0]
        if kind == "conv":
            _, spec, w, b = op
            out = conv2d_forward(out, w, spec, b)
        elif kind == "affine":
            out = out * op[1][None, :, None, None] + op[2][None, :, None, None]
        elif kind == "relu":
            out = np.maximum(out, 0.0, out=out)
        elif kind == "pool":
            out = O.global_avg_pool_forward(out)
        else:
            out = O.linear_forward(out, op[1], op[2])
    return out


def subset_loss_fn(graph: ModelGraph, data: Dataset, batch_size: int = 128,
                   batch_transform=None):
    """Mean cross-entropy over a fixed subset, batchnorm in inference mode
    (folded into the conv weights; exact up to float re-association)."""
    def loss_fn(params: dict) -> float:
        ops = fold_inference_ops(graph, params)
        dtype = next(iter(next(iter(params.values())).values())).dtype
        total = 0.0
        for start in range(0, len(data), batch_size):
            xb = normalize(data.images[start:start + batch_size], data.mean, data.std)
            yb = data.labels[start:start + batch_size]
            xb = xb.astype(dtype)
            if batch_transform is not None:
                xb = batch_transform(xb)
            logits = folded_forward(ops, xb)
            loss, _ = softmax_crossentropy(logits, yb)
            total += loss * len(yb)
        return total / len(data)
    return loss_fn


def loss_landscape(checkpoint_or_params, graph: ModelGraph, data_subset: Dataset,
                   resolution: int = 25, span: float = 1.0, seed: int = 0,
                   batch_size: int = 256, batch_transform=None) -> LandscapeGrid:
    """Loss surface on the plane spanned by two filter-normalized random
    directions over all trainable parameters. Batchnorm statistics stay at the
    checkpoint's running values; the center cell is the model's actual loss."""
    if resolution < 3 or resolution % 2 == 0:
        raise AnalysisError("resolution must be odd and >= 3 so the center is on-grid")
    params = getattr(checkpoint_or_params, "params", checkpoint_or_params)
    entries = trainable_entries(graph)
    ss = np.random.SeedSequence([seed, 0x1A2D])
    rng1, rng2 = (np.random.default_rng(c) for c in ss.spawn(2))
    d1 = filter_normalized_direction(params, entries, rng1)
    d2 = filter_normalized_direction(params, entries, rng2)
    alphas = np.linspace(-span, span, resolution)
    betas = np.linspace(-span, span, resolution)
    loss_fn = subset_loss_fn(graph, data_subset, batch_size, batch_transform)
    values = perturbed_loss_grid(params, d1, d2, loss_fn, alphas, betas)
    center = float(values[resolution // 2, resolution // 2])
    return LandscapeGrid(values=values, alphas=alphas, betas=betas, span=span,
                         resolution=resolution, seed=seed, center_loss=center,
                         meta={"subset_size": len(data_subset),
                               "normalization": "filter"})


# emission ----------------------------------------------------------------------

def save_matrix(matrix: SquareMatrix, csv_path) -> Path:
    path = Path(csv_path)
    np.savetxt(path, matrix.values, delimiter=",", fmt="%.10g")
    sidecar = {"layer": matrix.layer, "statistic": matrix.statistic,
               "order": matrix.order, **matrix.meta}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def save_grid(grid: LandscapeGrid, csv_path) -> Path:
    path = Path(csv_path)
    np.savetxt(path, grid.values, delimiter=",", fmt="%.10g")
    sidecar = {"statistic": "loss_landscape", "resolution": grid.resolution,
               "span": grid.span, "seed": grid.seed, "center_loss": grid.center_loss,
               "alphas": grid.alphas.tolist(), **grid.meta}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path
