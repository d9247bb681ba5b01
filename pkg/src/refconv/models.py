"""Layer-descriptor graphs, the desk-scale model zoo, and conv->refconv surgery.

Models are flat ordered lists of descriptors so that replacing a conv by its
refocusing counterpart (and merging it back) is purely mechanical.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .layer import (BasisWeights, RefConvLayer, RefocusingWeights,
                    init_refocusing_weights, map_conv_spec, merge)
from .tensor import ConvSpec, ShapeError

KINDS = ("conv", "refconv", "batchnorm", "relu", "global_pool", "linear")

ZOO_IDS = ("tiny_dw", "tiny_group", "tiny_dense")

INPUT_SHAPE = (3, 32, 32)
NUM_CLASSES = 10


@dataclass(frozen=True)
class LayerDescriptor:
    kind: str
    name: str
    spec: Optional[ConvSpec] = None       # conv / refconv
    features: Optional[int] = None        # batchnorm
    in_features: Optional[int] = None     # linear
    out_features: Optional[int] = None    # linear
    has_bias: bool = False                # conv / refconv
    map_kernel: int = 3                   # refconv
    use_shortcut: bool = True             # refconv
    basis_trainable: bool = False         # refconv
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if not self.name:
            raise ShapeError("layer needs a name")
        if self.kind in ("conv", "refconv") and self.spec is None:
            raise ShapeError(f"{self.name}: conv kinds need a spec")
        if self.kind == "refconv" and self.spec.kernel < 2:
            raise ShapeError(f"{self.name}: 1x1 convs are never wrapped (K >= 2 required)")
        if self.kind == "batchnorm" and not self.features:
            raise ShapeError(f"{self.name}: batchnorm needs a channel count")
        if self.kind == "linear" and not (self.in_features and self.out_features):
            raise ShapeError(f"{self.name}: linear needs in/out features")


@dataclass
class ModelGraph:
    layers: tuple
    input_shape: tuple  # (c, h, w)
    num_classes: int
    model_id: str = ""

    def __post_init__(self):
        self.layers = tuple(self.layers)
        names = [d.name for d in self.layers]
        if len(set(names)) != len(names):
            raise ShapeError("layer names must be unique")
        self._check_shapes()

    def _check_shapes(self):
        c, h, w = self.input_shape
        vec = None  # set once features are pooled to a vector
        linear_count = 0
        for d in self.layers:
            if d.kind in ("conv", "refconv"):
                if vec is not None:
                    raise ShapeError(f"{d.name}: conv after pooling")
                if d.spec.c_in != c:
                    raise ShapeError(f"{d.name}: expects {d.spec.c_in} channels, gets {c}")
                h, w = d.spec.out_hw(h, w)
                c = d.spec.c_out
            elif d.kind == "batchnorm":
                if vec is not None or d.features != c:
                    raise ShapeError(f"{d.name}: batchnorm features {d.features} != {c}")
            elif d.kind == "relu":
                pass
            elif d.kind == "global_pool":
                if vec is not None:
                    raise ShapeError(f"{d.name}: duplicate pooling")
                vec = c
            elif d.kind == "linear":
                linear_count += 1
                if vec is None or d.in_features != vec:
                    raise ShapeError(f"{d.name}: linear expects {d.in_features}, gets {vec}")
                vec = d.out_features
        if linear_count != 1 or self.layers[-1].kind != "linear":
            raise ShapeError("graph needs exactly one terminal linear classifier")
        if vec != self.num_classes:
            raise ShapeError(f"classifier emits {vec}, expected {self.num_classes} classes")

    def by_name(self, name: str) -> LayerDescriptor:
        for d in self.layers:
            if d.name == name:
                return d
        raise KeyError(name)

    def conv_layers(self) -> list[LayerDescriptor]:
        return [d for d in self.layers if d.kind in ("conv", "refconv")]


def _block_dw(name, c_in, c_out, stride):
    return [
        LayerDescriptor("conv", f"{name}_dw",
                        spec=ConvSpec(c_in, c_in, 3, stride=stride, padding=1, groups=c_in)),
        LayerDescriptor("batchnorm", f"{name}_bn1", features=c_in),
        LayerDescriptor("relu", f"{name}_relu1"),
        LayerDescriptor("conv", f"{name}_pw", spec=ConvSpec(c_in, c_out, 1)),
        LayerDescriptor("batchnorm", f"{name}_bn2", features=c_out),
        LayerDescriptor("relu", f"{name}_relu2"),
    ]


def _block_group(name, c_in, c_out, stride):
    return [
        LayerDescriptor("conv", f"{name}_gc",
                        spec=ConvSpec(c_in, c_in, 3, stride=stride, padding=1, groups=2)),
        LayerDescriptor("batchnorm", f"{name}_bn1", features=c_in),
        LayerDescriptor("relu", f"{name}_relu1"),
        LayerDescriptor("conv", f"{name}_pw", spec=ConvSpec(c_in, c_out, 1)),
        LayerDescriptor("batchnorm", f"{name}_bn2", features=c_out),
        LayerDescriptor("relu", f"{name}_relu2"),
    ]


def build_zoo(model_id: str) -> ModelGraph:
    """Desk-scale nets covering the three conv regimes.

    tiny_dw:    six depthwise-separable blocks (3x3 DW + 1x1 PW), ~0.1M params.
    tiny_group: pointwise stem, then six blocks with 3x3 group-2 convs.
    tiny_dense: four plain dense 3x3 convs. All take 3x32x32, 10 classes.
    """
    layers: list[LayerDescriptor] = []
    if model_id == "tiny_dw":
        plan = [(3, 32, 1), (32, 64, 2), (64, 128, 1), (128, 128, 2), (128, 192, 1), (192, 192, 2)]
        for i, (ci, co, s) in enumerate(plan, 1):
            layers += _block_dw(f"b{i}", ci, co, s)
        feat = 192
    elif model_id == "tiny_group":
        layers += [
            LayerDescriptor("conv", "stem_pw", spec=ConvSpec(3, 16, 1)),
            LayerDescriptor("batchnorm", "stem_bn", features=16),
            LayerDescriptor("relu", "stem_relu"),
        ]
        plan = [(16, 16, 1), (16, 32, 2), (32, 32, 1), (32, 64, 2), (64, 64, 1), (64, 64, 2)]
        for i, (ci, co, s) in enumerate(plan, 1):
            layers += _block_group(f"b{i}", ci, co, s)
        feat = 64
    elif model_id == "tiny_dense":
        plan = [(3, 24, 1), (24, 48, 2), (48, 48, 1), (48, 96, 2)]
        for i, (ci, co, s) in enumerate(plan, 1):
            layers += [
                LayerDescriptor("conv", f"c{i}", spec=ConvSpec(ci, co, 3, stride=s, padding=1)),
                LayerDescriptor("batchnorm", f"c{i}_bn", features=co),
                LayerDescriptor("relu", f"c{i}_relu"),
            ]
        feat = 96
    else:
        raise ValueError(f"unknown model id {model_id!r} (want one of {ZOO_IDS})")
    layers += [
        LayerDescriptor("global_pool", "pool"),
        LayerDescriptor("linear", "fc", in_features=feat, out_features=NUM_CLASSES),
    ]
    return ModelGraph(layers=tuple(layers), input_shape=INPUT_SHAPE,
                      num_classes=NUM_CLASSES, model_id=model_id)


@dataclass(frozen=True)
class SurgeryOptions:
    init: str = "xavier"          # refocusing-weight init: xavier | zero
    shortcut: bool = True         # identity mapping in the transform
    basis: str = "pretrained"     # pretrained | random
    basis_trainable: bool = False
    map_kernel: int = 3
    freeze_untouched: bool = False  # freeze everything except refocusing weights
    seed: int = 0

    def __post_init__(self):
        if self.init not in ("xavier", "zero"):
            raise ValueError(f"init must be xavier|zero, got {self.init!r}")
        if self.basis not in ("pretrained", "random"):
            raise ValueError(f"basis must be pretrained|random, got {self.basis!r}")


def check_checkpoint_matches(graph: ModelGraph, ckpt: Checkpoint) -> None:
    from .network import param_shapes  # local import to avoid a cycle
    if ckpt.model_id and graph.model_id and ckpt.model_id != graph.model_id:
        raise CheckpointError(f"checkpoint is for {ckpt.model_id!r}, graph is {graph.model_id!r}")
    for d in graph.layers:
        want = param_shapes(d)
        got = {r: a.shape for r, a in ckpt.params.get(d.name, {}).items()}
        if {r: tuple(s) for r, s in got.items()} != want:
            raise CheckpointError(f"layer {d.name}: checkpoint roles {got} != expected {want}")


def surgery(graph: ModelGraph, checkpoint: Checkpoint,
            options: SurgeryOptions = SurgeryOptions()) -> tuple[ModelGraph, Checkpoint]:
    """Replace every K>=2 conv with its refocusing counterpart.

    Basis weights come bit-exact from the checkpoint (or are re-drawn for the
    random-basis ablation) and stay frozen unless basis_trainable; pointwise
    convs, batchnorms and the classifier are untouched and stay trainable.
    """
    if graph.model_id and checkpoint.stage not in ("baseline",):
        raise CheckpointError(f"surgery expects a baseline checkpoint, got stage "
                              f"{checkpoint.stage!r}")
    check_checkpoint_matches(graph, checkpoint)
    rng = np.random.default_rng(np.random.SeedSequence([options.seed, 0x5EED]))
    new_layers = []
    new_params: dict[str, dict[str, np.ndarray]] = {}
    for d in graph.layers:
        src = checkpoint.params.get(d.name, {})
        if d.kind == "conv" and d.spec.kernel >= 2:
            nd = LayerDescriptor(
                "refconv", d.name, spec=d.spec, has_bias=d.has_bias,
                map_kernel=options.map_kernel, use_shortcut=options.shortcut,
                basis_trainable=options.basis_trainable, trainable=True)
            if options.basis == "pretrained":
                basis = src["weight"].copy()
            else:
                fan_out = d.spec.c_out * d.spec.kernel ** 2 // d.spec.groups
                basis = (rng.standard_normal(d.spec.weight_shape())
                         * np.sqrt(2.0 / fan_out)).astype(src["weight"].dtype)
            ref = init_refocusing_weights(d.spec, options.map_kernel, options.init,
                                          rng, dtype=basis.dtype)
            roles = {"basis": basis, "refocus": ref.w_r}
            if d.has_bias:
                roles["bias"] = src["bias"].copy()
            new_layers.append(nd)
            new_params[d.name] = roles
        else:
            trainable = d.trainable and not options.freeze_untouched
            new_layers.append(replace(d, trainable=trainable))
            new_params[d.name] = {r: a.copy() for r, a in src.items()}
    new_graph = ModelGraph(layers=tuple(new_layers), input_shape=graph.input_shape,
                           num_classes=graph.num_classes, model_id=graph.model_id)
    new_ckpt = Checkpoint(
        model_id=checkpoint.model_id, stage="refconv", precision=checkpoint.precision,
        seed=checkpoint.seed, params=new_params,
        meta={**checkpoint.meta, "surgery": {
            "init": options.init, "shortcut": options.shortcut, "basis": options.basis,
            "basis_trainable": options.basis_trainable, "map_kernel": options.map_kernel,
            "freeze_untouched": options.freeze_untouched, "seed": options.seed}})
    return new_graph, new_ckpt


def graph_from_checkpoint(ckpt: Checkpoint) -> ModelGraph:
    """Rebuild the runtime graph for a checkpoint from its manifest metadata."""
    base = build_zoo(ckpt.model_id)
    if ckpt.stage in ("baseline", "merged"):
        return base
    sop = ckpt.meta.get("surgery", {})
    options = SurgeryOptions(**{k: sop[k] for k in sop})
    layers = []
    for d in base.layers:
        if d.kind == "conv" and d.spec.kernel >= 2:
            layers.append(LayerDescriptor(
                "refconv", d.name, spec=d.spec, has_bias=d.has_bias,
                map_kernel=options.map_kernel, use_shortcut=options.shortcut,
                basis_trainable=options.basis_trainable, trainable=True))
        else:
            layers.append(replace(d, trainable=d.trainable and not options.freeze_untouched))
    return ModelGraph(layers=tuple(layers), input_shape=base.input_shape,
                      num_classes=base.num_classes, model_id=base.model_id)


def refconv_layer_from_params(d: LayerDescriptor, roles: dict) -> RefConvLayer:
    """Assemble the math object for one refconv descriptor."""
    mspec = map_conv_spec(d.spec, d.map_kernel)
    return RefConvLayer(
        spec=d.spec,
        basis=BasisWeights(roles["basis"]),
        refocus=RefocusingWeights(roles["refocus"], d.map_kernel, mspec.groups),
        use_identity_shortcut=d.use_shortcut,
        bias=roles.get("bias"))


def merge_model(graph: ModelGraph, checkpoint: Checkpoint) -> tuple[ModelGraph, Checkpoint]:
    """Collapse every refconv back to a plain conv (inverse of surgery).

    The resulting descriptor list matches the pre-surgery graph; the merged
    checkpoint carries no refocusing blobs.
    """
    if checkpoint.stage != "refconv":
        raise CheckpointError(f"merge expects a refconv checkpoint, got {checkpoint.stage!r}")
    check_checkpoint_matches(graph, checkpoint)
    new_layers = []
    new_params = {}
    for d in graph.layers:
        src = checkpoint.params.get(d.name, {})
        if d.kind == "refconv":
            layer = refconv_layer_from_params(d, src)
            w_t, bias = merge(layer)
            roles = {"weight": w_t}
            if bias is not None:
                roles["bias"] = bias
            new_layers.append(LayerDescriptor("conv", d.name, spec=d.spec,
                                              has_bias=d.has_bias, trainable=True))
            new_params[d.name] = roles
        else:
            new_layers.append(replace(d, trainable=True))
            new_params[d.name] = {r: a.copy() for r, a in src.items()}
    new_graph = ModelGraph(layers=tuple(new_layers), input_shape=graph.input_shape,
                           num_classes=graph.num_classes, model_id=graph.model_id)
    meta = {k: v for k, v in checkpoint.meta.items() if k != "surgery"}
    new_ckpt = Checkpoint(model_id=checkpoint.model_id, stage="merged",
                          precision=checkpoint.precision, seed=checkpoint.seed,
                          params=new_params, meta=meta)
    return new_graph, new_ckpt
