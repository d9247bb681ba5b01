"""Command-line front end for the whole pipeline.

Each run command writes a self-contained output directory: the resolved
config, a checkpoint (manifest + raw float32 blobs), the per-epoch training
log as CSV, and analysis CSV/JSON where applicable.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis as anl
from . import data as D
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config, save_resolved
from .layer import cost_report
from .models import (ModelGraph, SurgeryOptions, build_zoo, graph_from_checkpoint,
                     merge_model)
from .tensor import ConvSpec, ShapeError
from .training import (DivergenceError, TrainConfig, evaluate, finetune_arm,
                       pretrain, refocus_train, retrain_arm)

RESIZE_FACTOR = 7  # 32 -> 224


class CliError(RuntimeError):
    pass


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(seed=cfg["seed"], data_fraction=cfg["data"]["fraction"], **t)


def _load_data(cfg: dict):
    d = cfg["data"]
    if d["kind"] == "cifar10":
        train, test = D.load_cifar10(d["path"])
    elif d["kind"] == "synth":
        train, test = D.synth_texture_pair(d["n_train"], d["n_test"], d["classes"],
                                           cfg["seed"], noise=d["noise"])
    else:
        train = D.synth_blobs(d["n_train"], d["classes"], cfg["seed"])
        test = D.synth_blobs(d["n_test"], d["classes"], cfg["seed"] + 100_003)
        test = replace(test, mean=train.mean, std=train.std, split="test")
    return train, test


def _pipeline_pieces(cfg: dict):
    graph = build_zoo(cfg["model"])
    transform = None
    if cfg["data"]["resize_224"]:
        c, h, w = graph.input_shape
        graph = ModelGraph(layers=graph.layers,
                           input_shape=(c, h * RESIZE_FACTOR, w * RESIZE_FACTOR),
                           num_classes=graph.num_classes, model_id=graph.model_id)
        transform = lambda xb: D.upsample_nearest(xb, RESIZE_FACTOR)
    policy = D.AugmentPolicy() if cfg["data"]["augment"] else D.AugmentPolicy.disabled()
    return graph, policy, transform


def _surgery_options(cfg: dict) -> SurgeryOptions:
    return SurgeryOptions(seed=cfg["seed"], **cfg["surgery"])


def _write_run(out_dir, cfg, ckpt, log) -> None:
    out = Path(out_dir)
    save_resolved(cfg, out)
    save_checkpoint(ckpt, out / "checkpoint")
    log.to_csv(out / "trainlog.csv")


def _require_stage(ckpt, *stages) -> None:
    if ckpt.stage not in stages:
        raise CliError(f"checkpoint stage is {ckpt.stage!r}, need one of {stages}")


def cmd_pretrain(args) -> int:
    cfg = _apply_seed(load_config(args.config), args)
    graph, policy, transform = _pipeline_pieces(cfg)
    data = _load_data(cfg)
    ckpt, log = pretrain(graph, data, _train_config(cfg),
                         augment_policy=policy, batch_transform=transform)
    ckpt.meta["resolved_config"] = cfg
    _write_run(args.out, cfg, ckpt, log)
    print(f"pretrain done: val_acc={log.records[-1].val_acc:.4f}" if log.records
          else "pretrain done (0 epochs)")
    return 0


def cmd_refocus(args) -> int:
    cfg = _apply_seed(load_config(args.config), args)
    base = _open_checkpoint(args.checkpoint)
    _require_stage(base, "baseline")
    cfg["model"] = base.model_id
    graph, policy, transform = _pipeline_pieces(cfg)
    data = _load_data(cfg)
    ckpt, log = refocus_train(base, graph, data, _train_config(cfg),
                              _surgery_options(cfg),
                              augment_policy=policy, batch_transform=transform)
    ckpt.meta["resolved_config"] = cfg
    _write_run(args.out, cfg, ckpt, log)
    print(f"refocus done: val_acc={log.records[-1].val_acc:.4f}" if log.records
          else "refocus done (0 epochs)")
    return 0


def _continuation(arm, label):
    def run(args) -> int:
        cfg = _apply_seed(load_config(args.config), args)
        base = _open_checkpoint(args.checkpoint)
        _require_stage(base, "baseline", "merged")
        cfg["model"] = base.model_id
        graph, policy, transform = _pipeline_pieces(cfg)
        data = _load_data(cfg)
        ckpt, log = arm(base, graph, data, _train_config(cfg),
                        augment_policy=policy, batch_transform=transform)
        ckpt.meta["resolved_config"] = cfg
        _write_run(args.out, cfg, ckpt, log)
        print(f"{label} done: val_acc={log.records[-1].val_acc:.4f}" if log.records
              else f"{label} done (0 epochs)")
        return 0
    return run


def cmd_merge(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    _require_stage(ckpt, "refconv")
    graph = graph_from_checkpoint(ckpt)
    _, merged = merge_model(graph, ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(merged, out / "checkpoint")
    print(f"merged {ckpt.model_id}: {merged.param_count()} parameters")
    return 0


def cmd_eval(args) -> int:
    cfg = _apply_seed(load_config(args.config), args)
    ckpt = _open_checkpoint(args.checkpoint)
    cfg["model"] = ckpt.model_id
    graph = graph_from_checkpoint(ckpt)
    _, policy, transform = _pipeline_pieces(cfg)
    _, test = _load_data(cfg)
    loss, acc = evaluate(ckpt, graph, test, batch_transform=transform)
    print(f"val_loss={loss:.6f} top1={acc:.4f} ({len(test)} samples, "
          f"stage={ckpt.stage})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(
            {"val_loss": loss, "top1": acc, "samples": len(test),
             "stage": ckpt.stage, "model_id": ckpt.model_id}, indent=2))
    return 0


def cmd_cost(args) -> int:
    spec = ConvSpec(c_in=args.c_in, c_out=args.c_out, kernel=args.kernel,
                    groups=args.groups)
    rep = cost_report(spec, batch=args.batch, h=args.height, w=args.width,
                      map_kernel=args.map_kernel)
    print(f"original conv:      {rep.flops_original:>16,} MACs  "
          f"{rep.params_original:>12,} params")
    print(f"refocus transform:  {rep.flops_refocus:>16,} MACs  "
          f"{rep.params_refocus:>12,} params")
    print(f"training overhead:  {rep.flops_refocus / rep.flops_original:.6%} extra MACs")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cost.json").write_text(json.dumps({
            "flops_original": rep.flops_original,
            "flops_refocus": rep.flops_refocus,
            "params_original": rep.params_original,
            "params_refocus": rep.params_refocus}, indent=2))
    return 0


def _refconv_layer(ckpt, graph, layer_name):
    from .models import refconv_layer_from_params
    desc = graph.by_name(layer_name)
    if desc.kind != "refconv":
        raise CliError(f"layer {layer_name!r} is {desc.kind}, not refconv")
    return refconv_layer_from_params(desc, ckpt.params[layer_name])


def _analysis_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_analyze_connection(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    _require_stage(ckpt, "refconv")
    graph = graph_from_checkpoint(ckpt)
    layer = _refconv_layer(ckpt, graph, args.layer)
    m = anl.connection_degree(layer, args.channels, name=args.layer)
    out = _analysis_out(args)
    anl.save_matrix(m, out / f"connection__{args.layer}.csv")
    print(f"connection degree {m.order}x{m.order} -> {out}")
    return 0


def cmd_analyze_kl(args) -> int:
    from .layer import refocusing_transform
    ckpt = _open_checkpoint(args.checkpoint)
    graph = graph_from_checkpoint(ckpt)
    out = _analysis_out(args)
    desc = graph.by_name(args.layer)
    if desc.kind == "refconv":
        layer = _refconv_layer(ckpt, graph, args.layer)
        w_b = layer.basis.w_b
        w_t = refocusing_transform(layer)
        mb = anl.kl_redundancy(w_b, args.channels, name=args.layer, statistic="kl_basis")
        mt = anl.kl_redundancy(w_t, args.channels, name=args.layer,
                               statistic="kl_transformed")
        anl.save_matrix(mb, out / f"kl_basis__{args.layer}.csv")
        anl.save_matrix(mt, out / f"kl_transformed__{args.layer}.csv")
        summary = {"layer": args.layer, "mean_offdiag_basis": mb.mean_offdiagonal(),
                   "mean_offdiag_transformed": mt.mean_offdiagonal()}
        (out / f"kl_summary__{args.layer}.json").write_text(json.dumps(summary, indent=2))
        print(f"kl: basis={summary['mean_offdiag_basis']:.6f} "
              f"transformed={summary['mean_offdiag_transformed']:.6f}")
    elif desc.kind == "conv":
        m = anl.kl_redundancy(ckpt.params[args.layer]["weight"], args.channels,
                              name=args.layer)
        anl.save_matrix(m, out / f"kl__{args.layer}.csv")
        print(f"kl {m.order}x{m.order} mean_offdiag={m.mean_offdiagonal():.6f}")
    else:
        raise CliError(f"layer {args.layer!r} has no kernel")
    return 0


def cmd_analyze_skeleton(args) -> int:
    from .layer import refocusing_transform
    ckpt = _open_checkpoint(args.checkpoint)
    graph = graph_from_checkpoint(ckpt)
    out = _analysis_out(args)
    desc = graph.by_name(args.layer)
    if desc.kind == "refconv":
        layer = _refconv_layer(ckpt, graph, args.layer)
        w_b = layer.basis.w_b
        w_t = refocusing_transform(layer)
        pieces = {"basis": w_b, "transformed": w_t,
                  "delta": anl.delta_weights(w_t, w_b)}
    elif desc.kind == "conv":
        pieces = {"weight": ckpt.params[args.layer]["weight"]}
    else:
        raise CliError(f"layer {args.layer!r} has no kernel")
    for tag, kernel in pieces.items():
        mag = anl.skeleton_magnitude(kernel)
        path = out / f"skeleton_{tag}__{args.layer}.csv"
        np.savetxt(path, mag, delimiter=",", fmt="%.10g")
        path.with_suffix(".json").write_text(json.dumps(
            {"layer": args.layer, "statistic": f"skeleton_{tag}",
             "kernel": int(mag.shape[0])}, indent=2))
    print(f"skeleton maps ({', '.join(pieces)}) -> {out}")
    return 0


def cmd_analyze_landscape(args) -> int:
    cfg = _apply_seed(load_config(args.config), args)
    ckpt = _open_checkpoint(args.checkpoint)
    cfg["model"] = ckpt.model_id
    graph = graph_from_checkpoint(ckpt)
    _, _, transform = _pipeline_pieces(cfg)
    _, test = _load_data(cfg)
    a = cfg["analysis"]
    resolution = args.resolution if args.resolution else a["resolution"]
    span = args.span if args.span else a["span"]
    subset = D.subset(test, min(1.0, a["subset"] / len(test)), cfg["seed"]) \
        if len(test) > a["subset"] else test
    grid = anl.loss_landscape(ckpt, graph, subset, resolution=resolution, span=span,
                              seed=cfg["seed"], batch_size=a["batch_size"],
                              batch_transform=transform)
    out = _analysis_out(args)
    anl.save_grid(grid, out / "landscape.csv")
    print(f"landscape {resolution}x{resolution} center_loss={grid.center_loss:.6f}")
    return 0


def _open_checkpoint(path):
    p = Path(path)
    if (p / "checkpoint").is_dir():
        p = p / "checkpoint"
    return load_checkpoint(p)


def _apply_seed(cfg: dict, args) -> dict:
    if getattr(args, "seed", None) is not None:
        cfg = dict(cfg)
        cfg["seed"] = args.seed
    return cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="refconv",
        description="Frozen-kernel refocusing re-parameterization: train, merge, "
                    "and inspect small CNNs.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p, checkpoint=False, out_required=True):
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="run directory or checkpoint directory")
        p.add_argument("--out", required=out_required, default=None,
                       help="output directory")

    p = sub.add_parser("pretrain", help="train a baseline from scratch")
    add_common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("refocus", help="wrap convs, freeze basis, train map weights")
    add_common(p, checkpoint=True)
    p.set_defaults(fn=cmd_refocus)

    p = sub.add_parser("retrain", help="continue baseline training (comparison arm)")
    add_common(p, checkpoint=True)
    p.set_defaults(fn=_continuation(retrain_arm, "retrain"))

    p = sub.add_parser("finetune", help="constant-1e-4 finetuning (comparison arm)")
    add_common(p, checkpoint=True)
    p.set_defaults(fn=_continuation(finetune_arm, "finetune"))

    p = sub.add_parser("merge", help="collapse refocusing weights into plain convs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_merge)

    p = sub.add_parser("eval", help="loss/top-1 on the evaluation split")
    add_common(p, checkpoint=True, out_required=False)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("cost", help="MAC/parameter accounting for one wrapped conv")
    p.add_argument("--c-in", type=int, required=True)
    p.add_argument("--c-out", type=int, required=True)
    p.add_argument("--kernel", type=int, required=True)
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--map-kernel", type=int, default=3)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_cost)

    pa = sub.add_parser("analyze", help="kernel diagnostics")
    asub = pa.add_subparsers(dest="analysis", required=True)

    p = asub.add_parser("connection", help="connection-degree matrix (depthwise)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze_connection)

    p = asub.add_parser("kl", help="KL channel-redundancy matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze_kl)

    p = asub.add_parser("skeleton", help="kernel skeleton magnitude maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze_skeleton)

    p = asub.add_parser("landscape", help="filter-normalized loss-landscape slice")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--span", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze_landscape)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, CheckpointError, ShapeError, DivergenceError,
            D.DataError, anl.AnalysisError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
