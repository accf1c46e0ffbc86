"""``pcp`` command line: generate, train, prune, eval, pseudo-label, finetune, inspect."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from pcp import __version__
from pcp.finetune import TrainConfig, sgd_finetune, write_train_log
from pcp.graph import accuracy, flops, layer_flops
from pcp.io import FormatError, load_dataset, load_model, save_dataset, save_model
from pcp.orchestrator import FSchedule, NoProgressError, PruneConfig, remained_percentages, run_pcp
from pcp.prune import LambdaRamp
from pcp.sampler import SamplerConfig
from pcp.toybench import GeneratorSpec, build_reference_model, generate_splits
from pcp.transfer import MixConfig, PseudoLabeledSet, build_mixed_sets, pseudo_label

log = logging.getLogger("pcp")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(Exception):
    pass


def _load_data(path, split):
    """A dataset directory, or a benchmark directory holding ``<split>/``."""
    path = Path(path)
    if (path / "data_manifest.json").is_file():
        return load_dataset(path)
    if (path / split / "data_manifest.json").is_file():
        return load_dataset(path / split)
    raise FileNotFoundError(f"no dataset found at {path} (looked for data_manifest.json and {split}/)")


def _emit(args, payload, text):
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=1))
    else:
        print(text)


# -- generate ------------------------------------------------------------------

def cmd_generate(args):
    spec = GeneratorSpec(
        n_train=args.n_train, n_val=args.n_val, n_test=args.n_test, noise=args.noise,
        jitter=args.jitter, brightness=args.brightness, contrast=args.contrast,
        background=args.background, domain=args.domain, seed=args.seed,
    )
    out = Path(args.out)
    for split, ds in generate_splits(spec).items():
        save_dataset(ds, out / split)
    (out / "generator.json").write_text(json.dumps(spec.__dict__, indent=1))
    print(f"wrote {spec.domain} benchmark (train/val/test) to {out}")
    return EXIT_OK


# -- train / finetune -------------------------------------------------------------

def _train_config(args):
    if args.lr < 0 or args.epochs < 1 or args.batch_size < 1:
        raise ConfigError("--lr must be >= 0, --epochs and --batch-size positive")
    return TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)


def _merged_train_set(paths):
    from pcp.transfer import Dataset

    sets = [_load_data(p, "train") for p in paths]
    if any(s.labels is None for s in sets):
        raise ConfigError("training data must be labelled")
    return Dataset(np.concatenate([s.images for s in sets]), np.concatenate([s.labels for s in sets]),
                   domain=sets[0].domain, name="train")


def cmd_train(args):
    cfg = _train_config(args)
    train = _merged_train_set(args.data)
    val = _load_data(args.val_data or args.data[0], "val")
    model = build_reference_model(args.arch, args.seed, image_size=train.images.shape[2],
                                  channels=train.images.shape[1])
    model, history = sgd_finetune(model, train, cfg, val=val)
    out = save_model(model, args.out)
    write_train_log(history, out / "train_log.csv")
    acc = history[-1]["val_accuracy"] if history else accuracy(model, val.images, val.labels)
    print(f"trained {args.arch}: val accuracy {acc:.4f}; saved to {out}")
    return EXIT_OK


def cmd_finetune(args):
    cfg = _train_config(args)
    model = load_model(args.model)
    train = _load_data(args.data, "train")
    if train.labels is None:
        raise ConfigError(f"{args.data} is unlabelled")
    val = None
    if args.val_data or (Path(args.data) / "val").is_dir():
        val = _load_data(args.val_data or args.data, "val")
    model, history = sgd_finetune(model, train, cfg, val=val)
    out = save_model(model, args.out)
    write_train_log(history, out / "train_log.csv")
    tail = f", val accuracy {history[-1]['val_accuracy']:.4f}" if history and "val_accuracy" in history[-1] else ""
    print(f"fine-tuned {len(history)} epochs{tail}; saved to {out}")
    return EXIT_OK


# -- eval / inspect -----------------------------------------------------------------

def cmd_eval(args):
    model = load_model(args.model)
    data = _load_data(args.data, args.split)
    if data.labels is None:
        raise ConfigError(f"dataset {args.data} has no labels; cannot evaluate accuracy")
    acc = accuracy(model, data.images, data.labels)
    payload = {"model": str(args.model), "data": str(args.data), "n": len(data), "accuracy": acc,
               "flops": flops(model)}
    _emit(args, payload, f"top-1 accuracy {acc:.4f} on {len(data)} samples; FLOPs (MACs) {payload['flops']}")
    return EXIT_OK


def _inspect_payload(model, original):
    per_layer = layer_flops(model)
    rows = []
    for i, layer in enumerate(model.layers):
        row = {"index": i, "kind": layer.kind, "name": layer.name, "output_shape": list(model.shapes[i])}
        if layer.weight is not None:
            row["weight_shape"] = list(layer.weight.shape)
            row["flops"] = per_layer[i]
        if i in model.selections:
            row["nnz"] = model.nnz(i)
            row["channels"] = int(len(model.selections[i]))
            row["remained_pct"] = 100.0 * model.nnz(i) / original.layers[i].in_channels
        rows.append(row)
    return {"name": model.name, "iteration": model.iteration, "flops": flops(model),
            "ratio": flops(original) / flops(model), "layers": rows}


def cmd_inspect(args):
    model = load_model(args.model)
    original = load_model(args.original) if args.original else model
    payload = _inspect_payload(model, original)
    lines = [f"{model.name} (iteration {model.iteration}): {payload['flops']} MACs, ratio {payload['ratio']:.3f}",
             f"{'idx':>3}  {'kind':<9} {'name':<14} {'weight':<16} {'MACs':>9}  {'nnz':>7}  remained"]
    for r in payload["layers"]:
        w = "x".join(map(str, r.get("weight_shape", []))) or "-"
        nnz = f"{r['nnz']}/{r['channels']}" if "nnz" in r else "-"
        pct = f"{r['remained_pct']:.1f}%" if "remained_pct" in r else ""
        lines.append(f"{r['index']:>3}  {r['kind']:<9} {r['name']:<14} {w:<16} {r.get('flops', ''):>9}  {nnz:>7}  {pct}")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


# -- pseudo-label -------------------------------------------------------------------

def cmd_pseudo_label(args):
    if not 0.0 <= args.threshold <= 1.0:
        raise ConfigError("--threshold must lie in [0, 1]")
    model = load_model(args.model)
    data = _load_data(args.data, args.split)
    pls = pseudo_label(model, data, args.threshold)
    if args.out:
        pls.save(args.out)
    payload = {"threshold": args.threshold, "count": len(pls), "total": len(data), **pls.to_json()}
    _emit(args, payload, f"{len(pls)} of {len(data)} samples pseudo-labelled at threshold {args.threshold}"
          + (f"; written to {args.out}" if args.out else ""))
    return EXIT_OK


# -- prune ----------------------------------------------------------------------------

PRUNE_DEFAULTS = {
    "target_ratio": 2.0,
    "top_n": 4,
    "f_early_frac": 0.30,
    "f_late_frac": 0.10,
    "f_cap": 40,
    "f_early_break": 2.0,
    "f_late_break": 5.0,
    "positions_per_image": 10,
    "sampler": "random",
    "variance_threshold": 0.0,
    "calib_count": 128,
    "target_share": 0.5,
    "val_fraction": 0.5,
    "seed": 0,
    "jobs": None,
}


def resolve_prune_config(args):
    """Defaults < config file < command-line flags."""
    resolved = dict(PRUNE_DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        unknown = set(loaded) - set(PRUNE_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys in {path}: {sorted(unknown)}")
        resolved.update(loaded)
    for key in PRUNE_DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            resolved[key] = val
    if resolved["top_n"] is None or int(resolved["top_n"]) < 1:
        raise ConfigError("--top-n must be a positive integer")
    if float(resolved["target_ratio"]) <= 0:
        raise ConfigError("--target-ratio must be positive")
    if resolved["sampler"] not in ("random", "variance"):
        raise ConfigError("--sampler must be 'random' or 'variance'")
    return resolved


def _prune_config(resolved, n_prunable, out):
    jobs = resolved["jobs"] or max(1, min(n_prunable, os.cpu_count() or 1))
    try:
        return PruneConfig(
            target_ratio=float(resolved["target_ratio"]),
            top_n=int(resolved["top_n"]),
            schedule=FSchedule(float(resolved["f_early_frac"]), float(resolved["f_late_frac"]),
                               int(resolved["f_cap"]), float(resolved["f_early_break"]),
                               float(resolved["f_late_break"])),
            sampler=SamplerConfig(int(resolved["positions_per_image"]), resolved["sampler"],
                                  float(resolved["variance_threshold"]), int(resolved["seed"])),
            ramp=LambdaRamp(),
            seed=int(resolved["seed"]),
            jobs=int(jobs),
            checkpoint_dir=str(out),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _report(original, series, path):
    lines = ["iteration  ratio    flops     " + "  ".join(f"L{l}" for l in original.prunable_layers)]
    pct = remained_percentages(original, original)
    lines.append(f"{0:>9}  {1.0:6.3f}  {flops(original):>8}  " + "  ".join(f"{pct[l]:5.1f}%" for l in pct))
    for model, rec in series:
        pct = remained_percentages(original, model)
        lines.append(f"{rec.t:>9}  {rec.ratio:6.3f}  {rec.flops:>8}  " + "  ".join(f"{pct[l]:5.1f}%" for l in pct))
    text = "Remained input channels per prunable layer\n" + "\n".join(lines) + "\n"
    Path(path).write_text(text)
    return text


def cmd_prune(args):
    resolved = resolve_prune_config(args)
    model = load_model(args.model)
    source = _load_data(args.data, "train")
    out = Path(args.out)
    cfg = _prune_config(resolved, len(model.prunable_layers), out)
    if cfg.top_n > len(model.prunable_layers):
        raise ConfigError(f"--top-n {cfg.top_n} exceeds the model's {len(model.prunable_layers)} prunable layers")

    if args.pseudo_labels:
        if not args.target_data:
            raise ConfigError("--pseudo-labels requires --target-data")
        target = _load_data(args.target_data, "train")
        pls = PseudoLabeledSet.load(args.pseudo_labels)
        mix = MixConfig(float(resolved["target_share"]), float(resolved["val_fraction"]), cfg.seed)
        calib, val = build_mixed_sets(source, pls, target, mix)
    else:
        val = _load_data(args.val_data or args.data, "val")
        calib = source
    if val.labels is None:
        raise ConfigError("validation data must be labelled")
    calib_images = calib.images[: int(resolved["calib_count"])]

    out.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))
    manifest = {"config_file": args.config, "resolved_config": resolved, "tool_version": __version__,
                "start": started, "end": None, "output_dir": str(out)}
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1))

    status = EXIT_OK
    try:
        series = run_pcp(model, cfg, calib_images, val)
    except NoProgressError as exc:
        series = exc.series
        log.error("%s", exc)
        status = EXIT_RUNTIME
    manifest["end"] = datetime.now(timezone.utc).isoformat()
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1))
    report = _report(model, series, out / "report.txt")

    if not series and status == EXIT_OK:
        msg = f"target ratio {cfg.target_ratio} already met by the input model (ratio 1.0); zero iterations run"
    else:
        final = series[-1][1].ratio if series else 1.0
        msg = f"{len(series)} iterations, final ratio {final:.3f}; checkpoints in {out}"
    payload = {"iterations": len(series), "final_ratio": series[-1][1].ratio if series else 1.0,
               "checkpoints": [rec.checkpoint for _, rec in series], "output_dir": str(out),
               "status": "ok" if status == EXIT_OK else "no_progress"}
    _emit(args, payload, msg + "\n" + report)
    return status


# -- parser --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="pcp", description=__doc__)
    p.add_argument("--version", action="version", version=f"pcp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render the synthetic benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--domain", default="source")
    g.add_argument("--n-train", type=int, default=512)
    g.add_argument("--n-val", type=int, default=128)
    g.add_argument("--n-test", type=int, default=128)
    g.add_argument("--noise", type=float, default=GeneratorSpec.noise)
    g.add_argument("--jitter", type=int, default=GeneratorSpec.jitter)
    g.add_argument("--brightness", type=float, default=0.0)
    g.add_argument("--contrast", type=float, default=1.0)
    g.add_argument("--background", type=float, default=0.0)
    g.set_defaults(func=cmd_generate)

    def train_flags(sp, epochs, lr):
        sp.add_argument("--epochs", type=int, default=epochs)
        sp.add_argument("--lr", type=float, default=lr)
        sp.add_argument("--batch-size", type=int, default=32)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--val-data")
        sp.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a reference model from scratch")
    t.add_argument("--arch", choices=["tinyvgg", "tinyres"], default="tinyvgg")
    t.add_argument("--data", required=True, action="append", help="repeatable; training sets are concatenated")
    train_flags(t, 20, 0.05)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("finetune", help="SGD fine-tuning of a (pruned) model")
    f.add_argument("--model", required=True)
    f.add_argument("--data", required=True)
    train_flags(f, 5, 0.05)
    f.set_defaults(func=cmd_finetune)

    pr = sub.add_parser("prune", help="progressive channel pruning")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True, help="calibration (source) data")
    pr.add_argument("--val-data")
    pr.add_argument("--out", required=True)
    pr.add_argument("--config", help="YAML file; flags override it")
    pr.add_argument("--target-ratio", dest="target_ratio", type=float)
    pr.add_argument("--top-n", dest="top_n", type=int)
    pr.add_argument("--f-early-frac", dest="f_early_frac", type=float)
    pr.add_argument("--f-late-frac", dest="f_late_frac", type=float)
    pr.add_argument("--f-cap", dest="f_cap", type=int)
    pr.add_argument("--positions-per-image", dest="positions_per_image", type=int)
    pr.add_argument("--sampler", choices=["random", "variance"])
    pr.add_argument("--variance-threshold", dest="variance_threshold", type=float)
    pr.add_argument("--calib-count", dest="calib_count", type=int)
    pr.add_argument("--target-data", help="unlabelled target domain (with --pseudo-labels)")
    pr.add_argument("--pseudo-labels", help="JSON written by `pcp pseudo-label`")
    pr.add_argument("--target-share", dest="target_share", type=float)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--jobs", type=int)
    pr.add_argument("--json", action="store_true")
    pr.set_defaults(func=cmd_prune)

    e = sub.add_parser("eval", help="top-1 accuracy and FLOPs")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("pseudo-label", help="label target samples with the model's argmax")
    pl.add_argument("--model", required=True)
    pl.add_argument("--data", required=True)
    pl.add_argument("--split", default="train")
    pl.add_argument("--threshold", type=float, default=0.0)
    pl.add_argument("--out")
    pl.add_argument("--json", action="store_true")
    pl.set_defaults(func=cmd_pseudo_label)

    i = sub.add_parser("inspect", help="layer table, selections and FLOPs breakdown")
    i.add_argument("--model", required=True)
    i.add_argument("--original", help="reference model for remained-channel percentages")
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    logging.basicConfig(level=os.environ.get("PCP_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
