"""Command line front end.

Every subcommand resolves its parameters as: built-in defaults, then an
optional JSON config file (``--config``), then explicit flags.  Unknown config
keys are an error.  The resolved parameters are part of every JSON report and
can be written on their own with ``--emit-config``.  Only ``retrain`` takes a
dataset.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import admm
from .modelio import (
    FormatError,
    LayerMask,
    atomic_write,
    load_model,
    masks_from_bytes,
    masks_to_bytes,
    model_from_bytes,
    model_to_bytes,
)
from .patterns import (
    Pattern,
    PatternLibrary,
    conforms,
    extract_pattern_library,
    pattern_frequencies,
)
from .tensor import ConvModel, conv2d_forward


class CliError(Exception):
    """A failed run; the message is printed and the exit code is 1."""


@dataclass
class Option:
    name: str
    type: Callable
    default: Any = None
    help: str = ""
    required: bool = False
    choices: Optional[tuple] = None

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


def _optional_float(v):
    return None if v is None or v == "none" else float(v)


def _shape(v):
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    return [int(x) for x in str(v).split(",")]


_defaults = admm.PruneConfig()

PRUNE_OPTIONS = [
    Option("model", str, help="pretrained PPDM model", required=True),
    Option("out", str, help="pruned PPDM output", required=True),
    Option("masks", str, help="PPMK mask sidecar output", required=True),
    Option("trace", str, help="convergence trace CSV output"),
    Option("library", str, help="pattern library file (default: extract from the model)"),
    Option("k", int, _defaults.K, "outer ADMM iterations"),
    Option("t", int, _defaults.T, "synthetic batch size"),
    Option("m", int, _defaults.m, "pattern library size"),
    Option("beta", _optional_float, None, "kept-kernel fraction per layer"),
    Option("seed", int, _defaults.seed, "random seed"),
    Option("rho0", float, _defaults.rho0, "initial penalty"),
    Option("rho_growth", float, _defaults.rho_growth, "penalty multiplier"),
    Option("rho_period", int, _defaults.rho_period_epochs, "epochs between penalty increases"),
    Option("rho_max", float, _defaults.rho_max, "penalty cap"),
    Option("lr", float, _defaults.lr, "primal learning rate"),
    Option("inner_steps", int, _defaults.inner_steps, "SGD steps per primal solve"),
    Option("iters_per_epoch", int, _defaults.iters_per_epoch, "iterations per epoch"),
    Option("momentum", float, _defaults.momentum, "primal SGD momentum"),
    Option("data_scale", float, _defaults.data_scale, "weight of the mean squared output error"),
    Option("input_mode", str, _defaults.input_mode, "layer inputs from the current or "
           "pretrained model", choices=admm.INPUT_MODES),
]

OPTIONS: dict[str, list[Option]] = {
    "extract-patterns": [
        Option("model", str, help="PPDM model", required=True),
        Option("m", int, 8, "library size"),
        Option("out", str, help="library output (u8 m, u16 codes)", required=True),
    ],
    "prune": PRUNE_OPTIONS,
    "verify": [
        Option("model", str, help="pruned PPDM model", required=True),
        Option("masks", str, help="PPMK mask file", required=True),
        Option("fkw", str, help="optional FKW bundle to check against the model"),
        Option("seed", int, 0, "seed of the random execution-check input"),
    ],
    "retrain": [
        Option("model", str, help="pruned PPDM model", required=True),
        Option("masks", str, help="PPMK mask file", required=True),
        Option("dataset", str, help="training set container", required=True),
        Option("test_dataset", str, help="optional held-out set for accuracy"),
        Option("out", str, help="retrained PPDM output", required=True),
        Option("epochs", int, 10, "training epochs"),
        Option("lr", float, 0.01, "learning rate"),
        Option("batch_size", int, 32, "minibatch size"),
        Option("momentum", float, 0.9, "SGD momentum"),
        Option("seed", int, 0, "shuffling seed"),
    ],
    "bench": [
        Option("model", str, help="pruned PPDM model (with --masks)"),
        Option("masks", str, help="PPMK mask file for --model"),
        Option("fkw", str, help="FKW bundle to benchmark instead of a model"),
        Option("input_shape", _shape, None, "C,H,W input of the first layer (FKW input)"),
        Option("batch", int, 1, "images per timed call"),
        Option("reps", int, 5, "timed repetitions per variant"),
        Option("seed", int, 0, "seed of the random input"),
    ],
    "pack": [
        Option("model", str, help="pruned PPDM model", required=True),
        Option("masks", str, help="PPMK mask file", required=True),
        Option("out", str, help="FKW bundle output", required=True),
    ],
}

HELP = {
    "extract-patterns": "pick the m most frequent natural kernel patterns",
    "prune": "data-free ADMM pattern pruning of a pretrained model",
    "verify": "check pruned artifacts for constraint, round-trip and execution agreement",
    "retrain": "masked fine-tuning on a user dataset (the only dataset consumer)",
    "bench": "time dense, CSR and FKW execution of pruned layers",
    "pack": "compress a pruned model into an FKW bundle",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patternprune", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in OPTIONS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="JSON file of parameters (flags override it)")
        p.add_argument("--emit-config", help="write the resolved parameters as JSON here")
        p.add_argument("--json", help="write the machine-readable report here")
        p.add_argument("--csv", help="write the tabular report here")
        for opt in options:
            extra = {"choices": opt.choices} if opt.choices else {}
            default = "" if opt.default is None else f" (default: {opt.default})"
            p.add_argument(opt.flag, dest=opt.name, type=opt.type, default=None,
                           help=opt.help + default, **extra)
    return parser


def resolve_config(command: str, file_values: Optional[dict], flags: dict) -> dict:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    options = {o.name: o for o in OPTIONS[command]}
    resolved = {name: o.default for name, o in options.items()}
    if file_values:
        unknown = sorted(set(file_values) - set(options))
        if unknown:
            raise CliError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for key, value in file_values.items():
            opt = options[key]
            try:
                resolved[key] = None if value is None else opt.type(value)
            except (TypeError, ValueError) as exc:
                raise CliError(f"config key {key}: {exc}") from exc
            if opt.choices and resolved[key] not in opt.choices:
                raise CliError(f"config key {key} must be one of {opt.choices}")
    for key, value in flags.items():
        if key in options and value is not None:
            resolved[key] = value
    missing = [options[k].flag for k, v in resolved.items() if options[k].required and v is None]
    if missing:
        raise CliError(f"missing required parameters: {', '.join(missing)}")
    return resolved


def prune_config(params: dict) -> admm.PruneConfig:
    return admm.PruneConfig(
        K=params["k"], T=params["t"], rho0=params["rho0"], rho_growth=params["rho_growth"],
        rho_period_epochs=params["rho_period"], rho_max=params["rho_max"], lr=params["lr"],
        inner_steps=params["inner_steps"], iters_per_epoch=params["iters_per_epoch"],
        m=params["m"], beta=params["beta"], seed=params["seed"], momentum=params["momentum"],
        data_scale=params["data_scale"], input_mode=params["input_mode"],
    )


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from exc


def _load_model(path) -> ConvModel:
    return model_from_bytes(_read(path))


def _load_masks(path) -> tuple[PatternLibrary, list[LayerMask]]:
    return masks_from_bytes(_read(path))


def _check_finite_report(value, where="report"):
    if isinstance(value, dict):
        for k, v in value.items():
            _check_finite_report(v, f"{where}.{k}")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            _check_finite_report(v, f"{where}[{i}]")
    elif isinstance(value, float) and not math.isfinite(value):
        raise CliError(f"non-finite value in {where}")


def _table_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# --- subcommands -----------------------------------------------------------
# each returns (report dict, csv text or None, human summary lines)


def cmd_extract_patterns(p):
    model = _load_model(p["model"])
    freq = pattern_frequencies(model)
    library = extract_pattern_library(model, p["m"])
    atomic_write(p["out"], library.to_bytes())
    warnings = []
    if library.pad_count:
        warnings.append(f"only {len(freq)} distinct patterns occur; library padded with "
                        f"{library.pad_count} unused patterns")
    rows = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
    report = {
        "library": library.codes,
        "library_counts": list(library.counts),
        "padded": library.pad_count,
        "frequencies": [{"pattern": code, "count": count} for code, count in rows],
    }
    lines = [f"library of {len(library)} patterns written to {p['out']}"]
    lines += [f"  {Pattern(c)}  code {c:3d}  count {n}" for c, n in zip(library.codes,
                                                                          library.counts)]
    return report, _table_csv(["pattern", "count"], rows), lines, warnings


def _rates(model: ConvModel, library: PatternLibrary, masks: list[LayerMask]):
    result = admm.PruneResult(model, library, masks)
    per_layer, overall = admm.compression_rate(result)
    return {str(k): v for k, v in per_layer.items()}, overall


def cmd_prune(p):
    cfg = prune_config(p)
    pretrained = _load_model(p["model"])
    library = None
    if p["library"]:
        library, end = PatternLibrary.from_bytes(_read(p["library"]))
    result = admm.prune_model(pretrained, cfg, library)
    model_bytes = model_to_bytes(result.model)
    mask_bytes = masks_to_bytes(result.library, result.masks)
    atomic_write(p["out"], model_bytes)
    atomic_write(p["masks"], mask_bytes)
    if p["trace"]:
        atomic_write(p["trace"], result.trace_csv().encode())
    per_layer, overall = admm.compression_rate(result)
    final = {}
    for row in result.trace:
        final[row.layer] = row
    layers = []
    for n, rate in per_layer.items():
        w = result.model.layers[n].weights
        norm = float(np.linalg.norm(w.astype(np.float64)))
        res = final[n].primal_residual if n in final else 0.0
        layers.append({"layer": n, "compression": rate, "final_residual": res,
                       "relative_residual": res / norm if norm else 0.0,
                       "final_objective": final[n].objective if n in final else 0.0})
    report = {
        "library": result.library.codes,
        "layers": layers,
        "overall_compression": overall,
        "iterations": cfg.K,
    }
    rows = [[l["layer"], f"{l['compression']:.6f}", f"{l['final_residual']:.6e}",
             f"{l['relative_residual']:.6e}"] for l in layers]
    lines = [f"pruned {len(layers)} layers; overall conv compression {overall:.4f}x"]
    lines += [f"  layer {l['layer']}: {l['compression']:.4f}x, relative residual "
              f"{l['relative_residual']:.3e}" for l in layers]
    return report, _table_csv(["layer", "compression", "residual", "relative_residual"], rows), \
        lines, []


def _mask_checks(model: ConvModel, library: PatternLibrary, masks: list[LayerMask]):
    """Yield (name, ok, detail) for structural agreement of masks and weights."""
    for lm in masks:
        name = f"constraint layer {lm.layer}"
        if not 0 <= lm.layer < len(model.layers):
            yield name, False, "mask refers to a missing layer"
            continue
        w = model.layers[lm.layer].weights
        if lm.keep.shape != w.shape[:2]:
            yield name, False, f"keep bitmap {lm.keep.shape} vs weights {w.shape}"
            continue
        mask = lm.weight_mask(library, w.shape[2:])
        outside = np.argwhere((mask == 0) & (w != 0))
        if len(outside):
            o, i = outside[0][:2]
            yield name, False, f"nonzero weight outside the mask in kernel ({o}, {i})"
            continue
        if lm.pattern_indices is not None and not conforms(w * lm.keep[:, :, None, None],
                                                           lm.pattern_indices, library):
            yield name, False, "kernel outside its recorded pattern"
            continue
        yield name, True, f"{int(lm.keep.sum())} kernels kept"


def cmd_verify(p):
    from .runtime.executor import sparse_conv_exec
    from .runtime.fkw import bundle_from_bytes, bundle_to_bytes, decode_fkw

    model_bytes = _read(p["model"])
    mask_bytes = _read(p["masks"])
    checks = []

    def run(name, fn):
        try:
            ok, detail = fn()
        except (ValueError, KeyError) as exc:
            ok, detail = False, str(exc)
        checks.append({"check": name, "pass": bool(ok), "detail": detail})

    model = library = masks = None

    def parse_model():
        nonlocal model
        model = model_from_bytes(model_bytes)
        return model_to_bytes(model) == model_bytes, "PPDM re-serializes byte-identically"

    def parse_masks():
        nonlocal library, masks
        library, masks = masks_from_bytes(mask_bytes)
        return masks_to_bytes(library, masks) == mask_bytes, "PPMK re-serializes byte-identically"

    run("model round-trip", parse_model)
    run("mask round-trip", parse_masks)
    if model is not None and masks is not None:
        for name, ok, detail in _mask_checks(model, library, masks):
            checks.append({"check": name, "pass": ok, "detail": detail})
    if p["fkw"] and model is not None:
        fkw_bytes = _read(p["fkw"])
        bundle = {}

        def parse_bundle():
            nonlocal bundle
            bundle = bundle_from_bytes(fkw_bytes)
            return bundle_to_bytes(bundle) == fkw_bytes, "FKW re-serializes byte-identically"

        run("fkw round-trip", parse_bundle)
        x = None
        if model.input_shape is not None:
            x = np.random.default_rng(p["seed"]).random((1,) + model.input_shape,
                                                        dtype=np.float32)
        for n, layer in enumerate(model.layers):
            if n in bundle:
                cw = bundle[n]
                run(f"fkw weights layer {n}",
                    lambda: (np.array_equal(decode_fkw(cw), layer.weights),
                             "decoded weights equal the model weights"))
                if x is not None:
                    def execute():
                        ref = conv2d_forward(x, layer)
                        got = sparse_conv_exec(x, cw, layer.bias, layer.stride, layer.padding,
                                               layer.activation)
                        err = float(np.max(np.abs(got - ref)) / max(np.max(np.abs(ref)), 1e-30))
                        return err <= 1e-5, f"max relative deviation {err:.2e}"
                    run(f"fkw execution layer {n}", execute)
            if x is not None:
                x = conv2d_forward(x, layer)
    failed = [c for c in checks if not c["pass"]]
    lines = [f"{'PASS' if c['pass'] else 'FAIL'}  {c['check']}: {c['detail']}" for c in checks]
    report = {"checks": checks, "passed": not failed}
    table = _table_csv(["check", "pass", "detail"],
                       [[c["check"], int(c["pass"]), c["detail"]] for c in checks])
    if failed:
        return report, table, lines, [], f"verification failed: {failed[0]['check']}: " \
                                          f"{failed[0]['detail']}"
    return report, table, lines, []


def cmd_retrain(p):
    from .retrain import accuracy, dataset_from_bytes, masked_retrain

    model = _load_model(p["model"])
    if model.input_shape is None:
        raise CliError("model has no input shape; cannot parse the dataset")
    library, masks = _load_masks(p["masks"])
    weight_masks = {}
    for lm in masks:
        if not 0 <= lm.layer < len(model.layers):
            raise CliError(f"mask refers to missing layer {lm.layer}")
        weight_masks[lm.layer] = lm.weight_mask(library, model.layers[lm.layer].kernel_size)
    train = dataset_from_bytes(_read(p["dataset"]), model.input_shape)
    test = dataset_from_bytes(_read(p["test_dataset"]), model.input_shape) \
        if p["test_dataset"] else train
    history = []
    lines = []

    def log(epoch, loss):
        history.append({"epoch": epoch, "loss": loss})
        print(f"epoch {epoch}: loss {loss:.4f}", file=sys.stderr)

    before = accuracy(model, test)
    trained = masked_retrain(model, weight_masks, train, p["epochs"], p["lr"],
                             batch_size=p["batch_size"], momentum=p["momentum"], seed=p["seed"],
                             on_epoch=log)
    after = accuracy(trained, test)
    for n, mask in weight_masks.items():
        if np.any(trained.layers[n].weights[mask == 0] != 0):
            raise CliError(f"pruned weights of layer {n} changed during retraining")
    atomic_write(p["out"], model_to_bytes(trained))
    report = {"accuracy_before": before, "accuracy": after, "history": history}
    lines.append(f"accuracy {before:.4f} -> {after:.4f} after {p['epochs']} epochs")
    rows = [[h["epoch"], f"{h['loss']:.6f}"] for h in history]
    return report, _table_csv(["epoch", "loss"], rows), lines, []


def cmd_bench(p):
    from .runtime.bench import benchmark
    from .runtime.fkw import bundle_from_bytes, decode_fkw
    from .tensor import ConvLayer

    rng = np.random.default_rng(p["seed"])
    entries, inputs = [], {}
    if p["fkw"]:
        if p["input_shape"] is None:
            raise CliError("--input-shape is required with --fkw")
        bundle = bundle_from_bytes(_read(p["fkw"]))
        shape = tuple(p["input_shape"])
        for n, cw in sorted(bundle.items()):
            if shape[0] != cw.in_channels:
                raise CliError(f"input has {shape[0]} channels, layer {n} expects "
                               f"{cw.in_channels}")
            layer = ConvLayer(decode_fkw(cw), np.zeros(cw.out_channels, np.float32), 1, 1)
            name = f"layer{n}"
            entries.append((name, layer, cw.keep, cw.pattern_indices, cw.library))
            inputs[name] = rng.random((p["batch"],) + shape, dtype=np.float32)
            shape = (cw.out_channels,) + shape[1:]
    elif p["model"] and p["masks"]:
        model = _load_model(p["model"])
        library, masks = _load_masks(p["masks"])
        if model.input_shape is None:
            raise CliError("model has no input shape")
        by_layer = {lm.layer: lm for lm in masks if lm.pattern_indices is not None}
        x = rng.random((p["batch"],) + model.input_shape, dtype=np.float32)
        for n, layer in enumerate(model.layers):
            if n in by_layer:
                name = f"layer{n}"
                entries.append((name, layer, by_layer[n].keep, by_layer[n].pattern_indices,
                                library))
                inputs[name] = x
            x = conv2d_forward(x, layer)
    else:
        raise CliError("bench needs --model with --masks, or --fkw with --input-shape")
    if not entries:
        raise CliError("no pattern-pruned layers to benchmark")
    report = benchmark(entries, inputs, repetitions=p["reps"])
    rows = [{"variant": r.variant, "layer": r.layer, "median_ms": r.median_ms,
             "multiplies": r.multiplies, "bytes": r.bytes} for r in report.rows]
    speedups = {name: report.speedup(name) for name, *_ in entries}
    out = {"rows": rows, "speedup_fkw_reordered_vs_dense": speedups,
           "environment": report.environment}
    lines = report.table().splitlines()
    lines += [f"{name}: fkw-reordered {s:.2f}x faster than dense" for name, s in speedups.items()]
    return out, report.to_csv(), lines, []


def cmd_pack(p):
    from .runtime.csr import encode_csr
    from .runtime.fkw import bundle_to_bytes, encode_fkw

    model = _load_model(p["model"])
    library, masks = _load_masks(p["masks"])
    bundle, layers = {}, []
    for lm in masks:
        if lm.pattern_indices is None:
            continue
        if not 0 <= lm.layer < len(model.layers):
            raise CliError(f"mask refers to missing layer {lm.layer}")
        w = model.layers[lm.layer].weights
        cw = encode_fkw(w, lm.keep, lm.pattern_indices, library)
        bundle[lm.layer] = cw
        csr = encode_csr(w)
        layers.append({"layer": lm.layer, "dense_bytes": int(w.nbytes), "csr_bytes": csr.nbytes,
                       "fkw_bytes": cw.nbytes, "fkw_storage_bytes": cw.storage_bytes})
    if not bundle:
        raise CliError("no pattern-pruned layers in the mask file")
    blob = bundle_to_bytes(bundle)
    atomic_write(p["out"], blob)
    report = {"layers": layers, "bundle_bytes": len(blob)}
    rows = [[l["layer"], l["dense_bytes"], l["csr_bytes"], l["fkw_bytes"]] for l in layers]
    lines = [f"layer {l['layer']}: dense {l['dense_bytes']} B, CSR {l['csr_bytes']} B, "
             f"FKW {l['fkw_bytes']} B" for l in layers]
    lines.append(f"bundle of {len(bundle)} layers, {len(blob)} bytes -> {p['out']}")
    return report, _table_csv(["layer", "dense_bytes", "csr_bytes", "fkw_bytes"], rows), lines, []


COMMANDS = {
    "extract-patterns": cmd_extract_patterns,
    "prune": cmd_prune,
    "verify": cmd_verify,
    "retrain": cmd_retrain,
    "bench": cmd_bench,
    "pack": cmd_pack,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_values = None
        if args.config:
            try:
                file_values = json.loads(_read(args.config).decode())
            except json.JSONDecodeError as exc:
                raise CliError(f"config {args.config}: {exc}") from exc
            if not isinstance(file_values, dict):
                raise CliError(f"config {args.config} must hold a JSON object")
        params = resolve_config(args.command, file_values, vars(args))
        if args.emit_config:
            atomic_write(args.emit_config, (json.dumps(params, indent=2, sort_keys=True)
                                            + "\n").encode())
        outcome = COMMANDS[args.command](params)
        report, table, lines, warnings = outcome[:4]
        failure = outcome[4] if len(outcome) > 4 else None
        report = {"command": args.command, "config": params, **report}
        _check_finite_report(report)
        for w in warnings:
            print(f"warning: {w}", file=sys.stderr)
        for line in lines:
            print(line)
        if args.json:
            atomic_write(args.json, (json.dumps(report, indent=2) + "\n").encode())
        if args.csv and table is not None:
            atomic_write(args.csv, table.encode())
        if failure:
            print(f"error: {failure}", file=sys.stderr)
            return 1
        return 0
    except (CliError, FormatError, admm.PruneError, ValueError, OSError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
