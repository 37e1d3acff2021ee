"""Command-line entry point.

Subcommands: synth-data, train, eval, infer, analyze. Every option can come
from a config file (``--config``, line-oriented ``key = value`` with ``#``
comments) or a flag; flags win. Unknown config keys are rejected, and every
run writes its resolved configuration next to its outputs as ``run.conf``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime or divergence
error. Errors print to standard error as ``ldfnet: error: <message>``.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, replace

import numpy as np

from . import __version__
from .analyzer import (
    GATED_VARIANTS,
    PARAM_TOLERANCE,
    REFERENCE_PARAMS_M,
    benchmark,
    flops_estimate,
    param_gate,
    shape_trace,
)
from .data import (
    load_dataset,
    read_pgm,
    render_labels,
    synth_dataset,
    write_pgm,
    write_ppm,
)
from .errors import (
    ArgumentError,
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    LdfnetError,
    NumericError,
    UsageError,
)
from .metrics import ConfusionMatrix, metrics_records, metrics_table
from .model import (
    ModelConfig,
    build_model,
    load_checkpoint,
    parse_variant,
    save_checkpoint,
)
from .train import TrainConfig, Trainer, predict, train_two_stage
from . import reports

PROG = "ldfnet"


@dataclass(frozen=True)
class Key:
    name: str
    kind: str  # int | float | str | flag
    default: object = None
    required: bool = False
    help: str = ""


COMMON = [
    Key("config", "str", help="config file of key = value lines; flags override"),
    Key("seed", "int", 0, help="seed controlling every random choice of the run"),
    Key("out", "str", required=True, help="output directory (created if missing)"),
]

COMMANDS = {
    "synth-data": COMMON + [
        Key("samples", "int", required=True, help="number of scenes to generate"),
        Key("classes", "int", 4, help="number of classes including background"),
        Key("height", "int", 64, help="scene height in pixels (divisible by 8)"),
        Key("width", "int", 128, help="scene width in pixels (divisible by 8)"),
        Key("split", "str", "train", help="split tag recorded in dataset.conf"),
    ],
    "train": COMMON + [
        Key("data", "str", required=True, help="dataset root (rgb/depth/label + index)"),
        Key("variant", "str", "ldfnet", help="network variant to train"),
        Key("classes", "int", help="class count; defaults to the dataset's"),
        Key("height", "int", help="resize target height (default: native)"),
        Key("width", "int", help="resize target width (default: native)"),
        Key("batch-size", "int", 4, help="samples per optimizer step"),
        Key("lr", "float", 5e-4, help="initial learning rate"),
        Key("weight-decay", "float", 1e-4, help="L2 decay applied by the optimizer"),
        Key("poly-power", "float", 0.9, help="poly schedule exponent"),
        Key("iters", "int", 400, help="full-network (stage 2) iterations"),
        Key("stage1-iters", "int", 150, help="encoder-only (stage 1) iterations"),
        Key("dropout", "float", 0.05, help="dropout rate in residual/dense blocks"),
        Key("class-weight-c", "float", 1.1, help="constant in 1/ln(c + p) weighting"),
        Key("stage", "str", "both", help="both | encoders | full"),
        Key("init-from", "str", help="checkpoint to continue from"),
        Key("growth-rate", "int", 42, help="channels each dense module adds"),
        Key("shallow-modules", "int", 5, help="dense modules in the shallow block"),
        Key("bottleneck-width", "int", help="1x1 reduction width (default: growth)"),
    ],
    "eval": COMMON + [
        Key("data", "str", required=True, help="dataset root with ground-truth labels"),
        Key("checkpoint", "str", help="model checkpoint to evaluate"),
        Key("pred", "str", help="directory of predicted 8-bit PGM label maps"),
        Key("height", "int", help="resize target height (default: native)"),
        Key("width", "int", help="resize target width (default: native)"),
        Key("batch-size", "int", 4, help="inference batch size"),
        Key("absent-as-zero", "flag", False,
            help="count classes absent from truth and prediction as IoU 0"),
    ],
    "infer": COMMON + [
        Key("data", "str", required=True, help="dataset root to run inference on"),
        Key("checkpoint", "str", required=True, help="model checkpoint"),
        Key("height", "int", help="resize target height (default: native)"),
        Key("width", "int", help="resize target width (default: native)"),
        Key("batch-size", "int", 4, help="inference batch size"),
        Key("color", "flag", False, help="also write color-mapped PPM images"),
    ],
    "analyze": COMMON + [
        Key("variant", "str", "ldfnet", help="network variant to analyze"),
        Key("classes", "int", 19, help="class count for the built model"),
        Key("height", "int", 512, help="analysis input height"),
        Key("width", "int", 1024, help="analysis input width"),
        Key("growth-rate", "int", 42, help="channels each dense module adds"),
        Key("shallow-modules", "int", 5, help="dense modules in the shallow block"),
        Key("bottleneck-width", "int", help="1x1 reduction width (default: growth)"),
        Key("benchmark", "flag", False, help="also measure forward throughput"),
        Key("bench-height", "int", 128, help="benchmark input height"),
        Key("bench-width", "int", 256, help="benchmark input width"),
        Key("bench-iters", "int", 10, help="timed benchmark iterations"),
        Key("threads", "int", help="worker-thread cap (also LDFNET_THREADS)"),
    ],
}


COMMAND_HELP = {
    "synth-data": "generate a synthetic RGB-D segmentation dataset",
    "train": "train a variant (two-stage by default) and write checkpoints",
    "eval": "score a checkpoint or a prediction directory against labels",
    "infer": "write per-pixel argmax label maps for a dataset",
    "analyze": "report shapes, parameters, MACs, and optional throughput",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog=PROG, description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version="%(prog)s " + __version__)
    subs = parser.add_subparsers(dest="command", metavar="command")
    for name, keys in COMMANDS.items():
        sub = subs.add_parser(name, prog="%s %s" % (PROG, name),
                              help=COMMAND_HELP[name],
                              description=COMMAND_HELP[name] + ". accepted keys: "
                              + ", ".join(k.name for k in keys))
        for key in keys:
            flag = "--" + key.name
            if key.kind == "flag":
                sub.add_argument(flag, action="store_const", const=True,
                                 default=None, help=key.help)
            else:
                typ = {"int": int, "float": float, "str": str}[key.kind]
                sub.add_argument(flag, type=typ, default=None, help=key.help)
    return parser


def _parse_config_file(path, keys):
    allowed = {k.name: k for k in keys}
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as err:
        raise UsageError("cannot read config file %s: %s" % (path, err))
    for line_no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError("%s:%d: expected 'key = value'" % (path, line_no))
        name, _, value = line.partition("=")
        name, value = name.strip(), value.strip()
        if name not in allowed:
            raise UsageError("%s:%d: unknown key %r" % (path, line_no, name))
        key = allowed[name]
        try:
            if key.kind == "int":
                values[name] = int(value)
            elif key.kind == "float":
                values[name] = float(value)
            elif key.kind == "flag":
                if value.lower() not in ("true", "false"):
                    raise ValueError(value)
                values[name] = value.lower() == "true"
            else:
                values[name] = value
        except ValueError:
            raise UsageError("%s:%d: bad %s value %r for key %r"
                             % (path, line_no, key.kind, value, name))
    return values


def resolve_options(command, args):
    keys = COMMANDS[command]
    merged = {k.name: k.default for k in keys}
    config_path = getattr(args, "config")
    if config_path:
        merged.update(_parse_config_file(config_path, keys))
        merged["config"] = config_path
    for key in keys:
        cli_value = getattr(args, key.name.replace("-", "_"))
        if cli_value is not None:
            merged[key.name] = cli_value
    for key in keys:
        if key.required and merged.get(key.name) is None:
            raise UsageError("missing required option --%s" % key.name)
    return merged


def write_run_conf(options, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.conf"), "w") as fh:
        for name in sorted(options):
            value = options[name]
            if value is None:
                continue
            fh.write("%s = %s\n" % (name, str(value).lower()
                                    if isinstance(value, bool) else value))


def _resolution(options):
    h, w = options.get("height"), options.get("width")
    if (h is None) != (w is None):
        raise UsageError("give both --height and --width or neither")
    return None if h is None else (h, w)


def _model_config(options, variant, classes):
    return ModelConfig(
        variant=variant,
        num_classes=classes,
        growth_rate=options["growth-rate"],
        shallow_modules=options["shallow-modules"],
        bottleneck_width=options["bottleneck-width"],
        dropout_rate=options.get("dropout", 0.05),
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth_data(options):
    out = options["out"]
    write_run_conf(options, out)
    index = synth_dataset(out, options["samples"],
                          resolution=(options["height"], options["width"]),
                          num_classes=options["classes"], seed=options["seed"],
                          split=options["split"])
    print("wrote %d samples under %s" % (len(index.entries), out))
    return 0


def _load_split(options):
    index, samples = load_dataset(options["data"], _resolution(options))
    if not samples:
        raise DataError("dataset %s is empty" % options["data"])
    return index, samples


def cmd_train(options):
    out = options["out"]
    write_run_conf(options, out)
    variant = parse_variant(options["variant"])
    index, samples = _load_split(options)
    classes = options["classes"] or index.num_classes
    if not classes:
        raise UsageError("class count unknown: pass --classes or provide dataset.conf")

    if options["init-from"]:
        graph = load_checkpoint(options["init-from"], expect_variant=variant)
        if graph.config.num_classes != classes:
            raise CheckpointError(
                "checkpoint has %d classes, dataset needs %d"
                % (graph.config.num_classes, classes))
    else:
        graph = build_model(_model_config(options, variant, classes),
                            seed=options["seed"])

    cfg = TrainConfig(
        batch_size=options["batch-size"], base_lr=options["lr"],
        weight_decay=options["weight-decay"], poly_power=options["poly-power"],
        max_iters=options["iters"], dropout=options["dropout"],
        class_weight_c=options["class-weight-c"], seed=options["seed"])

    stage = options["stage"]
    if stage not in ("both", "encoders", "full"):
        raise UsageError("--stage must be both, encoders, or full")

    rows = []
    with open(os.path.join(out, "train.log"), "w") as log_fh:
        if stage == "both":
            rows1, stage2 = train_two_stage(graph, samples, cfg,
                                            stage1_iters=options["stage1-iters"],
                                            log_fh=log_fh)
            save_checkpoint(graph, os.path.join(out, "stage1.ckpt"))
            rows = rows1 + stage2.rows
        elif stage == "encoders":
            trainer = Trainer(graph, samples, replace(
                cfg, stage="encoders_only", max_iters=options["stage1-iters"]))
            rows = trainer.run(log_fh=log_fh)
        else:
            trainer = Trainer(graph, samples, cfg)
            rows = trainer.run(log_fh=log_fh)
    save_checkpoint(graph, os.path.join(out, "model.ckpt"))
    if rows:
        reports.save_loss_curve(rows, os.path.join(out, "loss_curve.png"))
        print("trained %s for %d iterations, final loss %.4f"
              % (variant.value, len(rows), rows[-1].loss))
    print("checkpoint: %s" % os.path.join(out, "model.ckpt"))
    return 0


def _eval_with_predictions(options, index, samples):
    pred_dir = options["pred"]
    preds = []
    for (rgb_path, _, label_path) in index.entries:
        stem = os.path.splitext(os.path.basename(rgb_path))[0]
        pred_path = os.path.join(pred_dir, stem + ".pgm")
        if not os.path.exists(pred_path):
            raise DataError("no prediction %s for sample %s" % (pred_path, stem))
        preds.append(read_pgm(pred_path).astype(np.int32))
    target = samples[0].labels.shape
    for stem, p in zip(index.entries, preds):
        if p.shape != target:
            raise DataError("prediction size %r does not match labels %r"
                            % (p.shape, target))
    return np.stack(preds)


def cmd_eval(options):
    out = options["out"]
    write_run_conf(options, out)
    if bool(options["checkpoint"]) == bool(options["pred"]):
        raise UsageError("give exactly one of --checkpoint or --pred")
    index, samples = _load_split(options)
    classes = index.num_classes

    if options["checkpoint"]:
        graph = load_checkpoint(options["checkpoint"])
        classes = graph.config.num_classes
        preds = predict(graph, samples, batch_size=options["batch-size"])
    else:
        if not classes:
            raise UsageError("dataset.conf lacks a class count")
        preds = _eval_with_predictions(options, index, samples)

    cm = ConfusionMatrix(classes)
    for p, s in zip(preds, samples):
        cm.accumulate(p, s.labels)

    table = metrics_table(cm)
    records = metrics_records(cm)
    per_class, mean = cm.iou(absent_as_zero=options["absent-as-zero"])
    with open(os.path.join(out, "metrics.txt"), "w") as fh:
        fh.write(table + "\n")
    reports.write_records(os.path.join(out, "metrics.kv"), records)
    reports.save_iou_chart(per_class, mean, os.path.join(out, "iou.png"))
    print(table)
    return 0


def cmd_infer(options):
    out = options["out"]
    write_run_conf(options, out)
    graph = load_checkpoint(options["checkpoint"])
    index, samples = _load_split(options)
    preds = predict(graph, samples, batch_size=options["batch-size"])
    for (rgb_path, _, _), pred in zip(index.entries, preds):
        stem = os.path.splitext(os.path.basename(rgb_path))[0]
        write_pgm(os.path.join(out, stem + ".pgm"), pred.astype(np.uint8), 255)
        if options["color"]:
            write_ppm(os.path.join(out, stem + "_color.ppm"),
                      render_labels(pred, graph.config.num_classes))
    print("wrote %d label maps to %s" % (len(preds), out))
    return 0


def cmd_analyze(options):
    out = options["out"]
    write_run_conf(options, out)
    variant = parse_variant(options["variant"])
    graph = build_model(_model_config(options, variant, options["classes"]),
                        seed=options["seed"])
    resolution = (options["height"], options["width"])

    layer_reports = shape_trace(graph, resolution)
    total_params, _ = graph.parameter_count()
    total_macs, _ = flops_estimate(graph, resolution)

    table = reports.format_table(
        ["layer", "input", "output", "params", "macs"],
        [(r.name,
          "+".join("x".join(map(str, s)) for s in r.input_shapes),
          "x".join(map(str, r.output_shape)), r.params, r.macs)
         for r in layer_reports])
    with open(os.path.join(out, "layers.txt"), "w") as fh:
        fh.write(table + "\n")
    reports.save_layer_chart(layer_reports, os.path.join(out, "layers.png"))

    ref, ok = param_gate(variant, total_params)
    records = {
        "variant": variant.value,
        "resolution": "%dx%d" % resolution,
        "total_params": total_params,
        "total_macs": total_macs,
        "fusion_adapters": graph.fusion_count,
        "reference_params": int(ref),
        "param_gate_tolerance": PARAM_TOLERANCE,
        "param_gate": "pass" if ok else "fail",
        "param_gate_enforced": str(variant in GATED_VARIANTS).lower(),
    }

    bench = None
    if options["benchmark"]:
        bench = benchmark(graph, (options["bench-height"], options["bench-width"]),
                          iterations=options["bench-iters"],
                          threads=options["threads"], seed=options["seed"])
        for mode in ("single", "multi"):
            for stat, value in bench[mode].items():
                records["bench_%s_%s" % (mode, stat)] = (
                    "%.4f" % value if isinstance(value, float) else value)
        reports.save_benchmark_chart(bench, os.path.join(out, "benchmark.png"))

    reports.write_records(os.path.join(out, "analyze.kv"), records)
    print("%s: %d parameters (reference %.2fM, gate %s), %d conv MACs at %dx%d"
          % (variant.value, total_params, REFERENCE_PARAMS_M[variant],
             "pass" if ok else "FAIL", total_macs, *resolution))
    if bench:
        print("benchmark %dx%d: single %.2f fps, multi %.2f fps (%d threads)"
              % (options["bench-height"], options["bench-width"],
                 bench["single"]["fps_median"], bench["multi"]["fps_median"],
                 bench["multi"]["threads"]))
    if variant in GATED_VARIANTS and not ok:
        raise NumericError(
            "parameter gate failed: %d outside %.0f%% of %d"
            % (total_params, PARAM_TOLERANCE * 100, ref))
    return 0


HANDLERS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "analyze": cmd_analyze,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help()
            return 1
        options = resolve_options(args.command, args)
        return HANDLERS[args.command](options)
    except (UsageError, ConfigError, ArgumentError) as err:
        print("%s: error: %s" % (PROG, err), file=sys.stderr)
        return 1
    except (DataError,) as err:
        print("%s: error: %s" % (PROG, err), file=sys.stderr)
        return 2
    except (DivergenceError, NumericError) as err:
        print("%s: error: %s" % (PROG, err), file=sys.stderr)
        return 3
    except LdfnetError as err:
        print("%s: error: %s" % (PROG, err), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
