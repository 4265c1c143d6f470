"""Command-line interface: train, eval, ablate, and gen-data.

Every command is driven by one JSON config file, writes only inside its
output directory, and emits a graph-summary JSON for each network it builds.
Exit codes: 0 success, 2 invalid configuration or shapes, 3 divergence.
The CASCADESEG_OUTPUT_ROOT environment variable sets the root under which
relative output directories are created.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

OUTPUT_ROOT_ENV = "CASCADESEG_OUTPUT_ROOT"
ABLATION_VARIANTS = ("full", "no_side_branches", "no_fusion_layer",
                     "no_db_sequence")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cascadeseg",
        description="Build, train, evaluate, and ablate cascade segmentation "
                    "networks on synthetic desk-scale tasks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to a JSON run config")
        p.add_argument("--out", default=None,
                       help="output directory (overrides config output_dir)")
        p.add_argument("--seed", type=int, default=None,
                       help="override both the training and task seeds")
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS/OpenMP threads (set before numpy loads)")
        p.add_argument("--precision", choices=("f32", "f64"), default="f32")
        p.add_argument("--no-figures", action="store_true",
                       help="skip rendering PNG figures next to the CSV outputs")

    p_train = sub.add_parser("train", help="train one network per the config")
    common(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint, write metrics CSV")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", default=None,
                        help="dataset directory from gen-data; defaults to "
                             "synthesizing an evaluation set from the config task")
    p_eval.add_argument("--count", type=int, default=8,
                        help="evaluation sample count when synthesizing")
    p_eval.add_argument("--eval-offset", type=int, default=None,
                        help="first sample index when synthesizing "
                             "(default: after the training pool)")
    p_eval.add_argument("--spacing", default="1.0",
                        help="physical spacing in mm, e.g. '1.0' or '1.0,1.0'")

    p_abl = sub.add_parser("ablate", help="train and evaluate the four cascade "
                                          "variants with shared seeds")
    common(p_abl)
    p_abl.add_argument("--eval-count", type=int, default=8)

    p_gen = sub.add_parser("gen-data", help="write (image, label) CSEG pairs "
                                            "plus an index manifest")
    common(p_gen)
    p_gen.add_argument("--count", type=int, required=True)
    return parser


def _resolve_out_dir(args, cfg_output_dir: str) -> Path:
    out = Path(args.out) if args.out else Path(cfg_output_dir)
    if not out.is_absolute():
        root = os.environ.get(OUTPUT_ROOT_ENV, ".")
        out = Path(root) / out
    return out


def _apply_seed_override(cfg, seed):
    if seed is None:
        return cfg
    from dataclasses import replace
    return replace(cfg, task=replace(cfg.task, seed=seed),
                   train=replace(cfg.train, seed=seed))


def _dtype_for(precision: str):
    import numpy as np
    return np.float64 if precision == "f64" else np.float32


def _write_graph_json(net, path) -> None:
    with open(path, "w") as fh:
        json.dump(net.graph_summary(), fh, indent=2)
        fh.write("\n")


def _parse_spacing(text: str, dims: int):
    parts = [float(p) for p in text.split(",")]
    if len(parts) == 1:
        return tuple(parts * dims)
    if len(parts) != dims:
        from .errors import ConfigError
        raise ConfigError(f"--spacing needs 1 or {dims} values, got {len(parts)}")
    return tuple(parts)


def _prepare(args):
    from .config import load_config, validate_run_config
    cfg = _apply_seed_override(load_config(args.config), args.seed)
    validate_run_config(cfg)
    out_dir = _resolve_out_dir(args, cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, out_dir


def _build_from_config(cfg, dtype):
    from .networks import build_network
    return build_network(cfg.encoder, cfg.decoder, in_channels=1, dtype=dtype,
                         image_size=cfg.task.image_size)


def _train_into(cfg, net, out_dir: Path, make_figures: bool) -> None:
    from .fileio import save_checkpoint
    from .train import train

    log = train(net, cfg.task, cfg.loss, steps=cfg.train.steps,
                batch=cfg.train.batch, seed=cfg.train.seed,
                learning_rate=cfg.train.learning_rate,
                train_samples=cfg.train.train_samples,
                init_std=None)
    log.write_csv(out_dir / "train_log.csv")
    save_checkpoint(out_dir / "checkpoint.ckpt", net)
    if make_figures and log.rows:
        from .report import save_loss_curves
        save_loss_curves(out_dir / "train_log.csv", out_dir / "loss_curve.png")


def cmd_train(args) -> int:
    from .config import save_config
    from .train import init_gaussian

    cfg, out_dir = _prepare(args)
    net = _build_from_config(cfg, _dtype_for(args.precision))
    _write_graph_json(net, out_dir / "graph.json")
    save_config(cfg, out_dir / "resolved_config.json")
    init_gaussian(net, cfg.train.init_std, cfg.train.seed)
    _train_into(cfg, net, out_dir, not args.no_figures)
    return 0


def _eval_samples(cfg, args):
    """Yield (image, label) evaluation pairs per the eval data source."""
    if args.data:
        from .fileio import load_dataset_pair, read_dataset_manifest
        manifest = read_dataset_manifest(args.data)
        for entry in manifest["entries"]:
            yield load_dataset_pair(args.data, entry)
    else:
        from .synth import generate_sample
        offset = (args.eval_offset if args.eval_offset is not None
                  else cfg.train.train_samples)
        for i in range(args.count):
            yield generate_sample(cfg.task, offset + i)


def _evaluate_net(net, pairs, spacing, model_name):
    import numpy as np

    from .metrics import aggregate_reports, evaluate_segmentation
    from .train import predict_labels

    reports = []
    first_panel = None
    for image, label in pairs:
        pred = predict_labels(net, image[None])[0]
        reports.append(evaluate_segmentation(pred, label, spacing,
                                             net.num_classes, model_name))
        if first_panel is None:
            first_panel = (np.asarray(image[0]), label, pred)
    return aggregate_reports(reports, model_name), first_panel


def cmd_eval(args) -> int:
    from .fileio import load_checkpoint
    from .metrics import write_reports_csv

    cfg, out_dir = _prepare(args)
    spacing = _parse_spacing(args.spacing, cfg.encoder.spatial_dims)
    net = _build_from_config(cfg, _dtype_for(args.precision))
    _write_graph_json(net, out_dir / "graph.json")
    load_checkpoint(args.checkpoint, net)
    model_name = f"{cfg.encoder.prototype}+{cfg.decoder.prototype}"
    report, panel = _evaluate_net(net, _eval_samples(cfg, args), spacing,
                                  model_name)
    write_reports_csv(out_dir / "metrics.csv", [report])
    if not args.no_figures:
        from .report import save_metrics_chart, save_prediction_panel
        save_metrics_chart(out_dir / "metrics.csv", out_dir / "metrics.png")
        if panel is not None:
            save_prediction_panel(*panel, out_dir / "sample_prediction.png")
    return 0


def _variant_decoder(decoder, variant: str):
    from dataclasses import replace
    if variant == "full":
        return decoder
    if variant == "no_side_branches":
        return replace(decoder, with_side_branches=False)
    if variant == "no_fusion_layer":
        return replace(decoder, with_fusion_layer=False)
    return replace(decoder, with_db_sequence=False)


def cmd_ablate(args) -> int:
    from .config import save_config
    from .errors import ConfigError
    from .fileio import save_checkpoint
    from .metrics import write_reports_csv
    from .networks import build_network
    from .synth import generate_sample
    from .train import init_gaussian

    cfg, out_dir = _prepare(args)
    if cfg.decoder.prototype != "cascade":
        raise ConfigError("cmd ablate requires a cascade decoder config")
    save_config(cfg, out_dir / "resolved_config.json")
    dtype = _dtype_for(args.precision)
    spacing = (1.0,) * cfg.encoder.spatial_dims
    eval_pairs = [generate_sample(cfg.task, cfg.train.train_samples + i)
                  for i in range(args.eval_count)]
    reports = []
    for variant in ABLATION_VARIANTS:
        vdir = out_dir / variant
        vdir.mkdir(parents=True, exist_ok=True)
        decoder = _variant_decoder(cfg.decoder, variant)
        net = build_network(cfg.encoder, decoder, in_channels=1, dtype=dtype,
                            image_size=cfg.task.image_size)
        _write_graph_json(net, vdir / "graph.json")
        init_gaussian(net, cfg.train.init_std, cfg.train.seed)
        save_checkpoint(vdir / "init.ckpt", net)
        _train_into(cfg, net, vdir, make_figures=False)
        report, _ = _evaluate_net(net, eval_pairs, spacing, variant)
        reports.append(report)
    write_reports_csv(out_dir / "ablation.csv", reports)
    if not args.no_figures:
        from .report import save_metrics_chart
        save_metrics_chart(out_dir / "ablation.csv", out_dir / "ablation.png")
    return 0


def cmd_gen_data(args) -> int:
    from .fileio import write_dataset

    cfg, out_dir = _prepare(args)
    write_dataset(out_dir, cfg.task, args.count)
    return 0


_COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
             "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))
    from .errors import ConfigError, DivergenceError, ShapeError
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
