"""Command-line interface tying the pipeline together.

Commands: synth, build-graphs, stats, pretrain, finetune, ablate, grad-check,
plot. Every command takes --out, writes its artifacts there, and records a
``run.json`` (command, argv, resolved config, seed, package/library versions)
sufficient to replay the run.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 runtime failure
(e.g. a NaN-loss abort).

Training commands accept ``--config FILE`` with flat ``key = value`` lines
mirroring the TrainConfig / ModelConfig / MaskConfig field names; explicit
command-line flags override file values. The STMAE_THREADS environment
variable caps internal math parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import AblationConfig, GRIDS, ablate, read_rows_csv
from .dynfc import (
    GraphConfig,
    PRESETS,
    build_dynamic_graph,
    graph_stats,
    load_dynamic_graph,
    save_dynamic_graph,
)
from .errors import ConfigError, DataFormatError, NanLossError
from .ingest import SynthSpec, load_manifest, split_folds, synth_dataset
from .model import ModelConfig
from .objectives import MaskConfig
from .svgplot import plot_results
from .train import (
    TrainConfig,
    finetune,
    grad_check,
    load_checkpoint,
    pretrain,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems via exit code 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _versions() -> dict:
    import torch

    return {
        "stmae": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "torch": torch.__version__,
    }


def _write_run_record(out_dir: Path, command: str, argv: list[str],
                      config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": argv,
        "config": config,
        "versions": _versions(),
    }
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True))


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {i} is not 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


_BOOLS = {"true": True, "false": False, "1": True, "0": False,
          "yes": True, "no": False}


def _coerce(value: str, like) -> object:
    if isinstance(like, bool):
        if value.lower() not in _BOOLS:
            raise ConfigError(f"expected boolean, got {value!r}")
        return _BOOLS[value.lower()]
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def _build_configs(args, n_nodes: int):
    """Model / train / mask / graph configs from defaults, config file, flags."""
    overrides = parse_config_file(args.config) if getattr(args, "config", None) else {}

    model_kw = dict(n_nodes=n_nodes, dim=args.dim, n_layers=args.layers)
    train_kw = dict(lr=args.lr, weight_decay=args.weight_decay,
                    batch_size=args.batch_size, epochs=args.epochs,
                    schedule=args.schedule, seed=args.seed,
                    segment_length=args.segment_length)
    if hasattr(args, "label_fraction"):
        train_kw["label_fraction"] = args.label_fraction
    mask_kw = dict(ratio_node=args.mask_node, ratio_edge=args.mask_edge,
                   ratio_time=args.mask_time)
    graph_kw = dict(window=args.window, stride=args.stride, frac=args.frac)

    defaults = {**{f"model.{k}": v for k, v in ModelConfig(n_nodes=n_nodes).as_dict().items()},
                **{f"train.{k}": v for k, v in TrainConfig().as_dict().items()},
                **{f"mask.{k}": v for k, v in MaskConfig().as_dict().items()},
                **{f"graph.{k}": v for k, v in GraphConfig().__dict__.items()}}
    targets = {"model": model_kw, "train": train_kw, "mask": mask_kw, "graph": graph_kw}
    for key, raw in overrides.items():
        section, _, field = key.partition(".")
        if section not in targets or f"{section}.{field}" not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        targets[section][field] = _coerce(raw, defaults[f"{section}.{field}"])

    return (ModelConfig(**model_kw), TrainConfig(**train_kw),
            MaskConfig(**mask_kw), GraphConfig(**graph_kw))


def _add_graph_flags(p: Parser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="named (window, stride) pair; overrides --window/--stride")
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--stride", type=int, default=16)
    p.add_argument("--frac", type=float, default=0.3,
                   help="top fraction of correlation values kept as edges")


def _add_train_flags(p: Parser, epochs: int, schedule: str) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--schedule", choices=("cosine", "onecycle"), default=schedule)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=1e-4)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--segment-length", dest="segment_length", type=int, default=150)
    p.add_argument("--mask-node", dest="mask_node", type=float, default=0.3)
    p.add_argument("--mask-edge", dest="mask_edge", type=float, default=0.3)
    p.add_argument("--mask-time", dest="mask_time", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)


def _resolve_window(args) -> None:
    if args.preset:
        args.window, args.stride = PRESETS[args.preset]


def _manifest_from(data: str):
    path = Path(data)
    if path.is_dir():
        path = path / "manifest.jsonl"
    return load_manifest(path)


def build_parser() -> Parser:
    parser = Parser(prog="stmae", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=Parser)

    p = sub.add_parser("synth",
                       help="generate a synthetic labeled dataset")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--rois", type=int, required=True)
    p.add_argument("--timepoints", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--communities", type=int, default=4)
    p.add_argument("--contrast", type=float, default=0.6)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("build-graphs",
                       help="cache dynamic graphs for every subject")
    p.add_argument("--data", required=True, help="manifest file or its directory")
    _add_graph_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("stats",
                       help="structural statistics over cached graphs")
    p.add_argument("--graphs", required=True, help="directory of .dfc caches")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain",
                       help="self-supervised pretraining")
    p.add_argument("--data", required=True)
    _add_graph_flags(p)
    _add_train_flags(p, epochs=100, schedule="cosine")
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune",
                       help="cross-validated fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=("classify", "regress"), default="classify")
    p.add_argument("--ckpt", help="pretraining checkpoint; omit for the "
                                  "supervised-from-scratch baseline")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--label-fraction", dest="label_fraction", type=float, default=1.0)
    _add_graph_flags(p)
    _add_train_flags(p, epochs=30, schedule="onecycle")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate",
                       help="one-knob ablation grid (pretrain + finetune per cell)")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", choices=GRIDS, required=True)
    p.add_argument("--values", nargs="*", default=None,
                   help="grid cells; defaults per grid (criterion grid is fixed)")
    p.add_argument("--task", choices=("classify", "regress"), default="classify")
    p.add_argument("--folds", type=int, default=5)
    _add_graph_flags(p)
    _add_train_flags(p, epochs=10, schedule="cosine")
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("grad-check",
                       help="finite-difference gradient verification")
    p.add_argument("--nodes", type=int, default=6)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--out", required=True)

    p = sub.add_parser("plot",
                       help="render a results CSV to a deterministic SVG")
    p.add_argument("--results", required=True)
    p.add_argument("--kind", choices=("line", "bar"), default="line")
    p.add_argument("--out", required=True)

    return parser


def cmd_synth(args, argv) -> int:
    out = Path(args.out)
    spec = SynthSpec(n_communities=args.communities, class_contrast=args.contrast,
                     noise_sigma=args.noise)
    _write_run_record(out, "synth", argv, {
        "subjects": args.subjects, "rois": args.rois, "timepoints": args.timepoints,
        "seed": args.seed, "spec": spec.__dict__})
    manifest = synth_dataset(args.subjects, args.rois, args.timepoints,
                             seed=args.seed, spec=spec, out_dir=out)
    print(f"wrote {len(manifest)} subjects + manifest.jsonl to {out}")
    return EXIT_OK


def cmd_build_graphs(args, argv) -> int:
    _resolve_window(args)
    out = Path(args.out)
    manifest = _manifest_from(args.data)
    cfg = GraphConfig(args.window, args.stride, args.frac)
    _write_run_record(out, "build-graphs", argv, {
        "data": args.data, "window": cfg.window, "stride": cfg.stride,
        "frac": cfg.frac})
    total = 0
    for entry in manifest.entries:
        ts = manifest.load_series(entry)
        graph = build_dynamic_graph(ts, cfg.window, cfg.stride, cfg.frac)
        save_dynamic_graph(graph, out / f"{entry.subject_id}.dfc")
        total += graph.T
    print(f"cached {len(manifest)} graphs ({total} snapshots) to {out}")
    return EXIT_OK


def cmd_stats(args, argv) -> int:
    graph_dir = Path(args.graphs)
    out = Path(args.out)
    _write_run_record(out, "stats", argv, {"graphs": str(graph_dir)})
    paths = sorted(graph_dir.glob("*.dfc"))
    if not paths:
        raise DataFormatError(f"no .dfc caches under {graph_dir}")
    graphs = [load_dynamic_graph(p) for p in paths]
    stats = graph_stats(graphs)
    for key, value in stats.as_dict().items():
        print(f"{key}: {value}")
    (out / "stats.json").write_text(json.dumps(stats.as_dict(), indent=2))
    return EXIT_OK


def cmd_pretrain(args, argv) -> int:
    _resolve_window(args)
    out = Path(args.out)
    manifest = _manifest_from(args.data)
    model_cfg, train_cfg, mask_cfg, graph_cfg = _build_configs(
        args, n_nodes=manifest.load_series(manifest.entries[0]).N)
    _write_run_record(out, "pretrain", argv, {
        "data": args.data, "model": model_cfg.as_dict(),
        "train": train_cfg.as_dict(), "mask": mask_cfg.as_dict(),
        "graph": graph_cfg.__dict__, "seed": train_cfg.seed})
    pretrain(manifest, model_cfg, train_cfg, mask_cfg, graph_cfg, out_dir=out)
    print(f"pretrained {train_cfg.epochs} epochs; checkpoint + loss log in {out}")
    return EXIT_OK


def cmd_finetune(args, argv) -> int:
    _resolve_window(args)
    out = Path(args.out)
    manifest = _manifest_from(args.data)
    model_cfg, train_cfg, mask_cfg, graph_cfg = _build_configs(
        args, n_nodes=manifest.load_series(manifest.entries[0]).N)
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else None
    if ckpt is not None:
        model_cfg = ckpt.model_config
    folds = split_folds(manifest, args.folds, train_cfg.seed)
    _write_run_record(out, "finetune", argv, {
        "data": args.data, "task": args.task, "ckpt": args.ckpt,
        "folds": args.folds, "model": model_cfg.as_dict(),
        "train": train_cfg.as_dict(), "graph": graph_cfg.__dict__,
        "seed": train_cfg.seed})
    reports = finetune(manifest, ckpt, args.task, folds, model_cfg, train_cfg,
                       graph_cfg, out_dir=out)
    for r in reports:
        print(f"fold={r.fold}: " + " ".join(f"{k}={v:.4f}" for k, v in r.metrics().items()))
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    _resolve_window(args)
    out = Path(args.out)
    manifest = _manifest_from(args.data)
    model_cfg, train_cfg, mask_cfg, graph_cfg = _build_configs(
        args, n_nodes=manifest.load_series(manifest.entries[0]).N)
    fine_cfg = TrainConfig(**{**train_cfg.as_dict(),
                              "epochs": args.finetune_epochs,
                              "schedule": "onecycle"})
    base = AblationConfig(model=model_cfg, train_pre=train_cfg,
                          train_fine=fine_cfg, mask=mask_cfg, graph=graph_cfg,
                          task=args.task, k_folds=args.folds)
    _write_run_record(out, "ablate", argv, {
        "data": args.data, "grid": args.grid, "values": args.values,
        **base.snapshot()})
    rows, summary = ablate(manifest, args.grid, args.values, base, out_dir=out)
    failed = [c for c, s in summary["cells"].items() if s["status"] != "ok"]
    print(f"grid {args.grid}: {len(summary['cells'])} cells, "
          f"{len(rows)} metric rows, failures: {failed or 'none'}")
    return EXIT_OK


def cmd_grad_check(args, argv) -> int:
    out = Path(args.out)
    cfg = ModelConfig(n_nodes=args.nodes, dim=args.dim, n_layers=args.layers)
    _write_run_record(out, "grad-check", argv, {
        "model": cfg.as_dict(), "seed": args.seed, "samples": args.samples})
    report = grad_check(cfg, seed=args.seed, n_samples=args.samples)
    (out / "grad_check.json").write_text(json.dumps(report.as_dict(), indent=2,
                                                    sort_keys=True))
    print(f"max relative error: {report.max_rel_err:.3e} "
          f"({report.n_checked} scalars checked; "
          f"unused groups: {report.zero_grad_groups or 'none'})")
    return EXIT_OK


def cmd_plot(args, argv) -> int:
    out = Path(args.out)
    rows = read_rows_csv(args.results)
    if not rows:
        raise DataFormatError(f"{args.results}: no data rows")
    out_dir = out if out.suffix == "" else out.parent
    _write_run_record(out_dir, "plot", argv, {"results": args.results,
                                              "kind": args.kind})
    target = out / "plot.svg" if out.suffix == "" else out
    plot_results(rows, args.kind, target)
    print(f"wrote {target}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "build-graphs": cmd_build_graphs,
    "stats": cmd_stats,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    threads = os.environ.get("STMAE_THREADS")
    if threads:
        try:
            import torch

            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"stmae: ignoring non-integer STMAE_THREADS={threads!r}",
                  file=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataFormatError) as exc:
        print(f"stmae: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NanLossError as exc:
        print(f"stmae: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except SystemExit as exc:  # argparse --help / --version
        return int(exc.code or 0)


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
