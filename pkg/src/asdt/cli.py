"""Command-line entry point.

    asdt gen-data --set data.root=data
    asdt train --set data.root=data
    asdt ablate --mode V --preset toy --set data.root=data
    asdt eval --checkpoint runs/ablate/V/checkpoint.pt
    asdt sweep --param tau --values 2,4,5,6,8 --set data.root=data

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

import torch

from . import __version__
from . import eval as ev
from . import pipeline as pl
from . import plots
from .config import MODES, ConfigError, RunConfig, parse_lines
from .synthdata import ConfigError as DataConfigError
from .synthdata import ManifestError, generate_shapes_dataset, load_manifest, load_samples

log = logging.getLogger("asdt")

PRESETS = ("paper", "toy")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", choices=PRESETS, default="paper",
                   help="built-in defaults applied before --config (default: paper)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable, wins over --config")
    p.add_argument("--out", help="output directory (default: $ASDT_OUTPUT_DIR or output.dir/<command>)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asdt", description="Self-dual teaching for weakly supervised segmentation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="render the synthetic shapes dataset into data.root")
    _add_common(p)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-val", type=int, default=100)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("train", help="stage-1 training")
    _add_common(p)
    p.add_argument("--mode", choices=MODES, help="distillation mode (default: train.mode)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, help="stop after this many iterations in total")

    p = sub.add_parser("export-psm", help="write pseudo masks for the training split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("retrain", help="stage-2: train a fresh segmenter on exported pseudo masks")
    _add_common(p)
    p.add_argument("--psm-manifest", required=True)

    p = sub.add_parser("eval", help="score a checkpoint on the validation split")
    _add_common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint", help="stage-1 checkpoint")
    g.add_argument("--segmenter", help="stage-2 segmenter weights")
    p.add_argument("--crf", action="store_true", help="CRF post-processing for the stage-2 segmenter")

    p = sub.add_parser("ablate", help="train and score distillation modes")
    _add_common(p)
    p.add_argument("--mode", nargs="+", choices=MODES, required=True)

    p = sub.add_parser("sweep", help="PWM sensitivity sweep (mode V)")
    _add_common(p)
    p.add_argument("--param", choices=("T", "tau"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    return parser


# ---------------------------------------------------------------------------
# helpers


def preset_lines(name: str) -> list[str]:
    if name == "paper":
        return []
    return resources.files("asdt").joinpath("presets", f"{name}.cfg").read_text().splitlines()


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = parse_lines(preset_lines(args.preset), f"preset:{args.preset}")
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("config", f"file not found: {path}")
        values.update(parse_lines(path.read_text().splitlines(), str(path)))
    values.update(parse_lines(args.overrides, "--set"))
    return RunConfig(values).validate()


def output_dir(args: argparse.Namespace, cfg: RunConfig, *parts: str) -> Path:
    out = Path(args.out) if args.out else cfg.output_dir().joinpath(args.command, *parts)
    out.mkdir(parents=True, exist_ok=True)
    return out


def snapshot(cfg: RunConfig, out: Path) -> None:
    cfg.write(out / "config.txt")
    (out / "seed.txt").write_text(f"{cfg['seed']}\n")


def data_root(cfg: RunConfig, must_exist: bool = True) -> Path:
    if not cfg["data.root"]:
        raise ConfigError("data.root", "no data path given (use --set data.root=DIR)")
    root = Path(cfg["data.root"])
    if must_exist and not root.is_dir():
        raise ConfigError("data.root", f"directory not found: {root}")
    return root


def split(cfg: RunConfig, which: str):
    root = data_root(cfg)
    path = root / cfg[f"data.{which}"]
    if not path.is_file():
        raise ConfigError(f"data.{which}", f"manifest not found: {path} (data.root = {root})")
    manifest = load_manifest(path)
    return manifest, load_samples(manifest)


def data_keys(cfg: RunConfig) -> dict:
    """Data location from the command line, when one was given."""
    return {k: cfg[k] for k in ("data.root", "data.val")} if cfg["data.root"] else {}


def metric_rows(metrics: dict[str, float]) -> list[list]:
    return [[label, metrics[f"{key}.miou"]] for key, label in plots.BRANCHES if f"{key}.miou" in metrics]


def report_stage1(state: pl.TrainState, val, out: Path, title: str = "") -> dict[str, float]:
    cfg = state.config
    cms = pl.evaluate_stage1(state.model, val, pl.crf_params(cfg), cfg.floats("cam.scales"))
    metrics = pl.stage1_metrics(cms, state.class_names, cfg["train.mode"])
    ev.write_metrics(out / "metrics.txt", metrics)
    rows = metric_rows(metrics)
    ev.write_tsv(out / "metrics.tsv", ["branch", "miou"], rows)
    print(ev.format_table(["branch", "mIoU"], rows))
    plots.plot_branch_miou(metrics, out / "miou.png", title)
    shown = val[:6]
    maps = pl.branch_maps(state.model, shown)
    plots.plot_examples(
        [s.image for s in shown],
        {"ground truth": [s.gt_mask for s in shown],
         "pseudo mask": [pl.generate_psm(state, s) for s in shown],
         "student": [m.argmax(0).numpy() for m in maps["s"]]},
        state.model.num_classes + 1,
        out / "examples.png",
    )
    return metrics


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig) -> None:
    root = data_root(cfg, must_exist=False)
    train = generate_shapes_dataset(args.n_train, args.classes, args.size, cfg["seed"], root / Path(cfg["data.train"]).parent)
    val = generate_shapes_dataset(args.n_val, args.classes, args.size, cfg["seed"] + 1, root / Path(cfg["data.val"]).parent)
    snapshot(cfg, root)
    print(f"wrote {len(train)} train / {len(val)} val images to {root}")


def cmd_train(args, cfg: RunConfig) -> None:
    manifest, samples = split(cfg, "train")
    out = output_dir(args, cfg)
    if args.resume:
        state = pl.load_checkpoint(args.resume)
        if state.config.hash() != cfg.hash():
            log.warning("resuming with the checkpoint's config, not the command line's")
        cfg = state.config
    else:
        if args.mode:
            cfg = cfg.updated(**{"train.mode": args.mode})
        state = pl.build_state(cfg, manifest.class_names)
    snapshot(cfg, out)
    until = args.steps if args.steps is not None else pl.total_steps(len(samples), cfg)
    pl.fit(state, samples, until=until)
    pl.save_checkpoint(state, out / "checkpoint.pt")
    write_trace(state, out)
    print(f"trained to iteration {state.t}; checkpoint at {out / 'checkpoint.pt'}")


def write_trace(state: pl.TrainState, out: Path) -> None:
    keys = ["t", "teacher", "l_ce", "l_ct_st", "l_student", "total"]
    ev.write_tsv(out / "loss_trace.tsv", keys, ([r[k] for k in keys] for r in state.trace))
    if state.trace:
        plots.plot_loss_trace(state.trace, out / "loss_trace.png")


def cmd_export_psm(args, cfg: RunConfig) -> None:
    state = pl.load_checkpoint(args.checkpoint)
    manifest, samples = split(cfg, "train")
    out = output_dir(args, cfg)
    snapshot(state.config, out)
    psm_manifest = pl.export_psms(state, manifest, out, samples)
    print(f"wrote {len(psm_manifest)} pseudo masks; manifest at {psm_manifest.path}")


def cmd_retrain(args, cfg: RunConfig) -> None:
    psm_manifest = load_manifest(args.psm_manifest)
    samples = load_samples(psm_manifest)
    out = output_dir(args, cfg)
    snapshot(cfg, out)
    losses = []
    model = pl.retrain_on_psms(samples, cfg, progress=lambda t, loss: losses.append((t, loss)))
    torch.save({"state_dict": model.state_dict(), "num_classes": model.num_classes, "config": dict(cfg),
                "class_names": psm_manifest.class_names}, out / "segmenter.pt")
    ev.write_tsv(out / "retrain_loss.tsv", ["t", "loss"], losses)
    print(f"segmenter saved to {out / 'segmenter.pt'}")


def cmd_eval(args, cfg: RunConfig) -> None:
    out = output_dir(args, cfg)
    if args.checkpoint:
        state = pl.load_checkpoint(args.checkpoint)
        # evaluation data may live elsewhere than at training time
        state.config = state.config.updated(**data_keys(cfg))
        _, val = split(state.config, "val")
        snapshot(state.config, out)
        report_stage1(state, val, out, title=f"mode {state.config['train.mode']}")
        return
    blob = torch.load(args.segmenter, map_location="cpu", weights_only=False)
    seg_cfg = RunConfig(blob["config"]).updated(**data_keys(cfg))
    model = pl.Segmenter(blob["num_classes"], seg_cfg["data.crop"], seg_cfg["model.seg_hidden"],
                         seg_cfg["model.dilation"], seg_cfg["model.toy_dilation"])
    model.load_state_dict(blob["state_dict"])
    _, val = split(seg_cfg, "val")
    snapshot(seg_cfg, out)
    cm = pl.evaluate_segmenter(model, val, pl.crf_params(seg_cfg) if args.crf else None)
    metrics = ev.per_class_metrics("seg", cm, blob["class_names"])
    ev.write_metrics(out / "metrics.txt", metrics)
    rows = [[k, v] for k, v in metrics.items()]
    ev.write_tsv(out / "metrics.tsv", ["metric", "value"], rows)
    print(ev.format_table(["metric", "value"], rows))


def cmd_ablate(args, cfg: RunConfig) -> None:
    manifest, train = split(cfg, "train")
    _, val = split(cfg, "val")
    out = output_dir(args, cfg)
    results = []
    for mode in args.mode:
        mode_out = out / mode
        mode_out.mkdir(parents=True, exist_ok=True)
        mode_cfg = cfg.updated(**{"train.mode": mode})
        snapshot(mode_cfg, mode_out)
        log.info("ablation mode %s", mode)
        state = pl.build_state(mode_cfg, manifest.class_names)
        pl.fit(state, train, mode=mode)
        pl.save_checkpoint(state, mode_out / "checkpoint.pt")
        write_trace(state, mode_out)
        print(f"mode {mode}")
        results.append((mode, report_stage1(state, val, mode_out, title=f"mode {mode}")))
    header = ["mode", "st.miou", "s.miou", "fused.miou", "cam.miou"]
    rows = [[mode] + [m[k] for k in header[1:]] for mode, m in results]
    ev.write_tsv(out / "ablation.tsv", header, rows)
    print(ev.format_table(header, rows))
    plots.plot_ablation(results, out / "ablation.png")


def cmd_sweep(args, cfg: RunConfig) -> None:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("--values", f"expected comma-separated numbers, got {args.values!r}") from None
    if not values:
        raise ConfigError("--values", "no values given")
    key = "pwm.T" if args.param == "T" else "pwm.tau"
    for v in values:  # validate every point before spending any compute
        cfg.updated(**{key: int(v) if key == "pwm.T" else v}).validate()
    manifest, train = split(cfg, "train")
    _, val = split(cfg, "val")
    out = output_dir(args, cfg)
    snapshot(cfg, out)
    rows = pl.sweep(args.param, values, cfg, train, val, manifest.class_names)
    header = [args.param, "s.miou", "fused.miou"]
    table = [[_num(v), m["s.miou"], m["fused.miou"]] for v, m in rows]
    ev.write_tsv(out / "sweep.tsv", header, table)
    print(ev.format_table(header, table))
    plots.plot_sweep(args.param, [v for v, _ in rows], [m["s.miou"] for _, m in rows], out / "sweep.png")


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else str(v)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "export-psm": cmd_export_psm,
    "retrain": cmd_retrain,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def cli_main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        pl.set_reproducible(cfg)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, DataConfigError) as e:
        print(f"asdt: configuration error: {e}", file=sys.stderr)
        return 2
    except (ManifestError, pl.TrainingError, OSError, RuntimeError, ValueError) as e:
        print(f"asdt: error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
