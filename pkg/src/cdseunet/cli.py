"""Command-line entry point: ``cdseunet <command> [flags]``.

Every command ends with one summary line ``<command> key=value ... OK|FAIL``.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
3 verification failure (gradcheck).
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import gradcheck
from .data_io import (
    EdgeParams,
    SyntheticSpec,
    generate_synthetic,
    load_checkpoint,
    load_manifest,
    load_samples,
    read_pgm,
    split,
    write_mask,
)
from .edges import OPERATORS, GaussianSpec, HysteresisThresholds, sobel_gradients, gaussian_blur
from .errors import ConfigError, DimensionError, LoadError, ParseError
from .model import parse_value
from .tensor import Tensor
from .training import TrainConfig, ablate, evaluate, fusion_grid, operator_grid, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("cdseunet")


class UsageFailure(Exception):
    """Bad flags or config; maps to exit code 2."""


@dataclass
class DataConfig:
    manifest: str = ""
    data_dir: str = ""
    train_fraction: float = 0.9
    split_seed: int = 0
    synth_count: int = 8
    synth_size: int = 64
    synth_seed: int = 0


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


_TRAIN_KEYS = ("epochs", "batch_size", "learning_rate", "decay_factor", "decay_interval_epochs", "eval_every", "seed")


def _apply_section(obj, values: dict, section: str, allowed=None):
    names = {f.name: f for f in fields(obj)}
    allowed = allowed or tuple(names)
    updates = {}
    for key, raw in values.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        updates[key] = parse_value(raw, getattr(obj, key))
    return replace(obj, **updates)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse the INI-style config: [model], [train], [canny], [data] sections of key=value lines."""
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",),
        interpolation=None, empty_lines_in_values=False, default_section="\0none",
    )
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig()
    tc = cfg.train
    for section in parser.sections():
        values = dict(parser.items(section))
        if section == "model":
            tc = replace(tc, model=_apply_section(tc.model, values, section))
        elif section == "train":
            tc = _apply_section(tc, values, section, _TRAIN_KEYS)
        elif section == "canny":
            tc = replace(tc, edges=_apply_section(tc.edges, values, section))
        elif section == "data":
            cfg.data = _apply_section(cfg.data, values, section)
        else:
            raise ConfigError(f"{source}: unknown section [{section}]")
    cfg.train = tc
    return cfg


def load_config(path: Optional[str]) -> RunConfig:
    if not path:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, path)


def _summary(command: str, ok: bool, **items) -> None:
    cells = " ".join(f"{k}={v}" for k, v in items.items())
    print(f"{command} {cells} {'OK' if ok else 'FAIL'}".replace("  ", " "), flush=True)


def _edge_params_from_args(args, base: EdgeParams) -> EdgeParams:
    updates = {}
    for key in ("operator", "sigma", "radius", "low", "high", "tfrac"):
        value = getattr(args, key, None)
        if value is not None:
            updates[key] = value
    if getattr(args, "absolute", False):
        updates["relative"] = False
    return replace(base, **updates)


# ---------------------------------------------------------------- commands


def cmd_edges(args) -> int:
    cfg = load_config(args.config)
    params = _edge_params_from_args(args, cfg.train.edges)
    img = read_pgm(args.input)
    edge = params.compute(img)
    write_mask(edge, args.out)
    items = {"operator": params.operator}
    if params.operator == "canny":
        spec = GaussianSpec(params.sigma, params.radius)
        max_mag = float(sobel_gradients(gaussian_blur(img, spec)).mag.max())
        th = HysteresisThresholds(params.low, params.high, params.relative).resolve(max_mag)
        items.update(sigma=params.sigma, radius=params.radius, low=params.low, high=params.high,
                     thresholds="relative" if params.relative else "absolute",
                     max_magnitude=f"{max_mag:.6g}", low_abs=f"{th.low:.6g}", high_abs=f"{th.high:.6g}")
    else:
        items["tfrac"] = params.tfrac
    _summary("edges", True, **items, edge_pixels=int(edge.sum()), out=args.out)
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SyntheticSpec(count=args.count, size=args.size, seed=args.seed)
    manifest = generate_synthetic(spec, args.out_dir)
    _summary("synth", True, count=len(manifest), size=args.size, seed=args.seed,
             manifest=Path(args.out_dir) / "manifest.tsv")
    return EXIT_OK


def _resolve_manifest(args, data: DataConfig):
    path = getattr(args, "manifest", None) or data.manifest
    data_dir = getattr(args, "data_dir", None) or data.data_dir
    if not path and data_dir:
        path = str(Path(data_dir) / "manifest.tsv")
    if not path:
        raise UsageFailure("one of --manifest or --data-dir is required")
    return load_manifest(path)


def _split(manifest, data: DataConfig):
    train_entries, test_entries = split(manifest.entries, data.train_fraction, data.split_seed)
    if not test_entries:
        log.warning("empty test split; evaluating on the training entries")
        test_entries = train_entries
    return train_entries, test_entries


def _train_overrides(args, cfg: RunConfig) -> TrainConfig:
    tc = cfg.train
    for key in ("epochs", "seed", "batch_size"):
        value = getattr(args, key, None)
        if value is not None:
            tc = replace(tc, **{key: value})
    if getattr(args, "train_fraction", None) is not None:
        cfg.data = replace(cfg.data, train_fraction=args.train_fraction)
    return tc.validate()


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tc = _train_overrides(args, cfg)
    manifest = _resolve_manifest(args, cfg.data)
    train_entries, test_entries = _split(manifest, cfg.data)
    train_set = load_samples(manifest, tc.edges, train_entries)
    test_set = load_samples(manifest, tc.edges, test_entries)

    def progress(rec):
        if rec.test is not None:
            log.info("epoch %d lr=%.6g loss=%.4f test_dsc=%.4f", rec.epoch, rec.lr, rec.loss_total, rec.test.dsc)

    ckpt, logbook = train(train_set, test_set, tc, progress)
    Path(args.out_ckpt).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out_ckpt).write_bytes(ckpt)
    if args.log:
        Path(args.log).write_text(logbook.to_jsonl(), encoding="utf-8")
    _summary("train", True, epochs=tc.epochs, train=len(train_set), test=len(test_set),
             best_dsc=f"{logbook.best_dsc():.4f}", ckpt=args.out_ckpt)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    manifest = _resolve_manifest(args, cfg.data)
    if args.subset == "all":
        entries = manifest.entries
    else:
        train_entries, test_entries = _split(manifest, cfg.data)
        entries = train_entries if args.subset == "train" else test_entries
    model = load_checkpoint(args.ckpt)
    samples = load_samples(manifest, cfg.train.edges, entries)
    report = evaluate(model, samples)
    per_image = evaluate(model, samples, "per_image_mean")
    if args.report:
        Path(args.report).write_text(report.to_json(indent=2) + "\n", encoding="utf-8")
    _summary("eval", True, images=len(samples), accuracy=f"{report.accuracy:.4f}", precision=f"{report.precision:.4f}",
             recall=f"{report.recall:.4f}", dsc=f"{report.dsc:.4f}", per_image_dsc=f"{per_image.dsc:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = load_config(args.config)
    model = load_checkpoint(args.ckpt)
    raw = read_pgm(args.image)
    size = model.config.input_size
    if raw.shape != (size, size):
        raise DimensionError(f"image is {raw.shape[1]}x{raw.shape[0]}, model expects {size}x{size}")
    edge = cfg.train.edges.compute(raw).astype(np.float32)
    image = Tensor((raw.astype(np.float32) / 255.0)[None, None])
    mask = model.predict(image, Tensor(edge[None, None]), args.threshold)[0, 0]
    write_mask(mask, args.out_mask)
    _summary("predict", True, foreground=int(mask.sum()), threshold=args.threshold, out=args.out_mask)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    tc = _train_overrides(args, cfg)
    with tempfile.TemporaryDirectory() as tmp:
        if args.manifest or args.data_dir or cfg.data.manifest or cfg.data.data_dir:
            manifest = _resolve_manifest(args, cfg.data)
        else:
            d = cfg.data
            manifest = generate_synthetic(SyntheticSpec(d.synth_count, d.synth_size, seed=d.synth_seed), tmp)
        train_entries, test_entries = _split(manifest, cfg.data)
        if args.axis == "fusion":
            table = ablate(fusion_grid(), tc, manifest, train_entries, test_entries,
                           "Comparison of channel feature fusion methods", "Feature Fusion Method")
        else:
            table = ablate(operator_grid(), tc, manifest, train_entries, test_entries,
                           "Comparison of edge detection operators", "Method")
    text = table.to_text()
    print(text, end="")
    if args.report:
        Path(args.report).write_text(json.dumps(table.to_dict(), indent=2) + "\n", encoding="utf-8")
        Path(args.report).with_suffix(".txt").write_text(text, encoding="utf-8")
    failed = sum(r.report is None for r in table.rows)
    _summary("ablate", failed == 0, axis=args.axis, rows=len(table.rows), failed=failed)
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.seed)
    for r in results:
        print(f"  {'pass' if r.ok else 'FAIL'}  {r.name:<22} rel_err={r.error:.3e} tol={r.tol:g}")
    failed = [r.name for r in results if not r.ok]
    _summary("gradcheck", not failed, seed=args.seed, checks=len(results), failed=len(failed))
    return EXIT_OK if not failed else EXIT_VERIFY


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdseunet", description="Edge-guided dual-path UNet segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    e = sub.add_parser("edges", help="write an edge map PGM for one image")
    e.add_argument("--input", required=True, help="input 8-bit binary PGM")
    e.add_argument("--out", required=True, help="output edge PGM (values 0/255)")
    e.add_argument("--operator", choices=("canny",) + OPERATORS, help="edge operator (default canny)")
    e.add_argument("--sigma", type=float, help="Gaussian sigma for canny (default 1.4)")
    e.add_argument("--radius", type=int, help="Gaussian kernel half-width for canny (default 2)")
    e.add_argument("--low", type=float, help="canny low threshold (default 0.1, fraction of max magnitude)")
    e.add_argument("--high", type=float, help="canny high threshold (default 0.2, fraction of max magnitude)")
    e.add_argument("--absolute", action="store_true", help="treat --low/--high as absolute magnitudes")
    e.add_argument("--tfrac", type=float, help="threshold fraction for sobel/prewitt/roberts (default 0.2)")
    e.add_argument("--config", help="config file; its [canny] section supplies defaults")
    e.set_defaults(func=cmd_edges)

    s = sub.add_parser("synth", help="generate a synthetic lesion dataset with manifest")
    s.add_argument("--out-dir", required=True, help="directory for images/, masks/ and manifest.tsv")
    s.add_argument("--count", type=int, default=8, help="number of image/mask pairs (default 8)")
    s.add_argument("--size", type=int, default=64, help="square image side, multiple of 16 (default 64)")
    s.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    s.set_defaults(func=cmd_synth)

    def data_flags(q):
        g = q.add_mutually_exclusive_group()
        g.add_argument("--manifest", help="dataset manifest (TAB-separated image, mask[, edge])")
        g.add_argument("--data-dir", help="directory containing manifest.tsv")

    t = sub.add_parser("train", help="train a model and keep the best-DSC checkpoint")
    data_flags(t)
    t.add_argument("--config", help="config file with [model], [train], [canny], [data] sections")
    t.add_argument("--out-ckpt", required=True, help="path of the best checkpoint to write")
    t.add_argument("--log", help="write the per-epoch log as JSON lines here")
    t.add_argument("--epochs", type=int, help="override [train] epochs")
    t.add_argument("--seed", type=int, help="override [train] seed")
    t.add_argument("--batch-size", type=int, help="override [train] batch_size")
    t.add_argument("--train-fraction", type=float, help="override [data] train_fraction")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="evaluate a checkpoint and write a metrics JSON report")
    data_flags(v)
    v.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    v.add_argument("--report", help="write the metrics JSON here")
    v.add_argument("--config", help="config file ([canny] and [data] sections are used)")
    v.add_argument("--subset", choices=("test", "train", "all"), default="test",
                   help="which split of the manifest to score (default test)")
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="segment one image")
    r.add_argument("--image", required=True, help="input 8-bit binary PGM")
    r.add_argument("--ckpt", required=True, help="checkpoint to use")
    r.add_argument("--out-mask", required=True, help="output mask PGM (values 0/255)")
    r.add_argument("--threshold", type=float, default=0.5, help="probability threshold (default 0.5)")
    r.add_argument("--config", help="config file; its [canny] section sets the edge operator")
    r.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", help="train one model per ablation cell and tabulate metrics")
    a.add_argument("--axis", choices=("fusion", "operator"), required=True, help="which ablation grid to run")
    a.add_argument("--config", help="base config file")
    a.add_argument("--report", help="write the table as JSON here (and plain text next to it)")
    data_flags(a)
    a.add_argument("--epochs", type=int, help="override [train] epochs for every cell")
    a.add_argument("--seed", type=int, help="override [train] seed")
    a.add_argument("--batch-size", type=int, help="override [train] batch_size")
    a.add_argument("--train-fraction", type=float, help="override [data] train_fraction")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks of every op, block, loss and the model")
    g.add_argument("--seed", type=int, default=1, help="random seed (default 1)")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageFailure, ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _summary(args.command, False, error=type(exc).__name__)
        return EXIT_USAGE
    except (LoadError, DimensionError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _summary(args.command, False, error=type(exc).__name__)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
