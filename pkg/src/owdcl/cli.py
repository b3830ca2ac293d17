"""Command-line entry point: ``owdcl generate|pretrain|adapt|ablate|eval``.

Every command reads one INI config (or a manifest JSON written by an earlier
command), writes ``manifest_<command>.json`` to the output directory before any
other output, and reports failures on stderr as a JSON object carrying a
machine-readable error code.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import re
import sys
from dataclasses import fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import DatasetSpec, generate_source, generate_target, read_dataset, write_dataset
from .encoder import PretrainConfig, PretrainOutput, pretrain, read_checkpoint, write_checkpoint
from .errors import ConfigError, DimensionMismatch, FormatError, OWDCLError
from .harness import (
    AdaptConfig,
    MetricsAccumulator,
    RunReport,
    metrics,
    metrics_or_none,
    run_one_pass,
    write_feature_dump,
    write_results_line,
)
from .numerics import GaussianStats
from .prototypes import dump_bank

SECTIONS = {"dataset": DatasetSpec, "pretrain": PretrainConfig, "adapt": AdaptConfig}
DEFAULT_OUT = "owdcl-out"
REQUIRED_KEYS = (("dataset", "num_source_classes"), ("dataset", "num_strong_classes"))

DEFAULT_CONFIG = """\
# owdcl run configuration; every key is optional except the two class counts.
[dataset]
num_source_classes = 6
num_strong_classes = 3
samples_per_class = 200
target_size = 2560
height = 16
width = 16
corruption = gaussian_noise
severity = 3
strong_ratio = 0.5
seed = 1337

[pretrain]
hidden = 64
feature_dim = 32
epochs = 30
lr = 0.1
batch_size = 32
seed = 1337

[adapt]
gamma1 = 0.8
gamma2 = 0.4
alpha1 = 1.0
alpha2 = 2.0
delta = 0.1
lr = 0.001
batch_size = 64
queue_capacity = 100
window = 512
beta = 0.99
alpha1_decayed = 0.1
alpha1_switch_batch = 20
use_ps = true
use_cs = true
seed = 1337
"""


class RunConfig:
    """Dataset, pretraining and adaptation settings for one invocation."""

    def __init__(self, dataset: DatasetSpec, pretrain_cfg: PretrainConfig, adapt: AdaptConfig,
                 paths: dict | None = None):
        self.dataset = dataset
        self.pretrain = pretrain_cfg
        self.adapt = adapt
        self.paths = paths or {}

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "pretrain": {f.name: getattr(self.pretrain, f.name) for f in fields(self.pretrain)},
            "adapt": self.adapt.to_dict(),
        }

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(replace(self.dataset, seed=seed), replace(self.pretrain, seed=seed),
                         replace(self.adapt, seed=seed), self.paths)

    def with_toggles(self, ps: bool | None, cs: bool | None) -> "RunConfig":
        adapt = self.adapt
        if ps is not None:
            adapt = replace(adapt, use_ps=ps)
        if cs is not None:
            adapt = replace(adapt, use_cs=cs)
        return RunConfig(self.dataset, self.pretrain, adapt, self.paths)


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Map ``(section, key)`` to the 1-based line that defines it."""
    where = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"\s*([^#;\s=:][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            where[(section, m.group(1).lower())] = lineno
    return where


def _convert(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            value = raw.strip().lower()
            if value in ("1", "true", "yes", "on"):
                return True
            if value in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {type(default).__name__}") from None


def _build(values: dict[str, dict], locate) -> RunConfig:
    built = {}
    for section, cls in SECTIONS.items():
        defaults = cls()
        kwargs = {}
        known = {f.name: getattr(defaults, f.name) for f in fields(cls)}
        for key, raw in values.get(section, {}).items():
            if key not in known:
                raise ConfigError(f"{locate(section, key)}: unknown key {section}.{key}")
            if isinstance(raw, str):
                kwargs[key] = _convert(raw, known[key], locate(section, key))
            else:
                kwargs[key] = raw
        try:
            built[section] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"section [{section}]: {exc}") from None
    try:
        built["dataset"].validate()
    except OWDCLError as exc:
        raise ConfigError(f"section [dataset]: {exc}") from None
    return RunConfig(built["dataset"], built["pretrain"], built["adapt"])


def parse_config(text: str, name: str = "<config>") -> RunConfig:
    """Parse INI text; errors name the file, line and key."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=name)
    except configparser.Error as exc:
        raise ConfigError(" ".join(str(exc).split())) from None
    lines = _key_lines(text)

    def locate(section, key):
        return f"{name}:{lines[(section, key)]}" if (section, key) in lines else name

    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{name}: unknown section [{section}]")
    for section, key in REQUIRED_KEYS:
        if not parser.has_option(section, key):
            raise ConfigError(f"{name}: missing required key {section}.{key}")
    values = {s: dict(parser.items(s)) for s in parser.sections()}
    return _build(values, locate)


def load_config(path: str | None) -> RunConfig:
    """Read an INI config or a manifest JSON; no path means built-in defaults."""
    if path is None:
        return parse_config(DEFAULT_CONFIG, "<defaults>")
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
            snapshot = doc["config"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: not a manifest ({exc})") from None
        cfg = _build(snapshot, lambda section, key: str(path))
        cfg.paths = dict(doc.get("paths", {}))
        return cfg
    return parse_config(text, str(path))


def write_manifest(out: Path, command: str, cfg: RunConfig, paths: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "tool": "owdcl",
        "version": __version__,
        "command": command,
        "created": datetime.now(timezone.utc).isoformat(),
        "config": cfg.to_dict(),
        "seeds": {"dataset": cfg.dataset.seed, "pretrain": cfg.pretrain.seed, "adapt": cfg.adapt.seed},
        "paths": {k: str(v) for k, v in paths.items()},
    }
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _path(args, cfg: RunConfig, name: str, default: str) -> Path:
    value = getattr(args, name, None)
    if value is not None:
        return Path(value)
    if name in cfg.paths:
        return Path(cfg.paths[name])
    return Path(args.out) / default


def write_prototypes(path: Path, out: PretrainOutput) -> None:
    _write_json(path, {
        "num_source_classes": int(out.prototypes.shape[0]),
        "feature_dim": int(out.prototypes.shape[1]),
        "prototypes": out.prototypes.tolist(),
        "source_stats": out.source_stats.to_dict(),
        "train_accuracy": out.train_accuracy,
    })


def read_pretrained(checkpoint: Path, prototypes: Path) -> PretrainOutput:
    params = read_checkpoint(checkpoint)
    try:
        doc = json.loads(prototypes.read_text())
        protos = np.asarray(doc["prototypes"], dtype=np.float64)
        stats = GaussianStats.from_dict(doc["source_stats"])
    except OSError as exc:
        raise FormatError(f"{prototypes}: {exc.strerror}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{prototypes}: malformed prototype file ({exc})") from None
    if protos.ndim != 2 or protos.shape[1] != params.feature_dim or stats.dim != params.feature_dim:
        raise DimensionMismatch(f"{prototypes}: prototypes do not match the {params.feature_dim}-d checkpoint")
    if protos.shape[0] != params.num_classes:
        raise DimensionMismatch(f"{prototypes}: {protos.shape[0]} prototypes for a {params.num_classes}-class head")
    return PretrainOutput(params, protos, stats, float(doc.get("train_accuracy", float("nan"))), [])


def _load_dataset(path: Path):
    if not path.exists():
        raise FormatError(f"{path}: no such file")
    return read_dataset(path)


def cmd_generate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    source_path, target_path = out / "source.owds", out / "target.owds"
    write_manifest(out, "generate", cfg, {"out": out, "source": source_path, "target": target_path})
    write_dataset(source_path, generate_source(cfg.dataset))
    target = generate_target(cfg.dataset)
    write_dataset(target_path, target)
    print(f"wrote {source_path} ({cfg.dataset.num_source_classes * cfg.dataset.samples_per_class} records) "
          f"and {target_path} ({len(target)} records)")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    source_path = _path(args, cfg, "source", "source.owds")
    ckpt, protos = out / "checkpoint.owck", out / "prototypes.json"
    write_manifest(out, "pretrain", cfg, {"out": out, "source": source_path, "checkpoint": ckpt,
                                          "prototypes": protos})
    source = _load_dataset(source_path)
    result = pretrain(source.images, source.labels, source.num_source_classes, cfg.pretrain)
    write_checkpoint(ckpt, result.params)
    write_prototypes(protos, result)
    print(f"source train accuracy {result.train_accuracy:.4f}; wrote {ckpt} and {protos}")
    return 0


def _prepare_adapt(args, cfg: RunConfig):
    checkpoint = _path(args, cfg, "checkpoint", "checkpoint.owck")
    prototypes = _path(args, cfg, "prototypes", "prototypes.json")
    target_path = _path(args, cfg, "target", "target.owds")
    pre = read_pretrained(checkpoint, prototypes)
    target = _load_dataset(target_path)
    if target.height * target.width != pre.params.input_dim:
        raise DimensionMismatch(f"{target_path}: {target.height}x{target.width} images, checkpoint "
                                f"expects {pre.params.input_dim} pixels")
    if target.num_source_classes != pre.prototypes.shape[0]:
        raise DimensionMismatch(f"{target_path}: {target.num_source_classes} source classes, prototypes "
                                f"have {pre.prototypes.shape[0]}")
    return {"checkpoint": checkpoint, "prototypes": prototypes, "target": target_path}, pre, target


def _summary(report: RunReport, cfg: AdaptConfig) -> dict:
    doc = report.summary()
    doc["use_ps"] = cfg.use_ps
    doc["use_cs"] = cfg.use_cs
    return doc


def cmd_adapt(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    inputs, pre, target = _prepare_adapt(args, cfg)
    results_path, summary_path = out / "results.jsonl", out / "summary.json"
    paths = dict(inputs, out=out, results=results_path, summary=summary_path)
    if args.dump_features:
        paths["features"] = out / "features.owfd"
    if args.dump_bank:
        paths["bank"] = out / "bank.json"
    write_manifest(out, "adapt", cfg, paths)
    with open(results_path, "w") as fh:
        try:
            report = run_one_pass(pre, target, cfg.adapt, on_batch=lambda r: write_results_line(fh, r),
                                  keep_features=args.dump_features)
        except OWDCLError as exc:
            _write_json(summary_path, {"error": exc.code, "message": str(exc)})
            raise
    _write_json(summary_path, _summary(report, cfg.adapt))
    if args.dump_features and report.features is not None:
        write_feature_dump(paths["features"], report.features, pre.params.feature_dim)
    if args.dump_bank:
        dump_bank(paths["bank"], report.bank, report.tau_history)
    print(_format_metrics(report.acc_s, report.acc_n, report.acc_h))
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    """Run the 2x2 PS/CS toggle grid on one target stream."""
    out = Path(args.out)
    inputs, pre, target = _prepare_adapt(args, cfg)
    ablation_path = out / "ablation.json"
    write_manifest(out, "ablate", cfg, dict(inputs, out=out, ablation=ablation_path))
    rows = []
    for ps in (False, True):
        for cs in (False, True):
            adapt = replace(cfg.adapt, use_ps=ps, use_cs=cs)
            rows.append(_summary(run_one_pass(pre, target, adapt), adapt))
    _write_json(ablation_path, rows)
    print("PS  CS  " + _format_metrics(None, None, None, header_only=True))
    for r in rows:
        print(f"{'on ' if r['use_ps'] else 'off'} {'on ' if r['use_cs'] else 'off'} "
              + _format_metrics(r["acc_s"], r["acc_n"], r["acc_h"], values_only=True))
    return 0


def _check_record(doc, lineno: int, path) -> None:
    where = f"{path}:{lineno}"
    if not isinstance(doc, dict):
        raise FormatError(f"{where}: expected a JSON object")
    samples = doc.get("samples")
    m = doc.get("num_source_classes")
    if not isinstance(doc.get("batch"), int) or not isinstance(m, int) or not isinstance(samples, dict):
        raise FormatError(f"{where}: missing batch, num_source_classes or samples")
    labels, preds = samples.get("label"), samples.get("pred")
    if not isinstance(labels, list) or not isinstance(preds, list) or len(labels) != len(preds):
        raise FormatError(f"{where}: samples.label and samples.pred must be lists of equal length")
    if not all(isinstance(v, int) for v in labels + preds):
        raise FormatError(f"{where}: labels and predictions must be integers")


def evaluate_results(path) -> tuple[tuple[float, float, float], list[dict]]:
    """Recompute final metrics and the per-batch curve from per-sample records."""
    acc = MetricsAccumulator()
    curve = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            _check_record(doc, lineno, path)
            acc.update(doc["samples"]["pred"], doc["samples"]["label"], doc["num_source_classes"])
            s, n, h = metrics_or_none(acc)
            curve.append({"batch": doc["batch"], "samples": acc.seen, "acc_s": s, "acc_n": n, "acc_h": h})
    return metrics(acc), curve


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    results = _path(args, cfg, "results", "results.jsonl")
    curve_path, metrics_path = out / "acc_curve.csv", out / "metrics.json"
    write_manifest(out, "eval", cfg, {"out": out, "results": results, "curve": curve_path,
                                      "metrics": metrics_path})
    if not results.exists():
        raise FormatError(f"{results}: no such file")
    (s, n, h), curve = evaluate_results(results)
    with open(curve_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["batch", "samples", "acc_s", "acc_n", "acc_h"])
        writer.writeheader()
        for row in curve:
            writer.writerow({k: "" if v is None else v for k, v in row.items()})
    _write_json(metrics_path, {"acc_s": s, "acc_n": n, "acc_h": h, "samples": curve[-1]["samples"],
                               "batches": len(curve)})
    print(_format_metrics(s, n, h))
    return 0


def _format_metrics(s, n, h, header_only=False, values_only=False) -> str:
    header = f"{'Acc_S':>8} {'Acc_N':>8} {'Acc_H':>8}"
    if header_only:
        return header
    cells = " ".join(f"{100 * v:8.2f}" if v is not None else f"{'n/a':>8}" for v in (s, n, h))
    return cells if values_only else header + "\n" + cells


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
            "ablate": cmd_ablate, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config or a manifest JSON from an earlier run")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", help=f"output directory (default: {DEFAULT_OUT})")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="owdcl", description="Open-world test-time training toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write source and target datasets")
    p = sub.add_parser("pretrain", parents=[common], help="train the source model")
    p.add_argument("--source", help="source dataset (default: OUT/source.owds)")
    for name, helptext in (("adapt", "adapt on the target stream"), ("ablate", "run the PS/CS 2x2 grid")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", help="default: OUT/checkpoint.owck")
        p.add_argument("--prototypes", help="default: OUT/prototypes.json")
        p.add_argument("--target", help="default: OUT/target.owds")
        if name == "adapt":
            p.add_argument("--ps", action=argparse.BooleanOptionalAction, default=None,
                           help="enable the pair-sample loss")
            p.add_argument("--cs", action=argparse.BooleanOptionalAction, default=None,
                           help="enable the cluster-sample losses")
            p.add_argument("--dump-features", action="store_true", help="write OUT/features.owfd")
            p.add_argument("--dump-bank", action="store_true", help="write OUT/bank.json")
    p = sub.add_parser("eval", parents=[common], help="recompute metrics from results JSONL")
    p.add_argument("--results", help="default: OUT/results.jsonl")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        cfg = cfg.with_toggles(getattr(args, "ps", None), getattr(args, "cs", None))
        if args.out is None:
            args.out = cfg.paths.get("out", DEFAULT_OUT)
        return COMMANDS[args.command](args, cfg)
    except OWDCLError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": "IO_ERROR", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
