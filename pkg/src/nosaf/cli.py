"""Command-line entry point: ``nosaf generate | train | analyze | sweep``.

Every command resolves one nested config document (defaults, then ``--config`` file,
then dotted overrides) and echoes it, with the package version, next to its outputs.
Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import MISSING, asdict, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ArgumentError, IntegrityError, NosafError, ParseError
from .graph import (SbmSpec, generate_sbm, graph_homophily, load_bundle, make_split,
                    node_homophily_all, normalize_adjacency, save_bundle)
from .model import ABLATIONS, VARIANTS, ModelConfig, forward, load_checkpoint, save_checkpoint
from .train import (ExperimentSummary, TrainConfig, _atomic_write, format_csv, run_experiment,
                    train_once, write_run_log, write_summary_csv)

log = logging.getLogger("nosaf")

OUT_ENV = "NOSAF_OUT"
DEFAULT_OUT = "nosaf-out"
AXES = ("depth", "homophily", "variant")
SWEEP_COLUMNS = ["axis", "value", "variant", "L", "target_h", "seed", "test_acc",
                 "best_val_epoch", "final_Davg", "test_acc_std", "error"]


class UsageError(NosafError, ValueError):
    """Bad command line or config; maps to exit code 2."""


# ----------------------------------------------------------------------------
# config schema and resolution


def _dataclass_section(cls, skip=()):
    out = {}
    for f in fields(cls):
        if f.name not in skip:
            out[f.name] = f.default if f.default_factory is MISSING else f.default_factory()
    return out


def default_config() -> dict:
    train = _dataclass_section(TrainConfig, skip=("model",))
    return {
        "data": {"bundle": None},
        "sbm": _dataclass_section(SbmSpec),
        "model": _dataclass_section(ModelConfig),
        "train": train,
        "sweep": {"axis": "depth", "values": [2, 4, 8, 16]},
        "analyze": {"checkpoint": None},
        "output": {"svg": False},
    }


# fields whose default is None, with the type they accept otherwise
_OPTIONAL_TYPES = {("data", "bundle"): str, ("analyze", "checkpoint"): str,
                   ("model", "filter_proj"): int, ("model", "filter_hidden"): int}
# informational top-level keys written by the config echo
_ECHO_KEYS = ("version", "command")


def _check_type(section, key, value, default):
    where = f"{section}.{key}"
    want = _OPTIONAL_TYPES.get((section, key))
    if want is not None:
        if value is None:
            return value
        default = want()
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise UsageError(f"{where} must be true or false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise UsageError(f"{where} must be an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, str):  # YAML 1.1 reads "1e-5" as a string
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"{where} must be a number, got {value!r}")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise UsageError(f"{where} must be a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise UsageError(f"{where} must be a list, got {value!r}")
    return value


def merge(config: dict, updates: dict, origin: str) -> dict:
    """Merge a nested ``updates`` document into ``config``, rejecting unknown keys."""
    if not isinstance(updates, dict):
        raise UsageError(f"{origin}: top level must be a mapping")
    for section, body in updates.items():
        if section in _ECHO_KEYS:
            continue
        if section not in config:
            raise UsageError(f"{origin}: unknown config section {section!r}")
        if not isinstance(body, dict):
            raise UsageError(f"{origin}: section {section!r} must be a mapping")
        for key, value in body.items():
            if key not in config[section]:
                raise UsageError(f"{origin}: unknown config key {section}.{key}")
            config[section][key] = _check_type(section, key, value, config[section][key])
    return config


def parse_override(text: str) -> dict:
    """``a.b=value`` becomes ``{"a": {"b": value}}``, with the value read as YAML."""
    if "=" not in text:
        raise UsageError(f"override {text!r} is not of the form section.key=value")
    path, raw = text.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise UsageError(f"override path {path!r} must look like section.key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise UsageError(f"override {text!r}: {exc}") from None
    return {parts[0]: {parts[1]: value}}


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    if path.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}:{exc.lineno}: {exc.msg}") from None
        return doc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise UsageError(f"{path}{line}: invalid config document") from None
    return {} if doc is None else doc


def split_bare_overrides(extra: list) -> list:
    """Turn leftover ``--section.key value`` / ``--section.key=value`` tokens into overrides."""
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise UsageError(f"unrecognized argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            out.append(body)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"{tok} needs a value")
            out.append(f"{body}={extra[i + 1]}")
            i += 2
    return out


def resolve(args, extra) -> dict:
    config = default_config()
    if args.config:
        merge(config, load_config_file(args.config), str(args.config))
    overrides = list(args.set or []) + split_bare_overrides(extra)
    for alias, key in getattr(args, "_aliases", {}).items():
        value = getattr(args, alias, None)
        if value is not None:
            merge(config, {key[0]: {key[1]: value}}, f"--{alias.replace('_', '-')}")
    for text in overrides:
        merge(config, parse_override(text), "--set " + text)
    return config


def build(config: dict):
    """Validated dataclasses for a resolved config; raises UsageError naming the field."""
    try:
        spec = SbmSpec(**config["sbm"])
        spec.validate()
        model = ModelConfig(**config["model"])
        train = TrainConfig(model=model, **config["train"])
    except (ArgumentError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    if config["sweep"]["axis"] not in AXES:
        raise UsageError(f"sweep.axis must be one of {AXES}, got {config['sweep']['axis']!r}")
    return spec, train


def echo(config: dict, command: str, spec: SbmSpec, train: TrainConfig) -> dict:
    """The fully-resolved config (dataclass defaults filled in) plus version and command."""
    resolved = json.loads(json.dumps(config))
    resolved["sbm"] = asdict(spec)
    resolved["model"] = asdict(train.model)
    resolved["train"] = {k: v for k, v in asdict(train).items() if k != "model"}
    return {"version": __version__, "command": command, **resolved}


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT)) / command


def _load_graph(config: dict, spec: SbmSpec):
    bundle = config["data"]["bundle"]
    if bundle is None:
        return generate_sbm(spec), None
    path = Path(bundle)
    if not path.is_dir():
        raise UsageError(f"bundle directory not found: {path}")
    return load_bundle(path)


# ----------------------------------------------------------------------------
# commands


def cmd_generate(config, spec, train, out: Path, jobs: int) -> int:
    g = generate_sbm(spec)
    save_bundle(g, out)
    _atomic_write(out / "config.json", _dump(echo(config, "generate", spec, train)))
    h = graph_homophily(g)
    print(f"wrote {out} n={g.n} edges={len(g.edges)} H={h:.4f}")
    return 0


def cmd_train(config, spec, train, out: Path, jobs: int) -> int:
    g, bundle_masks = _load_graph(config, spec)
    masks = bundle_masks if bundle_masks is not None else make_split(g, seed=train.split_seed)
    provenance = echo(config, "train", spec, train)
    _atomic_write(out / "config.json", _dump(provenance))
    mcfg = train.model

    def persist(record):
        write_run_log(out / "runs" / f"seed_{record.seed}.json", record, provenance)
        save_checkpoint(out / "checkpoints" / f"seed_{record.seed}.json", mcfg, record.params,
                        g.feature_dim, g.num_classes, extra={"config": provenance})

    summary = run_experiment(g, train, masks, jobs=jobs, on_record=persist)
    label = mcfg.canonical().variant
    write_summary_csv(out / "summary.csv", summary, label, mcfg.layers)
    if config["output"]["svg"]:
        from .plots import davg_by_layer_svg
        davg = np.mean([r.layer_davg for r in summary.records], axis=0)
        davg_by_layer_svg(out / "davg_by_layer.svg", {label: list(davg)})
    print(f"{label} L={mcfg.layers} test_acc={summary.mean:.4f}±{summary.std:.4f}")
    return 0


def homophily_histogram(g) -> tuple[list, list]:
    h = node_homophily_all(g)
    h = h[~np.isnan(h)]
    counts, edges = np.histogram(h, bins=10, range=(0.0, 1.0))
    return counts.tolist(), [round(float(e), 10) for e in edges]


def cmd_analyze(config, spec, train, out: Path, jobs: int) -> int:
    g, _ = _load_graph(config, spec)
    counts, edges = homophily_histogram(g)
    report = {"graph": g.name, "n": g.n, "edges": len(g.edges),
              "graph_homophily": graph_homophily(g),
              "isolated_nodes": int(g.n - sum(counts)),
              "histogram": {"bin_edges": edges, "counts": counts}}
    ckpt = config["analyze"]["checkpoint"]
    if ckpt is not None:
        mcfg, params, header = load_checkpoint(ckpt)
        if (header["feature_dim"], header["num_classes"]) != (g.feature_dim, g.num_classes):
            raise IntegrityError(
                f"{ckpt}: checkpoint expects feature_dim={header['feature_dim']} "
                f"num_classes={header['num_classes']}, bundle has {g.feature_dim} and "
                f"{g.num_classes}")
        trace = forward(g, normalize_adjacency(g), mcfg, params, training=False, smoothness=True)
        report["checkpoint"] = str(ckpt)
        report["variant"] = mcfg.canonical().variant
        report["stage_davg"] = trace.davg()
    report["config"] = echo(config, "analyze", spec, train)
    _atomic_write(out / "analysis.json", _dump(report))

    h = report["graph_homophily"]
    print(f"{g.name}: H={h:.4f} nodes={g.n} isolated={report['isolated_nodes']}")
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        print(f"  [{lo:.1f}, {hi:.1f}{']' if hi == 1.0 else ')'} {c}")
    if "stage_davg" in report:
        print("  D_avg per stage: " + " ".join(f"{d:.4f}" for d in report["stage_davg"]))
    return 0


def _cell_config(config: dict, axis: str, value):
    """(sbm dict, model dict, variant label) for one sweep cell."""
    sbm, model = dict(config["sbm"]), dict(config["model"])
    label = None
    if axis == "depth":
        model["layers"] = value
    elif axis == "homophily":
        sbm["target_h"] = value
    else:
        if value in ABLATIONS:
            model.update(ABLATIONS[value])
            label = value
        elif value in VARIANTS:
            model["variant"] = value
        else:
            raise UsageError(f"sweep value {value!r} is neither a variant nor an ablation "
                             f"({', '.join(VARIANTS + tuple(ABLATIONS))})")
    return sbm, model, label


def _run_cell(job):
    """Worker body for one (axis value, seed) cell; never raises."""
    config, axis, value, seed = job
    sbm, model, label = _cell_config(config, axis, value)
    row = {"axis": axis, "value": value, "seed": seed, "error": ""}
    try:
        spec = SbmSpec(**sbm)
        mcfg = ModelConfig(**model)
        train = TrainConfig(model=mcfg, **{**config["train"], "seeds": [seed]})
        row.update(variant=label or mcfg.canonical().variant, L=mcfg.layers)
        bundle = config["data"]["bundle"]
        g, masks = load_bundle(bundle) if bundle else (generate_sbm(spec), None)
        row["target_h"] = spec.target_h if not bundle else ""
        masks = masks if masks is not None else make_split(g, seed=train.split_seed)
        rec = train_once(g, masks, train, seed)
        row.update(test_acc=rec.test_accuracy_at_best_val, best_val_epoch=rec.best_val_epoch,
                   final_Davg=rec.final_davg)
    except Exception as exc:  # recorded in the errors column; the sweep carries on
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _value_key(value) -> str:
    return json.dumps(value)


def read_sweep_csv(path: Path) -> list:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SWEEP_COLUMNS:
            raise UsageError(f"{path}: header does not match this version's sweep columns")
        return list(reader)


def _aggregate(rows: list, axis: str, value) -> dict:
    ok = [r for r in rows if not r["error"]]
    accs = [float(r["test_acc"]) for r in ok]
    first = rows[0]
    agg = {"axis": axis, "value": value, "variant": first.get("variant", ""),
           "L": first.get("L", ""), "target_h": first.get("target_h", ""), "seed": "aggregate",
           "best_val_epoch": "", "error": ""}
    if accs:
        agg["test_acc"] = float(np.mean(accs))
        agg["test_acc_std"] = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        agg["final_Davg"] = float(np.mean([float(r["final_Davg"]) for r in ok]))
    else:
        agg.update(test_acc="", test_acc_std="", final_Davg="")
        agg["error"] = "no successful seeds"
    if len(ok) < len(rows):
        agg["error"] = f"{len(rows) - len(ok)} failed seed(s)"
    return agg


def _sweep_rows(done: dict, axis: str, values: list, seeds: list) -> list:
    rows = []
    for value in values:
        cell = [done[(_value_key(value), str(s))] for s in seeds
                if (_value_key(value), str(s)) in done]
        rows += cell
        if len(cell) == len(seeds):
            rows.append(_aggregate(cell, axis, value))
    return rows


def cmd_sweep(config, spec, train, out: Path, jobs: int) -> int:
    axis, values = config["sweep"]["axis"], config["sweep"]["values"]
    if not values:
        raise UsageError("sweep.values must not be empty")
    for value in values:
        _cell_config(config, axis, value)  # validates variant names up front
    seeds = sorted(train.seeds)
    provenance = echo(config, "sweep", spec, train)
    sidecar, table = out / "sweep.config.json", out / "sweep.csv"
    if sidecar.exists():
        previous = json.loads(sidecar.read_text(encoding="utf-8"))
        strip = lambda d: {k: v for k, v in d.items() if k not in ("sweep", "version")}
        if strip(previous) != strip(provenance) or previous["sweep"]["axis"] != axis:
            raise UsageError(f"{out} holds a sweep with a different config; use another --out")
    _atomic_write(sidecar, _dump(provenance))

    done = {}
    for row in read_sweep_csv(table):
        if row["seed"] != "aggregate" and not row["error"]:
            value = yaml.safe_load(row["value"])
            done[(_value_key(value), row["seed"])] = row
    todo = [(config, axis, v, s) for v in values for s in seeds
            if (_value_key(v), str(s)) not in done]
    log.info("sweep: %d cells done, %d to run", len(done), len(todo))

    def record(row):
        row = {k: ("" if row.get(k) is None else row.get(k, "")) for k in SWEEP_COLUMNS}
        done[(_value_key(row["value"]), str(row["seed"]))] = {k: str(v) for k, v in row.items()}
        _atomic_write(table, format_csv(_sweep_rows(done, axis, values, seeds), SWEEP_COLUMNS))

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for fut in as_completed([pool.submit(_run_cell, job) for job in todo]):
                record(fut.result())
    else:
        for job in todo:
            record(_run_cell(job))
    if not todo:
        _atomic_write(table, format_csv(_sweep_rows(done, axis, values, seeds), SWEEP_COLUMNS))

    rows = _sweep_rows(done, axis, values, seeds)
    failures = sum(1 for r in rows if r["seed"] != "aggregate" and r["error"])
    for r in rows:
        if r["seed"] == "aggregate" and r["test_acc"] != "":
            print(f"{axis}={r['value']} {r['variant']} L={r['L']} "
                  f"test_acc={float(r['test_acc']):.4f}±{float(r['test_acc_std']):.4f}")
    if config["output"]["svg"] and axis in ("depth", "homophily"):
        from .plots import accuracy_curve_svg
        agg = [r for r in rows if r["seed"] == "aggregate" and r["test_acc"] != ""]
        accuracy_curve_svg(out / f"accuracy_vs_{axis}.svg", axis,
                           [float(r["value"]) for r in agg],
                           [float(r["test_acc"]) for r in agg],
                           [float(r["test_acc_std"]) for r in agg])
    if failures:
        print(f"{failures} cell(s) failed; see the error column in {table}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "analyze": cmd_analyze,
            "sweep": cmd_sweep}


# ----------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config document")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
    common.add_argument("--seed", type=int,
                        help="generate: the graph seed; train/sweep: first of the run seeds")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="config override, repeatable")
    common.add_argument("--bundle", help="graph bundle directory (data.bundle)")
    common.add_argument("--svg", action="store_true", default=None,
                        help="also write SVG line charts")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="nosaf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nosaf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    gen = sub.add_parser("generate", parents=[common], help="write a synthetic SBM bundle")
    for flag, typ in (("n", int), ("k", int), ("target-h", float), ("avg-degree", float),
                      ("feature-dim", int), ("class-separation", float), ("noise-std", float)):
        gen.add_argument(f"--{flag}", type=typ)
    sub.add_parser("train", parents=[common], help="multi-seed training run")
    ana = sub.add_parser("analyze", parents=[common], help="homophily and smoothness report")
    ana.add_argument("bundle_pos", nargs="?", metavar="BUNDLE")
    ana.add_argument("--checkpoint")
    sw = sub.add_parser("sweep", parents=[common], help="depth, homophily or variant sweep")
    sw.add_argument("--axis", choices=AXES)
    sw.add_argument("--values", help="comma-separated axis values")
    return parser


def _aliases(args) -> dict:
    table = {"bundle": ("data", "bundle"), "svg": ("output", "svg")}
    if args.command == "generate":
        for name in ("n", "k", "target_h", "avg_degree", "feature_dim", "class_separation",
                     "noise_std"):
            table[name] = ("sbm", name)
    if args.command == "analyze":
        table["bundle_pos"] = ("data", "bundle")
        table["checkpoint"] = ("analyze", "checkpoint")
    if args.command == "sweep":
        table["axis"] = ("sweep", "axis")
    return table


def main(argv=None) -> int:
    try:
        args, extra = make_parser().parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args._aliases = _aliases(args)
        config = resolve(args, extra)
        if getattr(args, "values", None):
            merge(config, {"sweep": {"values": [yaml.safe_load(v) for v in
                                                args.values.split(",")]}}, "--values")
        if args.seed is not None:
            if args.command == "generate":
                config["sbm"]["seed"] = args.seed
            else:
                count = len(config["train"]["seeds"])
                config["train"]["seeds"] = list(range(args.seed, args.seed + count))
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        spec, train = build(config)
        return COMMANDS[args.command](config, spec, train, out_dir(args, args.command),
                                      args.jobs)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UsageError, ArgumentError, ParseError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
