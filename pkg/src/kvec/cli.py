"""Command-line interface: datasets, training, evaluation, and diagnostics.

Subcommands: generate, train, eval, sweep, analyze, stream, gradcheck.

Configuration can come from a TOML file (one table per area: [dataset],
[model], [train], [eval], [sweep], [analyze], [stream], [gradcheck]);
command-line flags override file values, and unknown sections or keys are
rejected. Every run creates a run directory — the exact --run-dir if given,
otherwise a timestamped folder under $KVEC_RUNS (default ./runs) — holding
an echo of the effective configuration, a log, and the output files.

Exit codes: 0 success, 1 usage error, 2 validation/invariant failure,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import numerics as nm
from .datasets import SyntheticConfig, build_synthetic, load_dataset, save_dataset
from .evalkit import (attention_split, evaluate, halting_baseline,
                      halting_histogram, sweep, write_attention_split,
                      write_curve, write_halting_hist, write_metrics)
from .gradcheck import TOLERANCE, format_table, run_suite
from .model import Model, ModelConfig
from .streaming import StreamEngine
from .training import TrainConfig, train, write_history

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_NUMERIC = 3

RUN_DIR_ENV = "KVEC_RUNS"


class UsageError(Exception):
    """Bad invocation: missing files, malformed flags, impossible requests."""


_MODEL_KEYS = ({f.name for f in dataclasses.fields(ModelConfig)}
               - {"schema", "class_count", "numeric_stats"})
_TRAIN_KEYS = ({f.name for f in dataclasses.fields(TrainConfig)}
               | {"checkpoint_every"})
_DATASET_KEYS = {f.name for f in dataclasses.fields(SyntheticConfig)}

_SECTION_KEYS = {
    "dataset": _DATASET_KEYS,
    "model": _MODEL_KEYS,
    "train": _TRAIN_KEYS,
    "eval": {"split", "mode", "param", "fixed_tau", "confidence_mu",
             "rng_seed"},
    "sweep": {"parameter", "grid", "seeds", "split"},
    "analyze": {"split", "bins", "rows_per_key"},
    "stream": {"input", "output"},
    "gradcheck": {"seed", "items", "keys", "step", "tolerance"},
}


def _json(data):
    """JSON line; numpy scalars degrade to plain floats."""
    return json.dumps(data, default=float)


# --------------------------------------------------------------- config file

def load_config(path):
    """Parse and key-validate a TOML config file -> {section: {key: value}}."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as err:
        raise ValueError(f"config file {path}: {err}") from err
    for section, table in raw.items():
        if section not in _SECTION_KEYS:
            raise ValueError(
                f"config file {path}: unknown section [{section}]; expected "
                f"one of {sorted(_SECTION_KEYS)}")
        if not isinstance(table, dict):
            raise ValueError(
                f"config file {path}: [{section}] must be a table, not a "
                "bare value")
        unknown = sorted(set(table) - _SECTION_KEYS[section])
        if unknown:
            raise ValueError(
                f"config file {path}: unknown key {unknown[0]!r} in "
                f"[{section}]")
    return raw


def effective(file_config, section, overrides):
    """File values for `section` with non-None flag overrides applied."""
    table = dict(file_config.get(section, {}))
    table.update({k: v for k, v in overrides.items() if v is not None})
    return table


def _toml_scalar(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return repr(v)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise ValueError(f"cannot echo config value of type {type(value).__name__}")


def write_config_echo(sections, path):
    """Write the effective configuration as a TOML file the CLI re-accepts.

    None values are skipped (TOML has no null); a window of None is echoed
    as 0, which the loader normalizes back to None.
    """
    lines = []
    for section, table in sections.items():
        lines.append(f"[{section}]")
        for key in sorted(table):
            value = table[key]
            if key == "window" and value is None:
                value = 0
            if value is None:
                continue
            lines.append(f"{key} = {_toml_scalar(value)}")
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def _normalize_window(table):
    if table.get("window") in (0, False, "none"):
        table["window"] = None
    return table


# ------------------------------------------------------------- run directory

def make_run_dir(args):
    if args.run_dir:
        path = Path(args.run_dir)
        path.mkdir(parents=True, exist_ok=True)
        return path
    base = Path(os.environ.get(RUN_DIR_ENV, "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for attempt in range(10000):
        suffix = "" if attempt == 0 else f"-{attempt:04d}"
        path = base / f"{args.command}-{stamp}{suffix}"
        try:
            path.mkdir(parents=True, exist_ok=False)
            return path
        except FileExistsError:
            continue
    raise UsageError(f"could not allocate a run directory under {base}")


class RunLog:
    """Appends elapsed-time-stamped lines to <run dir>/run.log."""

    def __init__(self, run_dir, argv=None):
        self.path = Path(run_dir) / "run.log"
        self.start = time.monotonic()
        if argv is not None:
            self(f"argv: {argv}")

    def __call__(self, message):
        elapsed = time.monotonic() - self.start
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"[{elapsed:9.3f}s] {message}\n")


# ------------------------------------------------------------------- helpers

def _split_of(dataset, name):
    if name not in dataset.splits:
        raise ValueError(
            f"dataset has no split {name!r}; available: "
            f"{sorted(dataset.splits)}")
    return dataset.splits[name]


def _load_model(path):
    if not Path(path).exists():
        raise UsageError(f"model checkpoint not found: {path}")
    return Model.load(path)


def _load_data(path):
    if not Path(path).exists():
        raise UsageError(f"dataset directory not found: {path}")
    return load_dataset(path)


def _model_config(file_config, args, dataset):
    table = _normalize_window(effective(file_config, "model", {
        "d": args.d, "blocks": args.blocks, "ffn_width": args.ffn_width,
        "fusion_width": args.fusion_width, "window": args.window,
        "slot_count": args.slot_count, "max_seq_pos": args.max_seq_pos,
        "time_table_size": args.time_table_size, "dropout": args.dropout,
        "dtype": args.dtype, "residual": args.residual,
        "policy_bias_init": args.policy_bias_init,
        "key_correlation": args.key_correlation,
        "value_correlation": args.value_correlation,
    }))
    return ModelConfig(schema=dataset.schema,
                       class_count=dataset.manifest["class_count"], **table)


def _train_config(file_config, args):
    table = effective(file_config, "train", {
        "epochs": args.epochs, "learning_rate": args.learning_rate,
        "baseline_learning_rate": args.baseline_learning_rate,
        "alpha": args.alpha, "beta": args.beta, "seed": args.seed,
        "update_every": args.update_every, "chunk": args.chunk,
        "explore": args.explore,
        "checkpoint_every": args.checkpoint_every,
    })
    checkpoint_every = int(table.pop("checkpoint_every", 0) or 0)
    return TrainConfig(**table), checkpoint_every


def _echo_model(config):
    table = {key: getattr(config, key) for key in sorted(_MODEL_KEYS)}
    return table


def _echo_train(config, checkpoint_every):
    table = dataclasses.asdict(config)
    if checkpoint_every:
        table["checkpoint_every"] = checkpoint_every
    return table


# ---------------------------------------------------------------- subcommands

def cmd_generate(args):
    file_config = load_config(args.config) if args.config else {}
    table = effective(file_config, "dataset", {
        "classes": args.classes, "flows": args.flows,
        "flow_len": args.flow_len, "signal_len": args.signal_len,
        "signal_pos": args.signal_pos, "concurrency": args.concurrency,
        "flows_per_tangle": args.flows_per_tangle,
        "homophily": args.homophily,
        "session_continue": args.session_continue, "seed": args.seed,
    })
    config = SyntheticConfig(**table)
    run_dir = make_run_dir(args)
    log = RunLog(run_dir, sys.argv[1:] if args.echo_argv else None)
    log(f"generating dataset: {config}")
    dataset = build_synthetic(config)
    out = Path(args.out) if args.out else run_dir / "dataset"
    save_dataset(dataset, out)
    write_config_echo({"dataset": dataclasses.asdict(config)},
                      run_dir / "config.toml")
    log(f"wrote dataset to {out}")
    summary = {
        "command": "generate", "run_dir": str(run_dir), "dataset": str(out),
        "oracle_accuracy": dataset.manifest["oracle_accuracy"],
        "avg_session_length": dataset.manifest["avg_session_length"],
        "splits": {name: dataset.manifest["splits"][name]["flows"]
                   for name in dataset.splits},
    }
    print(_json(summary))
    return EXIT_OK


def cmd_train(args):
    file_config = load_config(args.config) if args.config else {}
    dataset = _load_data(args.data)
    model_config = _model_config(file_config, args, dataset)
    train_config, checkpoint_every = _train_config(file_config, args)
    tangles = _split_of(dataset, args.split or "train")

    run_dir = make_run_dir(args)
    log = RunLog(run_dir, sys.argv[1:] if args.echo_argv else None)
    write_config_echo({"model": _echo_model(model_config),
                       "train": _echo_train(train_config, checkpoint_every)},
                      run_dir / "config.toml")
    log(f"training on {len(tangles)} tangled sequences from {args.data}")

    model = Model(model_config, seed=train_config.seed)
    checkpoint_dir = run_dir / "checkpoints"

    def on_epoch(m, row):
        log(f"epoch {row['epoch']}: total={row['total']:.6f} "
            f"accuracy={row['accuracy']:.4f} earliness={row['earliness']:.4f}")
        if checkpoint_every and row["epoch"] % checkpoint_every == 0:
            checkpoint_dir.mkdir(exist_ok=True)
            m.save(checkpoint_dir / f"epoch{row['epoch']:04d}.ckpt")

    history = train(model, tangles, train_config, on_epoch=on_epoch)
    write_history(history, run_dir / "history.csv")
    model.save(run_dir / "model.ckpt")
    log(f"saved final checkpoint to {run_dir / 'model.ckpt'}")

    summary = {
        "command": "train", "run_dir": str(run_dir),
        "model": str(run_dir / "model.ckpt"), "epochs": len(history),
        "final": {k: history[-1][k] for k in ("total", "accuracy",
                                              "earliness")},
    }
    if "validation" in dataset.splits:
        result = evaluate(model, dataset.splits["validation"],
                          chunk=train_config.chunk)
        write_metrics([("threshold@validation", result)],
                      run_dir / "metrics.csv")
        summary["validation"] = result.row()
        log(f"validation: accuracy={result.accuracy:.4f} "
            f"earliness={result.earliness:.4f}")
    print(_json(summary))
    return EXIT_OK


def cmd_eval(args):
    file_config = load_config(args.config) if args.config else {}
    table = effective(file_config, "eval", {
        "split": args.split, "mode": args.mode, "param": args.param,
        "fixed_tau": args.fixed_tau, "confidence_mu": args.confidence_mu,
        "rng_seed": args.rng_seed,
    })
    model = _load_model(args.model)
    dataset = _load_data(args.data)
    split = table.get("split", "test")
    mode = table.get("mode", "threshold")
    param = table.get("param")
    tangles = _split_of(dataset, split)

    run_dir = make_run_dir(args)
    log = RunLog(run_dir, sys.argv[1:] if args.echo_argv else None)
    write_config_echo({"eval": dict(table, split=split, mode=mode)},
                      run_dir / "config.toml")

    rng = (np.random.default_rng(table.get("rng_seed", 0))
           if mode == "sample" else None)
    label = mode if param is None else f"{mode}={param:g}"
    labeled = [(label, evaluate(model, tangles, mode=mode, param=param,
                                rng=rng))]
    for tau in table.get("fixed_tau") or []:
        labeled.append((f"fixed-tau={tau:g}",
                        halting_baseline(model, tangles, "fixed", tau)))
    for mu in table.get("confidence_mu") or []:
        labeled.append((f"confidence-mu={mu:g}",
                        halting_baseline(model, tangles, "confidence", mu)))
    write_metrics(labeled, run_dir / "metrics.csv")
    for name, result in labeled:
        log(f"{name}: accuracy={result.accuracy:.4f} "
            f"earliness={result.earliness:.4f} hm={result.hm:.4f}")

    summary = {"command": "eval", "run_dir": str(run_dir), "split": split,
               "rows": [dict(result.row(), config=name)
                        for name, result in labeled]}
    print(_json(summary))
    return EXIT_OK


def cmd_sweep(args):
    file_config = load_config(args.config) if args.config else {}
    table = effective(file_config, "sweep", {
        "parameter": args.parameter, "grid": args.grid, "seeds": args.seeds,
        "split": args.split,
    })
    parameter = table.get("parameter")
    if parameter not in ("alpha", "beta", "tau", "mu"):
        raise UsageError("sweep parameter must be one of alpha, beta, tau, mu")
    grid = table.get("grid")
    if not grid:
        raise UsageError("sweep needs a non-empty --grid")
    seeds = [int(s) for s in table.get("seeds") or [0]]
    dataset = _load_data(args.data)

    run_dir = make_run_dir(args)
    log = RunLog(run_dir, sys.argv[1:] if args.echo_argv else None)

    echo = {"sweep": {"parameter": parameter, "grid": list(grid),
                      "seeds": seeds}}
    if parameter in ("alpha", "beta"):
        model_config = _model_config(file_config, args, dataset)
        train_config, _ = _train_config(file_config, args)
        split = table.get("split", "validation")
        train_tangles = _split_of(dataset, "train")
        eval_tangles = _split_of(dataset, split)
        echo["sweep"]["split"] = split
        echo["model"] = _echo_model(model_config)
        echo["train"] = _echo_train(train_config, 0)

        def runner(value, seed):
            cfg = dataclasses.replace(train_config, seed=seed,
                                      **{parameter: value})
            model = Model(model_config, seed=seed)
            train(model, train_tangles, cfg)
            return evaluate(model, eval_tangles, chunk=cfg.chunk)
    else:
        if not args.model:
            raise UsageError(f"sweep over {parameter} needs --model")
        model = _load_model(args.model)
        split = table.get("split", "test")
        eval_tangles = _split_of(dataset, split)
        echo["sweep"]["split"] = split
        kind = "fixed" if parameter == "tau" else "confidence"

        def runner(value, seed):
            return halting_baseline(model, eval_tangles, kind, value)

    write_config_echo(echo, run_dir / "config.toml")
    log(f"sweeping {parameter} over {list(grid)} with seeds {seeds}")
    points, failures = sweep(runner, parameter, grid, seeds=seeds)
    write_curve(points, run_dir / "curve.csv")
    if failures:
        (run_dir / "failures.json").write_text(
            json.dumps(failures, indent=2) + "\n", encoding="utf-8")
        for failure in failures:
            log(f"FAILED point {failure['value']} seed {failure['seed']}: "
                f"{failure['error']}")
    for p in points:
        log(f"{parameter}={p.value:g} seed={p.seed}: "
            f"earliness={p.earliness:.4f} accuracy={p.accuracy:.4f} "
            f"hm={p.hm:.4f}")

    summary = {"command": "sweep", "run_dir": str(run_dir),
               "parameter": parameter, "points": len(points),
               "failures": len(failures)}
    if points:
        best = max(points, key=lambda p: p.hm)
        summary["best"] = {"value": best.value, "seed": best.seed,
                           "earliness": best.earliness,
                           "accuracy": best.accuracy, "hm": best.hm}
    print(_json(summary))
    return EXIT_OK


def cmd_analyze(args):
    file_config = load_config(args.config) if args.config else {}
    table = effective(file_config, "analyze", {
        "split": args.split, "bins": args.bins,
        "rows_per_key": args.rows_per_key,
    })
    model = _load_model(args.model)
    dataset = _load_data(args.data)
    split = table.get("split", "test")
    bins = int(table.get("bins", 10))
    tangles = _split_of(dataset, split)

    run_dir = make_run_dir(args)
    log = RunLog(run_dir, sys.argv[1:] if args.echo_argv else None)
    write_config_echo({"analyze": dict(table, split=split, bins=bins)},
                      run_dir / "config.toml")

    attn = attention_split(model, tangles, bins=bins,
                           rows_per_key=table.get("rows_per_key"))
    write_attention_split(attn, run_dir / "attention_split.csv")
    log(f"attention rows checked: {attn['rows_checked']}, "
        f"max row error {attn['max_row_error']:.2e}")

    result = evaluate(model, tangles)
    hist = halting_histogram(result.outcomes, bins=bins)
    write_halting_hist(hist, run_dir / "halting_hist.csv")
    write_metrics([(f"threshold@{split}", result)], run_dir / "metrics.csv")
    log(f"halting median fraction {hist['median']:.4f} over "
        f"{hist['count']} keys")

    first, last = attn["bins"][0], attn["bins"][-1]
    summary = {
        "command": "analyze", "run_dir": str(run_dir), "split": split,
        "accuracy": result.accuracy, "earliness": result.earliness,
        "halt_median": hist["median"],
        "attention_internal_first_bin": first["internal"],
        "attention_internal_last_bin": last["internal"],
        "attention_max_row_error": attn["max_row_error"],
    }
    print(_json(summary))
    return EXIT_OK


def cmd_stream(args):
    file_config = load_config(args.config) if args.config else {}
    table = effective(file_config, "stream", {
        "input": args.input, "output": args.output,
    })
    model = _load_model(args.model)
    engine = StreamEngine(model)

    run_dir = make_run_dir(args)
    log = RunLog(run_dir, sys.argv[1:] if args.echo_argv else None)
    write_config_echo({"stream": table}, run_dir / "config.toml")

    source_path = table.get("input")
    sink_path = table.get("output")
    source = (sys.stdin if source_path in (None, "-")
              else open(source_path, "r", encoding="utf-8"))
    sink = (sys.stdout if sink_path is None
            else open(sink_path, "w", encoding="utf-8"))
    decisions = 0
    try:
        for lineno, line in enumerate(source, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                key = record["key"]
                value = tuple(record["v"])
            except (json.JSONDecodeError, KeyError, TypeError) as err:
                raise ValueError(
                    f"stream input line {lineno}: bad item record "
                    f"({err})") from err
            outcome = engine.step(key, value)
            if outcome.skipped:
                continue
            payload = {"key": outcome.key, "step": outcome.step,
                       "action": outcome.action, "p_halt": outcome.p_halt}
            if outcome.label is not None:
                payload["label"] = outcome.label
                payload["confidence"] = outcome.confidence
            sink.write(_json(payload) + "\n")
            decisions += 1
    finally:
        if source is not sys.stdin:
            source.close()
        if sink is not sys.stdout:
            sink.close()

    stats = {"items": engine.stats.items, "skipped": engine.stats.skipped,
             "halted": engine.stats.halted, "decisions": decisions}
    (run_dir / "stream_stats.json").write_text(json.dumps(stats) + "\n",
                                               encoding="utf-8")
    log(f"stream done: {stats}")
    print(_json(dict(stats, command="stream", run_dir=str(run_dir))),
          file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args):
    file_config = load_config(args.config) if args.config else {}
    table = effective(file_config, "gradcheck", {
        "seed": args.seed, "items": args.items, "keys": args.keys,
        "step": args.step, "tolerance": args.tolerance,
    })
    run_dir = make_run_dir(args)
    log = RunLog(run_dir, sys.argv[1:] if args.echo_argv else None)
    tolerance = float(table.get("tolerance", TOLERANCE))
    write_config_echo({"gradcheck": dict(table, tolerance=tolerance)},
                      run_dir / "config.toml")
    rows, passed = run_suite(**table)
    text = format_table(rows, tolerance=tolerance)
    print(text)
    (run_dir / "gradcheck.txt").write_text(text + "\n", encoding="utf-8")
    log(f"gradient audit {'passed' if passed else 'FAILED'}; worst "
        f"{max(r['max_rel_error'] for r in rows):.3e}")
    return EXIT_OK if passed else EXIT_INVALID


# --------------------------------------------------------------------- parser

def _parse_window(text):
    if text.lower() == "none":
        return 0
    try:
        return int(text)
    except ValueError as err:
        raise argparse.ArgumentTypeError(
            f"window must be an integer or 'none', got {text!r}") from err


def _parse_floats(text):
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated numbers, got {text!r}") from err
    if not values:
        raise argparse.ArgumentTypeError("expected at least one number")
    return values


def _parse_ints(text):
    try:
        values = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}") from err
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _add_common(parser):
    parser.add_argument("--config", metavar="FILE",
                        help="TOML config file; flags override its values")
    parser.add_argument("--run-dir", metavar="DIR",
                        help="exact run directory (default: timestamped "
                             f"under ${RUN_DIR_ENV} or ./runs)")
    parser.add_argument("--no-echo-argv", dest="echo_argv",
                        action="store_false", default=True,
                        help=argparse.SUPPRESS)


def _add_model_flags(parser):
    group = parser.add_argument_group("model")
    group.add_argument("--d", type=int, help="embedding width")
    group.add_argument("--blocks", type=int, help="attention block count")
    group.add_argument("--ffn-width", type=int)
    group.add_argument("--fusion-width", type=int)
    group.add_argument("--window", type=_parse_window,
                       help="attention window (items); 'none' = unbounded")
    group.add_argument("--slot-count", type=int)
    group.add_argument("--max-seq-pos", type=int)
    group.add_argument("--time-table-size", type=int)
    group.add_argument("--dropout", type=float)
    group.add_argument("--dtype", choices=("float32", "float64"))
    group.add_argument("--policy-bias-init", type=float,
                       help="starting halt logit (negative = patient)")
    group.add_argument("--residual", action="store_const", const=True)
    group.add_argument("--no-key-correlation", dest="key_correlation",
                       action="store_const", const=False,
                       help="mask by value agreement only")
    group.add_argument("--no-value-correlation", dest="value_correlation",
                       action="store_const", const=False,
                       help="mask by key identity only (per-key baseline)")


def _add_train_flags(parser):
    group = parser.add_argument_group("training")
    group.add_argument("--epochs", type=int)
    group.add_argument("--learning-rate", "--lr", type=float,
                       dest="learning_rate")
    group.add_argument("--baseline-learning-rate", type=float)
    group.add_argument("--alpha", type=float,
                       help="policy-loss weight")
    group.add_argument("--beta", type=float,
                       help="delay-loss weight (urgency)")
    group.add_argument("--seed", type=int)
    group.add_argument("--update-every", type=int,
                       help="tangled sequences per optimizer step")
    group.add_argument("--chunk", type=int,
                       help="arrival positions encoded per batch block")
    group.add_argument("--explore", type=float,
                       help="uniform halt floor mixed into sampled training "
                            "episodes")
    group.add_argument("--checkpoint-every", type=int,
                       help="save a checkpoint every N epochs")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kvec",
        description="Early co-classification of concurrent key-value "
                    "sequences in a tangled stream.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    p = sub.add_parser("generate", help="build a synthetic tangled dataset")
    _add_common(p)
    p.add_argument("--out", metavar="DIR",
                   help="dataset directory (default: <run dir>/dataset)")
    p.add_argument("--classes", type=int)
    p.add_argument("--flows", type=int)
    p.add_argument("--flow-len", type=int)
    p.add_argument("--signal-len", type=int)
    p.add_argument("--signal-pos", choices=("early", "late"))
    p.add_argument("--concurrency", type=int)
    p.add_argument("--flows-per-tangle", type=int)
    p.add_argument("--homophily", type=float)
    p.add_argument("--session-continue", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_common(p)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--split", help="training split (default: train)")
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--model", required=True, metavar="CKPT")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--split", help="evaluation split (default: test)")
    p.add_argument("--mode",
                   choices=("threshold", "sample", "fixed", "confidence"))
    p.add_argument("--param", type=float,
                   help="mode parameter (fixed: step; confidence: level)")
    p.add_argument("--fixed-tau", type=_parse_floats, metavar="LIST",
                   help="also report fixed-step halting baselines")
    p.add_argument("--confidence-mu", type=_parse_floats, metavar="LIST",
                   help="also report confidence halting baselines")
    p.add_argument("--rng-seed", type=int, help="seed for sample mode")

    p = sub.add_parser("sweep", help="accuracy-earliness curve over a grid")
    _add_common(p)
    p.add_argument("--parameter", choices=("alpha", "beta", "tau", "mu"))
    p.add_argument("--grid", type=_parse_floats, metavar="LIST")
    p.add_argument("--seeds", type=_parse_ints, metavar="LIST")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--model", metavar="CKPT",
                   help="checkpoint (required for tau/mu sweeps)")
    p.add_argument("--split")
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("analyze",
                       help="attention split and halting histogram")
    _add_common(p)
    p.add_argument("--model", required=True, metavar="CKPT")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--split")
    p.add_argument("--bins", type=int)
    p.add_argument("--rows-per-key", type=int)

    p = sub.add_parser("stream",
                       help="per-item decisions over a live item stream")
    _add_common(p)
    p.add_argument("--model", required=True, metavar="CKPT")
    p.add_argument("--input", metavar="FILE",
                   help="JSONL items {key, v[, t]}; '-' or absent = stdin")
    p.add_argument("--output", metavar="FILE",
                   help="decision JSONL (default: stdout)")

    p = sub.add_parser("gradcheck",
                       help="finite-difference audit of every layer")
    _add_common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--keys", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--tolerance", type=float)

    return parser


_HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "stream": cmd_stream,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return _HANDLERS[args.command](args)
    except UsageError as err:
        print(f"kvec: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as err:
        print(f"kvec: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except nm.NumericalError as err:
        print(f"kvec: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as err:
        message = err.args[0] if err.args else err
        print(f"kvec: validation failure: {message}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
