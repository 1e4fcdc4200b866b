"""Command-line entry point.

    acc train --alphabets 55 --M 32 --K 512 --N 2000 --out runs/a
    acc coverage --config cov.json --out runs/cov
    acc rerun runs/a/manifest.json --out runs/a2

Settings resolve as defaults < ``--config`` file < flags. Every command
writes ``manifest.json`` into ``--out`` before it starts work; ``rerun``
replays a manifest and reproduces its CSVs byte for byte.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .data import MiSpec, DEFAULT_ALPHABETS, generate
from .encoders import load_checkpoint, save_checkpoint
from .errors import AccError, ConfigParseError, ValidationError
from .training import CSV_HEADER, TrainConfig, run, run_baseline

log = logging.getLogger("acc")

COMMANDS = {
    "train": "train with the chosen negative sampler",
    "baseline": "train with plain FIFO negatives",
    "coverage": "category coverage of selected negatives per step",
    "mi-sweep": "probe accuracy across dataset difficulty",
    "probe": "linear probe of a saved checkpoint",
    "selftest": "fast numerical self-checks",
}
MANIFEST = "manifest.json"

# flag dest -> config field
_FLAG_FIELDS = {
    "seed": "seed",
    "sampler": "sampler",
    "M": "M",
    "K": "K",
    "N": "N",
    "m": "m",
    "tau": "tau",
    "lr": "lr",
    "warmup": "warmup_steps",
    "epochs": "epochs",
    "heads": "heads_enabled",
    "alphabets": "alphabet_sizes",
    "max_steps": "max_steps",
    "pool_refresh": "pool_refresh",
    "dataset_size": "dataset_size",
    "skew": "skew",
    "label_mode": "label_mode",
}

# experiment-level settings and their defaults
EXPERIMENT_DEFAULTS = {
    "batch_sizes": [32, 64, 128],
    "steps": None,
    "num_seeds": 1,
    "samplers": None,
    "slots": None,
    "split_seed": 0,
    "checkpoint": None,
    "modality": "visual",
}

_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_SPEC_FIELDS = {f.name: f for f in dataclasses.fields(MiSpec)}


# --- config resolution ------------------------------------------------------


def load_config_file(path):
    """Parse a flat JSON object; an empty file means "all defaults"."""
    text = Path(path).read_text()
    if not text.strip():
        return {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigParseError(path, e.lineno, e.msg) from None
    if not isinstance(data, dict):
        raise ConfigParseError(path, 1, "top level must be a JSON object")
    return data


def _coerce(name, value, default):
    """Convert ``value`` to the type of the field's default."""
    if value is None and (default is None or name == "max_steps"):
        return None
    try:
        if name in ("alphabet_sizes", "hidden", "batch_sizes", "samplers", "slots"):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v]
            if not isinstance(value, (list, tuple)):
                raise TypeError
            conv = str if name == "samplers" else int
            return [conv(v) for v in value]
        if name == "checkpoint":
            return str(value)
        if name == "max_steps" or name in EXPERIMENT_DEFAULTS and default is None:
            return int(value)
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            if value in ("on", "true", "1", 1):
                return True
            if value in ("off", "false", "0", 0):
                return False
            raise TypeError
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise TypeError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ValidationError(name, f"cannot interpret {value!r}") from None
    return value


def _defaults():
    out = {}
    for name, f in _TRAIN_FIELDS.items():
        out[name] = f.default
    for name, f in _SPEC_FIELDS.items():
        if name != "seed":
            out[name] = f.default
    out.update(EXPERIMENT_DEFAULTS)
    out["hidden"] = list(out["hidden"])
    out["alphabet_sizes"] = list(out["alphabet_sizes"])
    return out


def resolve_settings(file_values=None, flag_values=None):
    """Merge defaults, file values and flag values into one flat dict.

    ``seed`` seeds both the data generator and training.
    """
    merged = _defaults()
    for source in (file_values or {}, flag_values or {}):
        for name, value in source.items():
            if name not in merged:
                raise ValidationError(name, "unknown field")
            merged[name] = _coerce(name, value, merged[name])
    return merged


def train_config(settings, **overrides):
    kw = {k: settings[k] for k in _TRAIN_FIELDS}
    kw["hidden"] = tuple(kw["hidden"])
    kw.update(overrides)
    return TrainConfig(**kw)


def mi_spec(settings, **overrides):
    kw = {k: settings[k] for k in _SPEC_FIELDS if k != "seed"}
    kw["seed"] = settings["seed"]
    kw.update(overrides)
    return MiSpec(**kw)


def parse_config(path=None, flags=None):
    """Resolved ``(TrainConfig, MiSpec, settings)``; validates both configs."""
    settings = resolve_settings(load_config_file(path) if path else {}, flags)
    spec = mi_spec(settings)
    cfg = train_config(settings)
    cfg.validate()
    return cfg, spec, settings


# --- output helpers ---------------------------------------------------------


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def write_manifest(out_dir, command, settings, outputs, started, finished=None):
    manifest = {
        "command": command,
        "settings": settings,
        "seed": settings["seed"],
        "code_version": __version__,
        "numpy_version": np.__version__,
        "started": started,
        "finished": finished,
        "outputs": outputs,
    }
    path = Path(out_dir) / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


# --- commands ---------------------------------------------------------------


def _train_like(settings, out, baseline, trace):
    cfg = train_config(settings)
    spec = mi_spec(settings)
    ds = generate(spec)
    cfg.validate(len(ds))
    if baseline:
        result = run_baseline(cfg, ds)
    else:
        result = run(cfg, ds, trace_path=out / "trace.jsonl" if trace else None)
    with open(out / "metrics.csv", "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for h in result.history:
            fh.write(h.csv_row() + "\n")
    st = result.state
    save_checkpoint(
        out / "checkpoint.npz",
        st.bundle,
        st.optimizers,
        {"config": cfg.to_dict(), "data": spec.to_dict(), "steps": st.step},
    )
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"{st.step} steps; final loss_v2a={last.loss_v2a:.4f} loss_a2v={last.loss_a2v:.4f}")
    else:
        print("0 steps; wrote initial parameters")


def cmd_train(settings, out, trace=False):
    _train_like(settings, out, baseline=False, trace=trace)
    return ["metrics.csv", "checkpoint.npz"] + (["trace.jsonl"] if trace else [])


def cmd_baseline(settings, out, trace=False):
    _train_like(settings, out, baseline=True, trace=False)
    return ["metrics.csv", "checkpoint.npz"]


def cmd_coverage(settings, out, trace=False):
    from .eval import coverage_experiment

    spec = mi_spec(settings)
    ds = generate(spec)
    cfg = train_config(settings)
    steps = settings["steps"] if settings["steps"] is not None else 300
    seeds = range(settings["seed"], settings["seed"] + settings["num_seeds"])
    samplers = settings["samplers"] or ["active", "feature", "random"]
    rows = []
    for series in coverage_experiment(ds, cfg, samplers, settings["batch_sizes"], steps, seeds):
        for t, c in enumerate(series.counts):
            rows.append([t, series.M, series.sampler, int(c), series.seed, _fmt(c / series.num_categories)])
    write_csv(out / "coverage.csv", ["step", "M", "sampler", "unique_categories", "seed", "fraction"], rows)
    print(f"{len(rows)} coverage rows")
    return ["coverage.csv"]


def cmd_misweep(settings, out, trace=False):
    from .eval import mi_sweep

    alph = settings["alphabet_sizes"]
    slots = settings["slots"] or [len(alph)]
    if any(s < 1 or s > len(alph) for s in slots):
        raise ValidationError("slots", f"slot counts must lie in [1, {len(alph)}]")
    specs = [mi_spec(settings, alphabet_sizes=tuple(alph[:s])) for s in sorted(slots)]
    cfg = train_config(settings)
    steps = settings["steps"] if settings["steps"] is not None else 2000
    seeds = range(settings["seed"], settings["seed"] + settings["num_seeds"])
    samplers = settings["samplers"] or [cfg.sampler]
    table = mi_sweep(specs, cfg, samplers, seeds, steps, settings["split_seed"])
    rows = [[_fmt(r["e_mi"]), r["sampler"], _fmt(r["accuracy"]), r["slots"], r["seed"]] for r in table]
    write_csv(out / "mi_sweep.csv", ["e_mi", "sampler", "accuracy", "slots", "seed"], rows)
    for r in table:
        print(f"slots={r['slots']} seed={r['seed']} {r['sampler']}: {r['accuracy']:.3f}")
    return ["mi_sweep.csv"]


def cmd_probe(settings, out, trace=False):
    from .eval import linear_probe

    if not settings["checkpoint"]:
        raise ValidationError("checkpoint", "probe needs --checkpoint")
    bundle, _, _ = load_checkpoint(settings["checkpoint"])
    ds = generate(mi_spec(settings))
    res = linear_probe(bundle, ds, settings["split_seed"], modality=settings["modality"])
    rows = [[i, _fmt(a), _fmt(b)] for i, (a, b) in enumerate(res.per_task)]
    rows.append(["mean", _fmt(res.train_accuracy), _fmt(res.test_accuracy)])
    write_csv(out / "probe.csv", ["slot", "train_accuracy", "test_accuracy"], rows)
    print(f"probe test accuracy {res.test_accuracy:.4f}")
    return ["probe.csv"]


def cmd_selftest(settings, out, trace=False):
    from .selftest import run_all

    if run_all():
        raise AccError("self-test failed")
    return []


HANDLERS = {
    "train": cmd_train,
    "baseline": cmd_baseline,
    "coverage": cmd_coverage,
    "mi-sweep": cmd_misweep,
    "probe": cmd_probe,
    "selftest": cmd_selftest,
}


def execute(command, settings, out, trace=False):
    """Run ``command`` into ``out``, bracketing it with manifest writes."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    # fail fast on invalid settings before anything is written
    train_config(settings).validate()
    mi_spec(settings)
    settings = dict(settings, trace=bool(trace))
    started = _now()
    write_manifest(out, command, settings, [], started)
    outputs = HANDLERS[command](settings, out, trace=trace)
    write_manifest(out, command, settings, outputs, started, _now())
    return outputs


# --- argument parsing -------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", metavar="PATH", help="flat JSON with TrainConfig/MiSpec field names")
    p.add_argument("--out", metavar="DIR", default="runs/latest")
    p.add_argument("--seed", type=int)
    p.add_argument("--sampler", choices=["active", "feature", "random", "ohem"])
    p.add_argument("--M", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--m", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--heads", choices=["on", "off"])
    p.add_argument("--alphabets", metavar="L1,L2,...", help=f"alphabet sizes, e.g. {','.join(map(str, DEFAULT_ALPHABETS[:3]))}")
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--pool-refresh", dest="pool_refresh", type=int, help="re-encode pool keys every this many steps")
    p.add_argument("--dataset-size", dest="dataset_size", type=int)
    p.add_argument("--skew", type=float, help="Zipf exponent for the first slot")
    p.add_argument("--label-mode", dest="label_mode", choices=["tuple", "coarse"])
    p.add_argument("--trace", action="store_true", help="write per-step selection records (train)")


def build_parser():
    parser = argparse.ArgumentParser(prog="acc", description="Cross-modal contrastive training with active negative sampling.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, help=text)
        _add_common(p)
        if name in ("coverage", "mi-sweep"):
            p.add_argument("--steps", type=int)
            p.add_argument("--seeds", dest="num_seeds", type=int, help="number of consecutive seeds from --seed")
            p.add_argument("--samplers", help="comma-separated sampler list")
        if name == "coverage":
            p.add_argument("--batch-sizes", dest="batch_sizes", help="comma-separated M values")
        if name == "mi-sweep":
            p.add_argument("--slots", help="comma-separated slot counts, prefixes of --alphabets")
        if name in ("mi-sweep", "probe"):
            p.add_argument("--split-seed", dest="split_seed", type=int)
        if name == "probe":
            p.add_argument("--checkpoint", metavar="PATH")
            p.add_argument("--modality", choices=["visual", "audio"])
    rr = sub.add_parser("rerun", help="replay a manifest")
    rr.add_argument("manifest")
    rr.add_argument("--out", metavar="DIR")
    return parser


_NON_SETTING = {"command", "config", "out", "trace", "verbose", "manifest"}


def _flag_values(args):
    vals = {}
    for k, v in vars(args).items():
        if k in _NON_SETTING or v is None:
            continue
        vals[_FLAG_FIELDS.get(k, k)] = v
    return vals


def _origin(exc):
    """Dotted name of the innermost package module the exception passed through."""
    name = "acc.cli"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith("acc"):
            name = mod
    return name


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if "ACC_THREADS" in os.environ:
        log.info("worker cap ACC_THREADS=%s", os.environ["ACC_THREADS"])
    try:
        if args.command == "rerun":
            manifest = json.loads(Path(args.manifest).read_text())
            settings = dict(manifest["settings"])
            trace = settings.pop("trace", False)
            out = args.out or str(Path(args.manifest).parent)
            execute(manifest["command"], resolve_settings(settings), out, trace)
        else:
            settings = resolve_settings(load_config_file(args.config) if args.config else {}, _flag_values(args))
            execute(args.command, settings, args.out, args.trace)
    except (AccError, ValueError, OSError, KeyError) as e:
        print(f"{_origin(e)}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
