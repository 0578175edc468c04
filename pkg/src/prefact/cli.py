"""Command-line entry point: ``prefact synth|train|eval|baseline|fuse|plot``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file format
error, 3 numerical failure (NaN or Inf during training).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import RulePredictor, largest_class, mine_rules, write_rules_csv
from .data import (
    PRESETS,
    ConfigError,
    DataFormatError,
    Dataset,
    SynthConfig,
    generate_linear,
    generate_synthetic,
    holdout_filter,
    label_sequences,
    load_dataset,
    pair_indices,
    save_dataset,
)
from .evaluation import emit_report, evaluate_hypotheses, render_report_dir
from .fusion import COMBINES, SELECTIONS, FusionSpec, fuse_batch, fused_dataset, probe_eval, probe_train
from .model import MODES, ModelConfig, ModelFormatError, deserialize, forward, init_model, serialize
from .numerics import make_rng
from .training import NumericalError, TrainConfig, train

log = logging.getLogger("prefact")
log.addHandler(logging.NullHandler())

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "PREFACT_SEED"
_INIT_KEY = 6  # make_rng(seed, _INIT_KEY) initializes model weights
_EVAL_BATCH = 4096


class UsageError(Exception):
    """Bad flags, bad config keys or inconsistent options (exit 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# RunConfig: key=value file plus --set overrides
# ---------------------------------------------------------------------------

_MODEL_DEFAULTS = {
    "input_dim": None,
    "num_actions": None,
    "num_objects": None,
    "hidden": [1024, 512],
    "num_hypotheses": 8,
    "dropout": 0.3,
    "mode": "mh",
}


def _defaults() -> dict[str, dict]:
    synth = {f.name: getattr(SynthConfig(), f.name) for f in dataclasses.fields(SynthConfig)}
    trainc = {f.name: getattr(TrainConfig(), f.name) for f in dataclasses.fields(TrainConfig)}
    return {"synth": synth, "model": dict(_MODEL_DEFAULTS), "train": trainc}


def _parse_value(raw: str):
    """Literal value of a config entry: JSON when it parses (numbers, lists, null), else a bare string."""
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _coerce(key: str, value, default):
    if value is None:
        return None
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise UsageError(f"{key}: expected true or false, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, int) or (isinstance(value, float) and value.is_integer()):
            return int(value)
        raise UsageError(f"{key}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise UsageError(f"{key}: expected a number, got {value!r}")
    return value


class RunConfig:
    """Effective synth/model/train settings, addressable as ``section.key``."""

    def __init__(self):
        self.values = _defaults()
        self.sources: dict[str, str] = {}

    def set(self, dotted: str, raw, source: str = "--set") -> None:
        section, _, key = dotted.strip().partition(".")
        if section not in self.values or key not in self.values[section]:
            raise UsageError(f"unknown config key {dotted!r}")
        value = _parse_value(raw) if isinstance(raw, str) else raw
        default = _defaults()[section][key]
        self.values[section][key] = _coerce(dotted, value, default)
        self.sources[dotted] = source

    def load_file(self, path) -> None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config file {path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'section.key = value'")
            k, v = line.split("=", 1)
            self.set(k, v, source=f"{path}:{lineno}")

    def apply_overrides(self, items) -> None:
        for item in items or []:
            if "=" not in item:
                raise UsageError(f"--set expects section.key=value, got {item!r}")
            k, v = item.split("=", 1)
            self.set(k, v)

    def synth_config(self) -> SynthConfig:
        v = dict(self.values["synth"])
        if isinstance(v["transition"], list):
            v["transition"] = np.asarray(v["transition"], dtype=float)
        if v["activities"] is not None:
            v["activities"] = [tuple(a) for a in v["activities"]]
        return SynthConfig(**v)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.values["train"])

    def model_config(self, dataset: Dataset) -> ModelConfig:
        v = dict(self.values["model"])
        for key, actual in (("input_dim", dataset.dim), ("num_actions", dataset.num_actions),
                            ("num_objects", dataset.num_objects)):
            if v[key] is not None and v[key] != actual:
                raise UsageError(f"model.{key}={v[key]} does not match the dataset ({actual})")
            v[key] = actual
        try:
            return ModelConfig(**v)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc

    def dump(self, path, header: dict[str, str]) -> None:
        lines = [f"# {k}: {v}" for k, v in header.items()]
        for section in ("synth", "model", "train"):
            for key, value in self.values[section].items():
                if isinstance(value, np.ndarray):
                    value = value.tolist()
                if isinstance(value, str):
                    text = value
                else:
                    text = json.dumps(value)
                lines.append(f"{section}.{key} = {text}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _prepare_out(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataFormatError(f"cannot create output directory {out}: {exc}") from exc


def _attach_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "log.txt", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("prefact")
    root.setLevel(logging.INFO)
    root.addHandler(handler)
    return handler


def _resolve_seed(args, cfg: RunConfig) -> int:
    """Seed precedence: --seed, then config file or --set, then PREFACT_SEED, then 0."""
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    for key in ("train.seed", "synth.seed"):
        if key in cfg.sources:
            return int(cfg.values[key.split(".")[0]]["seed"])
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def read_pair_list(path, dataset: Dataset | None = None) -> list[tuple[int, int]]:
    """Parse a holdout file: one ``action object`` pair per line, as ids or vocabulary names.

    Commas and whitespace both separate the two fields; ``#`` starts a comment.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read pair list {path}: {exc}") from exc
    by_name_a = {v: k for k, v in dataset.action_names.items()} if dataset is not None else {}
    by_name_o = {v: k for k, v in dataset.object_names.items()} if dataset is not None else {}
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].replace(",", " ").strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataFormatError(f"{path}: expected '<action> <object>'", line=lineno)

        def lookup(tok, names):
            if tok in names:
                return names[tok]
            try:
                return int(tok)
            except ValueError:
                raise DataFormatError(f"{path}: unknown label {tok!r}", line=lineno) from None

        pairs.append((lookup(parts[0], by_name_a), lookup(parts[1], by_name_o)))
    if not pairs:
        raise DataFormatError(f"{path}: pair list is empty")
    return pairs


def _predict(model, features: np.ndarray):
    from .model import HypothesisSet

    chunks = [forward(model, features[s : s + _EVAL_BATCH]) for s in range(0, len(features), _EVAL_BATCH)]
    if len(chunks) == 1:
        return chunks[0]
    return HypothesisSet(*(np.concatenate(parts) for parts in zip(*(c.arrays() for c in chunks))))


def _pairs_for_eval(dataset: Dataset, delta: int, holdout: list[tuple[int, int]] | None):
    p, f = pair_indices(dataset, delta)
    if holdout:
        keep = np.zeros(len(f), dtype=bool)
        for a, o in holdout:
            keep |= (dataset.action_ids[f] == a) & (dataset.object_ids[f] == o)
        p, f = p[keep], f[keep]
    if len(p) == 0:
        raise DataFormatError(f"no evaluation pairs at horizon {delta}")
    return p, f


def _write_accuracy_rows(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "action", "object", "joint", "count"])
        for row in rows:
            w.writerow([row[0]] + [format(v, ".17g") for v in row[1:4]] + [row[4]])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> None:
    seed = _resolve_seed(args, cfg)
    cfg.values["synth"]["seed"] = seed
    if args.preset == "linear":
        s = cfg.values["synth"]
        ds, _ = generate_linear(s["dim"], s["episodes"], s["length"], seed)
    else:
        cfg.values["synth"]["transition"] = args.preset
        sc = cfg.synth_config()
        sc.validate()
        ds = generate_synthetic(sc)
    save_dataset(ds, args.out / "dataset.ds")
    log.info("wrote %d segments (%d videos) to %s", len(ds), len(ds.videos()), args.out / "dataset.ds")


def cmd_train(args, cfg: RunConfig) -> None:
    ds = load_dataset(args.data)
    seed = _resolve_seed(args, cfg)
    cfg.values["train"]["seed"] = seed
    if args.mode is not None:
        cfg.values["model"]["mode"] = args.mode
    elif "train.mode" in cfg.sources and "model.mode" not in cfg.sources:
        cfg.values["model"]["mode"] = cfg.values["train"]["mode"]
    cfg.values["train"]["mode"] = cfg.values["model"]["mode"]
    if args.holdout:
        pairs = read_pair_list(args.holdout, ds)
        ds, removed = holdout_filter(ds, pairs)
        log.info("holdout removed %d segments for pairs %s", len(removed), pairs)
    extra = load_dataset(args.unlabeled) if args.unlabeled else None
    if extra is not None and extra.dim != ds.dim:
        raise DataFormatError(f"unlabeled data has dimension {extra.dim}, expected {ds.dim}")
    mc = cfg.model_config(ds)
    tc = cfg.train_config()
    cfg.values["model"].update(input_dim=mc.input_dim, num_actions=mc.num_actions, num_objects=mc.num_objects,
                               num_hypotheses=mc.num_hypotheses)
    model = init_model(mc, make_rng(seed, _INIT_KEY))
    log.info("model %s with %d parameters", mc.mode, model.num_parameters())
    model, history = train(model, ds, tc, extra=extra)
    serialize(model, args.out / "model.bin")
    history.write_csv(args.out / "history.csv")


def cmd_eval(args, cfg: RunConfig) -> None:
    model = deserialize(args.model)
    ds = load_dataset(args.data)
    if ds.dim != model.config.input_dim:
        raise DataFormatError(f"dataset dimension {ds.dim} does not match model input {model.config.input_dim}")
    delta = int(args.delta if args.delta is not None else model.metadata.get("delta", 1))
    holdout = read_pair_list(args.holdout, ds) if args.holdout else None
    p, f = _pairs_for_eval(ds, delta, holdout)
    hs = _predict(model, ds.features[p])
    ya, yo = ds.action_ids[f], ds.object_ids[f]
    result = evaluate_hypotheses(hs, ds.features[f], ya, yo)
    out = args.out
    cols = [k for k in ("best_action", "best_object", "mean_action", "mean_object", "oracle_action", "oracle_object")
            if k in result.predictions]
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video", "present_segment", "future_segment", "true_action", "true_object", *cols,
                    "feature_error", "feature_uncertainty"])
        for i in range(len(p)):
            w.writerow([int(ds.video_ids[p[i]]), int(ds.segment_indices[p[i]]), int(ds.segment_indices[f[i]]),
                        int(ya[i]), int(yo[i]), *(int(result.predictions[c][i]) for c in cols),
                        format(result.predictions["feature_error"][i], ".17g"),
                        format(result.predictions["feature_uncertainty"][i], ".17g")])
    count = int(np.sum(ya >= 0))
    _write_accuracy_rows(out / "accuracy.csv",
                         [(name, a["action"], a["object"], a["joint"], count) for name, a in result.accuracies.items()])
    for name, report in result.reports.items():
        emit_report(report, out, name)
    for name, a in result.accuracies.items():
        log.info("%s accuracy: action %.4f object %.4f joint %.4f", name, a["action"], a["object"], a["joint"])


def cmd_baseline(args, cfg: RunConfig) -> None:
    train_ds = load_dataset(args.data)
    test_ds = load_dataset(args.test) if args.test else train_ds
    delta = int(args.delta)
    cfg.values["train"]["delta"] = delta
    p, f = pair_indices(test_ds, delta)
    lab = (test_ds.action_ids[f] >= 0) & (test_ds.action_ids[p] >= 0)
    p, f = p[lab], f[lab]
    if len(p) == 0:
        raise DataFormatError(f"no labeled test pairs at horizon {delta}")
    rows = []
    preds = {}
    for track, ids, names in (("action", "action_ids", train_ds.action_names),
                              ("object", "object_ids", train_ds.object_names)):
        train_labels = getattr(train_ds, ids)
        current = getattr(test_ds, ids)[p]
        truth = getattr(test_ds, ids)[f]
        try:
            modal = largest_class(train_labels)
            rules = mine_rules(label_sequences(train_ds, track), delta)
        except ValueError as exc:
            raise DataFormatError(str(exc)) from exc
        write_rules_csv(rules, args.out / f"rules_{track}.csv", names)
        predictor = RulePredictor(rules, fallback=modal.label)
        preds[track] = {
            "largest_class": modal.predict(len(p)),
            "copy_current_label": current.copy(),
            "rule_mining": predictor.predict(current),
        }
        preds[track]["truth"] = truth
    for method in ("largest_class", "copy_current_label", "rule_mining"):
        ca = preds["action"][method] == preds["action"]["truth"]
        co = preds["object"][method] == preds["object"]["truth"]
        rows.append((method, float(ca.mean()), float(co.mean()), float((ca & co).mean()), len(p)))
        log.info("%s: action %.4f object %.4f", method, rows[-1][1], rows[-1][2])
    _write_accuracy_rows(args.out / "baseline_accuracy.csv", rows)


def cmd_fuse(args, cfg: RunConfig) -> None:
    model = deserialize(args.model)
    spec = FusionSpec(args.selection, args.combine)
    delta = int(model.metadata.get("delta", 1))

    def fused(path):
        ds = load_dataset(path)
        if ds.dim != model.config.input_dim:
            raise DataFormatError(f"dataset dimension {ds.dim} does not match model input {model.config.input_dim}")
        p, f = _pairs_for_eval(ds, delta, None)
        X = fuse_batch(_predict(model, ds.features[p]), spec)
        out = fused_dataset(X, ds.video_ids[p], ds.segment_indices[p], ds.action_ids[f], ds.object_ids[f],
                            ds.num_actions, ds.num_objects, ds.action_names, ds.object_names)
        return ds, out

    try:
        src, train_fused = fused(args.data)
    except ValueError as exc:
        if isinstance(exc, DataFormatError):
            raise
        raise UsageError(str(exc)) from exc
    save_dataset(train_fused, args.out / "fused.ds")
    log.info("fused %s: %d vectors of length %d", spec.name, len(train_fused), train_fused.dim)
    if args.test:
        _, test_fused = fused(args.test)
        save_dataset(test_fused, args.out / "fused_test.ds")
        O = src.num_objects

        def joint(d):
            m = d.action_ids >= 0
            return d.features[m], d.action_ids[m] * O + d.object_ids[m]

        Xtr, ytr = joint(train_fused)
        Xte, yte = joint(test_fused)
        try:
            probe = probe_train(Xtr, ytr, src.num_actions * O, seed=_resolve_seed(args, cfg), epochs=args.probe_epochs)
            acc = probe_eval(probe, Xte, yte)
        except ValueError as exc:
            raise DataFormatError(f"probe: {exc}") from exc
        with open(args.out / "probe.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fusion", "accuracy", "train_count", "test_count"])
            w.writerow([spec.name, format(acc, ".17g"), len(ytr), len(yte)])
        log.info("probe accuracy %.4f", acc)


def cmd_plot(args, cfg: RunConfig) -> None:
    written = render_report_dir(args.report, args.out)
    if not written:
        raise DataFormatError(f"no report CSV files in {args.report}")
    log.info("rendered %d plots", len(written))


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_required: bool = True, out_flags=("--out",)) -> None:
    p.add_argument(*out_flags, dest="out", type=Path, required=out_required,
                   help="output directory (created if missing); receives run.cfg and log.txt")
    p.add_argument("--config", type=Path, help="key=value file with section.key entries (synth, model, train)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config entry; repeatable")
    p.add_argument("--seed", type=int, help=f"random seed (default: config, then ${SEED_ENV}, then 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (default 1); recorded in run.cfg")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prefact", description="Multi-hypothesis future feature and activity prediction.")
    parser.add_argument("--version", action="version", version=f"prefact {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--preset", choices=[*PRESETS, "linear"], default="cycle",
                   help="transition structure; 'linear' is an unlabeled fixed linear map")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a translation model")
    p.add_argument("--mode", choices=MODES, help="objective: c, r, rc or mh (default from config, mh)")
    p.add_argument("--data", type=Path, required=True, help="dataset file or directory containing dataset.ds")
    p.add_argument("--unlabeled", type=Path, help="extra (unlabeled) dataset added to the training split")
    p.add_argument("--holdout", type=Path, help="file of (action, object) pairs removed from training")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model and write calibration reports")
    p.add_argument("--model", type=Path, required=True, help="model.bin written by train")
    p.add_argument("--data", type=Path, required=True, help="dataset file or directory")
    p.add_argument("--holdout", type=Path, help="evaluate only pairs whose future activity is listed in this file")
    p.add_argument("--delta", type=int, help="prediction horizon (default: the one the model was trained with)")
    _common(p, out_flags=("--report", "--out"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="largest class, copy current label and rule mining baselines")
    p.add_argument("--data", type=Path, required=True, help="training dataset")
    p.add_argument("--test", type=Path, help="test dataset (default: the training dataset)")
    p.add_argument("--delta", type=int, default=1, help="prediction horizon (default 1)")
    _common(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("fuse", help="fuse hypotheses into fixed-length vectors, optionally probe them")
    p.add_argument("--model", type=Path, required=True, help="model.bin written by train")
    p.add_argument("--data", type=Path, required=True, help="dataset to fuse (probe training set)")
    p.add_argument("--test", type=Path, help="second dataset; if given, a linear probe is trained and scored")
    p.add_argument("--selection", choices=SELECTIONS, default="all", help="hypothesis selection (default all)")
    p.add_argument("--combine", choices=COMBINES, default="mult", help="combination rule (default mult)")
    p.add_argument("--probe-epochs", type=int, default=100, help="linear probe epochs (default 100)")
    _common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("plot", help="re-render SVG plots from report CSV files")
    p.add_argument("--report", type=Path, required=True, help="report directory written by eval")
    _common(p, out_required=False)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    handler = None
    try:
        parser = build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = RunConfig()
        if args.config is not None:
            cfg.load_file(args.config)
        cfg.apply_overrides(args.overrides)
        if args.out is None:
            args.out = args.report
        _prepare_out(args.out)
        handler = _attach_log(args.out)
        log.info("prefact %s %s", __version__, args.command)
        args.func(args, cfg)
        cfg.dump(args.out / "run.cfg", {"command": args.command, "threads": str(args.threads),
                                        "version": __version__})
        return EXIT_OK
    except UsageError as exc:
        return _fail(str(exc), EXIT_USAGE)
    except ConfigError as exc:
        return _fail(f"configuration error: {exc}", EXIT_USAGE)
    except (DataFormatError, ModelFormatError, FileNotFoundError) as exc:
        return _fail(f"data error: {exc}", EXIT_DATA)
    except NumericalError as exc:
        return _fail(f"numerical failure: {exc}", EXIT_NUMERIC)
    except OSError as exc:
        return _fail(f"I/O error: {exc}", EXIT_DATA)
    except ValueError as exc:
        return _fail(f"invalid input: {exc}", EXIT_DATA)
    finally:
        if handler is not None:
            logging.getLogger("prefact").removeHandler(handler)
            handler.close()


def _fail(message: str, code: int) -> int:
    log.error(message)
    print(f"prefact: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
