"""Command-line entry point: ``covla <command> [--config FILE] [--key value ...]``.

Commands: gen-data, train, eval, ablate, robustness, gradcheck.  Settings
come from built-in defaults, then the JSON config file, then command-line
overrides.  Any invalid setting aborts with exit status 2 and a single
``covla: error: <code>: <message>`` line on stderr before anything is written.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

from . import io
from .datagen import DatasetSpec, DatasetSpecError, generate_dataset
from .evaluation import (ablation_suite, error_analysis, evaluate, robustness_sweep,
                         timing_report)
from .metrics import AVERAGING
from .model import VARIANTS, Dims, build_model
from .training import TrainConfig, check_gradients, log_rows, train

log = logging.getLogger("covla")

SPEC_KEYS = tuple(f.name for f in fields(DatasetSpec) if f.name != "seed")
_SPEC_DEFAULTS = DatasetSpec()

DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "runs/default",
    "data": None,
    "checkpoint": None,
    "split": "test",
    **{k: getattr(_SPEC_DEFAULTS, k) for k in SPEC_KEYS},
    "variant": "full",
    "d_T": 32, "d_V": 24, "d": 32, "d_c": 32,
    "lambda": 0.1, "lr": 0.05, "epochs": 30, "batch_size": 32, "freeze_encoders": False,
    "seeds": [1, 2, 3, 4, 5],
    "sigmas": [0.0, 0.5, 1.0, 2.0, 4.0],
    "drop_probs": [0.0, 0.25, 0.5, 0.75, 0.95],
    "timing_repetitions": 3,
    "gradcheck_seeds": 10, "gradcheck_eps": 1e-5, "gradcheck_tol": 1e-4,
    "gradcheck_vocab": 20, "gradcheck_d_raw": 4, "gradcheck_d_T": 6, "gradcheck_d_V": 5,
    "gradcheck_d": 8, "gradcheck_d_c": 8, "gradcheck_categories": 5,
    "gradcheck_tokens": 3, "gradcheck_regions": 4,
}
COMMANDS = ("gen-data", "train", "eval", "ablate", "robustness", "gradcheck")


class ConfigError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _coerce(key: str, value):
    default = DEFAULTS[key]
    if default is None:
        if value is None or isinstance(value, str):
            return value
        raise ConfigError("invalid-config", f"{key} must be a path string")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError("invalid-config", f"{key} must be true or false")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError("invalid-config", f"{key} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("invalid-config", f"{key} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                  for v in value):
            raise ConfigError("invalid-config", f"{key} must be a list of numbers")
        return list(value)
    if isinstance(value, str):
        return value
    raise ConfigError("invalid-config", f"{key} must be a string")


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _overrides_from(extra: list[str]) -> dict:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError("invalid-config", f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError("invalid-config", f"missing value for --{key}")
            raw = extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = _parse_value(raw)
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = dict(DEFAULTS)
    layers = []
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError("missing-file", f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("invalid-config", f"config file {path} is not valid JSON ({exc.msg})") from None
        if not isinstance(loaded, dict):
            raise ConfigError("invalid-config", "config file must hold a JSON object")
        layers.append(loaded)
    layers.append(overrides)
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError("invalid-config", f"unknown key {key!r}")
            cfg[key] = _coerce(key, value)
    return cfg


def dataset_spec(cfg: dict) -> DatasetSpec:
    spec = DatasetSpec(**{k: cfg[k] for k in SPEC_KEYS}, seed=cfg["seed"])
    try:
        spec.validate()
    except DatasetSpecError as exc:
        raise ConfigError("invalid-config", str(exc)) from None
    return spec


def train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    tc = TrainConfig(lam=cfg["lambda"], learning_rate=cfg["lr"], epochs=cfg["epochs"],
                     batch_size=cfg["batch_size"], seed=cfg["seed"] if seed is None else seed,
                     freeze_encoders=cfg["freeze_encoders"])
    try:
        tc.validate()
    except ValueError as exc:
        raise ConfigError("invalid-config", str(exc)) from None
    return tc


def model_dims(cfg: dict, spec: DatasetSpec) -> Dims:
    dims = Dims(vocab_size=spec.vocab_size, d_raw=spec.d_raw, d_T=cfg["d_T"], d_V=cfg["d_V"],
                d=cfg["d"], d_c=cfg["d_c"], n_categories=spec.n_categories)
    try:
        dims.validate()
    except ValueError as exc:
        raise ConfigError("invalid-config", str(exc)) from None
    return dims


def data_path(cfg: dict) -> Path:
    return Path(cfg["data"]) if cfg["data"] else Path(cfg["out_dir"]) / "dataset.jsonl"


def checkpoint_path(cfg: dict) -> Path:
    return Path(cfg["checkpoint"]) if cfg["checkpoint"] else Path(cfg["out_dir"]) / "checkpoint.json"


def _check_out_dir(path: Path) -> None:
    probe = path
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir() or not os.access(probe, os.W_OK):
        raise ConfigError("unwritable-path", f"cannot write to {path}")
    if path.exists() and not path.is_dir():
        raise ConfigError("unwritable-path", f"{path} exists and is not a directory")


def _check_input(path: Path, what: str) -> None:
    if not path.is_file():
        raise ConfigError("missing-file", f"{what} {path} not found")


def validate(command: str, cfg: dict) -> None:
    """Check everything a command needs before it computes or writes anything."""
    _check_out_dir(Path(cfg["out_dir"]))
    if cfg["variant"] not in VARIANTS:
        raise ConfigError("invalid-config", f"variant must be one of {', '.join(VARIANTS)}")
    if cfg["split"] not in ("train", "val", "test"):
        raise ConfigError("invalid-config", "split must be train, val or test")
    train_config(cfg)
    if command in ("gen-data", "ablate"):
        dataset_spec(cfg)
    if command in ("train", "eval", "robustness") or (command == "ablate" and cfg["data"]):
        _check_input(data_path(cfg), "dataset")
        _check_input(io.header_path(data_path(cfg)), "dataset header")
    if command in ("eval", "robustness"):
        _check_input(checkpoint_path(cfg), "checkpoint")
    if command == "ablate" and not cfg["seeds"]:
        raise ConfigError("invalid-config", "seeds must not be empty")
    if command == "robustness":
        if 0 not in cfg["sigmas"] or 0 not in cfg["drop_probs"]:
            raise ConfigError("invalid-config", "sigmas and drop_probs must include 0")
        if any(s < 0 for s in cfg["sigmas"]) or any(not 0 <= p < 1 for p in cfg["drop_probs"]):
            raise ConfigError("invalid-config", "need sigmas >= 0 and drop_probs in [0, 1)")
    if command == "gradcheck" and cfg["gradcheck_eps"] <= 0:
        raise ConfigError("invalid-config", "gradcheck_eps must be positive")


def _metadata() -> dict:
    return {"created": datetime.now(timezone.utc).isoformat(timespec="seconds")}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> int:
    dataset = generate_dataset(dataset_spec(cfg))
    path = data_path(cfg)
    io.write_dataset(dataset, path)
    counts = {s: len(dataset.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {path}: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_train(cfg: dict) -> int:
    dataset = io.read_dataset(data_path(cfg))
    dims = model_dims(cfg, dataset.spec)
    tc = train_config(cfg)
    model = build_model(cfg["variant"], dims, cfg["seed"], freeze_encoders=tc.freeze_encoders)
    start = time.perf_counter()
    best, history = train(model, dataset, tc)
    elapsed = time.perf_counter() - start
    out = Path(cfg["out_dir"])
    io.save_checkpoint(best, checkpoint_path(cfg))
    io.write_csv(out / "loss_log.csv", log_rows(history), ["epoch", "total", "ce", "kd", "val_macro_f1"])
    io.write_json(out / "train_meta.json", {"metadata": {**_metadata(), "train_time_s": elapsed},
                                            "config": cfg})
    best_epoch = max(history, key=lambda r: r.val_macro_f1)
    print(f"trained {cfg['variant']} for {tc.epochs} epochs; best val macro-F1 "
          f"{best_epoch.val_macro_f1:.4f} at epoch {best_epoch.epoch}")
    return 0


def cmd_eval(cfg: dict) -> int:
    dataset = io.read_dataset(data_path(cfg))
    model = io.load_checkpoint(checkpoint_path(cfg))
    posts = dataset.split(cfg["split"])
    if not posts:
        raise ConfigError("empty-split", f"split {cfg['split']} is empty")
    report = evaluate(model, posts)
    out = Path(cfg["out_dir"])
    io.write_csv(out / "metrics.csv", report.rows(dataset.categories),
                 ["category", "precision", "recall", "f1", "support"])
    timing = timing_report(model, posts, cfg["timing_repetitions"])
    io.write_json(out / "metrics.json", {
        "averaging": AVERAGING, "split": cfg["split"], "variant": model.variant,
        "report": report.to_dict(dataset.categories),
        "error_analysis": error_analysis(model, posts),
        "config": cfg,
        "metadata": {**_metadata(), "timing": timing},
    })
    print(f"{cfg['split']}: accuracy {report.accuracy:.4f}, {AVERAGING} P/R/F1 "
          f"{report.macro_precision:.4f}/{report.macro_recall:.4f}/{report.macro_f1:.4f}")
    return 0


def cmd_ablate(cfg: dict) -> int:
    if cfg["data"]:
        dataset = io.read_dataset(data_path(cfg))
    else:
        dataset = generate_dataset(dataset_spec(cfg))
    dims = model_dims(cfg, dataset.spec)
    table = ablation_suite(dataset, dims, cfg["seeds"], train_config(cfg))
    out = Path(cfg["out_dir"])
    rows = table.rows()
    io.write_csv(out / "ablation.csv", rows)
    io.write_json(out / "ablation.json", {
        "averaging": AVERAGING, "seeds": table.seeds, "summary": rows,
        "per_seed_macro_f1": {v: [r.macro_f1 for r in reps] for v, reps in table.per_seed.items()},
        "orderings": table.orderings(), "config": cfg, "metadata": _metadata(),
    })
    for r in rows:
        print(f"{r['variant']:>7}: {AVERAGING}-F1 {r['macro_f1_mean']:.4f} +- {r['macro_f1_sd']:.4f}")
    return 0


def cmd_robustness(cfg: dict) -> int:
    dataset = io.read_dataset(data_path(cfg))
    model = io.load_checkpoint(checkpoint_path(cfg))
    posts = dataset.split(cfg["split"])
    if not posts:
        raise ConfigError("empty-split", f"split {cfg['split']} is empty")
    curves = robustness_sweep(model, posts, cfg["sigmas"], cfg["drop_probs"], cfg["seed"])
    out = Path(cfg["out_dir"])
    rows = curves.rows()
    io.write_csv(out / "robustness.csv", rows, ["perturbation", "level", "accuracy", "macro_f1"])
    io.write_json(out / "robustness.json", {
        "averaging": AVERAGING, "clean_macro_f1": curves.clean.macro_f1, "curves": rows,
        "config": cfg, "metadata": _metadata(),
    })
    for r in rows:
        print(f"{r['perturbation']:>15} {r['level']:<6g} macro-F1 {r['macro_f1']:.4f}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    dims = Dims(vocab_size=cfg["gradcheck_vocab"], d_raw=cfg["gradcheck_d_raw"],
                d_T=cfg["gradcheck_d_T"], d_V=cfg["gradcheck_d_V"], d=cfg["gradcheck_d"],
                d_c=cfg["gradcheck_d_c"], n_categories=cfg["gradcheck_categories"])
    try:
        dims.validate()
    except ValueError as exc:
        raise ConfigError("invalid-config", str(exc)) from None
    results = []
    for i in range(cfg["gradcheck_seeds"]):
        seed = cfg["seed"] + i
        r = check_gradients(dims, seed, cfg["variant"], cfg["gradcheck_tokens"],
                            cfg["gradcheck_regions"], lam=max(cfg["lambda"], 0.5),
                            eps=cfg["gradcheck_eps"])
        results.append({"seed": seed, "max_rel_error": r.max_rel_error, "checked": r.n_checked,
                        "excluded": len(r.excluded), "per_param": r.per_param})
    worst = max(r["max_rel_error"] for r in results) if results else 0.0
    io.write_json(Path(cfg["out_dir"]) / "gradcheck.json", {
        "max_rel_error": worst, "tolerance": cfg["gradcheck_tol"], "runs": results,
        "metadata": _metadata(),
    })
    ok = worst < cfg["gradcheck_tol"]
    print(f"max relative error {worst:.3e} over {len(results)} seeds "
          f"({'ok' if ok else 'FAILED'}, tolerance {cfg['gradcheck_tol']:g})")
    return 0 if ok else 1


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "robustness": cmd_robustness, "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covla", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--out-dir", dest="out_dir")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--lambda", dest="lambda", type=float, help="distillation weight")
    parser.add_argument("--variant")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _overrides_from(extra)
        for key in ("out_dir", "seed", "lambda", "variant", "epochs", "lr"):
            value = getattr(args, key)
            if value is not None:
                overrides[key] = value
        cfg = load_config(args.config, overrides)
        validate(args.command, cfg)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"covla: error: {exc.code}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"covla: error: runtime: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
