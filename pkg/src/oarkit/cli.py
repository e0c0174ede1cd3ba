"""``oar`` command line: synth, train, run, eval and cost subcommands.

Flags override keys of an optional ``--config`` JSON file; the seed falls
back to ``OAR_SEED``. Exit codes: 0 success, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .codec import StreamFormatError
from .model import ModelConfig, OARModel
from .nn import CheckpointError
from .runtime import ConfigError, CostModel, evaluate_dataset, read_trace, run_stream, simulate_cost, write_trace
from .synth import DatasetSpec, read_manifest, synthesize_dataset
from .training import TrainConfig, iterative_train, load_dataset

log = logging.getLogger("oarkit")

# per subcommand: option name -> default; ``None`` defaults are optional
DEFAULTS = {
    "synth": {"classes": 4, "clips": 50, "len": 60, "size": "64x64", "gop": 12, "channels": 1,
              "p_degraded": 0.4, "out": None, "seed": None},
    "train": {"data": None, "out": None, "seed": None, "theta": 1e-2, "tau": 2, "lr": 0.01, "momentum": 0.9,
              "epochs_per_test": 3, "max_iters": 8, "gate_label_cap": 5, "samples_per_clip": 8, "batch_size": 32,
              "val_fraction": 0.2, "tlsm_ratio": 1.0 / 16, "tlsm_frames": 4, "modalities": "image,motion,residual",
              "literal_tdp": False},
    "run": {"model": None, "stream": None, "cost": None, "policy": "online", "report": None, "trace": None},
    "eval": {"model": None, "data": None, "cost": None, "policy": "online", "report": None, "jobs": 1, "tau": 2},
    "cost": {"trace": None, "cost": None, "write_default": None},
}
REQUIRED = {"synth": ("out", "seed"), "train": ("data", "out", "seed"), "run": ("model", "stream"),
            "eval": ("model", "data"), "cost": ()}


class UsageError(Exception):
    pass


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    types = {bool: None, int: int, float: float, str: str}
    for cmd, opts in DEFAULTS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="JSON file with option values; flags win")
        for name, default in opts.items():
            if isinstance(default, bool):
                p.add_argument(_flag(name), dest=name, action="store_const", const=True, default=None)
            else:
                kind = types[type(default)] if default is not None else str
                if name in ("seed",):
                    kind = int
                p.add_argument(_flag(name), dest=name, type=kind, default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then explicit flags; seed falls back to OAR_SEED."""
    cmd = args.command
    resolved = dict(DEFAULTS[cmd])
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                from_file = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(from_file) - set(resolved)
        if unknown:
            raise UsageError(f"unknown config keys for {cmd}: {sorted(unknown)}")
        resolved.update(from_file)
    for name in DEFAULTS[cmd]:
        value = getattr(args, name)
        if value is not None:
            resolved[name] = value
    if "seed" in resolved and resolved["seed"] is None and os.environ.get("OAR_SEED"):
        try:
            resolved["seed"] = int(os.environ["OAR_SEED"])
        except ValueError as exc:
            raise UsageError(f"OAR_SEED must be an integer, got {os.environ['OAR_SEED']!r}") from exc
    missing = [n for n in REQUIRED[cmd] if resolved.get(n) is None]
    if missing:
        raise UsageError(f"{cmd}: missing required option(s) {', '.join(_flag(n) for n in missing)}")
    if resolved.get("policy") not in (None, "online", "offline"):
        raise UsageError("--policy must be 'online' or 'offline'")
    return resolved


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in str(text).lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"--size must look like WIDTHxHEIGHT, got {text!r}") from exc
    return w, h


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _load_cost(path, modalities) -> CostModel:
    if path is None:
        return CostModel.default(modalities)
    return CostModel.from_file(_require_file(path, "cost profile"))


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def cmd_synth(cfg: dict) -> int:
    width, height = _parse_size(cfg["size"])
    spec = DatasetSpec(num_classes=cfg["classes"], clips_per_class=cfg["clips"], frames_per_clip=cfg["len"],
                       width=width, height=height, gop=cfg["gop"], seed=cfg["seed"], channels=cfg["channels"],
                       p_degraded=cfg["p_degraded"])
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest = synthesize_dataset(spec, cfg["out"])
    print(f"wrote {len(manifest['clips'])} clips ({spec.num_classes} classes x {spec.clips_per_class}) "
          f"to {cfg['out']}")
    return 0


def cmd_train(cfg: dict) -> int:
    data = Path(cfg["data"])
    if not (data / "manifest.json").is_file():
        raise UsageError(f"{data} has no manifest.json")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    first = read_manifest(data)
    spec = first.get("spec", {})
    labels = {int(c["label"]) for c in first["clips"]}
    model_cfg = ModelConfig(
        num_classes=int(spec.get("num_classes", max(labels) + 1)), image_channels=int(spec.get("channels", 1)),
        height=int(spec.get("height", 64)), width=int(spec.get("width", 64)),
        modalities=tuple(m.strip() for m in str(cfg["modalities"]).split(",") if m.strip()),
        tlsm_ratio=cfg["tlsm_ratio"], tlsm_frames=cfg["tlsm_frames"],
    )
    train_cfg = TrainConfig(
        theta=cfg["theta"], tau=cfg["tau"], learning_rate=cfg["lr"], momentum=cfg["momentum"],
        epochs_per_test=cfg["epochs_per_test"], max_iters=cfg["max_iters"], gate_label_cap=cfg["gate_label_cap"],
        seed=cfg["seed"], samples_per_clip=cfg["samples_per_clip"], batch_size=cfg["batch_size"],
        val_fraction=cfg["val_fraction"], literal_tdp=bool(cfg["literal_tdp"]),
    )
    model = OARModel(model_cfg, seed=cfg["seed"])
    clips = load_dataset(data, model)
    report = iterative_train(model, clips, train_cfg, checkpoint_dir=out)
    for d in report.eq4_decisions:
        print(f"iteration {d['iteration']}: A={d['accuracy']:.4f} stop={d['stop']}")
    model.save(out / "model.oarckpt")
    trace = {"options": cfg, "model": model_cfg.to_dict(), **report.to_dict()}
    (out / "train_trace.json").write_text(_dump(trace), encoding="utf-8")
    print(f"wrote {out / 'model.oarckpt'} and {out / 'train_trace.json'}")
    return 0


def cmd_run(cfg: dict) -> int:
    model = OARModel.load(_require_file(cfg["model"], "checkpoint"))
    stream = _require_file(cfg["stream"], "stream")
    record = run_stream(model, stream, _load_cost(cfg["cost"], model.config.modalities), cfg["policy"])
    text = _dump({"config": cfg, **record.to_dict()})
    if cfg["trace"]:
        write_trace(cfg["trace"], record.trace)
    if cfg["report"]:
        Path(cfg["report"]).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_eval(cfg: dict) -> int:
    model = OARModel.load(_require_file(cfg["model"], "checkpoint"))
    data = Path(cfg["data"])
    if not (data / "manifest.json").is_file():
        raise UsageError(f"{data} has no manifest.json")
    report = evaluate_dataset(model, data, _load_cost(cfg["cost"], model.config.modalities), tau=cfg["tau"],
                              policy=cfg["policy"], jobs=cfg["jobs"])
    report.config = dict(cfg)
    summary = {k: getattr(report, k) for k in ("top1", "tdp_accuracy", "mean_exit_frame", "median_exit_frame",
                                                "activation_ratio", "mean_latency", "mean_energy", "num_clips")}
    if cfg["report"]:
        path = Path(cfg["report"])
        path.write_text(report.to_json(), encoding="utf-8")
        path.with_suffix(".csv").write_text(report.per_class_csv(), encoding="utf-8")
    sys.stdout.write(_dump(summary))
    for err in report.errors:
        print(f"error: {err}", file=sys.stderr)
    return 0


def cmd_cost(cfg: dict) -> int:
    cost = _load_cost(cfg["cost"], ("image", "motion", "residual"))
    if cfg["write_default"]:
        cost.save(cfg["write_default"])
        print(f"wrote cost profile to {cfg['write_default']}")
    if cfg["trace"]:
        latency, energy = simulate_cost(read_trace(_require_file(cfg["trace"], "trace")), cost)
        sys.stdout.write(_dump({"latency": latency, "energy": energy}))
    elif not cfg["write_default"]:
        sys.stdout.write(_dump(cost.to_dict()))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "run": cmd_run, "eval": cmd_eval, "cost": cmd_cost}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        print("config: " + json.dumps({"command": args.command, **cfg}, sort_keys=True), file=sys.stderr)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"oar {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, StreamFormatError, CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
