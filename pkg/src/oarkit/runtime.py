"""Online stream state machine, simulated cost accounting and dataset evaluation."""
from __future__ import annotations

import csv
import io
import json
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import GopState, StreamReader, accumulate_gop, mb_saliency
from .fusion import FusedState, ModalSummary, classify_fused, fuse_modalities, gate_exit, mc_weight, temporal_fuse
from .model import OARModel
from .synth import read_manifest
from .training import tdp_weighted_accuracy

# CPU latency of the learnable fusion step with consistency weighting, in ms
FUSION_LATENCY_MS = 0.69


class ConfigError(ValueError):
    pass


@dataclass
class CostModel:
    """component name -> (latency, energy); every unlisted default is 1.0."""

    entries: dict = field(default_factory=dict)

    @classmethod
    def default(cls, modalities=("image", "motion", "residual")) -> "CostModel":
        entries = {"decode": (1.0, 1.0), "fusion": (FUSION_LATENCY_MS, FUSION_LATENCY_MS), "gating": (1.0, 1.0)}
        for m in modalities:
            entries[f"gate.{m}"] = (1.0, 1.0)
            entries[f"main.{m}"] = (1.0, 1.0)
        return cls(entries)

    def __post_init__(self):
        clean = {}
        for name, val in self.entries.items():
            if isinstance(val, dict):
                val = (val["latency"], val["energy"])
            lat, en = float(val[0]), float(val[1])
            if lat < 0 or en < 0:
                raise ConfigError(f"negative cost for component {name!r}")
            clean[name] = (lat, en)
        self.entries = clean

    def scaled(self, factor: float) -> "CostModel":
        return CostModel({k: (v[0] * factor, v[1] * factor) for k, v in self.entries.items()})

    def to_dict(self) -> dict:
        return {k: {"latency": v[0], "energy": v[1]} for k, v in sorted(self.entries.items())}

    @classmethod
    def from_file(cls, path) -> "CostModel":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        base = cls.default()
        base.entries.update(cls(data).entries)
        return base

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def simulate_cost(trace, cost_model: CostModel) -> tuple[float, float]:
    """Sum latency and energy over an invocation trace (names or dicts with a ``component`` key)."""
    latency = energy = 0.0
    for entry in trace:
        name = entry["component"] if isinstance(entry, dict) else entry
        if name not in cost_model.entries:
            raise ConfigError(f"unknown component {name!r} in trace")
        lat, en = cost_model.entries[name]
        latency += lat
        energy += en
    return latency, energy


def read_trace(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_trace(path, trace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in trace:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


@dataclass
class ExitRecord:
    exit_frame: int
    prediction: int
    confidence: float
    frames_decoded: int
    activations: dict
    latency: float
    energy: float
    num_frames: int
    label: int | None = None
    policy: str = "online"
    frame_predictions: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    def to_dict(self, with_trace: bool = False) -> dict:
        d = asdict(self)
        if not with_trace:
            d.pop("trace")
        return d


def _open(stream) -> StreamReader:
    if isinstance(stream, StreamReader):
        return stream
    if isinstance(stream, (bytes, bytearray)):
        return StreamReader(bytes(stream))
    return StreamReader.open(stream)


@torch.no_grad()
def run_stream(model: OARModel, stream, cost_model: CostModel | None = None, policy: str = "online",
               check_label: bool = True) -> ExitRecord:
    """Frame loop: decode, accumulate, branch steps, fuse, exit test.

    ``policy="offline"`` is the full-frame baseline: every frame is decoded and
    every main network runs; the exit gate is evaluated but never honoured and
    the prediction comes from the final fused state.
    """
    if policy not in ("online", "offline"):
        raise ConfigError(f"unknown policy {policy!r}")
    cost_model = cost_model or CostModel.default(model.config.modalities)
    reader = _open(stream)
    header = reader.header
    if check_label and reader.class_id >= model.config.num_classes:
        raise ConfigError(f"stream class {reader.class_id} outside the model's {model.config.num_classes} classes")
    if (header["height"], header["width"]) != (model.config.height, model.config.width):
        raise ConfigError("stream frame size differs from the model's input size")
    model.reset_stream()
    trace: list[dict] = []
    gop = GopState.empty(header["channels"], header["height"], header["width"], reader.gop)
    state = FusedState()
    activations = {m: 0 for m in model.config.modalities}
    frame_preds: list = []
    current_pred = None
    conf = 0.0
    n = reader.num_frames
    exit_frame = n
    for f in range(n):
        packet = reader.read_frame()
        trace.append({"frame": f, "component": "decode"})
        gop = accumulate_gop(gop, packet)
        saliency = mb_saliency(packet.partition)
        summaries = []
        for m, branch in model.branches.items():
            out = branch.step(packet, gop, saliency, force_main=(policy == "offline"))
            trace.append({"frame": f, "component": f"gate.{m}"})
            if out.activated:
                trace.append({"frame": f, "component": f"main.{m}"})
                activations[m] += 1
                _, xw, mw = model.fusion.weigh(m, out.features, out.iie)
                summaries.append(ModalSummary(m, xw.detach(), float(mw), out.prediction, True))
            else:
                summaries.append(ModalSummary(m, out.features, 0.0, None, False))
        if any(s.active for s in summaries):
            x_fus, _ = fuse_modalities(summaries, model.fusion)
            state = temporal_fuse(state, x_fus.detach(), mc_weight(summaries))
            trace.append({"frame": f, "component": "fusion"})
            decision, conf = gate_exit(state, model.gating, model.config.exit_threshold)
            trace.append({"frame": f, "component": "gating"})
            current_pred = int(np.argmax(classify_fused(state, model.fusion)))
            if decision and policy == "online":
                exit_frame = f + 1
                frame_preds.append(current_pred)
                break
        frame_preds.append(current_pred)
    if current_pred is None:
        # nothing was ever fused; fall back to the first class
        current_pred = 0
    latency, energy = simulate_cost(trace, cost_model)
    return ExitRecord(
        exit_frame=exit_frame, prediction=current_pred, confidence=conf, frames_decoded=reader.decoded,
        activations=activations, latency=latency, energy=energy, num_frames=n,
        label=reader.class_id if reader.class_id >= 0 else None, policy=policy,
        frame_predictions=frame_preds, trace=trace,
    )


def correctness_vector(record: ExitRecord, label: int) -> np.ndarray:
    """Running fused predictions before the exit, the exit prediction from then on."""
    preds = list(record.frame_predictions[:record.exit_frame])
    preds += [record.prediction] * (record.num_frames - len(preds))
    return np.array([p is not None and p == label for p in preds], dtype=np.float64)


@dataclass
class EvalReport:
    top1: float
    tdp_accuracy: float
    mean_exit_frame: float
    median_exit_frame: float
    activation_ratio: dict
    mean_latency: float
    mean_energy: float
    per_class: dict
    num_clips: int
    errors: list = field(default_factory=list)
    policy: str = "online"
    config: dict = field(default_factory=dict)
    clips: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def per_class_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "clips", "top1", "tdp_accuracy", "mean_exit_frame", "mean_latency"])
        for k in sorted(self.per_class, key=int):
            row = self.per_class[k]
            w.writerow([k, row["clips"], f"{row['top1']:.6f}", f"{row['tdp_accuracy']:.6f}",
                        f"{row['mean_exit_frame']:.6f}", f"{row['mean_latency']:.6f}"])
        return buf.getvalue()


def _eval_one(model_bytes: bytes, path: Path, label: int, cost_model: CostModel, policy: str):
    model = OARModel.from_bytes(model_bytes)
    try:
        return run_stream(model, path, cost_model, policy), None
    except Exception as exc:  # per-clip failures are reported, not raised
        return None, f"{path}: {exc}"


def evaluate_dataset(model: OARModel, dataset_dir, cost_model: CostModel | None = None, tau: int = 2,
                     policy: str = "online", jobs: int = 1, paths=None) -> EvalReport:
    root = Path(dataset_dir)
    manifest = read_manifest(root)
    entries = manifest["clips"]
    if paths is not None:
        keep = set(paths)
        entries = [e for e in entries if e["path"] in keep]
    cost_model = cost_model or CostModel.default(model.config.modalities)
    blob = model.to_bytes()
    args = [(blob, root / e["path"], int(e["label"]), cost_model, policy) for e in entries]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(lambda a: _eval_one(*a), args))
    else:
        results = [_eval_one(*a) for a in args]

    records, errors = [], []
    for e, (rec, err) in zip(entries, results):
        if err is not None:
            errors.append(err)
        else:
            records.append((e, rec))
    if not records:
        raise RuntimeError("no clip could be evaluated")
    top1 = [float(r.prediction == int(e["label"])) for e, r in records]
    tdp = [tdp_weighted_accuracy(correctness_vector(r, int(e["label"])), tau) for e, r in records]
    exits = [r.exit_frame for _, r in records]
    ratios = {m: float(np.mean([r.activations[m] / r.exit_frame for _, r in records])) for m in model.config.modalities}
    per_class: dict = {}
    for (e, r), ok, tw in zip(records, top1, tdp):
        row = per_class.setdefault(str(e["label"]), {"clips": 0, "top1": 0.0, "tdp_accuracy": 0.0,
                                                     "mean_exit_frame": 0.0, "mean_latency": 0.0})
        row["clips"] += 1
        row["top1"] += ok
        row["tdp_accuracy"] += tw
        row["mean_exit_frame"] += r.exit_frame
        row["mean_latency"] += r.latency
    for row in per_class.values():
        for k in ("top1", "tdp_accuracy", "mean_exit_frame", "mean_latency"):
            row[k] /= row["clips"]
    clips = [{"path": e["path"], "label": int(e["label"]), **{k: v for k, v in r.to_dict().items()
                                                               if k not in ("frame_predictions", "label")}}
             for e, r in records]
    return EvalReport(
        top1=float(np.mean(top1)), tdp_accuracy=float(np.mean(tdp)),
        mean_exit_frame=float(np.mean(exits)), median_exit_frame=float(statistics.median(exits)),
        activation_ratio=ratios,
        mean_latency=float(np.mean([r.latency for _, r in records])),
        mean_energy=float(np.mean([r.energy for _, r in records])),
        per_class=per_class, num_clips=len(records), errors=errors, policy=policy, clips=clips,
    )
