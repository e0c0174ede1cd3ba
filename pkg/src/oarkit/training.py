"""Frame prioritization, label construction and the alternating gate/main training loop."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import balanced_accuracy_score

from . import nn
from .codec import GopState, StreamReader, accumulate_gop, mb_saliency
from .fusion import cumulative_fuse, iie_tensor
from .model import OARModel
from .synth import read_manifest
from .tfem import MainNet, modality_input, resize_saliency

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    theta: float = 1e-2
    tau: int = 2
    epochs_per_test: int = 3
    learning_rate: float = 0.01
    momentum: float = 0.9
    max_iters: int = 8
    gate_label_cap: int = 5
    seed: int = 0
    samples_per_clip: int = 8
    batch_size: int = 32
    max_tests_per_phase: int = 6
    tdp_mode: str = "sample"
    literal_tdp: bool = False
    val_fraction: float = 0.2
    balance_gate_labels: bool = True
    head_max_grad_norm: float | None = 1.0

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError("theta must be > 0")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.gate_label_cap < 1:
            raise ValueError("gate_label_cap must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs_per_test < 1 or self.max_iters < 1:
            raise ValueError("epochs_per_test and max_iters must be >= 1")
        if self.head_max_grad_norm is not None and not self.head_max_grad_norm > 0:
            raise ValueError("head_max_grad_norm must be > 0 or None")
        if self.tdp_mode not in ("sample", "loss"):
            raise ValueError("tdp_mode must be 'sample' or 'loss'")


# -- frame priorities and labels ----------------------------------------------

def tdp_weight(t: int, v_len: int, tau: int = 2, literal: bool = False) -> float:
    """Priority of 1-based frame ``t`` in a clip of ``v_len`` frames.

    The terminal frame takes the whole remainder, 1/2^(v_len - tau), so the
    weights sum to one for tau = 2; ``literal=True`` uses 1/2^(t - tau + 2).
    """
    if v_len <= tau:
        raise ValueError(f"clip length {v_len} must exceed tau={tau}")
    if not 1 <= t <= v_len:
        raise ValueError(f"frame index {t} outside 1..{v_len}")
    if t <= tau:
        return 1.0 / 2 ** tau
    if t < v_len:
        return 1.0 / 2 ** (t - tau + 1)
    return 1.0 / 2 ** (t - tau + 2) if literal else 1.0 / 2 ** (v_len - tau)


def tdp_weights(v_len: int, tau: int = 2, literal: bool = False) -> np.ndarray:
    return np.array([tdp_weight(t, v_len, tau, literal) for t in range(1, v_len + 1)])


def tdp_weighted_accuracy(per_frame_correct, tau: int = 2) -> float:
    c = np.asarray(per_frame_correct, dtype=np.float64)
    if c.size == 0:
        raise ValueError("empty correctness vector")
    return float(np.dot(c, tdp_weights(c.size, tau)))


def make_hard_labels(predictions, truth: int) -> np.ndarray:
    return (np.asarray(predictions) == truth).astype(np.int64)


def make_gate_exit_labels(fused_correct, cap: int = 5) -> np.ndarray:
    labels = np.zeros(len(fused_correct), dtype=np.int64)
    emitted = 0
    for i, ok in enumerate(fused_correct):
        if ok and emitted < cap:
            labels[i] = 1
            emitted += 1
    return labels


def phase_should_stop(trace, theta: float) -> bool:
    return len(trace) >= 2 and trace[-1] - trace[-2] < theta


def eq4_satisfied(trace, theta: float) -> bool:
    """Both of the last two accuracy gains fall below ``theta``."""
    return len(trace) >= 3 and (trace[-2] - trace[-3] < theta) and (trace[-1] - trace[-2] < theta)


# -- clip tensors ---------------------------------------------------------------

@dataclass
class ClipData:
    inputs: dict
    saliency: torch.Tensor
    label: int
    path: str = ""

    @property
    def num_frames(self) -> int:
        return self.saliency.shape[0]


def prepare_clip(packets, label: int, model: OARModel, gop: int = 12, path: str = "") -> ClipData:
    """Decode-order preprocessing: GOP accumulation, modality tensors, resized saliency."""
    packets = list(packets)
    cfg = model.config
    first = packets[0]
    state = GopState.empty(first.image.shape[0], first.height, first.width, gop)
    per_mod = {m: [] for m in cfg.modalities}
    sal = []
    size = MainNet.stem_size(first.height, first.width)
    for pk in packets:
        state = accumulate_gop(state, pk)
        for m in cfg.modalities:
            per_mod[m].append(modality_input(model.branches[m].cfg, pk, state))
        sal.append(resize_saliency(mb_saliency(pk.partition), size))
    return ClipData({m: torch.stack(v) for m, v in per_mod.items()}, torch.stack(sal), int(label), path)


def load_clip(path, model: OARModel) -> ClipData:
    reader = StreamReader.open(path)
    return prepare_clip(list(reader), reader.class_id, model, reader.gop, str(path))


def load_dataset(dataset_dir, model: OARModel) -> list[ClipData]:
    root = Path(dataset_dir)
    manifest = read_manifest(root)
    clips = []
    for entry in manifest["clips"]:
        clip = load_clip(root / entry["path"], model)
        clip.label = int(entry["label"])
        clips.append(clip)
    return clips


def split_dataset(clips: list, seed: int, val_fraction: float = 0.2) -> tuple[list, list]:
    """Per-class deterministic split."""
    rng = np.random.default_rng(seed)
    by_label: dict[int, list[int]] = {}
    for i, c in enumerate(clips):
        by_label.setdefault(c.label, []).append(i)
    train, val = [], []
    for label in sorted(by_label):
        idx = np.array(by_label[label])
        rng.shuffle(idx)
        n_val = max(1, int(round(len(idx) * val_fraction))) if len(idx) > 1 else 0
        val.extend(idx[:n_val].tolist())
        train.extend(idx[n_val:].tolist())
    return [clips[i] for i in sorted(train)], [clips[i] for i in sorted(val)]


# -- evaluation helpers ---------------------------------------------------------

def _chunks(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def main_outputs(model: OARModel, clip: ClipData, modality: str, batch: int = 128):
    """Features and probabilities of one main network over every frame of a clip."""
    net = model.branches[modality].main
    feats, probs = [], []
    with torch.no_grad():
        for sl in _chunks(clip.num_frames, batch):
            f, logits = net.forward(clip.inputs[modality][sl], clip.saliency[sl])
            feats.append(f)
            probs.append(torch.softmax(logits, dim=-1))
    return torch.cat(feats), torch.cat(probs)


def gate_decisions(model: OARModel, clip: ClipData, modality: str) -> np.ndarray:
    branch = model.branches[modality]
    with torch.no_grad():
        logits = branch.gate.forward_sequence(clip.inputs[modality][None])[0]
    return (torch.sigmoid(logits) >= branch.cfg.gate_threshold).numpy()


def combined_main_predictions(model: OARModel, clip: ClipData) -> np.ndarray:
    """Per-frame argmax of the IIE-weighted average of every modality's main distribution."""
    probs = torch.stack([main_outputs(model, clip, m)[1] for m in model.config.modalities], dim=1)
    w = iie_tensor(probs)
    norm = w.sum(dim=1, keepdim=True)
    w = torch.where(norm > 0, w / norm.clamp_min(1e-12), torch.full_like(w, 1.0 / w.shape[1]))
    return (w[..., None] * probs).sum(dim=1).argmax(dim=-1).numpy()


def main_accuracy(model: OARModel, clips: list[ClipData], tau: int) -> float:
    if not clips:
        return 0.0
    return float(np.mean([
        tdp_weighted_accuracy(combined_main_predictions(model, c) == c.label, tau) for c in clips
    ]))


def hard_labels_for(model: OARModel, clip: ClipData, modality: str) -> np.ndarray:
    return make_hard_labels(main_outputs(model, clip, modality)[1].argmax(dim=-1).numpy(), clip.label)


def gate_priority(cfg: TrainConfig, v_len: int) -> np.ndarray:
    """Per-frame gate weights: half uniform, half TDP. Sums to 1."""
    return 0.5 / v_len + 0.5 * tdp_weights(v_len, cfg.tau, cfg.literal_tdp)


def gate_accuracy(model: OARModel, clips: list[ClipData], cfg: TrainConfig) -> float:
    """Mean over modalities of the priority-weighted balanced accuracy against the hard labels."""
    if not clips:
        return 0.0
    weight = np.concatenate([gate_priority(cfg, c.num_frames) for c in clips])
    scores = []
    for m in model.config.modalities:
        decided = np.concatenate([gate_decisions(model, c, m) for c in clips]).astype(np.int64)
        truth = np.concatenate([hard_labels_for(model, c, m) for c in clips])
        if np.unique(truth).size < 2:
            scores.append(float(np.average(decided == truth, weights=weight)))
        else:
            scores.append(float(balanced_accuracy_score(truth, decided, sample_weight=weight)))
    return float(np.mean(scores))


# -- phases ---------------------------------------------------------------------

@dataclass
class PhaseResult:
    trace: list = field(default_factory=list)
    epochs: int = 0
    best: float = -1.0
    _snapshot: dict | None = field(default=None, repr=False)

    def record(self, accuracy: float, params) -> None:
        """Append a test result, remembering the parameters of the best test so far."""
        self.trace.append(accuracy)
        if accuracy > self.best:
            self.best = accuracy
            self._snapshot = params.state()

    def keep_best(self, params) -> None:
        if self._snapshot is not None:
            params.load_state(self._snapshot)


def _sample_frames(rng, candidates: np.ndarray, weights: np.ndarray, k: int) -> np.ndarray:
    p = weights[candidates]
    return rng.choice(candidates, size=k, replace=True, p=p / p.sum())


def _pad_frames(x: torch.Tensor, length: int) -> torch.Tensor:
    """Repeat the last frame up to ``length``; causal gates never see the padding."""
    if x.shape[0] >= length:
        return x[:length]
    return torch.cat([x, x[-1:].expand(length - x.shape[0], *x.shape[1:])])


def _frame_weights(cfg: TrainConfig, v_len: int) -> np.ndarray:
    return tdp_weights(v_len, cfg.tau, cfg.literal_tdp)


def train_main_phase(model: OARModel, train: list[ClipData], val: list[ClipData], gate_lists, cfg: TrainConfig,
                     rng: np.random.Generator) -> PhaseResult:
    """Cross-entropy training of every main network on gate-approved frames."""
    result = PhaseResult()
    opts = {m: nn.MomentumSGD(model.group(f"main.{m}."), cfg.learning_rate, cfg.momentum) for m in model.config.modalities}
    warned = set()
    while True:
        for _ in range(cfg.epochs_per_test):
            for m in model.config.modalities:
                pairs, weights, skipped = [], [], set()
                for ci, clip in enumerate(train):
                    cand = np.flatnonzero(gate_lists[m][ci])
                    if cand.size == 0:
                        skipped.add(ci)
                        continue
                    w = _frame_weights(cfg, clip.num_frames)
                    if cfg.tdp_mode == "sample":
                        for f in _sample_frames(rng, cand, w, cfg.samples_per_clip):
                            pairs.append((ci, int(f)))
                            weights.append(1.0)
                    else:
                        for f in rng.choice(cand, size=min(cfg.samples_per_clip, cand.size), replace=False):
                            pairs.append((ci, int(f)))
                            weights.append(w[f] * clip.num_frames)
                if skipped and m not in warned:
                    log.warning("%d of %d clips have no gate-approved %s frames; skipped", len(skipped), len(train), m)
                    warned.add(m)
                order = rng.permutation(len(pairs))
                net = model.branches[m].main
                for sl in _chunks(len(order), cfg.batch_size):
                    idx = order[sl]
                    x = torch.stack([train[pairs[i][0]].inputs[m][pairs[i][1]] for i in idx])
                    s = torch.stack([train[pairs[i][0]].saliency[pairs[i][1]] for i in idx])
                    y = torch.tensor([train[pairs[i][0]].label for i in idx])
                    lw = torch.tensor([weights[i] for i in idx], dtype=x.dtype)
                    _, logits = net.forward(x, s)
                    loss = (F.cross_entropy(logits, y, reduction="none") * lw).mean()
                    loss.backward()
                    opts[m].step()
        result.epochs = len(result.trace) * cfg.epochs_per_test + cfg.epochs_per_test
        result.record(main_accuracy(model, val, cfg.tau), model.group("main."))
        log.info("main test %d: %.4f", len(result.trace), result.trace[-1])
        if phase_should_stop(result.trace, cfg.theta) or len(result.trace) >= cfg.max_tests_per_phase:
            result.keep_best(model.group("main."))
            return result


def _balanced_weights(pos: int, total: int) -> tuple[float, float]:
    """(negative, positive) class weights n / (2 n_c); the loss scale stays near one."""
    if not 0 < pos < total:
        return 1.0, 1.0
    return total / (2 * (total - pos)), total / (2 * pos)


def train_gate_phase(model: OARModel, train: list[ClipData], val: list[ClipData], hard_labels, cfg: TrainConfig,
                     rng: np.random.Generator, clips_per_batch: int = 8) -> PhaseResult:
    """Binary cross-entropy training of every gate network against the hard labels."""
    result = PhaseResult()
    opts = {m: nn.MomentumSGD(model.group(f"gate.{m}."), cfg.learning_rate, cfg.momentum) for m in model.config.modalities}
    class_weight = {}
    for m in model.config.modalities:
        # most frames are labelled 1 once the mains train; balancing keeps the rarer "skip" frames
        # from being drowned out
        pos = int(sum(h.sum() for h in hard_labels[m]))
        total = int(sum(h.size for h in hard_labels[m]))
        class_weight[m] = _balanced_weights(pos, total) if cfg.balance_gate_labels else (1.0, 1.0)
    while True:
        for _ in range(cfg.epochs_per_test):
            for m in model.config.modalities:
                gate = model.branches[m].gate
                order = rng.permutation(len(train))
                for sl in _chunks(len(order), clips_per_batch):
                    batch = order[sl]
                    # every frame contributes, weighted by gate_priority: the first frames (short
                    # shift history) decide early exits but are rare otherwise
                    lengths = [train[ci].num_frames for ci in batch]
                    horizon = max(lengths)
                    x = torch.stack([_pad_frames(train[ci].inputs[m], horizon) for ci in batch])
                    logits = gate.forward_sequence(x)
                    target = torch.zeros(logits.shape, dtype=logits.dtype)
                    priority = torch.zeros(logits.shape, dtype=logits.dtype)
                    for row, ci in enumerate(batch):
                        n = lengths[row]
                        target[row, :n] = torch.as_tensor(hard_labels[m][ci], dtype=logits.dtype)
                        priority[row, :n] = torch.as_tensor(gate_priority(cfg, n), dtype=logits.dtype)
                    w_neg, w_pos = class_weight[m]
                    weight = (w_neg + (w_pos - w_neg) * target) * priority
                    loss = F.binary_cross_entropy_with_logits(logits, target, weight=weight, reduction="sum") / len(batch)
                    loss.backward()
                    opts[m].step()
        result.epochs = len(result.trace) * cfg.epochs_per_test + cfg.epochs_per_test
        result.record(gate_accuracy(model, val, cfg), model.group("gate."))
        log.info("gate test %d: %.4f", len(result.trace), result.trace[-1])
        if phase_should_stop(result.trace, cfg.theta) or len(result.trace) >= cfg.max_tests_per_phase:
            result.keep_best(model.group("gate."))
            return result


# -- fusion and exit-gate heads -------------------------------------------------

@dataclass
class BranchCache:
    feats: torch.Tensor  # (T, m, C, h, w)
    probs: torch.Tensor  # (T, m, N)
    active: torch.Tensor  # (T, m) bool
    label: int


def cache_branches(model: OARModel, clip: ClipData) -> BranchCache:
    feats, probs, active = [], [], []
    for m in model.config.modalities:
        f, p = main_outputs(model, clip, m)
        feats.append(f)
        probs.append(p)
        active.append(torch.as_tensor(gate_decisions(model, clip, m)))
    return BranchCache(torch.stack(feats, 1), torch.stack(probs, 1), torch.stack(active, 1), clip.label)


def fused_sequence(model: OARModel, cache: BranchCache):
    """Running fused maps over the frames with at least one active modality."""
    keep = cache.active.any(dim=1)
    frames = torch.nonzero(keep).flatten()
    if frames.numel() == 0:
        return frames, None, None
    feats, probs, active = cache.feats[frames], cache.probs[frames], cache.active[frames]
    x_fus, w_mc, _ = model.fusion.forward_sequence(feats, iie_tensor(probs), active, probs.argmax(dim=-1))
    running = cumulative_fuse(x_fus, w_mc)
    return frames, running, model.fusion.logits(running)


def running_predictions(num_frames: int, frames: torch.Tensor, preds: np.ndarray) -> np.ndarray:
    """Per stream frame: latest fused prediction so far, -1 before the first fused frame."""
    out = np.full(num_frames, -1, dtype=np.int64)
    for f, p in zip(frames.tolist(), preds.tolist()):
        out[f:] = p
    return out


def fusion_accuracy(model: OARModel, caches: list[BranchCache], tau: int) -> float:
    scores = []
    with torch.no_grad():
        for c in caches:
            frames, _, logits = fused_sequence(model, c)
            T = c.active.shape[0]
            if logits is None:
                scores.append(0.0)
                continue
            preds = running_predictions(T, frames, logits.argmax(dim=-1).numpy())
            scores.append(tdp_weighted_accuracy(preds == c.label, tau))
    return float(np.mean(scores)) if scores else 0.0


def train_fusion_heads(model: OARModel, train_c: list[BranchCache], val_c: list[BranchCache], cfg: TrainConfig,
                       rng: np.random.Generator) -> dict:
    opt = nn.MomentumSGD(model.group("fusion."), cfg.learning_rate, cfg.momentum, cfg.head_max_grad_norm)
    fusion = PhaseResult()
    while True:
        for _ in range(cfg.epochs_per_test):
            for ci in rng.permutation(len(train_c)):
                c = train_c[ci]
                frames, _, logits = fused_sequence(model, c)
                if logits is None:
                    continue
                y = torch.full((logits.shape[0],), c.label)
                # frame priorities: early fused frames decide early exits
                w = torch.as_tensor(_frame_weights(cfg, c.active.shape[0])[frames.numpy()], dtype=logits.dtype)
                (F.cross_entropy(logits, y, reduction="none") * w).sum().backward()
                opt.step()
        fusion.record(fusion_accuracy(model, val_c, cfg.tau), model.group("fusion."))
        log.info("fusion test %d: %.4f", len(fusion.trace), fusion.trace[-1])
        if phase_should_stop(fusion.trace, cfg.theta) or len(fusion.trace) >= cfg.max_tests_per_phase:
            fusion.keep_best(model.group("fusion."))
            break

    def gating_pairs(caches):
        prev, curr, labels = [], [], []
        with torch.no_grad():
            for c in caches:
                frames, running, logits = fused_sequence(model, c)
                if running is None:
                    continue
                correct = (logits.argmax(dim=-1) == c.label).numpy()
                prev.append(torch.cat([running[:1], running[:-1]]))
                curr.append(running)
                labels.append(make_gate_exit_labels(correct, cfg.gate_label_cap))
        if not prev:
            return None
        return torch.cat(prev), torch.cat(curr), torch.as_tensor(np.concatenate(labels))

    tr, va = gating_pairs(train_c), gating_pairs(val_c)
    opt = nn.MomentumSGD(model.group("gate_exit."), cfg.learning_rate, cfg.momentum, cfg.head_max_grad_norm)
    exit_gate = PhaseResult()
    gtrace = exit_gate.trace
    if tr is not None:
        # at most `gate_label_cap` positives per clip, so unweighted BCE settles on "never exit"
        w_neg, w_pos = _balanced_weights(int(tr[2].sum()), len(tr[2])) if cfg.balance_gate_labels else (1.0, 1.0)
        while True:
            for _ in range(cfg.epochs_per_test):
                order = rng.permutation(len(tr[2]))
                for sl in _chunks(len(order), cfg.batch_size):
                    idx = torch.as_tensor(order[sl])
                    logit = model.gating.logit(tr[0][idx], tr[1][idx])
                    target = tr[2][idx].to(logit.dtype)
                    F.binary_cross_entropy_with_logits(logit, target, weight=w_neg + (w_pos - w_neg) * target).backward()
                    opt.step()
            if va is None:
                exit_gate.record(0.0, model.group("gate_exit."))
            else:
                with torch.no_grad():
                    dec = torch.sigmoid(model.gating.logit(va[0], va[1])) >= model.config.exit_threshold
                exit_gate.record(float((dec.long() == va[2]).double().mean()), model.group("gate_exit."))
            log.info("exit-gate test %d: %.4f", len(gtrace), gtrace[-1])
            if phase_should_stop(gtrace, cfg.theta) or len(gtrace) >= cfg.max_tests_per_phase:
                exit_gate.keep_best(model.group("gate_exit."))
                break
    return {"fusion": fusion.trace, "gate_exit": gtrace}


# -- outer loop -----------------------------------------------------------------

@dataclass
class TrainReport:
    config: dict
    main_traces: list = field(default_factory=list)
    gate_traces: list = field(default_factory=list)
    outer_accuracy: list = field(default_factory=list)
    eq4_decisions: list = field(default_factory=list)
    stopped_at: int | None = None
    final_accuracy: float = 0.0
    converged: bool = False
    heads: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def iterative_train(model: OARModel, clips: list[ClipData], cfg: TrainConfig, checkpoint_dir=None) -> TrainReport:
    """Alternate main and gate training until two consecutive accuracy gains fall below theta."""
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    train, val = split_dataset(clips, cfg.seed, cfg.val_fraction)
    report = TrainReport(config=asdict(cfg))
    mods = model.config.modalities
    gate_lists = {m: [np.ones(c.num_frames, bool) for c in train] for m in mods}
    best = (-1.0, None)
    for i in range(cfg.max_iters):
        main = train_main_phase(model, train, val, gate_lists, cfg, rng)
        report.main_traces.append(main.trace)
        report.outer_accuracy.append(main.best)
        if main.best > best[0]:
            best = (main.best, model.snapshot())
        stop = eq4_satisfied(report.outer_accuracy, cfg.theta)
        report.eq4_decisions.append({"iteration": i, "accuracy": main.best, "stop": stop})
        log.info("outer iteration %d: A=%.4f stop=%s", i, main.best, stop)
        if checkpoint_dir is not None:
            model.save(Path(checkpoint_dir) / f"iter_{i:02d}.oarckpt")
        if stop:
            report.stopped_at = i
            report.converged = True
            break
        hard = {m: [hard_labels_for(model, c, m) for c in train] for m in mods}
        gate = train_gate_phase(model, train, val, hard, cfg, rng)
        report.gate_traces.append(gate.trace)
        gate_lists = {m: [gate_decisions(model, c, m) for c in train] for m in mods}
    else:
        log.warning("stopping criterion not met within %d outer iterations; keeping the best model", cfg.max_iters)
        model.restore(best[1])
    report.final_accuracy = report.outer_accuracy[-1] if report.converged else best[0]
    train_c = [cache_branches(model, c) for c in train]
    val_c = [cache_branches(model, c) for c in val]
    report.heads = train_fusion_heads(model, train_c, val_c, cfg, rng)
    report.wall_clock = time.perf_counter() - start
    return report
