"""Entropy-driven modal weighting, consistency-weighted temporal fusion and the exit gate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import nn
from .nn import ParamSet, ShapeError

ENTROPY_EPS = 1e-12


def iie(probs, eps: float = ENTROPY_EPS) -> float:
    """1 - H(P)/log2(N), clamped to [0, 1]."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    n = p.size
    if n < 2:
        raise ValueError("inverse information entropy needs at least two classes")
    h = -float(np.sum(p * np.log2(p + eps)))
    return min(1.0, max(0.0, 1.0 - h / math.log2(n)))


def iie_tensor(probs: torch.Tensor, eps: float = ENTROPY_EPS) -> torch.Tensor:
    n = probs.shape[-1]
    if n < 2:
        raise ValueError("inverse information entropy needs at least two classes")
    h = -(probs * torch.log2(probs + eps)).sum(dim=-1)
    return (1.0 - h / math.log2(n)).clamp(0.0, 1.0)


@dataclass
class ModalSummary:
    modality: str
    features: torch.Tensor
    mean_weight: float
    prediction: int | None
    active: bool


def modal_weight(x_t: torch.Tensor, iie_value, weight, bias) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """w = sigmoid(conv1x1(x_t * iie)); returns (w, w ⊙ x_t, mean(w))."""
    scaled = x_t * iie_value
    w = torch.sigmoid(nn.conv2d(scaled, weight, bias, stride=1, padding=0))
    return w, w * x_t, w.mean(dim=(-3, -2, -1))


class FusionHead:
    """Per-modality weight convs, the 1×1 mixing conv and the fused classifier."""

    def __init__(self, modalities, channels: int, num_classes: int, params: ParamSet,
                 generator: torch.Generator | None = None, fixed_iie_weights: bool = False):
        self.modalities = tuple(modalities)
        self.channels = channels
        self.num_classes = num_classes
        self.fixed_iie_weights = fixed_iie_weights
        if "fusion.mix.weight" not in params:
            gen = generator or torch.Generator().manual_seed(0)
            for m in self.modalities:
                params.add(f"fusion.weight.{m}.weight", nn.glorot_uniform((channels, channels, 1, 1), gen))
                params.add(f"fusion.weight.{m}.bias", torch.zeros(channels))
            m_all = len(self.modalities) * channels
            params.add("fusion.mix.weight", nn.glorot_uniform((channels, m_all, 1, 1), gen))
            params.add("fusion.mix.bias", torch.zeros(channels))
            params.add("fusion.cls.weight", nn.glorot_uniform((num_classes, channels), gen))
            params.add("fusion.cls.bias", torch.zeros(num_classes))
        self.params = params

    def weigh(self, modality: str, x_t: torch.Tensor, iie_value):
        if self.fixed_iie_weights:
            # debug path: the scalar IIE itself is the weight map
            w = torch.ones_like(x_t) * _bcast(iie_value, x_t)
            return w, w * x_t, w.mean(dim=(-3, -2, -1))
        p = self.params
        return modal_weight(x_t, _bcast(iie_value, x_t), p[f"fusion.weight.{modality}.weight"], p[f"fusion.weight.{modality}.bias"])

    def mix(self, stacked: torch.Tensor) -> torch.Tensor:
        return nn.conv2d(stacked, self.params["fusion.mix.weight"], self.params["fusion.mix.bias"])

    def logits(self, fused: torch.Tensor) -> torch.Tensor:
        return nn.affine(fused.mean(dim=(-2, -1)), self.params["fusion.cls.weight"], self.params["fusion.cls.bias"])

    def forward_sequence(self, feats, iies, active, preds):
        """Fused per-frame maps and consistency weights for one clip.

        feats (T, m, C, h, w), iies (T, m), active (T, m) bool, preds (T, m)
        int. Inactive slots contribute zero features and zero mean weight.
        Returns (x_fus (T, C, h, w), w_mc (T,), mean weights (T, m)).
        """
        T, m = active.shape
        mask = active.to(feats.dtype)
        weighted, means = [], []
        for j, mod in enumerate(self.modalities):
            _, xw, mw = self.weigh(mod, feats[:, j], iies[:, j])
            weighted.append(xw * mask[:, j, None, None, None])
            means.append(mw * mask[:, j])
        means = torch.stack(means, dim=1)
        x_fus = self.mix(torch.cat(weighted, dim=1))
        w_mc = consistency_weights(means, active, preds)
        return x_fus, w_mc, means


def _bcast(value, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(value, dtype=like.dtype)
    if v.dim() == 0:
        return v
    return v.reshape(-1, *([1] * (like.dim() - 1)))


def fuse_modalities(summaries: list[ModalSummary], head: FusionHead) -> tuple[torch.Tensor, np.ndarray]:
    """Channel-concatenate modality features in fixed order, mix with 1×1 conv, classify."""
    if not any(s.active for s in summaries):
        raise ValueError("no active modality to fuse")
    by_mod = {s.modality: s for s in summaries}
    ref = next(s.features for s in summaries if s.active)
    parts = []
    for m in head.modalities:
        s = by_mod.get(m)
        parts.append(s.features if (s is not None and s.active) else torch.zeros_like(ref))
    fused = head.mix(torch.cat(parts, dim=0))
    with torch.no_grad():
        probs = nn.apply_activation("softmax", head.logits(fused)).double().numpy()
    return fused, probs


def mc_weight(summaries: list[ModalSummary]) -> float:
    """Salient mean weight plus agreement-signed mean weights of the other modalities."""
    active = [s for s in summaries if s.active]
    if not active:
        raise ValueError("mc_weight needs at least one active modality")
    salient = active[0]
    for s in active[1:]:
        if s.mean_weight > salient.mean_weight:
            salient = s
    total = float(salient.mean_weight)
    for s in active:
        if s is salient:
            continue
        sign = 1.0 if s.prediction == salient.prediction else -1.0
        total += sign * float(s.mean_weight)
    return total


def consistency_weights(means: torch.Tensor, active: torch.Tensor, preds: torch.Tensor) -> torch.Tensor:
    """Vectorized ``mc_weight`` over frames; differentiable through ``means``."""
    masked = torch.where(active, means.detach(), torch.full_like(means, -math.inf))
    # argmax returns the first maximum, i.e. the fixed modality order breaks ties
    sal = masked.argmax(dim=1)
    sal_pred = preds.gather(1, sal[:, None])
    sign = torch.where(preds == sal_pred, 1.0, -1.0).to(means.dtype)
    onehot = torch.nn.functional.one_hot(sal, means.shape[1]).to(torch.bool)
    sign = torch.where(onehot, torch.ones_like(sign), sign)
    sign = torch.where(active, sign, torch.zeros_like(sign))
    return (sign * means).sum(dim=1)


@dataclass
class FusedState:
    t: int = 0
    running_sum: torch.Tensor | None = None
    current: torch.Tensor | None = None
    previous: torch.Tensor | None = None
    history: list = field(default_factory=list)


def temporal_fuse(state: FusedState, x_fus: torch.Tensor, w_mc: float) -> FusedState:
    if state.running_sum is not None and state.running_sum.shape != x_fus.shape:
        raise ShapeError(f"fused feature shape changed from {tuple(state.running_sum.shape)} to {tuple(x_fus.shape)}")
    t = state.t + 1
    term = w_mc * x_fus
    running = term if state.running_sum is None else state.running_sum + term
    return FusedState(t=t, running_sum=running, current=running / t, previous=state.current,
                      history=state.history + [float(w_mc)])


def cumulative_fuse(x_fus: torch.Tensor, w_mc: torch.Tensor) -> torch.Tensor:
    """All running averages at once: out[t-1] = sum_{i<=t} w_i x_i / t."""
    t = torch.arange(1, x_fus.shape[0] + 1, dtype=x_fus.dtype).reshape(-1, *([1] * (x_fus.dim() - 1)))
    return torch.cumsum(w_mc.reshape(t.shape) * x_fus, dim=0) / t


class GatingHead:
    """Two FC layers (previous / current fused map) and a linear projection to one logit."""

    def __init__(self, feature_dim: int, params: ParamSet, hidden: int = 64, generator: torch.Generator | None = None):
        self.feature_dim = feature_dim
        self.hidden = hidden
        if "gate_exit.proj.weight" not in params:
            gen = generator or torch.Generator().manual_seed(0)
            for name in ("fc_prev", "fc_curr"):
                params.add(f"gate_exit.{name}.weight", nn.glorot_uniform((hidden, feature_dim), gen))
                params.add(f"gate_exit.{name}.bias", torch.zeros(hidden))
            params.add("gate_exit.proj.weight", nn.glorot_uniform((1, 2 * hidden), gen))
            params.add("gate_exit.proj.bias", torch.zeros(1))
        self.params = params

    def logit(self, prev: torch.Tensor, curr: torch.Tensor) -> torch.Tensor:
        p = self.params
        a = torch.relu(nn.affine(prev.flatten(start_dim=-3), p["gate_exit.fc_prev.weight"], p["gate_exit.fc_prev.bias"]))
        b = torch.relu(nn.affine(curr.flatten(start_dim=-3), p["gate_exit.fc_curr.weight"], p["gate_exit.fc_curr.bias"]))
        return nn.affine(torch.cat([a, b], dim=-1), p["gate_exit.proj.weight"], p["gate_exit.proj.bias"])[..., 0]


def gate_exit(state: FusedState, head: GatingHead, threshold: float = 0.5) -> tuple[int, float]:
    if state.t < 1:
        raise ValueError("gate_exit needs at least one fused frame")
    prev = state.current if state.t == 1 else state.previous
    with torch.no_grad():
        conf = float(torch.sigmoid(head.logit(prev, state.current)))
    return int(conf >= threshold), conf


def classify_fused(state: FusedState, head: FusionHead) -> np.ndarray:
    if state.t < 1:
        raise ValueError("classify_fused needs at least one fused frame")
    with torch.no_grad():
        return nn.apply_activation("softmax", head.logits(state.current)).double().numpy()
