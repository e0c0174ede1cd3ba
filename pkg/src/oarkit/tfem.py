"""Per-modality two-stage branch: a light gate network and a heavier main network.

The gate carries a temporal layering shift at the input of its second conv
block; the main network applies block-saliency attention after its first
block.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import nn
from .codec import FramePacket, GopState, mb_saliency
from .fusion import iie
from .nn import ParamSet, ShapeError

MODALITIES = ("image", "motion", "residual")


@dataclass
class BranchConfig:
    modality: str
    in_channels: int
    num_classes: int
    tlsm_ratio: float = 1.0 / 16
    tlsm_frames: int = 4
    msem_pool: int = 3
    msem_kernel: int = 7
    gate_widths: tuple = (8, 16, 32)
    main_widths: tuple = (16, 32, 64, 64)
    input_offset: float = 0.0
    input_scale: float = 1.0
    gate_threshold: float = 0.5

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.tlsm_frames < 1:
            raise ValueError("tlsm_frames must be >= 1")
        if not 0.0 <= self.tlsm_ratio <= 1.0:
            raise ValueError("tlsm_ratio must lie in [0, 1]")
        self.gate_widths = tuple(self.gate_widths)
        self.main_widths = tuple(self.main_widths)
        # every width must host at least one channel per shared frame
        if self.tlsm_ratio > 0 and shifted_channels(self.gate_widths[0], self.tlsm_ratio, self.tlsm_frames) > self.gate_widths[0]:
            raise ValueError("gate width too small for the requested number of shared frames")


def default_branch_config(modality: str, image_channels: int, num_classes: int, **overrides) -> BranchConfig:
    chans = {"image": image_channels, "motion": 2, "residual": image_channels}[modality]
    # roughly zero-mean, unit-scale inputs on the synthetic corpus
    offset = {"image": 96.0, "motion": 0.0, "residual": 0.0}[modality]
    scale = {"image": 1.0 / 32.0, "motion": 1.0 / 2.0, "residual": 1.0 / 16.0}[modality]
    return BranchConfig(modality=modality, in_channels=chans, num_classes=num_classes,
                        input_offset=offset, input_scale=scale, **overrides)


def shifted_channels(channels: int, ratio: float, n: int) -> int:
    """Number of channels replaced by history: ratio*C rounded down to a multiple of n, at least n."""
    if ratio <= 0:
        return 0
    c = int(ratio * channels) // n * n
    return max(c, n)


class ShiftHistory:
    """Most-recent-first buffer of the last ``n`` insertion-point feature maps."""

    def __init__(self, n: int):
        self.n = n
        self._items: deque = deque(maxlen=n)

    def push(self, x: torch.Tensor) -> None:
        if self._items and self._items[0].shape != x.shape:
            raise ShapeError(f"history entry shape {tuple(x.shape)} != {tuple(self._items[0].shape)}")
        self._items.appendleft(x.detach())

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, j: int) -> torch.Tensor:
        return self._items[j]

    def clear(self) -> None:
        self._items.clear()


def tlsm_apply(history: ShiftHistory, x_t: torch.Tensor, cfg: BranchConfig) -> torch.Tensor:
    n = cfg.tlsm_frames
    c = shifted_channels(x_t.shape[0], cfg.tlsm_ratio, n)
    if c == 0:
        return x_t
    width = c // n
    out = x_t.clone()
    for j in range(n):
        if j < len(history):
            past = history[j]
            if past.shape != x_t.shape:
                raise ShapeError(f"history entry {tuple(past.shape)} does not match {tuple(x_t.shape)}")
            out[j * width:(j + 1) * width] = past[:width]
        else:
            out[j * width:(j + 1) * width] = 0
    return out


def tlsm_sequence(x: torch.Tensor, cfg: BranchConfig) -> torch.Tensor:
    """Causal shift over a whole clip at once; x is (B, T, C, H, W)."""
    n = cfg.tlsm_frames
    c = shifted_channels(x.shape[2], cfg.tlsm_ratio, n)
    if c == 0:
        return x
    width = c // n
    parts = []
    T = x.shape[1]
    for j in range(1, n + 1):
        src = x[:, :, :width]
        if j >= T:
            parts.append(torch.zeros_like(src))
        else:
            pad = torch.zeros_like(src[:, :j])
            parts.append(torch.cat([pad, src[:, :T - j]], dim=1))
    return torch.cat(parts + [x[:, :, c:]], dim=2)


def resize_saliency(saliency, size) -> torch.Tensor:
    s = torch.as_tensor(saliency, dtype=nn.default_dtype())
    squeeze = s.dim() == 2
    if squeeze:
        s = s.unsqueeze(0)
    if tuple(s.shape[-2:]) != tuple(size):
        s = F.interpolate(s.unsqueeze(1), size=tuple(size), mode="bilinear", align_corners=False).squeeze(1)
    return s[0] if squeeze else s


def msem_attention(saliency: torch.Tensor, weight, bias, pool: int = 3) -> torch.Tensor:
    """sigmoid(conv([local mean; local max] of the saliency plane)); returns (…, 1, H, W)."""
    s = saliency.unsqueeze(-3)
    stacked = torch.cat(
        [nn.pool2d("mean", s, pool, 1, same_padding=True), nn.pool2d("max", s, pool, 1, same_padding=True)],
        dim=-3,
    )
    k = weight.shape[-1]
    return torch.sigmoid(nn.conv2d(stacked, weight, bias, stride=1, padding=k // 2))


def msem_apply(x_t: torch.Tensor, saliency: torch.Tensor, weight, bias, pool: int = 3) -> torch.Tensor:
    if tuple(saliency.shape[-2:]) != tuple(x_t.shape[-2:]):
        raise ShapeError(f"saliency {tuple(saliency.shape)} does not match features {tuple(x_t.shape)}")
    return msem_attention(saliency, weight, bias, pool) * x_t


def _conv_params(params: ParamSet, name: str, c_out: int, c_in: int, k: int, gen) -> None:
    params.add(f"{name}.weight", nn.glorot_uniform((c_out, c_in, k, k), gen))
    params.add(f"{name}.bias", torch.zeros(c_out))


def _affine_params(params: ParamSet, name: str, d_out: int, d_in: int, gen) -> None:
    params.add(f"{name}.weight", nn.glorot_uniform((d_out, d_in), gen))
    params.add(f"{name}.bias", torch.zeros(d_out))


def _block(params: ParamSet, name: str, x: torch.Tensor) -> torch.Tensor:
    return torch.relu(nn.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=2, padding=1))


class GateNet:
    def __init__(self, cfg: BranchConfig, params: ParamSet, generator: torch.Generator | None = None):
        self.cfg = cfg
        self.prefix = f"gate.{cfg.modality}"
        if f"{self.prefix}.conv0.weight" not in params:
            gen = generator or torch.Generator().manual_seed(0)
            c_in = cfg.in_channels
            for i, c in enumerate(cfg.gate_widths):
                _conv_params(params, f"{self.prefix}.conv{i}", c, c_in, 3, gen)
                c_in = c
            _affine_params(params, f"{self.prefix}.head", 1, c_in, gen)
        self.params = params

    def stem(self, x: torch.Tensor) -> torch.Tensor:
        return _block(self.params, f"{self.prefix}.conv0", x)

    def tail(self, h: torch.Tensor) -> torch.Tensor:
        for i in range(1, len(self.cfg.gate_widths)):
            h = _block(self.params, f"{self.prefix}.conv{i}", h)
        pooled = h.mean(dim=(-2, -1))
        out = nn.affine(pooled, self.params[f"{self.prefix}.head.weight"], self.params[f"{self.prefix}.head.bias"])
        return out[..., 0]

    def forward_frame(self, x: torch.Tensor, history: ShiftHistory) -> torch.Tensor:
        h = self.stem(x)
        logit = self.tail(tlsm_apply(history, h, self.cfg))
        history.push(h)
        return logit

    def forward_sequence(self, x: torch.Tensor) -> torch.Tensor:
        """Logits for every frame of (B, T, C, H, W) clips, identical to frame-by-frame use."""
        b, t = x.shape[:2]
        h = self.stem(x.reshape(b * t, *x.shape[2:]))
        h = tlsm_sequence(h.reshape(b, t, *h.shape[1:]), self.cfg)
        return self.tail(h.reshape(b * t, *h.shape[2:])).reshape(b, t)


class MainNet:
    def __init__(self, cfg: BranchConfig, params: ParamSet, generator: torch.Generator | None = None):
        self.cfg = cfg
        self.prefix = f"main.{cfg.modality}"
        if f"{self.prefix}.conv0.weight" not in params:
            gen = generator or torch.Generator().manual_seed(0)
            c_in = cfg.in_channels
            for i, c in enumerate(cfg.main_widths):
                _conv_params(params, f"{self.prefix}.conv{i}", c, c_in, 3, gen)
                c_in = c
            _conv_params(params, f"{self.prefix}.msem", 1, 2, cfg.msem_kernel, gen)
            _affine_params(params, f"{self.prefix}.cls", cfg.num_classes, c_in, gen)
        self.params = params

    @staticmethod
    def stem_size(height: int, width: int) -> tuple[int, int]:
        return (height + 1) // 2, (width + 1) // 2

    def features(self, x: torch.Tensor, saliency: torch.Tensor) -> torch.Tensor:
        p = self.params
        h = _block(p, f"{self.prefix}.conv0", x)
        sal = resize_saliency(saliency, h.shape[-2:])
        h = msem_apply(h, sal, p[f"{self.prefix}.msem.weight"], p[f"{self.prefix}.msem.bias"], self.cfg.msem_pool)
        for i in range(1, len(self.cfg.main_widths)):
            h = _block(p, f"{self.prefix}.conv{i}", h)
        return h

    def classify(self, feats: torch.Tensor) -> torch.Tensor:
        pooled = feats.mean(dim=(-2, -1))
        return nn.affine(pooled, self.params[f"{self.prefix}.cls.weight"], self.params[f"{self.prefix}.cls.bias"])

    def forward(self, x: torch.Tensor, saliency: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.features(x, saliency)
        return feats, self.classify(feats)


def feature_shape(cfg: BranchConfig, height: int, width: int) -> tuple[int, int, int]:
    h, w = height, width
    for _ in cfg.main_widths:
        h, w = (h + 1) // 2, (w + 1) // 2
    return cfg.main_widths[-1], h, w


def modality_input(cfg: BranchConfig, packet: FramePacket, gop_state: GopState) -> torch.Tensor:
    if cfg.modality == "image":
        raw = packet.image
    elif cfg.modality == "motion":
        raw = gop_state.motion
    else:
        raw = gop_state.residual
    return torch.as_tensor((raw.astype(np.float64) - cfg.input_offset) * cfg.input_scale, dtype=nn.default_dtype())


@dataclass
class BranchOutput:
    modality: str
    features: torch.Tensor
    probs: np.ndarray | None
    iie: float
    activated: bool
    gate_score: float

    @property
    def prediction(self) -> int | None:
        return None if self.probs is None else int(np.argmax(self.probs))


@dataclass
class Branch:
    """One modality: gate + main networks plus the per-stream shift history."""

    cfg: BranchConfig
    gate: GateNet
    main: MainNet
    history: ShiftHistory = field(init=False)
    gate_calls: int = 0
    main_calls: int = 0

    def __post_init__(self):
        self.history = ShiftHistory(self.cfg.tlsm_frames)

    @classmethod
    def build(cls, cfg: BranchConfig, params: ParamSet, generator=None) -> "Branch":
        return cls(cfg, GateNet(cfg, params, generator), MainNet(cfg, params, generator))

    def reset(self) -> None:
        self.history.clear()
        self.gate_calls = 0
        self.main_calls = 0

    def gate_infer(self, x: torch.Tensor) -> tuple[float, int]:
        self.gate_calls += 1
        with torch.no_grad():
            score = float(torch.sigmoid(self.gate.forward_frame(x, self.history)))
        return score, int(score >= self.cfg.gate_threshold)

    def main_infer(self, x: torch.Tensor, saliency) -> tuple[torch.Tensor, np.ndarray]:
        self.main_calls += 1
        with torch.no_grad():
            feats, logits = self.main.forward(x, torch.as_tensor(saliency, dtype=nn.default_dtype()))
            probs = nn.apply_activation("softmax", logits).double().numpy()
        return feats, probs

    def step(self, packet: FramePacket, gop_state: GopState, saliency=None, force_main: bool = False) -> BranchOutput:
        x = modality_input(self.cfg, packet, gop_state)
        score, decision = self.gate_infer(x)
        if decision or force_main:
            if saliency is None:
                saliency = mb_saliency(packet.partition)
            feats, probs = self.main_infer(x, saliency)
            return BranchOutput(self.cfg.modality, feats, probs, iie(probs), True, score)
        zeros = torch.zeros(feature_shape(self.cfg, packet.height, packet.width), dtype=nn.default_dtype())
        return BranchOutput(self.cfg.modality, zeros, None, 0.0, False, score)


def branch_step(branch: Branch, packet: FramePacket, gop_state: GopState) -> BranchOutput:
    return branch.step(packet, gop_state)
