"""The assembled recognizer: three branches, fusion head, exit gate, one ParamSet."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import nn
from .fusion import FusionHead, GatingHead
from .nn import CheckpointError, ParamSet
from .tfem import MODALITIES, Branch, default_branch_config, feature_shape

FORMAT_TAG = "oarkit-model"


@dataclass
class ModelConfig:
    num_classes: int
    image_channels: int = 1
    height: int = 64
    width: int = 64
    modalities: tuple = MODALITIES
    tlsm_ratio: float = 1.0 / 16
    tlsm_frames: int = 4
    msem_pool: int = 3
    msem_kernel: int = 7
    gate_widths: tuple = (8, 16, 32)
    main_widths: tuple = (16, 32, 64, 64)
    gating_hidden: int = 64
    fixed_iie_weights: bool = False
    gate_threshold: float = 0.5
    exit_threshold: float = 0.5

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.gate_widths = tuple(self.gate_widths)
        self.main_widths = tuple(self.main_widths)
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown or not self.modalities:
            raise ValueError(f"modalities must be a non-empty subset of {MODALITIES}")
        # keep the fixed Image, MV, Res order regardless of how they were given
        self.modalities = tuple(m for m in MODALITIES if m in self.modalities)

    def branch_config(self, modality: str):
        return default_branch_config(
            modality, self.image_channels, self.num_classes,
            tlsm_ratio=self.tlsm_ratio, tlsm_frames=self.tlsm_frames,
            msem_pool=self.msem_pool, msem_kernel=self.msem_kernel,
            gate_widths=self.gate_widths, main_widths=self.main_widths,
            gate_threshold=self.gate_threshold,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("modalities", "gate_widths", "main_widths"):
            d[k] = list(d[k])
        return d


@dataclass
class OARModel:
    config: ModelConfig
    params: ParamSet = field(default_factory=ParamSet)
    seed: int = 0

    def __post_init__(self):
        gen = torch.Generator().manual_seed(int(self.seed))
        self.branches = {m: Branch.build(self.config.branch_config(m), self.params, gen) for m in self.config.modalities}
        c, h, w = self.feature_shape
        self.fusion = FusionHead(self.config.modalities, c, self.config.num_classes, self.params, gen,
                                 fixed_iie_weights=self.config.fixed_iie_weights)
        self.gating = GatingHead(c * h * w, self.params, self.config.gating_hidden, gen)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return feature_shape(self.config.branch_config(self.config.modalities[0]), self.config.height, self.config.width)

    def reset_stream(self) -> None:
        for b in self.branches.values():
            b.reset()

    def group(self, prefix: str) -> ParamSet:
        return self.params.subset(prefix)

    def to_bytes(self) -> bytes:
        return nn.checkpoint_bytes(self.params, {"format": FORMAT_TAG, "config": self.config.to_dict()})

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "OARModel":
        state, meta = nn.parse_checkpoint(data)
        if meta.get("format") != FORMAT_TAG:
            raise CheckpointError("checkpoint does not hold a recognizer model")
        model = cls(ModelConfig(**meta["config"]))
        missing = set(model.params.names()) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
        model.params.load_state(state)
        return model

    @classmethod
    def load(cls, path) -> "OARModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def snapshot(self) -> dict[str, np.ndarray]:
        return self.params.state()

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        self.params.load_state(snap)
