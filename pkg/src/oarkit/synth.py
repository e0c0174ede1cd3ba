"""Deterministic synthetic action clips in the ``.oar`` container.

Class ``k`` of ``K`` moves a textured square along direction ``k * 360/K``
degrees (y axis pointing down, so "up" is a negative dy). The square's
leading half is bright and its trailing half dark; on "degraded" frames the
encoder has discarded that detail and the square is drawn flat.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .codec import I_FRAME, P_FRAME, FramePacket, PartitionMap, write_stream

MANIFEST_NAME = "manifest.json"


@dataclass
class DatasetSpec:
    num_classes: int = 4
    clips_per_class: int = 50
    frames_per_clip: int = 60
    width: int = 64
    height: int = 64
    gop: int = 12
    seed: int = 7
    channels: int = 1
    speed: int = 2
    object_size: int = 16
    p_degraded: float = 0.4
    edge_fraction: float = 0.5
    background_amplitude: float = 0.0
    texture_threshold: float = 200.0
    residual_threshold: float = 8.0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.clips_per_class < 1:
            raise ValueError("clips_per_class must be >= 1")
        if self.frames_per_clip < self.gop:
            raise ValueError("frames_per_clip must be >= gop")
        if self.width % 64 or self.height % 64 or self.width <= 0 or self.height <= 0:
            raise ValueError("width and height must be positive multiples of 64")
        if self.object_size % 4 or not 4 <= self.object_size <= min(self.width, self.height):
            raise ValueError("object_size must be a multiple of 4 that fits the frame")
        if not 0.0 <= self.p_degraded <= 1.0:
            raise ValueError("p_degraded must lie in [0, 1]")
        if not 0.0 < self.edge_fraction <= 0.5:
            raise ValueError("edge_fraction must lie in (0, 0.5]")


def class_velocity(k: int, num_classes: int, speed: int) -> tuple[int, int]:
    angle = 2.0 * math.pi * k / num_classes
    return int(round(speed * math.cos(angle))), int(round(-speed * math.sin(angle)))


def _quadtree(hot: np.ndarray, x: int, y: int, side: int, out: list) -> None:
    cells = hot[y // 4:(y + side) // 4, x // 4:(x + side) // 4]
    if side > 4 and cells.any():
        half = side // 2
        for dy in (0, half):
            for dx in (0, half):
                _quadtree(hot, x + dx, y + dy, half, out)
    else:
        out.append((x, y, side))


def build_partition(hot: np.ndarray, width: int, height: int) -> PartitionMap:
    """Quadtree split of 64×64 units down to side 4 wherever a 4×4 cell is ``hot``."""
    blocks: list = []
    for y in range(0, height, 64):
        for x in range(0, width, 64):
            _quadtree(hot, x, y, 64, blocks)
    return PartitionMap(width, height, np.array(blocks, dtype=np.int64))


def _cells(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // 4, 4, w // 4, 4).transpose(0, 2, 1, 3).reshape(h // 4, w // 4, 16)


def _compensate(prev: np.ndarray, field: np.ndarray) -> np.ndarray:
    _, h, w = prev.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sx = np.clip(xs - field[0], 0, w - 1)
    sy = np.clip(ys - field[1], 0, h - 1)
    return prev[:, sy, sx]


def _object_texture(rng: np.random.Generator, size: int, velocity: tuple[int, int], edge_fraction: float) -> np.ndarray:
    tex = rng.integers(110, 200, size=(size, size)).astype(np.int32)
    edge = max(1, int(size * edge_fraction))
    vx, vy = velocity
    if vx > 0:
        tex[:, -edge:], tex[:, :edge] = 250, 30
    elif vx < 0:
        tex[:, :edge], tex[:, -edge:] = 250, 30
    if vy > 0:
        tex[-edge:, :], tex[:edge, :] = 250, 30
    elif vy < 0:
        tex[:edge, :], tex[-edge:, :] = 250, 30
    return tex


def render_clip(spec: DatasetSpec, class_id: int, rng: np.random.Generator) -> list[FramePacket]:
    h, w, c, s = spec.height, spec.width, spec.channels, spec.object_size
    vx, vy = class_velocity(class_id, spec.num_classes, spec.speed)
    ys, xs = np.mgrid[0:h, 0:w]
    fx, fy = rng.integers(1, 3, size=2)
    ph = rng.uniform(0, 2 * math.pi, size=2)
    amp = spec.background_amplitude
    bg = 90 + amp * np.sin(2 * math.pi * fx * xs / w + ph[0]) + amp * np.cos(2 * math.pi * fy * ys / h + ph[1])
    bg = np.round(bg).astype(np.int32)
    tex = _object_texture(rng, s, (vx, vy), spec.edge_fraction)
    flat = np.full_like(tex, 160)
    x0, y0 = int(rng.integers(0, w)), int(rng.integers(0, h))

    packets: list[FramePacket] = []
    prev_img = None
    for f in range(spec.frames_per_clip):
        ftype = I_FRAME if f % spec.gop == 0 else P_FRAME
        degraded = rng.random() < spec.p_degraded
        layer = np.zeros((h, w), np.int32)
        mask = np.zeros((h, w), bool)
        layer[:s, :s] = flat if degraded else tex
        mask[:s, :s] = True
        shift = ((y0 + f * vy) % h, (x0 + f * vx) % w)
        layer = np.roll(layer, shift, axis=(0, 1))
        mask = np.roll(mask, shift, axis=(0, 1))
        gray = np.where(mask, layer, bg)
        img = np.repeat(gray[None], c, axis=0)

        if ftype == I_FRAME:
            var = _cells(gray.astype(np.float64)).var(axis=2)
            partition = build_partition(var > spec.texture_threshold, w, h)
            mv_blocks = np.concatenate([partition.blocks, np.zeros((len(partition.blocks), 2), np.int64)], axis=1)
            residual = np.zeros((c, h, w), np.int16)
        else:
            px_field = np.zeros((2, h, w), np.int32)
            px_field[0][mask], px_field[1][mask] = vx, vy
            px_res = np.abs(img - _compensate(prev_img, px_field)).mean(axis=0)
            moving = _cells(mask.astype(np.float64)).mean(axis=2)
            hot = (_cells(px_res).mean(axis=2) > spec.residual_threshold) | ((moving > 0) & (moving < 1))
            partition = build_partition(hot, w, h)
            rows = []
            for bx, by, bs in partition.blocks:
                if mask[by:by + bs, bx:bx + bs].mean() >= 0.5:
                    rows.append((bx, by, bs, vx, vy))
                else:
                    rows.append((bx, by, bs, 0, 0))
            mv_blocks = np.array(rows, np.int64)
            pk_field = np.zeros((2, h, w), np.int32)
            for bx, by, bs, dx, dy in mv_blocks:
                pk_field[0, by:by + bs, bx:bx + bs] = dx
                pk_field[1, by:by + bs, bx:bx + bs] = dy
            residual = (img - _compensate(prev_img, pk_field)).astype(np.int16)
        packets.append(FramePacket(f, ftype, img.astype(np.uint8), partition, mv_blocks, residual))
        prev_img = img
    return packets


def clip_rng(seed: int, class_id: int, clip: int) -> np.random.Generator:
    return np.random.default_rng([seed, class_id, clip])


def synthesize_dataset(spec: DatasetSpec, out_dir) -> dict:
    """Write ``class_<k>/clip_<j>.oar`` files plus ``manifest.json``; return the manifest."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    clips = []
    for k in range(spec.num_classes):
        (out / f"class_{k}").mkdir(exist_ok=True)
        for j in range(spec.clips_per_class):
            packets = render_clip(spec, k, clip_rng(spec.seed, k, j))
            rel = f"class_{k}/clip_{j}.oar"
            write_stream(out / rel, packets, gop=spec.gop, class_id=k)
            clips.append({"path": rel, "label": k, "num_frames": spec.frames_per_clip})
    manifest = {"spec": asdict(spec), "clips": clips}
    with open(out / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / MANIFEST_NAME
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
