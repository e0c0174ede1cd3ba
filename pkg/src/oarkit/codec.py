"""Compressed-domain primitives and the ``.oar`` stream container.

A stream file is ``OARS`` magic, one JSON header line, then one binary
record per frame (all integers little-endian)::

    u8   frame type (0 = I, 1 = P)
    u8   image, C*H*W samples
    u32  partition block count, then (x, y, side) as u16 triples
    u32  motion block count, then (x, y, side) u16 + (dx, dy) i16
    i16  residual, C*H*W samples
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

STREAM_MAGIC = b"OARS"
STREAM_VERSION = 1
DEFAULT_SIDE_RANGE = (4, 64)
DEFAULT_GOP = 12

I_FRAME = "I"
P_FRAME = "P"
_TYPE_CODES = {I_FRAME: 0, P_FRAME: 1}
_TYPE_NAMES = {v: k for k, v in _TYPE_CODES.items()}


class StreamFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None, frame_index: int | None = None):
        parts = [message]
        if frame_index is not None:
            parts.append(f"frame {frame_index}")
        if offset is not None:
            parts.append(f"byte offset {offset}")
        super().__init__(" at ".join(parts) if len(parts) > 1 else message)
        self.offset = offset
        self.frame_index = frame_index


class PartitionError(ValueError):
    pass


@dataclass(eq=False)
class PartitionMap:
    width: int
    height: int
    blocks: np.ndarray  # (K, 3) int: x, y, side

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=np.int64).reshape(-1, 3)

    def validate(self, side_range=DEFAULT_SIDE_RANGE) -> None:
        cover = coverage(self.blocks[:, :3], self.width, self.height)
        lo, hi = side_range
        for x, y, s in self.blocks:
            if s < lo or s > hi or s & (s - 1):
                raise PartitionError(f"block side {s} at ({x}, {y}) is not a power of two in [{lo}, {hi}]")
        _check_tiling(cover)

    def side_plane(self) -> np.ndarray:
        plane = np.zeros((self.height, self.width), dtype=np.int64)
        for x, y, s in self.blocks:
            plane[y:y + s, x:x + s] = s
        return plane

    def __eq__(self, other):
        return (
            isinstance(other, PartitionMap)
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(self.blocks, other.blocks)
        )


def coverage(blocks: np.ndarray, width: int, height: int) -> np.ndarray:
    cover = np.zeros((height, width), dtype=np.int32)
    for x, y, s in np.asarray(blocks, dtype=np.int64).reshape(-1, 3):
        if x < 0 or y < 0 or s <= 0 or x + s > width or y + s > height:
            raise PartitionError(f"block ({x}, {y}, side {s}) exceeds the {width}x{height} frame")
        cover[y:y + s, x:x + s] += 1
    return cover


def _check_tiling(cover: np.ndarray) -> None:
    if (cover > 1).any():
        y, x = np.argwhere(cover > 1)[0]
        raise PartitionError(f"overlapping blocks at pixel ({x}, {y})")
    if (cover == 0).any():
        y, x = np.argwhere(cover == 0)[0]
        raise PartitionError(f"pixel ({x}, {y}) is not covered by any block")


@dataclass(eq=False)
class FramePacket:
    index: int
    frame_type: str
    image: np.ndarray  # (C, H, W) uint8
    partition: PartitionMap
    mv_blocks: np.ndarray  # (K, 5) int: x, y, side, dx, dy
    residual: np.ndarray  # (C, H, W) int16
    _motion: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.uint8)
        self.mv_blocks = np.asarray(self.mv_blocks, dtype=np.int64).reshape(-1, 5)
        self.residual = np.asarray(self.residual, dtype=np.int16)

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    @property
    def motion(self) -> np.ndarray:
        """Per-pixel (dx, dy) field, shape (2, H, W)."""
        if self._motion is None:
            self._motion = interpolate_mv(self.mv_blocks, self.width, self.height)
        return self._motion

    def validate(self, side_range=DEFAULT_SIDE_RANGE) -> None:
        if self.frame_type not in _TYPE_CODES:
            raise StreamFormatError(f"unknown frame type {self.frame_type!r}")
        c, h, w = self.image.shape
        if self.residual.shape != (c, h, w):
            raise StreamFormatError(f"residual shape {self.residual.shape} differs from image {self.image.shape}")
        if (self.partition.width, self.partition.height) != (w, h):
            raise StreamFormatError("partition map size differs from the image")
        self.partition.validate(side_range)
        self._motion = interpolate_mv(self.mv_blocks, w, h)
        if self.frame_type == I_FRAME:
            if self.mv_blocks[:, 3:].any() or self.residual.any():
                raise StreamFormatError("I-frame carries motion or residual data", frame_index=self.index)

    def __eq__(self, other):
        return (
            isinstance(other, FramePacket)
            and self.index == other.index
            and self.frame_type == other.frame_type
            and np.array_equal(self.image, other.image)
            and self.partition == other.partition
            and np.array_equal(self.mv_blocks, other.mv_blocks)
            and np.array_equal(self.residual, other.residual)
        )


def mb_saliency(partition: PartitionMap, side_range=DEFAULT_SIDE_RANGE) -> np.ndarray:
    """Per-pixel 1 - normalized log2(block area), over a fixed side range."""
    lo, hi = side_range
    if lo >= hi:
        raise ValueError(f"degenerate block-side range {side_range}")
    sides = partition.side_plane()
    if (sides < lo).any() or (sides > hi).any():
        raise PartitionError(f"block sides outside [{lo}, {hi}]")
    log_area = 2.0 * np.log2(sides.astype(np.float64))
    lo_a, hi_a = 2.0 * math.log2(lo), 2.0 * math.log2(hi)
    return (1.0 - (log_area - lo_a) / (hi_a - lo_a)).astype(np.float32)


def interpolate_mv(block_mvs, width: int, height: int) -> np.ndarray:
    """Block-constant upsampling of block motion vectors to a (2, H, W) field."""
    blocks = np.asarray(block_mvs, dtype=np.int64).reshape(-1, 5)
    if width <= 0 or height <= 0:
        raise PartitionError(f"invalid frame size {width}x{height}")
    field_ = np.zeros((2, height, width), dtype=np.int32)
    cover = coverage(blocks[:, :3], width, height)
    _check_tiling(cover)
    for x, y, s, dx, dy in blocks:
        field_[0, y:y + s, x:x + s] = dx
        field_[1, y:y + s, x:x + s] = dy
    return field_


@dataclass
class GopState:
    motion: np.ndarray  # (2, H, W) int32
    residual: np.ndarray  # (C, H, W) int32
    frames_since_i: int = 0
    last_index: int = -1
    gop: int = DEFAULT_GOP

    @classmethod
    def empty(cls, channels: int, height: int, width: int, gop: int = DEFAULT_GOP) -> "GopState":
        return cls(
            motion=np.zeros((2, height, width), dtype=np.int32),
            residual=np.zeros((channels, height, width), dtype=np.int32),
            gop=gop,
        )


def accumulate_gop(state: GopState, packet: FramePacket) -> GopState:
    """Back-traced accumulation of motion and residual since the last I-frame.

    acc_mv(p) = mv_t(p) + acc_mv(p - mv_t(p)), same for the residual, with
    nearest-pixel lookup clamped to the frame.
    """
    if packet.index != state.last_index + 1:
        raise StreamFormatError(
            f"frame {packet.index} does not follow frame {state.last_index}", frame_index=packet.index
        )
    if packet.frame_type == I_FRAME:
        return GopState(
            motion=np.zeros_like(state.motion),
            residual=np.zeros_like(state.residual),
            frames_since_i=0,
            last_index=packet.index,
            gop=state.gop,
        )
    counter = state.frames_since_i + 1
    if counter >= state.gop:
        raise StreamFormatError(f"no I-frame within GOP length {state.gop}", frame_index=packet.index)
    mv = packet.motion
    _, h, w = mv.shape
    ys, xs = np.mgrid[0:h, 0:w]
    src_x = np.clip(xs - mv[0], 0, w - 1)
    src_y = np.clip(ys - mv[1], 0, h - 1)
    motion = mv + state.motion[:, src_y, src_x]
    residual = packet.residual.astype(np.int32) + state.residual[:, src_y, src_x]
    return GopState(
        motion=motion.astype(np.int32),
        residual=residual.astype(np.int32),
        frames_since_i=counter,
        last_index=packet.index,
        gop=state.gop,
    )


# -- container ----------------------------------------------------------------

def encode_stream(packets, *, gop: int = DEFAULT_GOP, class_id: int = -1) -> bytes:
    packets = list(packets)
    if not packets:
        raise StreamFormatError("cannot encode an empty stream")
    c, h, w = packets[0].image.shape
    header = {
        "channels": int(c),
        "class_id": int(class_id),
        "gop": int(gop),
        "height": int(h),
        "num_frames": len(packets),
        "version": STREAM_VERSION,
        "width": int(w),
    }
    out = [STREAM_MAGIC, json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"), b"\n"]
    for i, pk in enumerate(packets):
        if pk.index != i:
            raise StreamFormatError(f"packet index {pk.index} out of order", frame_index=i)
        if pk.image.shape != (c, h, w):
            raise StreamFormatError("frame shape changes mid-stream", frame_index=i)
        pk.validate()
        out.append(struct.pack("<B", _TYPE_CODES[pk.frame_type]))
        out.append(np.ascontiguousarray(pk.image, dtype=np.uint8).tobytes())
        blocks = pk.partition.blocks
        out.append(struct.pack("<I", len(blocks)))
        out.append(blocks.astype("<u2").tobytes())
        mvb = pk.mv_blocks
        out.append(struct.pack("<I", len(mvb)))
        rec = np.zeros(len(mvb), dtype=[("x", "<u2"), ("y", "<u2"), ("s", "<u2"), ("dx", "<i2"), ("dy", "<i2")])
        for j, name in enumerate(("x", "y", "s", "dx", "dy")):
            rec[name] = mvb[:, j]
        out.append(rec.tobytes())
        out.append(np.ascontiguousarray(pk.residual).astype("<i2").tobytes())
    return b"".join(out)


def write_stream(path, packets, *, gop: int = DEFAULT_GOP, class_id: int = -1) -> None:
    data = encode_stream(packets, gop=gop, class_id=class_id)
    with open(path, "wb") as fh:
        fh.write(data)


class StreamReader:
    """Lazy frame-by-frame decoder over the bytes of one stream.

    ``decoded`` counts frames pulled so far; nothing beyond the requested
    frame is parsed.
    """

    def __init__(self, data: bytes):
        self._data = memoryview(data)
        if bytes(self._data[:4]) != STREAM_MAGIC:
            raise StreamFormatError("bad stream magic", offset=0)
        nl = data.find(b"\n", 4)
        if nl < 0:
            raise StreamFormatError("unterminated stream header", offset=4)
        try:
            self.header = json.loads(bytes(self._data[4:nl]).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise StreamFormatError(f"unreadable stream header ({exc})", offset=4) from None
        for key in ("version", "width", "height", "gop", "class_id", "num_frames", "channels"):
            if key not in self.header:
                raise StreamFormatError(f"stream header lacks {key!r}", offset=4)
        if self.header["version"] != STREAM_VERSION:
            raise StreamFormatError(f"unsupported stream version {self.header['version']}", offset=4)
        self._pos = nl + 1
        self.decoded = 0

    @classmethod
    def open(cls, path) -> "StreamReader":
        with open(path, "rb") as fh:
            return cls(fh.read())

    @property
    def num_frames(self) -> int:
        return int(self.header["num_frames"])

    @property
    def class_id(self) -> int:
        return int(self.header["class_id"])

    @property
    def gop(self) -> int:
        return int(self.header["gop"])

    def _take(self, n: int, frame: int) -> memoryview:
        if self._pos + n > len(self._data):
            raise StreamFormatError("truncated record", offset=self._pos, frame_index=frame)
        chunk = self._data[self._pos:self._pos + n]
        self._pos += n
        return chunk

    def read_frame(self) -> FramePacket:
        i = self.decoded
        if i >= self.num_frames:
            raise IndexError(f"stream has only {self.num_frames} frames")
        c, h, w = self.header["channels"], self.header["height"], self.header["width"]
        start = self._pos
        (code,) = struct.unpack("<B", self._take(1, i))
        if code not in _TYPE_NAMES:
            raise StreamFormatError(f"unknown frame type code {code}", offset=start, frame_index=i)
        image = np.frombuffer(self._take(c * h * w, i), dtype=np.uint8).reshape(c, h, w).copy()
        (nb,) = struct.unpack("<I", self._take(4, i))
        part_off = self._pos
        blocks = np.frombuffer(self._take(6 * nb, i), dtype="<u2").reshape(nb, 3).astype(np.int64)
        (nm,) = struct.unpack("<I", self._take(4, i))
        rec = np.frombuffer(
            self._take(10 * nm, i),
            dtype=[("x", "<u2"), ("y", "<u2"), ("s", "<u2"), ("dx", "<i2"), ("dy", "<i2")],
        )
        mvb = np.stack([rec[k].astype(np.int64) for k in ("x", "y", "s", "dx", "dy")], axis=1) if nm else np.zeros((0, 5), np.int64)
        residual = np.frombuffer(self._take(2 * c * h * w, i), dtype="<i2").reshape(c, h, w).astype(np.int16)
        partition = PartitionMap(w, h, blocks)
        try:
            partition.validate()
        except PartitionError as exc:
            raise StreamFormatError(f"invalid partition map ({exc})", offset=part_off, frame_index=i) from None
        pk = FramePacket(i, _TYPE_NAMES[code], image, partition, mvb, residual)
        try:
            pk.validate()
        except (StreamFormatError, PartitionError) as exc:
            raise StreamFormatError(f"invalid frame ({exc})", offset=start, frame_index=i) from None
        self.decoded += 1
        return pk

    def __iter__(self) -> Iterator[FramePacket]:
        while self.decoded < self.num_frames:
            yield self.read_frame()


def decode_bytes(data: bytes) -> list[FramePacket]:
    return list(StreamReader(data))


def decode_stream(path) -> list[FramePacket]:
    return list(StreamReader.open(path))
