"""Random stream builders shared by the codec, runtime and acceptance tests."""
import numpy as np

from oarkit.codec import I_FRAME, P_FRAME, FramePacket, PartitionMap


def random_partition(rng: np.random.Generator, width: int, height: int, p_split: float = 0.5) -> PartitionMap:
    blocks = []

    def split(x, y, s):
        if s > 4 and rng.random() < p_split:
            h = s // 2
            for dy in (0, h):
                for dx in (0, h):
                    split(x + dx, y + dy, h)
        else:
            blocks.append((x, y, s))

    for y in range(0, height, 64):
        for x in range(0, width, 64):
            split(x, y, 64)
    return PartitionMap(width, height, np.array(blocks))


def random_packets(rng: np.random.Generator, n: int, gop: int = 12, channels: int = 1, width: int = 64,
                   height: int = 64, max_mv: int = 6) -> list[FramePacket]:
    out = []
    for i in range(n):
        part = random_partition(rng, width, height)
        image = rng.integers(0, 256, size=(channels, height, width), dtype=np.uint8)
        if i % gop == 0:
            mv = np.concatenate([part.blocks, np.zeros((len(part.blocks), 2), np.int64)], axis=1)
            res = np.zeros((channels, height, width), np.int16)
            kind = I_FRAME
        else:
            mv_part = random_partition(rng, width, height)
            d = rng.integers(-max_mv, max_mv + 1, size=(len(mv_part.blocks), 2))
            mv = np.concatenate([mv_part.blocks, d], axis=1)
            res = rng.integers(-300, 300, size=(channels, height, width)).astype(np.int16)
            kind = P_FRAME
        out.append(FramePacket(i, kind, image, part, mv, res))
    return out
