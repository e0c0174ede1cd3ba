"""Small functional operator set used by every trainable block.

Tensors are plain ``torch.Tensor`` objects; reverse-mode gradients come from
torch autograd. Parameters live in a :class:`ParamSet`, a flat, named
collection that also knows how to serialize itself to the checkpoint format.
"""
from __future__ import annotations

import contextlib
import io
import json
import math
import struct
from collections import OrderedDict
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "ShapeError",
    "CheckpointError",
    "ParamSet",
    "float64_mode",
    "default_dtype",
    "conv2d",
    "affine",
    "apply_activation",
    "pool2d",
    "grad_check",
    "sgd_update",
    "MomentumSGD",
    "glorot_uniform",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
]

CHECKPOINT_MAGIC = b"OARC"
CHECKPOINT_VERSION = 1

_DTYPE = torch.float32


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def default_dtype() -> torch.dtype:
    return _DTYPE


@contextlib.contextmanager
def float64_mode():
    """Switch freshly created tensors to 64-bit storage (gradient tests only)."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = torch.float64
    try:
        yield
    finally:
        _DTYPE = prev


class ParamSet:
    """Named trainable tensors, each with a same-shaped gradient buffer."""

    def __init__(self):
        self._params: OrderedDict[str, torch.Tensor] = OrderedDict()

    def add(self, name: str, value) -> torch.Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = torch.as_tensor(value, dtype=_DTYPE).clone().detach()
        t.requires_grad_(True)
        t.grad = torch.zeros_like(t)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def subset(self, prefix: str) -> "ParamSet":
        """View sharing the underlying tensors for names starting with ``prefix``."""
        sub = ParamSet()
        for k, v in self._params.items():
            if k.startswith(prefix):
                sub._params[k] = v
        return sub

    def merge(self, other: "ParamSet") -> "ParamSet":
        for k, v in other.items():
            if k in self._params:
                raise KeyError(f"duplicate parameter name {k!r}")
            self._params[k] = v
        return self

    def zero_grad(self) -> None:
        for p in self._params.values():
            if p.grad is None:
                p.grad = torch.zeros_like(p)
            else:
                p.grad.zero_()

    def to(self, dtype: torch.dtype) -> "ParamSet":
        """Cast every parameter in place (keeps object identity of the set)."""
        for k, p in list(self._params.items()):
            t = p.detach().to(dtype).clone()
            t.requires_grad_(True)
            t.grad = torch.zeros_like(t)
            self._params[k] = t
        return self

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter {k!r}")
            p = self._params[k]
            if tuple(p.shape) != tuple(v.shape):
                raise ShapeError(f"{k}: expected {tuple(p.shape)}, got {tuple(v.shape)}")
            with torch.no_grad():
                p.copy_(torch.as_tensor(v, dtype=p.dtype))


def glorot_uniform(shape, generator: torch.Generator) -> torch.Tensor:
    """Uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    shape = tuple(shape)
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out = shape[0] * receptive
    fan_in = (shape[1] if len(shape) > 1 else 1) * receptive
    a = math.sqrt(6.0 / (fan_in + fan_out))
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    return ((u * 2.0 - 1.0) * a).to(_DTYPE)


def _batched(x: torch.Tensor, rank: int) -> tuple[torch.Tensor, bool]:
    if x.dim() == rank:
        return x.unsqueeze(0), True
    if x.dim() == rank + 1:
        return x, False
    raise ShapeError(f"expected a rank-{rank} tensor (or a batch of them), got shape {tuple(x.shape)}")


def conv2d(input, kernel, bias=None, stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Cross-correlation (no kernel flip) of C×H×W or N×C×H×W input."""
    if kernel.dim() != 4:
        raise ShapeError(f"kernel must be C_out×C×k×k, got {tuple(kernel.shape)}")
    k = kernel.shape[-1]
    if kernel.shape[-2] != k or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {tuple(kernel.shape)}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    x, squeeze = _batched(input, 3)
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"input channels do not match kernel: input {tuple(input.shape)}, kernel {tuple(kernel.shape)}"
        )
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"empty spatial dims in {tuple(input.shape)}")
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError(f"kernel {k}×{k} larger than padded input {tuple(input.shape)}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias shape {tuple(bias.shape)} does not match kernel {tuple(kernel.shape)}")
    out = F.conv2d(x, kernel, bias, stride=stride, padding=padding)
    return out[0] if squeeze else out


def affine(input, weights, bias) -> torch.Tensor:
    x, squeeze = _batched(input, 1)
    if weights.dim() != 2 or weights.shape[1] != x.shape[1]:
        raise ShapeError(f"weights {tuple(weights.shape)} incompatible with input {tuple(input.shape)}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias {tuple(bias.shape)} incompatible with weights {tuple(weights.shape)}")
    out = F.linear(x, weights, bias)
    return out[0] if squeeze else out


def apply_activation(kind: str, input: torch.Tensor) -> torch.Tensor:
    if kind == "sigmoid":
        return torch.sigmoid(input)
    if kind == "relu":
        return torch.relu(input)
    if kind == "softmax":
        if input.dim() not in (1, 2):
            raise ShapeError(f"softmax needs a flat vector (or a batch of them), got {tuple(input.shape)}")
        if input.shape[-1] == 0:
            raise ValueError("softmax of an empty vector")
        return torch.softmax(input, dim=-1)
    raise ValueError(f"unknown activation {kind!r}")


def pool2d(kind: str, input: torch.Tensor, window: int, stride: int = 1, same_padding: bool = False) -> torch.Tensor:
    """Mean or max pooling; with ``same_padding`` padded cells are ignored."""
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    if kind not in ("mean", "max"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    x, squeeze = _batched(input, 3)
    if same_padding:
        lo = (window - 1) // 2
        hi = window - 1 - lo
        pad = (lo, hi, lo, hi)
    else:
        pad = (0, 0, 0, 0)
    h, w = x.shape[2] + pad[2] + pad[3], x.shape[3] + pad[0] + pad[1]
    if window > h or window > w:
        raise ValueError(f"pool window {window} larger than padded input {tuple(input.shape)}")
    if kind == "max":
        xp = F.pad(x, pad, value=-math.inf) if same_padding else x
        out = F.max_pool2d(xp, window, stride)
    else:
        xp = F.pad(x, pad, value=0.0) if same_padding else x
        out = F.avg_pool2d(xp, window, stride)
        if same_padding:
            ones = F.pad(torch.ones_like(x[:, :1]), pad, value=0.0)
            out = out / F.avg_pool2d(ones, window, stride)
    return out[0] if squeeze else out


def grad_check(
    params: ParamSet,
    forward: Callable[[], torch.Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``max_entries`` limits how many coordinates per parameter are probed
    (chosen with a seeded RNG); ``None`` probes every coordinate.
    """
    for p in params.values():
        if p.dtype != torch.float64:
            raise TypeError("grad_check requires 64-bit parameters")
    params.zero_grad()
    loss = forward()
    if not torch.isfinite(loss).all():
        raise ValueError("loss is not finite at the evaluation point")
    loss.backward()
    analytic = {k: p.grad.detach().clone() for k, p in params.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = rng.choice(flat.numel(), size=max_entries, replace=False)
            g = analytic[name].view(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = forward().item()
                flat[i] = orig - step
                down = forward().item()
                flat[i] = orig
                fd = (up - down) / (2 * step)
                an = g[i].item()
                err = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
                worst = max(worst, err)
    params.zero_grad()
    return worst


def sgd_update(params: ParamSet, learning_rate: float) -> ParamSet:
    with torch.no_grad():
        for p in params.values():
            if p.grad is not None:
                p.sub_(learning_rate * p.grad)
    params.zero_grad()
    return params


class MomentumSGD:
    """Heavy-ball SGD: v <- mu*v + g, w <- w - lr*v. ``momentum=0`` is :func:`sgd_update`.

    ``max_grad_norm`` rescales the gradient so its global L2 norm is at most that value.
    A non-finite gradient raises FloatingPointError instead of corrupting the weights.
    """

    def __init__(self, params: ParamSet, learning_rate: float, momentum: float = 0.9,
                 max_grad_norm: float | None = None):
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if max_grad_norm is not None and not max_grad_norm > 0.0:
            raise ValueError("max_grad_norm must be positive")
        self.params = params
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.max_grad_norm = max_grad_norm
        self._velocity: dict[str, torch.Tensor] = {}

    def _condition_grads(self) -> None:
        grads = [p.grad for p in self.params.values() if p.grad is not None]
        if not grads:
            return
        norm = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])))
        if not math.isfinite(norm):
            raise FloatingPointError("non-finite gradient")
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            with torch.no_grad():
                for g in grads:
                    g.mul_(self.max_grad_norm / norm)

    def step(self) -> ParamSet:
        self._condition_grads()
        if self.momentum == 0.0:
            return sgd_update(self.params, self.learning_rate)
        with torch.no_grad():
            for name, p in self.params.items():
                if p.grad is None:
                    continue
                v = self._velocity.get(name)
                v = p.grad.clone() if v is None else v.mul_(self.momentum).add_(p.grad)
                self._velocity[name] = v
                p.sub_(self.learning_rate * v)
        self.params.zero_grad()
        return self.params


# -- checkpoint container ----------------------------------------------------

def _write_checkpoint(buf, params: ParamSet, meta: dict | None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<III", CHECKPOINT_VERSION, len(params), len(meta_bytes)))
    buf.write(meta_bytes)
    for name, p in params.items():
        nb = name.encode("utf-8")
        arr = p.detach().cpu().numpy().astype("<f4", copy=False)
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


def checkpoint_bytes(params: ParamSet, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    _write_checkpoint(buf, params, meta)
    return buf.getvalue()


def save_checkpoint(path, params: ParamSet, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, meta))


def parse_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic at byte 0")
    version, count, meta_len = struct.unpack("<III", take(12))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    state: dict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).copy()
        if name in state:
            raise CheckpointError(f"duplicate parameter {name!r}")
        state[name] = arr
    if pos != len(view):
        raise CheckpointError(f"trailing bytes after byte {pos}")
    return state, meta


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
