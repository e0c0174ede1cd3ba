"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .codec import StreamReader


def check_streams(X, name: str = "X") -> list:
    """Normalize a stream collection to a list of paths or raw byte strings.

    Accepts a single path, a directory holding a ``manifest.json``, or any
    iterable of paths / ``bytes`` / :class:`StreamReader` objects.
    """
    if X is None:
        raise ValueError(f"{name} is None; expected stream paths or bytes")
    if isinstance(X, (str, os.PathLike)):
        path = Path(X)
        if path.is_dir():
            from .synth import read_manifest
            return [path / e["path"] for e in read_manifest(path)["clips"]]
        X = [path]
    elif isinstance(X, (bytes, bytearray, StreamReader)):
        X = [X]
    items = []
    for i, item in enumerate(X):
        if isinstance(item, StreamReader):
            items.append(item)
        elif isinstance(item, (bytes, bytearray)):
            items.append(bytes(item))
        elif isinstance(item, (str, os.PathLike)):
            p = Path(item)
            if not p.is_file():
                raise FileNotFoundError(f"{name}[{i}]: no such stream file {p}")
            items.append(p)
        else:
            raise TypeError(f"{name}[{i}] has unsupported type {type(item).__name__}")
    if not items:
        raise ValueError(f"{name} is empty")
    return items


def open_stream(item) -> StreamReader:
    if isinstance(item, StreamReader):
        return item
    if isinstance(item, bytes):
        return StreamReader(item)
    return StreamReader.open(item)


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be one-dimensional, got shape {y.shape}")
    if y.shape[0] != n:
        raise ValueError(f"y has {y.shape[0]} labels for {n} streams")
    return y


def check_positive(value, name: str, allow_zero: bool = False) -> None:
    ok = value >= 0 if allow_zero else value > 0
    if not ok:
        bound = ">= 0" if allow_zero else "> 0"
        raise ValueError(f"{name} must be {bound}, got {value!r}")


def check_fraction(value, name: str, closed: bool = True) -> None:
    ok = 0.0 <= value <= 1.0 if closed else 0.0 < value < 1.0
    if not ok:
        raise ValueError(f"{name} must lie in {'[0, 1]' if closed else '(0, 1)'}, got {value!r}")
