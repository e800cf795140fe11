"""Minimal dense numeric kernel: linear maps, activations, inverted dropout,
Adagrad, a seeded counter-based RNG, and tensor checkpoint I/O.

Everything is float64. The RNG is numpy's Philox (counter-based), so a given
seed produces the same stream on every platform.

Checkpoint format (binary, version ``TNSR1``):

    TNSR1\\n
    key=value\\n          # header lines, sorted by key
    \\n                   # blank line ends the header
    name ndim d1 d2 ...\\n
    <ndim-dims * 8 bytes of little-endian float64, C order>
    ...                   # one record per tensor, sorted by name
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


class ContractViolation(ValueError):
    """An operation was called with inputs that break its contract."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded Philox generator; the one RNG used everywhere for reproducibility."""
    return np.random.Generator(np.random.Philox(seed))


def linear(w: Array, b: Array, x: Array) -> Array:
    """w @ x + b for a single vector x."""
    if w.ndim != 2:
        raise ContractViolation(f"weight must be a matrix, got ndim={w.ndim}")
    if x.shape != (w.shape[1],):
        raise ContractViolation(f"input shape {x.shape} does not match weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ContractViolation(f"bias shape {b.shape} does not match weight {w.shape}")
    return w @ x + b


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def sigmoid(s):
    """Numerically stable logistic function; scalar in, scalar out."""
    s = np.asarray(s, dtype=np.float64)
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    es = np.exp(s[~pos])
    out[~pos] = es / (1.0 + es)
    return float(out) if out.ndim == 0 else out


def dropout_mask(shape, p: float, rng: np.random.Generator) -> Array:
    """Inverted-dropout mask: entries are 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ContractViolation(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def dropout(x: Array, p: float, mode: str, rng: np.random.Generator | None = None) -> Array:
    """Inverted dropout: identity in eval mode, mask-and-rescale in train mode."""
    if mode not in ("train", "eval"):
        raise ContractViolation(f"unknown mode {mode!r}")
    if not 0.0 <= p < 1.0:
        raise ContractViolation(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    return x * dropout_mask(x.shape, p, rng)


@dataclass
class AdagradState:
    """Per-tensor accumulated squared gradient with the step hyperparameters."""

    lr: float = 0.01
    eps: float = 1e-8
    accum: Array | None = None

    def _ensure(self, shape) -> Array:
        if self.accum is None:
            self.accum = np.zeros(shape)
        return self.accum


def adagrad_step(param: Array, grad: Array, state: AdagradState) -> Array:
    """One Adagrad update: G += g^2; returns param - lr * g / (sqrt(G) + eps)."""
    if param.shape != grad.shape:
        raise ContractViolation(f"param {param.shape} vs grad {grad.shape}")
    accum = state._ensure(param.shape)
    accum += grad * grad
    return param - state.lr * grad / (np.sqrt(accum) + state.eps)


def adagrad_step_rows(param: Array, rows: Array, row_grads: Array, state: AdagradState) -> None:
    """In-place Adagrad update restricted to the given (unique) rows of param."""
    accum = state._ensure(param.shape)
    accum[rows] += row_grads * row_grads
    param[rows] -= state.lr * row_grads / (np.sqrt(accum[rows]) + state.eps)


_CKPT_MAGIC = b"TNSR1\n"


def save_tensors(path, header: dict[str, str], tensors: dict[str, Array]) -> None:
    """Write tensors plus a string header in the TNSR1 binary format."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        for key in sorted(header):
            value = header[key]
            if "\n" in key or "\n" in str(value) or "=" in key:
                raise ValueError(f"illegal header entry {key!r}")
            fh.write(f"{key}={value}\n".encode("utf-8"))
        fh.write(b"\n")
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name} {arr.ndim} {dims}".rstrip().encode("utf-8") + b"\n")
            fh.write(arr.tobytes())


def load_tensors(path) -> tuple[dict[str, str], dict[str, Array]]:
    """Read back a TNSR1 file; inverse of save_tensors."""
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a TNSR1 checkpoint")
        header: dict[str, str] = {}
        while True:
            line = _read_line(fh)
            if line == "":
                break
            key, _, value = line.partition("=")
            header[key] = value
        tensors: dict[str, Array] = {}
        while True:
            meta = _read_line(fh, eof_ok=True)
            if meta is None:
                break
            parts = meta.split(" ")
            name, ndim = parts[0], int(parts[1])
            shape = tuple(int(d) for d in parts[2 : 2 + ndim])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return header, tensors


def _read_line(fh, eof_ok: bool = False) -> str | None:
    buf = bytearray()
    while True:
        ch = fh.read(1)
        if not ch:
            if eof_ok and not buf:
                return None
            raise ValueError("unexpected end of checkpoint file")
        if ch == b"\n":
            return buf.decode("utf-8")
        buf += ch
