"""Parameter containers, initialisation and the checkpoint file format."""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"COATTNCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class Module:
    """Walks attributes in definition order to enumerate named parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()]))


def uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.weight = T.parameter(uniform(rng, (d_out, d_in), d_in))
        self.bias = T.parameter(uniform(rng, (d_out,), d_in)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight.T
        return y + self.bias if self.bias is not None else y


class LstmParams(Module):
    def __init__(self, rng, d_in: int, hidden: int):
        self.input_weights = T.parameter(uniform(rng, (4 * hidden, d_in), d_in))
        self.recurrent_weights = T.parameter(uniform(rng, (4 * hidden, hidden), hidden))
        b = uniform(rng, (4 * hidden,), d_in)
        b[hidden : 2 * hidden] = 1.0
        self.biases = T.parameter(b)
        self.hidden = hidden

    def run(self, x: Tensor) -> Tensor:
        return T.lstm_sequence(x, self.input_weights, self.recurrent_weights, self.biases)

    def cell(self, x: Tensor, h: Tensor, c: Tensor):
        return T.lstm_cell(x, h, c, self.input_weights, self.recurrent_weights, self.biases)


def bilstm(seq: Tensor, fwd: LstmParams, bwd: LstmParams, lengths=None, mask=None) -> Tensor:
    """Bidirectional LSTM over (B, T, d); returns the concatenated halves (B, T, 2h).

    The backward half reads each sequence from its true end, so trailing
    padding never leaks into real positions.  Padded outputs are zeroed when a
    mask is given.
    """
    if seq.ndim != 3 or seq.shape[1] < 1:
        raise ValueError(f"bilstm needs a non-empty (B, T, d) sequence, got {seq.shape}")
    if lengths is None:
        lengths = np.full(seq.shape[0], seq.shape[1])
    forward = fwd.run(seq)
    backward = T.reverse_within_length(bwd.run(T.reverse_within_length(seq, lengths)), lengths)
    out = T.concat([forward, backward], axis=-1)
    if mask is not None:
        out = out * np.asarray(mask, dtype=T.DTYPE)[:, :, None]
    return out


class BiLstm(Module):
    def __init__(self, rng, d_in: int, hidden: int):
        self.fwd = LstmParams(rng, d_in, hidden)
        self.bwd = LstmParams(rng, d_in, hidden)

    def __call__(self, seq: Tensor, lengths=None, mask=None) -> Tensor:
        return bilstm(seq, self.fwd, self.bwd, lengths, mask)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_tensors(path, named: "OrderedDict[str, np.ndarray]") -> None:
    """Write ``magic, version, count`` then (name, shape, little-endian f64 payload) records."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(named)))
        for name, arr in named.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_tensors(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    return out


def save_module(module: Module, path) -> None:
    save_tensors(path, OrderedDict((n, p.data) for n, p in module.named_parameters()))


def load_module(module: Module, path) -> None:
    """Load parameters in place; every name and shape must match the constructed module."""
    stored = load_tensors(path)
    own = module.state_dict()
    missing = [n for n in own if n not in stored]
    extra = [n for n in stored if n not in own]
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing={missing[:5]} unexpected={extra[:5]}")
    for name, p in own.items():
        if stored[name].shape != p.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {stored[name].shape}, model {p.shape}"
            )
    for name, p in own.items():
        p.data[...] = stored[name]
