"""Feed-forward networks built on :mod:`viigl.tensor`."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .tensor import Tensor, as_tensor, concat, parameter

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")


def _activate(x, tag):
    if tag == "relu":
        return x.relu()
    if tag == "sigmoid":
        return x.sigmoid()
    if tag == "tanh":
        return x.tanh()
    return x


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    activation: str = "identity"

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]


class Mlp:
    """Stack of affine layers, each followed by an activation.

    ``sizes`` lists the widths from input to output; hidden layers use
    ``hidden_activation`` and the last layer uses ``output_activation``.
    """

    def __init__(self, sizes, rng, hidden_activation="relu", output_activation="identity"):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ConfigError(f"invalid layer sizes {sizes}")
        for tag in (hidden_activation, output_activation):
            if tag not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {tag!r}")
        self.layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            self.layers.append(Layer(
                parameter(glorot_uniform(rng, fan_in, fan_out)),
                parameter(np.zeros(fan_out)),
                output_activation if last else hidden_activation,
            ))

    @classmethod
    def from_layers(cls, layers):
        net = cls.__new__(cls)
        for prev, nxt in zip(layers[:-1], layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer widths {prev.out_dim} and {nxt.in_dim} do not chain")
        net.layers = list(layers)
        return net

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        return self.layers[-1].out_dim

    def parameters(self):
        return [t for layer in self.layers for t in (layer.weight, layer.bias)]

    def __call__(self, batch):
        return forward(self, batch)


def forward(net, batch):
    """Apply ``net`` to a ``batch x input_dim`` array, recording the graph."""
    x = as_tensor(batch)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"expected a batch with {net.input_dim} columns, got shape {x.shape}")
    for layer in net.layers:
        x = _activate(x @ layer.weight + layer.bias, layer.activation)
    return x


class BranchNet:
    """Encode column blocks separately, concatenate, then apply a head.

    ``blocks`` is a list of ``(width, hidden or None)``.  A block with a hidden
    width passes through its own two-layer encoder; a block with ``None`` is
    forwarded as-is (one-hot actions, reward bits).
    """

    def __init__(self, blocks, out_dim, rng, head_hidden=None, output_activation="identity"):
        self.widths = [int(w) for w, _ in blocks]
        self.encoders = []
        merged = 0
        for width, hidden in blocks:
            if hidden is None:
                self.encoders.append(None)
                merged += width
            else:
                self.encoders.append(Mlp([width, hidden, hidden], rng, output_activation="relu"))
                merged += hidden
        sizes = [merged, out_dim] if head_hidden is None else [merged, head_hidden, out_dim]
        self.head = Mlp(sizes, rng, output_activation=output_activation)
        self.bounds = np.cumsum([0] + self.widths)

    @property
    def input_dim(self):
        return int(self.bounds[-1])

    @property
    def output_dim(self):
        return self.head.output_dim

    def parameters(self):
        params = []
        for enc in self.encoders:
            if enc is not None:
                params.extend(enc.parameters())
        return params + self.head.parameters()

    def __call__(self, batch):
        x = as_tensor(batch)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected a batch with {self.input_dim} columns, got shape {x.shape}")
        parts = []
        for enc, lo, hi in zip(self.encoders, self.bounds[:-1], self.bounds[1:]):
            block = x[:, lo:hi] if x.requires_grad else Tensor(x.data[:, lo:hi])
            parts.append(block if enc is None else enc(block))
        return self.head(concat(parts, axis=1))


def build_net(blocks, out_dim, rng, hidden=64, output_activation="identity"):
    """Plain MLP over all columns when no block asks for its own encoder."""
    if all(h is None for _, h in blocks):
        width = sum(w for w, _ in blocks)
        return Mlp([width, hidden, hidden, out_dim], rng, output_activation=output_activation)
    return BranchNet(blocks, out_dim, rng, head_hidden=hidden, output_activation=output_activation)


_MAGIC = b"VIGLPAR1"


def save_params(path, params):
    """Flat little-endian float64 dump with a per-tensor shape header."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            data = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise FormatError("not a parameter file", offset=0)
    pos = 8
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    out = []
    for _ in range(count):
        if pos + 4 > len(raw):
            raise FormatError("truncated parameter header", offset=pos)
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if pos + 8 * n > len(raw):
            raise FormatError("truncated parameter data", offset=pos)
        out.append(np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy())
        pos += 8 * n
    return out


def assign_params(params, arrays):
    if len(params) != len(arrays):
        raise ShapeError(f"expected {len(params)} arrays, got {len(arrays)}")
    for p, a in zip(params, arrays):
        if p.shape != a.shape:
            raise ShapeError(f"parameter shape {p.shape} does not match {a.shape}")
        p.data[...] = a
