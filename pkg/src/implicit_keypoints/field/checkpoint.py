"""``IKPN`` network checkpoints.

Little-endian layout::

    magic "IKPN" | version u32 | n_layers u32 | dims u32 * (n_layers + 1)
    omega f64 | bands u32 | include_raw u8 | activation u8 | latent_dim u32
    then per layer: weight (out x in, row-major f64), bias (out f64)

``dims`` runs from the input width to ``out_dim``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .network import ACTIVATIONS, ImplicitNet
from .posenc import PosEncConfig

MAGIC = b"IKPN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(net: ImplicitNet) -> bytes:
    dims = [net.in_dim, *net.widths, net.out_dim]
    out = [struct.pack("<4sII", MAGIC, VERSION, len(dims) - 1), struct.pack(f"<{len(dims)}I", *dims),
           struct.pack("<dIBBI", net.omega, net.posenc.bands, int(net.posenc.include_raw),
                       ACTIVATIONS.index(net.activation), net.latent_dim)]
    for W, b in zip(net.weights, net.biases):
        out.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(out)


def from_bytes(raw: bytes) -> ImplicitNet:
    magic, version, n_layers = struct.unpack_from("<4sII", raw, 0)
    if magic != MAGIC or version != VERSION:
        raise CheckpointError(f"not an IKPN v{VERSION} checkpoint")
    off = 12
    dims = struct.unpack_from(f"<{n_layers + 1}I", raw, off)
    off += 4 * (n_layers + 1)
    omega, bands, raw_flag, act, latent_dim = struct.unpack_from("<dIBBI", raw, off)
    off += struct.calcsize("<dIBBI")
    weights, biases = [], []
    for i, o in zip(dims[:-1], dims[1:]):
        weights.append(np.frombuffer(raw, "<f8", o * i, off).reshape(o, i).astype(np.float64))
        off += 8 * o * i
        biases.append(np.frombuffer(raw, "<f8", o, off).astype(np.float64))
        off += 8 * o
    if off != len(raw):
        raise CheckpointError("trailing or missing bytes in checkpoint")
    posenc = PosEncConfig(bands, bool(raw_flag))
    if posenc.dim + latent_dim != dims[0]:
        raise CheckpointError("input width disagrees with the encoding config")
    return ImplicitNet(tuple(dims[1:-1]), dims[-1], omega, posenc, ACTIVATIONS[act], latent_dim,
                       weights, biases)


def save_checkpoint(path, net: ImplicitNet) -> None:
    Path(path).write_bytes(to_bytes(net))


def load_checkpoint(path) -> ImplicitNet:
    return from_bytes(Path(path).read_bytes())
