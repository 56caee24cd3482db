"""Versioned binary checkpoints for masked networks.

Layout (all integers little-endian):

    magic    4 bytes  b'SNNC'
    version  u32      currently 1
    flags    u32      bit 0: velocity vector present
    step     u64      training step counter
    n_layers u32      number of weighted layers
    per weighted layer:
        kind     u8       0 dense, 1 conv
        ndim     u8
        dims     u32 * ndim
        has_bias u8
        weights  f64 * prod(dims)
        bias     f64 * dims[0]        (if has_bias)
        mask     bit-packed, ceil(prod(dims)/8) bytes
    velocity f64 * n_params           (if flags bit 0)
    crc32    u32      over everything after the magic

Loading validates the architecture against the provided network and fails on
magic/version/CRC mismatch.
"""

import struct
import zlib

import numpy as np

from .errors import CheckpointError
from .network import ConvLayer, DenseLayer

MAGIC = b"SNNC"
VERSION = 1


def save_state(net, path, velocity=None):
    """Write weights, masks, and the step counter; optionally the optimizer velocity."""
    body = bytearray()
    flags = 1 if velocity is not None else 0
    body += struct.pack("<II Q", VERSION, flags, net.step)
    weighted = net.weighted_layers()
    body += struct.pack("<I", len(weighted))
    for _, layer in weighted:
        kind = 0 if isinstance(layer, DenseLayer) else 1
        dims = layer.w.shape
        body += struct.pack("<BB", kind, len(dims))
        body += struct.pack(f"<{len(dims)}I", *dims)
        body += struct.pack("<B", 0 if layer.b is None else 1)
        body += np.ascontiguousarray(layer.w, dtype="<f8").tobytes()
        if layer.b is not None:
            body += np.ascontiguousarray(layer.b, dtype="<f8").tobytes()
        body += np.packbits(layer.mask.astype(bool).ravel()).tobytes()
    if velocity is not None:
        body += np.ascontiguousarray(velocity, dtype="<f8").tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(body)
        fh.write(struct.pack("<I", crc))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_state(net, path):
    """Restore `net` in place from `path`; returns (step, velocity-or-None).

    The network must already have the checkpoint's architecture.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: CRC mismatch, file corrupt")
    r = _Reader(body)
    version, flags, step = r.unpack("<IIQ")
    if version != VERSION:
        raise CheckpointError(f"{path}: version {version} unsupported (expected {VERSION})")
    (n_layers,) = r.unpack("<I")
    weighted = net.weighted_layers()
    if n_layers != len(weighted):
        raise CheckpointError(f"{path}: has {n_layers} weighted layers, network has {len(weighted)}")
    staged = []
    for li, (_, layer) in enumerate(weighted):
        kind, ndim = r.unpack("<BB")
        dims = r.unpack(f"<{ndim}I")
        (has_bias,) = r.unpack("<B")
        expect_kind = 0 if isinstance(layer, DenseLayer) else 1
        if kind != expect_kind or dims != layer.w.shape:
            raise CheckpointError(
                f"{path}: weighted layer {li} is kind={kind} dims={dims}, "
                f"network expects kind={expect_kind} dims={layer.w.shape}"
            )
        if bool(has_bias) != (layer.b is not None):
            raise CheckpointError(f"{path}: weighted layer {li} bias presence mismatch")
        size = int(np.prod(dims))
        w = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(dims).copy()
        b = None
        if has_bias:
            b = np.frombuffer(r.take(8 * dims[0]), dtype="<f8").copy()
        packed = np.frombuffer(r.take((size + 7) // 8), dtype=np.uint8)
        mask = np.unpackbits(packed, count=size).astype(float).reshape(dims)
        staged.append((layer, w, b, mask))
    velocity = None
    if flags & 1:
        n_params = sum(l.w.size + (0 if l.b is None else l.b.size) for _, l in weighted)
        velocity = np.frombuffer(r.take(8 * n_params), dtype="<f8").copy()
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} trailing bytes")

    for layer, w, b, mask in staged:
        layer.w[...] = w
        if b is not None:
            layer.b[...] = b
        layer.mask = mask
    net.step = step
    return step, velocity
