"""MCRT v1 float model files plus the little-endian helpers shared by the
other binary formats (MCRQ, MEMB, MFEA, MCLF).

MCRT layout::

    b"MCRT" u8 version
    u32 input_ndim, u32 dims...
    u32 n_blocks, then per block: u8 kind code + kind fields
        dense   u32 in, u32 out
        conv    u32 in_ch, u32 out_ch, u32 k, u32 stride, u32 padding
        softmax f32 temperature
        relu / gap  (no fields)
    u8 has_head [u32 in, u32 out, f32 temperature]
    parameter blob: every parameter as float32 LE, row-major, in net.params() order
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .nn import BlockNet, Conv2D, Dense, GlobalAvgPool, Head, ReLU, Softmax

MCRT_MAGIC = b"MCRT"
MCRT_VERSION = 1

KIND_CODES = {"dense": 1, "conv": 2, "relu": 3, "gap": 4, "softmax": 5}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}


class FormatError(ValueError):
    pass


class Reader:
    def __init__(self, raw: bytes, what: str = "file"):
        self.buf = io.BytesIO(raw)
        self.what = what

    def take(self, n: int) -> bytes:
        chunk = self.buf.read(n)
        if len(chunk) != n:
            raise FormatError(f"{self.what}: truncated (wanted {n} bytes)")
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def array(self, dtype: str, shape) -> np.ndarray:
        dt = np.dtype(dtype)
        count = int(np.prod(shape))
        return np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)

    def expect(self, magic: bytes, version: int | None = None) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {magic!r}")
        if version is not None:
            v = self.u8()
            if v != version:
                raise FormatError(f"{self.what}: unsupported version {v}")

    def at_end(self) -> bool:
        pos = self.buf.tell()
        end = self.buf.seek(0, 2)
        self.buf.seek(pos)
        return pos == end


def u32(*values: int) -> bytes:
    return struct.pack(f"<{len(values)}I", *values)


def f32(*values: float) -> bytes:
    return struct.pack(f"<{len(values)}f", *values)


def block_table(blocks) -> bytes:
    out = [u32(len(blocks))]
    for b in blocks:
        out.append(bytes([KIND_CODES[b.kind]]))
        if b.kind == "dense":
            out.append(u32(b.in_features, b.out_features))
        elif b.kind == "conv":
            out.append(u32(b.in_ch, b.out_ch, b.k, b.stride, b.padding))
        elif b.kind == "softmax":
            out.append(f32(b.temperature))
    return b"".join(out)


def read_block_table(r: Reader) -> list[tuple]:
    """Return block descriptors ``(kind, fields...)`` without parameters."""
    table = []
    for _ in range(r.u32()):
        code = r.u8()
        if code not in CODE_KINDS:
            raise FormatError(f"{r.what}: unknown block code {code}")
        kind = CODE_KINDS[code]
        if kind == "dense":
            table.append((kind, r.u32(), r.u32()))
        elif kind == "conv":
            table.append((kind, *(r.u32() for _ in range(5))))
        elif kind == "softmax":
            table.append((kind, r.f32()))
        else:
            table.append((kind,))
    return table


def param_blob(net: BlockNet, include_head: bool = True) -> bytes:
    params = net.params() if include_head else [p for b in net.blocks for p in b.params()]
    return b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in params)


def dumps_model(net: BlockNet) -> bytes:
    parts = [MCRT_MAGIC, bytes([MCRT_VERSION]), u32(len(net.input_shape), *net.input_shape), block_table(net.blocks)]
    if net.head is None:
        parts.append(b"\x00")
    else:
        d = net.head.dense
        parts += [b"\x01", u32(d.in_features, d.out_features), f32(net.head.temperature)]
    parts.append(param_blob(net))
    return b"".join(parts)


def loads_model(raw: bytes) -> BlockNet:
    r = Reader(raw, "MCRT")
    r.expect(MCRT_MAGIC, MCRT_VERSION)
    input_shape = tuple(r.u32() for _ in range(r.u32()))
    table = read_block_table(r)
    head_spec = None
    if r.u8():
        head_spec = (r.u32(), r.u32(), r.f32())

    def param(shape):
        return r.array("<f4", shape).astype(np.float64)

    blocks = []
    for kind, *f in table:
        if kind == "dense":
            blocks.append(Dense(param((f[0], f[1])), param((f[1],))))
        elif kind == "conv":
            cin, cout, k, stride, pad = f
            blocks.append(Conv2D(param((cout, cin, k, k)), param((cout,)), stride, pad))
        elif kind == "relu":
            blocks.append(ReLU())
        elif kind == "gap":
            blocks.append(GlobalAvgPool())
        else:
            blocks.append(Softmax(f[0]))
    head = None
    if head_spec is not None:
        din, dout, temp = head_spec
        head = Head(Dense(param((din, dout)), param((dout,))), temp)
    if not r.at_end():
        raise FormatError("MCRT: trailing bytes after parameter blob")
    return BlockNet(input_shape, blocks, head)


def save_model(net: BlockNet, path: str | Path) -> None:
    Path(path).write_bytes(dumps_model(net))


def load_model(path: str | Path) -> BlockNet:
    return loads_model(Path(path).read_bytes())
