"""Post-training symmetric INT8 quantization of the feature extractor.

Weights get one scale per tensor (max|w| / 127); activations get one scale per
layer output, taken from max|a| over a calibration set. Biases are stored as
int32 at scale ``s_in * s_w``. The classifier head is never quantized.
Rounding is half away from zero everywhere.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import nn
from .formats import FormatError, Reader, block_table, f32, read_block_table, u32

log = logging.getLogger(__name__)

QMAX = 127
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1
MCRQ_MAGIC = b"MCRQ"
MCRQ_VERSION = 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def scale_for(max_abs: float) -> float:
    # all-zero tensors get the 1.0 sentinel
    return float(max_abs) / QMAX if max_abs > 0 else 1.0


@dataclass
class QuantTensor:
    values: np.ndarray  # int8
    scale: float

    @property
    def shape(self):
        return self.values.shape

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.scale


def quantize_tensor(w: np.ndarray, scale: float | None = None) -> QuantTensor:
    w = np.asarray(w, dtype=float)
    if scale is None:
        scale = scale_for(np.abs(w).max() if w.size else 0.0)
    q = np.clip(round_half_away(w / scale), -QMAX, QMAX).astype(np.int8)
    return QuantTensor(q, float(scale))


@dataclass
class QuantLayer:
    kind: str
    weight: QuantTensor | None = None
    bias: np.ndarray | None = None  # int32 at scale in_scale * weight.scale
    out_scale: float | None = None
    stride: int = 1
    padding: int = 0
    temperature: float = 1.0


@dataclass
class QuantNet:
    input_shape: tuple[int, ...]
    input_scale: float
    layers: list[QuantLayer]
    metadata: dict = field(default_factory=dict)

    @property
    def output_scale(self) -> float:
        scale = self.input_scale
        for layer in self.layers:
            if layer.out_scale is not None:
                scale = layer.out_scale
        return scale

    def to_float(self) -> nn.BlockNet:
        """Float network with the dequantized weights (for shape and MAC queries)."""
        blocks = []
        s_in = self.input_scale
        for layer in self.layers:
            if layer.kind in ("conv", "dense"):
                w = layer.weight.dequantize()
                b = layer.bias.astype(np.float64) * s_in * layer.weight.scale
                if layer.kind == "conv":
                    blocks.append(nn.Conv2D(w, b, layer.stride, layer.padding))
                else:
                    blocks.append(nn.Dense(w, b))
                s_in = layer.out_scale
            elif layer.kind == "relu":
                blocks.append(nn.ReLU())
            elif layer.kind == "gap":
                blocks.append(nn.GlobalAvgPool())
            else:
                blocks.append(nn.Softmax(layer.temperature))
                s_in = layer.out_scale
        return nn.BlockNet(self.input_shape, blocks)

    # ---- MCRQ v1 -------------------------------------------------------

    def dumps(self) -> bytes:
        meta = json.dumps(self.metadata, sort_keys=True).encode()
        fnet = self.to_float()
        parts = [MCRQ_MAGIC, bytes([MCRQ_VERSION]), u32(len(meta)), meta,
                 u32(len(self.input_shape), *self.input_shape), f32(self.input_scale), block_table(fnet.blocks)]
        for layer in self.layers:
            if layer.kind in ("conv", "dense"):
                parts += [f32(layer.weight.scale), layer.weight.values.astype("i1").tobytes(),
                          layer.bias.astype("<i4").tobytes(), f32(layer.out_scale)]
            elif layer.kind == "softmax":
                parts.append(f32(layer.out_scale))
        return b"".join(parts)

    @classmethod
    def loads(cls, raw: bytes) -> "QuantNet":
        r = Reader(raw, "MCRQ")
        r.expect(MCRQ_MAGIC, MCRQ_VERSION)
        meta = json.loads(r.take(r.u32()).decode())
        input_shape = tuple(r.u32() for _ in range(r.u32()))
        input_scale = r.f32()
        layers = []
        for kind, *f in read_block_table(r):
            if kind == "dense":
                ws = r.f32()
                w = r.array("i1", (f[0], f[1])).copy()
                b = r.array("<i4", (f[1],)).astype(np.int64)
                layers.append(QuantLayer(kind, QuantTensor(w, ws), b, r.f32()))
            elif kind == "conv":
                cin, cout, k, stride, pad = f
                ws = r.f32()
                w = r.array("i1", (cout, cin, k, k)).copy()
                b = r.array("<i4", (cout,)).astype(np.int64)
                layers.append(QuantLayer(kind, QuantTensor(w, ws), b, r.f32(), stride, pad))
            elif kind == "softmax":
                layers.append(QuantLayer(kind, temperature=f[0], out_scale=r.f32()))
            else:
                layers.append(QuantLayer(kind))
        if not r.at_end():
            raise FormatError("MCRQ: trailing bytes")
        return cls(input_shape, input_scale, layers, meta)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "QuantNet":
        return cls.loads(Path(path).read_bytes())


def quantize(net: nn.BlockNet, calibration: np.ndarray, batch_size: int = 256) -> QuantNet:
    """Quantize the extractor part of ``net``; any head is left out."""
    body = net.without_head()
    if len(calibration) == 0:
        raise ValueError("calibration set is empty")
    # scales are float32 on disk; keep them float32-exact so a reload is identical
    as32 = lambda s: float(np.float32(s))  # noqa: E731
    max_abs = np.zeros(len(body.blocks) + 1)
    for start in range(0, len(calibration), batch_size):
        _, acts = nn.forward(body, calibration[start : start + batch_size])
        max_abs = np.maximum(max_abs, [np.abs(v).max() for v in acts.values])
    in_scale = as32(scale_for(max_abs[0]))
    layers = []
    s_in = in_scale
    for i, block in enumerate(body.blocks):
        if block.kind in ("conv", "dense"):
            wq = quantize_tensor(block.weight, as32(scale_for(np.abs(block.weight).max())))
            bq = round_half_away(block.bias / (s_in * wq.scale)).astype(np.int64)
            out_scale = as32(scale_for(max_abs[i + 1]))
            kw = {"stride": block.stride, "padding": block.padding} if block.kind == "conv" else {}
            layers.append(QuantLayer(block.kind, wq, bq, out_scale, **kw))
            s_in = out_scale
        elif block.kind == "softmax":
            layers.append(QuantLayer("softmax", out_scale=as32(1.0 / QMAX), temperature=block.temperature))
            s_in = 1.0 / QMAX
        else:
            layers.append(QuantLayer(block.kind))
    meta = {"granularity": "per-tensor", "scheme": "symmetric", "rounding": "half-away-from-zero",
            "calibration": f"max-abs over {len(calibration)} samples", "head": "excluded (float)"}
    return QuantNet(body.input_shape, in_scale, layers, meta)


def _saturate(acc: np.ndarray, stats: dict) -> np.ndarray:
    over = (acc > INT32_MAX) | (acc < INT32_MIN)
    if over.any():
        stats["saturated"] += int(over.sum())
        acc = np.clip(acc, INT32_MIN, INT32_MAX)
    return acc


def _requant(acc: np.ndarray, multiplier: float) -> np.ndarray:
    return np.clip(round_half_away(acc * multiplier), -QMAX, QMAX).astype(np.int64)


def quant_forward(qnet: QuantNet, x: np.ndarray, return_stats: bool = False):
    """Run the integer pipeline and return dequantized real-valued outputs.

    Accumulation happens in (checked) 32-bit integer range; an overflowing
    accumulator is saturated and counted in ``stats["saturated"]``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[1:] != qnet.input_shape:
        raise nn.ShapeError("quant_forward input", ("N",) + qnet.input_shape, x.shape)
    stats = {"saturated": 0}
    q = np.clip(round_half_away(x / qnet.input_scale), -QMAX, QMAX).astype(np.int64)
    scale = qnet.input_scale
    for layer in qnet.layers:
        if layer.kind == "dense":
            # float64 holds these integer products and sums exactly
            acc = (q.astype(np.float64) @ layer.weight.values.astype(np.float64)).astype(np.int64) + layer.bias
            acc = _saturate(acc, stats)
            q = _requant(acc, scale * layer.weight.scale / layer.out_scale)
            scale = layer.out_scale
        elif layer.kind == "conv":
            w = layer.weight.values.astype(np.float64)
            cout, cin, k, _ = w.shape
            xp = q.astype(np.float64)
            if layer.padding:
                p = layer.padding
                xp = np.pad(xp, ((0, 0), (0, 0), (p, p), (p, p)))
            win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, :: layer.stride, :: layer.stride]
            n, _, oh, ow = win.shape[:4]
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, cin * k * k)
            acc = (cols @ w.reshape(cout, -1).T).astype(np.int64) + layer.bias
            acc = _saturate(acc, stats).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
            q = _requant(acc, scale * layer.weight.scale / layer.out_scale)
            scale = layer.out_scale
        elif layer.kind == "relu":
            q = np.maximum(q, 0)
        elif layer.kind == "gap":
            h, w_ = q.shape[2:]
            q = round_half_away(q.sum(axis=(2, 3)) / (h * w_)).astype(np.int64)
        elif layer.kind == "softmax":
            p = nn.softmax(q * scale, layer.temperature)
            q = _requant(p, 1.0 / layer.out_scale)
            scale = layer.out_scale
    if stats["saturated"]:
        log.warning("quant_forward: %d accumulators saturated", stats["saturated"])
    out = q.astype(np.float64) * scale
    return (out, stats) if return_stats else out
