"""Small sequential networks with hand-written reverse-mode gradients.

Every array carries a leading batch axis. Parameters live in float64; the
on-disk model format narrows them to float32 (see :mod:`microt.formats`).
"""
from __future__ import annotations

import copy
import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when an array does not fit the block it is fed to."""

    def __init__(self, where: str, expected, got):
        super().__init__(f"{where}: expected shape {tuple(expected)}, got {tuple(got)}")
        self.where = where
        self.expected = tuple(expected)
        self.got = tuple(got)


class StaleActivationsError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, index: int):
        super().__init__(f"non-finite gradient for parameter {index}; update refused")
        self.index = index


# --------------------------------------------------------------------------
# blocks


class Block:
    kind = "block"

    def params(self) -> list[np.ndarray]:
        return []

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(in_shape)

    def macs(self, in_shape: tuple[int, ...]) -> int:
        return 0

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x: np.ndarray, y: np.ndarray, dy: np.ndarray):
        """Return ``(dx, [dparam, ...])`` given input, output and upstream grad."""
        raise NotImplementedError


@dataclass(eq=False)
class Dense(Block):
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    kind = "dense"

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def params(self):
        return [self.weight, self.bias]

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError("Dense", (self.in_features,), in_shape)
        return (self.out_features,)

    def macs(self, in_shape):
        self.out_shape(in_shape)
        return self.in_features * self.out_features

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError("Dense", ("N", self.in_features), x.shape)
        return x @ self.weight + self.bias

    def backward(self, x, y, dy):
        return dy @ self.weight.T, [x.T @ dy, dy.sum(axis=0)]


@dataclass(eq=False)
class Conv2D(Block):
    weight: np.ndarray  # (out_ch, in_ch, k, k)
    bias: np.ndarray  # (out_ch,)
    stride: int = 1
    padding: int = 0
    kind = "conv"

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def params(self):
        return [self.weight, self.bias]

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ShapeError("Conv2D", (self.in_ch, "H", "W"), in_shape)
        _, h, w = in_shape
        oh = (h + 2 * self.padding - self.k) // self.stride + 1
        ow = (w + 2 * self.padding - self.k) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError("Conv2D (input smaller than kernel)", (self.in_ch, self.k, self.k), in_shape)
        return (self.out_ch, oh, ow)

    def macs(self, in_shape):
        _, oh, ow = self.out_shape(in_shape)
        return self.out_ch * self.in_ch * self.k * self.k * oh * ow

    def _cols(self, x):
        if self.padding:
            p = self.padding
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (self.k, self.k), axis=(2, 3))
        win = win[:, :, :: self.stride, :: self.stride]
        n, c, oh, ow = win.shape[:4]
        # (N, oh, ow, C, k, k) -> rows of C*k*k
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * self.k * self.k)
        return cols, oh, ow

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError("Conv2D", ("N", self.in_ch, "H", "W"), x.shape)
        self.out_shape(x.shape[1:])
        n = x.shape[0]
        cols, oh, ow = self._cols(x)
        y = cols @ self.weight.reshape(self.out_ch, -1).T + self.bias
        return y.reshape(n, oh, ow, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, x, y, dy):
        n, _, oh, ow = dy.shape
        k, s, p = self.k, self.stride, self.padding
        cols, _, _ = self._cols(x)
        dy_rows = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        dw = (dy_rows.T @ cols).reshape(self.weight.shape)
        db = dy_rows.sum(axis=0)
        dcols = (dy_rows @ self.weight.reshape(self.out_ch, -1)).reshape(n, oh, ow, self.in_ch, k, k)
        hp, wp = x.shape[2] + 2 * p, x.shape[3] + 2 * p
        dxp = np.zeros((n, self.in_ch, hp, wp))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p : hp - p, p : wp - p] if p else dxp
        return dx, [dw, db]


class ReLU(Block):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, x, y, dy):
        return dy * (x > 0), []


class GlobalAvgPool(Block):
    kind = "gap"

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError("GlobalAvgPool", ("C", "H", "W"), in_shape)
        return (in_shape[0],)

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError("GlobalAvgPool", ("N", "C", "H", "W"), x.shape)
        return x.mean(axis=(2, 3))

    def backward(self, x, y, dy):
        h, w = x.shape[2:]
        return np.broadcast_to(dy[:, :, None, None] / (h * w), x.shape).copy(), []


@dataclass(eq=False)
class Softmax(Block):
    temperature: float = 1.0
    kind = "softmax"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("softmax temperature must be positive")

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError("Softmax", ("D",), in_shape)
        return tuple(in_shape)

    def forward(self, x):
        return softmax(x, self.temperature)

    def backward(self, x, y, dy):
        inner = (dy * y).sum(axis=1, keepdims=True)
        return y * (dy - inner) / self.temperature, []


def softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# networks


@dataclass(eq=False)
class Head:
    """Dense classifier followed by a softmax."""

    dense: Dense
    temperature: float = 1.0

    def params(self):
        return self.dense.params()


_version_counter = itertools.count()


@dataclass(eq=False)
class BlockNet:
    input_shape: tuple[int, ...]
    blocks: list[Block]
    head: Head | None = None
    version: int = field(default_factory=lambda: next(_version_counter))

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shape = self.feature_shape  # validates the chain
        if self.head is not None and shape != (self.head.dense.in_features,):
            raise ShapeError("head", (self.head.dense.in_features,), shape)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.shape_at(len(self.blocks))

    def shape_at(self, index: int) -> tuple[int, ...]:
        shape = self.input_shape
        for block in self.blocks[:index]:
            shape = block.out_shape(shape)
        return shape

    def params(self) -> list[np.ndarray]:
        out = [p for b in self.blocks for p in b.params()]
        if self.head is not None:
            out.extend(self.head.params())
        return out

    def touch(self) -> None:
        self.version = next(_version_counter)

    def copy(self) -> "BlockNet":
        new = copy.deepcopy(self)
        new.touch()
        return new

    def without_head(self) -> "BlockNet":
        return BlockNet(self.input_shape, copy.deepcopy(self.blocks), None)

    def with_head(self, head: Head | None) -> "BlockNet":
        return BlockNet(self.input_shape, copy.deepcopy(self.blocks), copy.deepcopy(head))

    def __len__(self) -> int:
        return len(self.blocks)


@dataclass
class Activations:
    """Everything :func:`backward` needs from a forward pass."""

    values: list[np.ndarray]  # values[0] is the input, values[i + 1] the output of block i
    logits: np.ndarray | None
    probs: np.ndarray | None
    token: tuple[int, int]

    @property
    def features(self) -> np.ndarray:
        return self.values[-1]


@dataclass
class GradientTape:
    grads: list[np.ndarray]
    input_grad: np.ndarray

    def __iter__(self):
        return iter(self.grads)

    def __len__(self):
        return len(self.grads)


def _token(net: BlockNet) -> tuple[int, int]:
    return (id(net), net.version)


def forward(net: BlockNet, x: np.ndarray) -> tuple[np.ndarray, Activations]:
    x = np.asarray(x, dtype=float)
    if x.shape[1:] != net.input_shape:
        raise ShapeError("forward input", ("N",) + net.input_shape, x.shape)
    values = [x]
    for block in net.blocks:
        values.append(block.forward(values[-1]))
    logits = probs = None
    out = values[-1]
    if net.head is not None:
        logits = net.head.dense.forward(out)
        probs = softmax(logits, net.head.temperature)
        out = probs
    return out, Activations(values, logits, probs, _token(net))


def backward(net: BlockNet, loss_grad: np.ndarray, acts: Activations, wrt: str = "output",
             boundary_grads: dict[int, np.ndarray] | None = None) -> GradientTape:
    """Back-propagate ``loss_grad`` and return per-parameter gradients.

    ``wrt`` names what ``loss_grad`` is the gradient of: ``"output"`` (what
    :func:`forward` returned), ``"logits"`` (head pre-softmax) or
    ``"features"`` (last block output; head parameters get zero gradient).
    ``boundary_grads`` maps a boundary index ``i`` to an extra gradient on
    ``acts.values[i]``, for losses that also read intermediate activations.
    """
    boundary_grads = boundary_grads or {}
    if acts.token != _token(net) or len(acts.values) != len(net.blocks) + 1:
        raise StaleActivationsError("activations do not come from a forward pass of this network state")
    dy = np.asarray(loss_grad, dtype=float)
    head_grads: list[np.ndarray] = []
    if net.head is not None:
        if wrt == "output":
            y = acts.probs
            dy = y * (dy - (dy * y).sum(axis=1, keepdims=True)) / net.head.temperature
            wrt = "logits"
        if wrt == "logits":
            if dy.shape != acts.logits.shape:
                raise ShapeError("backward logits grad", acts.logits.shape, dy.shape)
            dy, head_grads = net.head.dense.backward(acts.values[-1], acts.logits, dy)
        elif wrt == "features":
            head_grads = [np.zeros_like(p) for p in net.head.params()]
        else:
            raise ValueError(f"unknown gradient target {wrt!r}")
    elif wrt == "logits":
        raise ValueError("network has no head; cannot take gradient w.r.t. logits")
    if dy.shape != acts.values[-1].shape:
        raise ShapeError("backward feature grad", acts.values[-1].shape, dy.shape)
    grads: list[list[np.ndarray]] = []
    for i in range(len(net.blocks) - 1, -1, -1):
        if i + 1 in boundary_grads:
            dy = dy + boundary_grads[i + 1]
        dy, g = net.blocks[i].backward(acts.values[i], acts.values[i + 1], dy)
        grads.append(g)
    if 0 in boundary_grads:
        dy = dy + boundary_grads[0]
    flat = [g for block_grads in reversed(grads) for g in block_grads] + head_grads
    return GradientTape(flat, dy)


def sgd_step(net: BlockNet, tape: GradientTape | Sequence[np.ndarray], lr: float) -> BlockNet:
    """In-place plain SGD (no momentum); returns ``net``."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    params = net.params()
    grads = list(tape)
    if len(grads) != len(params):
        raise ValueError(f"tape has {len(grads)} gradients for {len(params)} parameters")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"gradient {i}", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(i)
    for p, g in zip(params, grads):
        p -= lr * g
    net.touch()
    return net


def mac_count(net: BlockNet, input_shape: Sequence[int] | None = None, include_head: bool = True) -> int:
    shape = tuple(input_shape) if input_shape is not None else net.input_shape
    total = 0
    for block in net.blocks:
        total += block.macs(shape)
        shape = block.out_shape(shape)
    if include_head and net.head is not None:
        total += net.head.dense.macs(shape)
    return total


# --------------------------------------------------------------------------
# construction


def parse_arch(text: str) -> list[tuple]:
    """Parse a compact layer list such as ``"conv:8:3 relu conv:16:3:2 relu gap dense:10"``.

    Tokens: ``conv:OUT:K[:STRIDE[:PAD]]``, ``dense:OUT``, ``relu``, ``gap``,
    ``softmax[:T]``. Separators may be spaces or commas.
    """
    layers = []
    for tok in text.replace(",", " ").split():
        name, *args = tok.split(":")
        name = name.lower()
        if name == "conv":
            out, k, *rest = (int(a) for a in args)
            stride = rest[0] if rest else 1
            pad = rest[1] if len(rest) > 1 else 0
            layers.append(("conv", out, k, stride, pad))
        elif name == "dense":
            layers.append(("dense", int(args[0])))
        elif name in ("relu", "gap"):
            layers.append((name,))
        elif name == "softmax":
            layers.append(("softmax", float(args[0]) if args else 1.0))
        else:
            raise ValueError(f"unknown layer token {tok!r}")
    return layers


INIT_SCHEMES = ("glorot", "he")


def _uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, scheme: str = "glorot") -> np.ndarray:
    if scheme == "glorot":
        bound = np.sqrt(6.0 / (fan_in + fan_out))
    elif scheme == "he":
        bound = np.sqrt(6.0 / fan_in)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    return rng.uniform(-bound, bound, size=shape)


def seeded_init(
    input_shape: Sequence[int],
    layers: Sequence[tuple] | str,
    seed: int,
    head_classes: int | None = None,
    head_temperature: float = 1.0,
    init: str = "glorot",
) -> BlockNet:
    """Build a network with zero biases and uniform weights.

    ``init="glorot"`` draws from +-sqrt(6/(fan_in+fan_out)); ``"he"`` from
    +-sqrt(6/fan_in), which keeps activations from shrinking through ReLU
    stacks. The head, if any, always uses the Glorot bound.
    """
    if isinstance(layers, str):
        layers = parse_arch(layers)
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    blocks: list[Block] = []
    for spec in layers:
        kind = spec[0]
        if kind == "conv":
            _, out, k, stride, pad = (tuple(spec) + (1, 0))[:5]
            cin = shape[0]
            w = _uniform(rng, (out, cin, k, k), cin * k * k, out * k * k, init)
            block = Conv2D(w, np.zeros(out), stride, pad)
        elif kind == "dense":
            din = shape[0]
            block = Dense(_uniform(rng, (din, spec[1]), din, spec[1], init), np.zeros(spec[1]))
        elif kind == "relu":
            block = ReLU()
        elif kind == "gap":
            block = GlobalAvgPool()
        elif kind == "softmax":
            block = Softmax(spec[1] if len(spec) > 1 else 1.0)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        shape = block.out_shape(shape)
        blocks.append(block)
    head = None
    if head_classes is not None:
        head = new_head(shape[0], head_classes, rng, head_temperature)
    return BlockNet(tuple(input_shape), blocks, head)


def new_head(in_features: int, classes: int, rng: np.random.Generator | int, temperature: float = 1.0) -> Head:
    rng = np.random.default_rng(rng)
    w = _uniform(rng, (in_features, classes), in_features, classes)
    return Head(Dense(w, np.zeros(classes)), temperature)


def checksum(net: BlockNet) -> str:
    h = hashlib.sha256()
    for p in net.params():
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()


def readout(x: np.ndarray) -> np.ndarray:
    """Flatten a boundary activation into per-sample feature vectors.

    Spatial maps are globally average-pooled, vectors pass through unchanged.
    """
    return x.mean(axis=(2, 3)) if x.ndim == 4 else x


def readout_backward(x: np.ndarray, d: np.ndarray) -> np.ndarray:
    if x.ndim == 4:
        h, w = x.shape[2:]
        return np.broadcast_to(d[:, :, None, None] / (h * w), x.shape).copy()
    return d
