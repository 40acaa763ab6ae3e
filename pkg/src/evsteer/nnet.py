"""Dense tensor kernel and the runtime CNN.

Everything here is hand-rolled on top of numpy arrays: valid convolutions via
im2col, non-overlapping 2x2 max pooling with recorded argmax routing, ReLU /
sigmoid activations, fully-connected layers, inverted dropout, softmax loss
with analytic backprop, Adam updates, guided backpropagation saliency, and a
line-oriented text weight format.

Array layout is channels-last: feature maps are (height, width, maps) and a
batch axis is prepended internally, so a batched activation is (n, h, w, c)
and a flat one is (n, d). Inference never mutates a network; per-call state
lives on a tape, so a loaded network can be shared read-only across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

CLASS_NAMES = ("L", "C", "R", "N")
N_CLASSES = 4


class Decision(IntEnum):
    """Steering decision. Values are the wire encoding and must not change."""

    L = 0
    C = 1
    R = 2
    N = 3

    @classmethod
    def from_name(cls, name: str) -> "Decision":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown decision name {name!r}") from None


class WeightFileError(Exception):
    """Base class for weight file problems."""


class MalformedWeightFileError(WeightFileError):
    """File is truncated, has a bad header, or is otherwise unparsable."""


class WeightShapeError(WeightFileError):
    """Declared layer shapes are inconsistent or parameter counts disagree."""


class UnsupportedLayerError(WeightFileError):
    """File declares a layer kind this engine does not implement."""


class ShapeMismatchError(ValueError):
    """Input does not match the network's declared input extent."""


def _glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv:
    """Valid (unpadded) stride-1 convolution with one bias per output map."""

    kind = "conv"

    def __init__(self, n_maps: int, kernel_size: int):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and >= 1")
        self.n_maps = n_maps
        self.kernel_size = kernel_size
        self.kernels = None  # (out_maps, in_maps, k, k), set by Network
        self.bias = None  # (out_maps,)

    def build(self, in_shape, rng, dtype):
        h, w, c = in_shape
        k = self.kernel_size
        if h < k or w < k:
            raise ValueError(f"input {h}x{w} smaller than kernel {k}")
        fan_in = c * k * k
        fan_out = self.n_maps * k * k
        self.kernels = _glorot_uniform(rng, (self.n_maps, c, k, k), fan_in, fan_out, dtype)
        self.bias = np.zeros(self.n_maps, dtype=dtype)
        return (h - k + 1, w - k + 1, self.n_maps)

    def params(self):
        return [self.kernels, self.bias]

    def param_count(self):
        return self.kernels.size + self.bias.size

    def op_count(self, out_shape):
        # One op per necessary multiply or add: per output value that is
        # in_maps*k*k multiplies, in_maps*k*k - 1 sum adds, and one bias add.
        h, w, m = out_shape
        return h * w * m * 2 * self.kernels.shape[1] * self.kernel_size ** 2

    def _patches(self, x):
        k = self.kernel_size
        # (n, h', w', c, k, k): trailing window dims are (row, col)
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
        n, hh, ww = win.shape[:3]
        return win.reshape(n, hh * ww, -1), (hh, ww)

    def forward(self, x, tape):
        cols, (hh, ww) = self._patches(x)
        w2d = self.kernels.reshape(self.n_maps, -1)
        y = cols @ w2d.T + self.bias
        if tape is not None:
            tape.append(cols)
        return y.reshape(x.shape[0], hh, ww, self.n_maps)

    def backward(self, dy, x, cache, grads, need_dx=True):
        cols = cache
        n, hh, ww, m = dy.shape
        dy_flat = dy.reshape(n * hh * ww, m)
        w2d = self.kernels.reshape(m, -1)
        grads[0][...] = (dy_flat.T @ cols.reshape(n * hh * ww, -1)).reshape(self.kernels.shape)
        grads[1][...] = dy_flat.sum(axis=0)
        if not need_dx:
            return None
        dcols = (dy_flat @ w2d).reshape(n, hh, ww, x.shape[3],
                                        self.kernel_size, self.kernel_size)
        dx = np.zeros_like(x)
        for i in range(self.kernel_size):
            for j in range(self.kernel_size):
                dx[:, i:i + hh, j:j + ww, :] += dcols[:, :, :, :, i, j]
        return dx


class MaxPool:
    """Non-overlapping 2x2 max pool, stride 2; odd extents are floored."""

    kind = "maxpool"

    def __init__(self):
        pass

    def build(self, in_shape, rng, dtype):
        h, w, c = in_shape
        return (h // 2, w // 2, c)

    def params(self):
        return []

    def param_count(self):
        return 0

    def op_count(self, out_shape):
        return 0  # comparisons only, no multiplies or adds

    @staticmethod
    def _windows(x):
        n, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        x = x[:, : h2 * 2, : w2 * 2, :]
        win = x.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        return win.reshape(n, h2, w2, c, 4)

    def forward(self, x, tape):
        win = self._windows(x)
        arg = win.argmax(axis=-1)  # first max wins on ties
        if tape is not None:
            tape.append(arg)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(self, dy, x, cache, grads):
        arg = cache
        n, h2, w2, c = dy.shape
        dwin = np.zeros((n, h2, w2, c, 4), dtype=dy.dtype)
        np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
        dwin = dwin.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros_like(x)
        dx[:, : h2 * 2, : w2 * 2, :] = dwin.reshape(n, h2 * 2, w2 * 2, c)
        return dx


class Relu:
    kind = "relu"

    def build(self, in_shape, rng, dtype):
        return in_shape

    def params(self):
        return []

    def param_count(self):
        return 0

    def op_count(self, out_shape):
        return 0

    def forward(self, x, tape):
        if tape is not None:
            tape.append(x)
        return np.maximum(x, 0)

    def backward(self, dy, x, cache, grads, guided=False):
        gate = cache > 0
        if guided:
            gate = gate & (dy > 0)
        return dy * gate


class Sigmoid:
    kind = "sigmoid"

    def build(self, in_shape, rng, dtype):
        return in_shape

    def params(self):
        return []

    def param_count(self):
        return 0

    def op_count(self, out_shape):
        return 0

    def forward(self, x, tape):
        y = 1.0 / (1.0 + np.exp(-x))
        if tape is not None:
            tape.append(y)
        return y

    def backward(self, dy, x, cache, grads):
        y = cache
        return dy * y * (1.0 - y)


class Dense:
    """Fully connected layer; flattens map inputs in (row, col, map) order."""

    kind = "dense"

    def __init__(self, n_units: int):
        self.n_units = n_units
        self.weights = None  # (out, in)
        self.bias = None

    def build(self, in_shape, rng, dtype):
        d = int(np.prod(in_shape))
        self.weights = _glorot_uniform(rng, (self.n_units, d), d, self.n_units, dtype)
        self.bias = np.zeros(self.n_units, dtype=dtype)
        return (self.n_units,)

    def params(self):
        return [self.weights, self.bias]

    def param_count(self):
        return self.weights.size + self.bias.size

    def op_count(self, out_shape):
        return self.n_units * 2 * self.weights.shape[1]

    def forward(self, x, tape):
        shape_in = x.shape
        flat = x.reshape(x.shape[0], -1)
        if tape is not None:
            tape.append((flat, shape_in))
        return flat @ self.weights.T + self.bias

    def backward(self, dy, x, cache, grads):
        flat, shape_in = cache
        grads[0][...] = dy.T @ flat
        grads[1][...] = dy.sum(axis=0)
        return (dy @ self.weights).reshape(shape_in)


class Dropout:
    """Inverted dropout; identity outside training mode."""

    kind = "dropout"

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate

    def build(self, in_shape, rng, dtype):
        return in_shape

    def params(self):
        return []

    def param_count(self):
        return 0

    def op_count(self, out_shape):
        return 0

    def forward(self, x, tape, train=False, rng=None):
        if not train or self.rate == 0.0:
            if tape is not None:
                tape.append(None)
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        mask = mask.astype(x.dtype)
        if tape is not None:
            tape.append(mask)
        return x * mask

    def backward(self, dy, x, cache, grads):
        return dy if cache is None else dy * cache


_LAYER_KINDS = {"conv": Conv, "maxpool": MaxPool, "relu": Relu,
                "sigmoid": Sigmoid, "dense": Dense, "dropout": Dropout}


@dataclass
class Tape:
    """Per-call forward record: layer inputs, caches, and outputs."""

    inputs: list = field(default_factory=list)
    caches: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


class Network:
    """An ordered layer stack with a fixed input extent and 4 LCRN logits."""

    def __init__(self, layers, input_shape=(36, 36, 1), rng=None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        shape = self.input_shape
        self.layer_shapes = [shape]
        for layer in self.layers:
            shape = layer.build(shape, rng, self.dtype)
            self.layer_shapes.append(shape)
        if self.layers and shape != (N_CLASSES,):
            raise WeightShapeError(
                f"network must end in exactly {N_CLASSES} logits, got {shape}")

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def astype(self, dtype):
        """Return a copy with all parameters cast to dtype (for gradient checks)."""
        clone = Network.__new__(Network)
        clone.input_shape = self.input_shape
        clone.dtype = np.dtype(dtype)
        clone.layer_shapes = list(self.layer_shapes)
        clone.layers = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                copy = Conv(layer.n_maps, layer.kernel_size)
                copy.kernels = layer.kernels.astype(dtype)
                copy.bias = layer.bias.astype(dtype)
            elif isinstance(layer, Dense):
                copy = Dense(layer.n_units)
                copy.weights = layer.weights.astype(dtype)
                copy.bias = layer.bias.astype(dtype)
            elif isinstance(layer, Dropout):
                copy = Dropout(layer.rate)
            else:
                copy = type(layer)()
            clone.layers.append(copy)
        return clone

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape == self.input_shape[:2]:
            x = x[..., None]
        if x.shape != self.input_shape:
            raise ShapeMismatchError(
                f"frame shape {x.shape} does not match input {self.input_shape}")
        return x[None]

    def _forward_batch(self, x, train=False, rng=None, tape=None):
        for layer in self.layers:
            if tape is not None:
                tape.inputs.append(x)
            if isinstance(layer, Dropout):
                y = layer.forward(x, tape.caches if tape is not None else None,
                                  train=train, rng=rng)
            else:
                y = layer.forward(x, tape.caches if tape is not None else None)
            if tape is not None:
                tape.outputs.append(y)
            x = y
        return x

    def forward(self, frame, train=False, rng=None):
        """Run one frame; returns (logits, per-layer activation list)."""
        tape = Tape()
        logits = self._forward_batch(self._check_input(frame), train, rng, tape)[0]
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("non-finite logits")
        return logits, [a[0] for a in tape.outputs]

    def predict(self, frame) -> Decision:
        logits, _ = self.forward(frame)
        return decision_from_logits(logits)

    def forward_batch(self, x):
        """Inference logits for a (n, h, w, c) batch; no tape, no dropout."""
        return self._forward_batch(np.asarray(x, dtype=self.dtype))

    def predict_batch(self, x):
        return np.argmax(self.forward_batch(x), axis=1)

    def _backward_batch(self, dy, tape, guided=False, need_input_grad=False):
        grads = [np.zeros_like(p) for p in self.parameters()]
        slot = len(grads)
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            n_params = len(layer.params())
            slot -= n_params
            layer_grads = grads[slot:slot + n_params]
            if isinstance(layer, Relu):
                dy = layer.backward(dy, tape.inputs[idx], tape.caches[idx],
                                    layer_grads, guided=guided)
            elif isinstance(layer, Conv):
                dy = layer.backward(dy, tape.inputs[idx], tape.caches[idx],
                                    layer_grads, need_dx=idx > 0 or need_input_grad)
            else:
                dy = layer.backward(dy, tape.inputs[idx], tape.caches[idx], layer_grads)
        return dy, grads

    def loss_and_backward(self, frames, labels, train=True, rng=None):
        """Mean softmax cross-entropy over a batch plus per-parameter grads.

        frames: (n, h, w, c) or a single (h, w[, c]) frame; labels: Decision
        values, scalar or (n,).
        """
        x = np.asarray(frames, dtype=self.dtype)
        if x.ndim <= 3:
            x = self._check_input(x)
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        tape = Tape()
        logits = self._forward_batch(x, train=train, rng=rng, tape=tape)
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("non-finite logits")
        probs = softmax(logits)
        n = logits.shape[0]
        loss = float(np.mean(-np.log(probs[np.arange(n), labels])))
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        _, grads = self._backward_batch(dlogits.astype(self.dtype), tape)
        return loss, grads

    def input_gradient(self, frame, target: Decision, guided=False):
        """d(target logit)/d(input); guided gates ReLUs on positive gradients."""
        tape = Tape()
        logits = self._forward_batch(self._check_input(frame), tape=tape)
        dy = np.zeros_like(logits)
        dy[0, int(target)] = 1.0
        dx, _ = self._backward_batch(dy, tape, guided=guided, need_input_grad=True)
        return dx[0]

    def guided_backprop(self, frame, target: Decision):
        """Guided-backprop saliency for target, min-max normalized to [0, 1]."""
        g = self.input_gradient(frame, target, guided=True)[..., 0]
        lo, hi = float(g.min()), float(g.max())
        if hi - lo <= 0.0:
            return np.zeros_like(g)
        return ((g - lo) / (hi - lo)).astype(self.dtype)


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decision_from_logits(logits) -> Decision:
    """Argmax decision; ties break toward the lowest class index."""
    return Decision(int(np.argmax(logits)))


def runtime_network(rng=None, dropout_rate=0.25, dtype=np.float32) -> Network:
    """The canonical runtime stack: 4C5-R-2S-4C5-R-2S-40F-R-4F."""
    layers = [Conv(4, 5), Relu(), MaxPool(),
              Conv(4, 5), Relu(), MaxPool(),
              Dense(40), Relu(), Dropout(dropout_rate), Dense(4)]
    return Network(layers, input_shape=(36, 36, 1), rng=rng, dtype=dtype)


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators with bias correction."""

    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params],
                   t=0, beta1=beta1, beta2=beta2, eps=eps, lr=lr)


def adam_step(params, grads, state: AdamState):
    """In-place Adam update; increments state.t before bias correction."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def param_count(net: Network) -> int:
    return sum(layer.param_count() for layer in net.layers)


def op_count(net: Network) -> int:
    """Forward-pass multiplies plus adds, counting each as one operation."""
    total = 0
    for layer, out_shape in zip(net.layers, net.layer_shapes[1:]):
        total += layer.op_count(out_shape)
    return total


WEIGHT_MAGIC = "evsteer-net v1"


def _fmt_values(arr):
    return " ".join(repr(float(v)) for v in np.asarray(arr).reshape(-1))


def save_weights(net: Network, path):
    """Text weight file; conv kernels serialize in (out-map, in-map, row, col) order."""
    lines = [WEIGHT_MAGIC, "input " + " ".join(str(v) for v in net.input_shape)]
    for layer in net.layers:
        if isinstance(layer, Conv):
            lines.append(f"conv {layer.n_maps} {layer.kernel_size}")
            lines.append(_fmt_values(layer.kernels))
            lines.append(_fmt_values(layer.bias))
        elif isinstance(layer, Dense):
            lines.append(f"dense {layer.n_units}")
            lines.append(_fmt_values(layer.weights))
            lines.append(_fmt_values(layer.bias))
        elif isinstance(layer, Dropout):
            lines.append(f"dropout {repr(layer.rate)}")
        else:
            lines.append(layer.kind)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_values(line, shape, dtype, what):
    toks = line.split()
    expected = int(np.prod(shape))
    if len(toks) != expected:
        raise WeightShapeError(f"{what}: expected {expected} values, got {len(toks)}")
    try:
        vals = np.array([float(t) for t in toks], dtype=dtype)
    except ValueError as exc:
        raise MalformedWeightFileError(f"{what}: bad float literal: {exc}") from None
    return vals.reshape(shape)


def load_weights(path, dtype=np.float32) -> Network:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln.strip()]
    if not lines or lines[0].strip() != WEIGHT_MAGIC:
        raise MalformedWeightFileError("missing or wrong header line")
    if len(lines) < 2 or not lines[1].startswith("input "):
        raise MalformedWeightFileError("missing input declaration")
    try:
        input_shape = tuple(int(v) for v in lines[1].split()[1:])
    except ValueError:
        raise MalformedWeightFileError("bad input declaration") from None
    if len(input_shape) != 3 or any(v < 1 for v in input_shape):
        raise WeightShapeError(f"bad input extent {input_shape}")

    pos = 2

    def next_line(what):
        nonlocal pos
        if pos >= len(lines):
            raise MalformedWeightFileError(f"file truncated: expected {what}")
        line = lines[pos]
        pos += 1
        return line

    layers = []
    shape = input_shape
    params = []  # (layer, kernels/weights, bias)
    while pos < len(lines):
        decl = next_line("layer").split()
        kind = decl[0]
        if kind == "conv":
            if len(decl) != 3:
                raise MalformedWeightFileError("conv declaration needs maps and kernel size")
            n_maps, k = int(decl[1]), int(decl[2])
            layer = Conv(n_maps, k)
            if shape[0] < k or shape[1] < k:
                raise WeightShapeError(f"conv kernel {k} larger than input {shape}")
            kern = _parse_values(next_line("conv kernels"), (n_maps, shape[2], k, k),
                                 dtype, "conv kernels")
            bias = _parse_values(next_line("conv bias"), (n_maps,), dtype, "conv bias")
            params.append((layer, kern, bias))
            shape = (shape[0] - k + 1, shape[1] - k + 1, n_maps)
        elif kind == "dense":
            if len(decl) != 2:
                raise MalformedWeightFileError("dense declaration needs unit count")
            n_units = int(decl[1])
            layer = Dense(n_units)
            d = int(np.prod(shape))
            w = _parse_values(next_line("dense weights"), (n_units, d), dtype, "dense weights")
            bias = _parse_values(next_line("dense bias"), (n_units,), dtype, "dense bias")
            params.append((layer, w, bias))
            shape = (n_units,)
        elif kind == "maxpool":
            layer = MaxPool()
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
        elif kind == "relu":
            layer = Relu()
        elif kind == "sigmoid":
            layer = Sigmoid()
        elif kind == "dropout":
            if len(decl) != 2:
                raise MalformedWeightFileError("dropout declaration needs a rate")
            layer = Dropout(float(decl[1]))
        else:
            raise UnsupportedLayerError(f"unknown layer kind {kind!r}")
        layers.append(layer)
    if shape != (N_CLASSES,):
        raise WeightShapeError(f"network must end in {N_CLASSES} logits, got {shape}")

    net = Network.__new__(Network)
    net.input_shape = input_shape
    net.dtype = np.dtype(dtype)
    net.layers = layers
    rebuild_shape = input_shape
    net.layer_shapes = [rebuild_shape]
    for layer in layers:
        rebuild_shape = layer.build(rebuild_shape, np.random.default_rng(0), net.dtype)
        net.layer_shapes.append(rebuild_shape)
    for layer, a, b in params:
        if isinstance(layer, Conv):
            layer.kernels, layer.bias = a, b
        else:
            layer.weights, layer.bias = a, b
    return net


def dump_activations(net: Network, frame, directory):
    """Write one plain-text matrix file per layer for a single frame."""
    import os

    os.makedirs(directory, exist_ok=True)
    _, acts = net.forward(frame)
    paths = []
    for i, (layer, act) in enumerate(zip(net.layers, acts)):
        path = os.path.join(directory, f"act_{i:02d}_{layer.kind}.txt")
        with open(path, "w") as fh:
            a = np.asarray(act)
            if a.ndim == 3:
                for ch in range(a.shape[2]):
                    np.savetxt(fh, a[:, :, ch], fmt="%.6g")
                    fh.write("\n")
            else:
                np.savetxt(fh, a.reshape(1, -1), fmt="%.6g")
        paths.append(path)
    return paths
