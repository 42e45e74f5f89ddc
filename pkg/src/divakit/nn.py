"""Small feed-forward network engine on numpy.

Tensors are plain ``numpy.ndarray`` objects (float32, row-major, NHWC).
A :class:`Model` is an ordered list of layers plus a named parameter map;
``forward`` optionally records a tape that ``backward`` consumes to produce
parameter and input gradients by reverse-mode accumulation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer it is fed to."""


class NumericalError(RuntimeError):
    """Raised when a loss or parameter becomes non-finite."""


# --------------------------------------------------------------------- layers


@dataclass(frozen=True)
class Dense:
    name: str
    in_features: int
    out_features: int

    kind = "dense"

    def param_shapes(self):
        return {
            f"{self.name}.weight": (self.in_features, self.out_features),
            f"{self.name}.bias": (self.out_features,),
        }

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"layer {self.name!r} expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x, params):
        w, b = params[f"{self.name}.weight"], params[f"{self.name}.bias"]
        return x @ w + b, x

    def backward(self, dout, cache, params):
        w = params[f"{self.name}.weight"]
        grads = {f"{self.name}.weight": cache.T @ dout, f"{self.name}.bias": dout.sum(axis=0)}
        return dout @ w.T, grads


@dataclass(frozen=True)
class Conv2d:
    """3x3 convolution, stride 1, zero padding 1. Kernel layout is HWIO."""

    name: str
    in_channels: int
    out_channels: int

    kind = "conv2d"

    def param_shapes(self):
        return {
            f"{self.name}.weight": (3, 3, self.in_channels, self.out_channels),
            f"{self.name}.bias": (self.out_channels,),
        }

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.in_channels:
            raise ShapeError(
                f"layer {self.name!r} expects (H, W, {self.in_channels}), got {tuple(in_shape)}"
            )
        return (in_shape[0], in_shape[1], self.out_channels)

    def forward(self, x, params):
        w, b = params[f"{self.name}.weight"], params[f"{self.name}.bias"]
        n, h, wd, c = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        # (n, h, w, c, 3, 3) -> (n, h, w, 3, 3, c)
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, 9 * c)
        out = cols @ w.reshape(9 * c, self.out_channels) + b
        return out.reshape(n, h, wd, self.out_channels), (cols, x.shape)

    def backward(self, dout, cache, params):
        cols, (n, h, wd, c) = cache
        w = params[f"{self.name}.weight"]
        d2 = dout.reshape(n * h * wd, self.out_channels)
        grads = {
            f"{self.name}.weight": (cols.T @ d2).reshape(w.shape),
            f"{self.name}.bias": d2.sum(axis=0),
        }
        dcols = (d2 @ w.reshape(9 * c, self.out_channels).T).reshape(n, h, wd, 3, 3, c)
        dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
        for i in range(3):
            for j in range(3):
                dxp[:, i : i + h, j : j + wd, :] += dcols[:, :, :, i, j, :]
        return dxp[:, 1:-1, 1:-1, :], grads


@dataclass(frozen=True)
class ReLU:
    name: str

    kind = "relu"

    def param_shapes(self):
        return {}

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, params):
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype, copy=False), mask

    def backward(self, dout, cache, params):
        return dout * cache, {}


@dataclass(frozen=True)
class MaxPool2x2:
    name: str

    kind = "maxpool2x2"

    def param_shapes(self):
        return {}

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] % 2 or in_shape[1] % 2:
            raise ShapeError(f"layer {self.name!r} needs (H, W, C) with even H, W; got {tuple(in_shape)}")
        return (in_shape[0] // 2, in_shape[1] // 2, in_shape[2])

    def forward(self, x, params):
        n, h, w, c = x.shape
        blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
        # first maximal element wins ties
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, dout, cache, params):
        idx, (n, h, w, c) = cache
        onehot = idx[..., None] == np.arange(4)
        dblocks = (onehot * dout[..., None]).astype(dout.dtype)
        dx = dblocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return dx.reshape(n, h, w, c), {}


@dataclass(frozen=True)
class Flatten:
    name: str

    kind = "flatten"

    def param_shapes(self):
        return {}

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, params):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache, params):
        return dout.reshape(cache), {}


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, MaxPool2x2, Flatten)}


def layer_to_dict(layer) -> dict:
    d = {"type": layer.kind}
    d.update(layer.__dict__)
    return d


def layer_from_dict(d: dict):
    d = dict(d)
    try:
        cls = LAYER_TYPES[d.pop("type")]
    except KeyError as exc:
        raise ValueError(f"unknown layer type {exc}") from None
    return cls(**d)


# ---------------------------------------------------------------------- model


@dataclass
class Tape:
    """Activation record of one forward pass."""

    caches: list
    outputs: list  # output of every layer, after any activation hook
    ste_masks: list  # per-layer straight-through masks (None = pass everything)
    params: dict


class Model:
    """Ordered layer list with named float parameters.

    ``input_shape`` excludes the batch axis, e.g. ``(28, 28, 1)``.
    """

    def __init__(self, layers, input_shape, num_classes, params=None, seed=0, dtype=DTYPE):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if shape != (self.num_classes,):
            raise ShapeError(f"final layer emits {shape}, expected ({self.num_classes},)")
        if params is None:
            params = he_uniform_init(self.layers, seed, dtype)
        self.params = {k: np.asarray(v) for k, v in params.items()}
        expected = {}
        for layer in self.layers:
            expected.update(layer.param_shapes())
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names {sorted(self.params)} do not match layers {sorted(expected)}")
        for k, shp in expected.items():
            if self.params[k].shape != shp:
                raise ShapeError(f"parameter {k!r} has shape {self.params[k].shape}, expected {shp}")

    # identity used for ModelPair checks and checkpoints
    def architecture(self):
        return ([layer_to_dict(layer) for layer in self.layers], self.input_shape, self.num_classes)

    @property
    def weight_names(self):
        """Kernel tensors (the ones subject to pruning and quantization)."""
        return [k for k in self.params if k.endswith(".weight")]

    def copy(self):
        return Model(self.layers, self.input_shape, self.num_classes,
                     {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype):
        return Model(self.layers, self.input_shape, self.num_classes,
                     {k: v.astype(dtype) for k, v in self.params.items()})

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def _check_input(self, x):
        x = np.asarray(x)
        if x.shape[1:] != self.input_shape:
            first = self.layers[0].name if self.layers else "<input>"
            raise ShapeError(
                f"layer {first!r} expects input (n, {', '.join(map(str, self.input_shape))}), got {x.shape}"
            )
        return x.astype(self.dtype, copy=False)

    def forward(self, x, record=False, params=None, act_hook=None):
        """Run the network. Returns ``(logits, tape)``; ``tape`` is None unless ``record``.

        ``params`` overrides the stored parameters (used for fake-quantized or
        masked weights); ``act_hook(i, z)`` may replace layer ``i``'s output and
        return a straight-through mask for the backward pass.
        """
        x = self._check_input(x)
        params = self.params if params is None else params
        caches, outputs, masks = [], [], []
        a = x
        for i, layer in enumerate(self.layers):
            a, cache = layer.forward(a, params)
            mask = None
            if act_hook is not None:
                a, mask = act_hook(i, a)
            if record:
                caches.append(cache)
                outputs.append(a)
                masks.append(mask)
        tape = Tape(caches, outputs, masks, params) if record else None
        return a, tape

    def backward(self, tape, dlogits, param_grads=True):
        """Propagate ``dlogits`` through a recorded tape.

        Returns ``(param_grads, input_grad)``; ``param_grads`` is None when not requested.
        """
        g = np.asarray(dlogits, dtype=self.dtype)
        grads = {} if param_grads else None
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if tape.ste_masks[i] is not None:
                g = g * tape.ste_masks[i]
            g, pg = layer.backward(g, tape.caches[i], tape.params)
            if param_grads:
                grads.update(pg)
        return grads, g

    def logits(self, x):
        return self.forward(x)[0]

    def penultimate(self, x):
        return penultimate_activations(self, x)

    def __repr__(self):
        kinds = ", ".join(f"{layer.kind}:{layer.name}" for layer in self.layers)
        return f"Model([{kinds}], input_shape={self.input_shape}, num_classes={self.num_classes})"


def he_uniform_init(layers, seed, dtype=DTYPE):
    rng = np.random.default_rng(seed)
    params = {}
    for layer in layers:
        for name, shape in layer.param_shapes().items():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[:-1]))
                limit = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


def lenet(input_shape=(28, 28, 1), num_classes=10, channels=(8, 16), hidden=64, seed=0):
    """LeNet-class CNN: two conv/relu/pool stages, one hidden dense layer."""
    h, w, c = input_shape
    layers = [
        Conv2d("conv1", c, channels[0]), ReLU("relu1"), MaxPool2x2("pool1"),
        Conv2d("conv2", channels[0], channels[1]), ReLU("relu2"), MaxPool2x2("pool2"),
        Flatten("flatten"),
        Dense("fc1", (h // 4) * (w // 4) * channels[1], hidden), ReLU("relu3"),
        Dense("fc2", hidden, num_classes),
    ]
    return Model(layers, input_shape, num_classes, seed=seed)


def mlp(in_features, hidden, num_classes, seed=0):
    """Dense network on flat inputs; ``hidden`` is a sequence of widths."""
    layers, prev = [], in_features
    for i, width in enumerate(hidden):
        layers += [Dense(f"fc{i + 1}", prev, width), ReLU(f"relu{i + 1}")]
        prev = width
    layers.append(Dense(f"fc{len(hidden) + 1}", prev, num_classes))
    return Model(layers, (in_features,), num_classes, seed=seed)


# ----------------------------------------------------------------- functional


def forward(model, x, record=False):
    return model.forward(x, record=record)


def softmax_probs(logits):
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_labels(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    return labels


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = np.atleast_2d(logits)
    labels = _check_labels(labels, logits.shape[-1])
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


# Loss functions used with ``grad`` map logits -> (per-sample values, dL/dlogits).
LossFn = Callable[[np.ndarray], "tuple[np.ndarray, np.ndarray]"]


def ce_loss(labels, reduction="mean", smoothing=0.0):
    """Cross-entropy against one-hot (optionally label-smoothed) targets."""

    def fn(logits):
        lab = _check_labels(labels, logits.shape[-1])
        n, k = logits.shape
        p = softmax_probs(logits)
        target = np.full_like(p, smoothing / k)
        target[np.arange(n), lab] += 1 - smoothing
        values = -(target * log_softmax(logits)).sum(axis=1)
        d = p - target
        if reduction == "mean":
            d /= n
        return values, d

    return fn


def label_prob_loss(labels, weight=1.0, mode="softmax"):
    """``weight * P[y]`` per sample, with P the softmax probability (or raw logit)."""

    def fn(logits):
        lab = _check_labels(labels, logits.shape[-1])
        rows = np.arange(len(lab))
        d = np.zeros_like(logits)
        if mode == "logit":
            values = logits[rows, lab]
            d[rows, lab] = 1
        else:
            p = softmax_probs(logits)
            values = p[rows, lab]
            d = -p * values[:, None]
            d[rows, lab] += values
        return weight * values, weight * d

    return fn


def grad(model, x, loss_fn, param_grads=True):
    """Gradients of ``sum(loss_fn(logits)[0])`` (as weighted by loss_fn's dlogits).

    Returns ``(param_grads, input_grad, per_sample_loss)``.
    """
    logits, tape = model.forward(x, record=True)
    values, dlogits = loss_fn(logits)
    pg, ig = model.backward(tape, dlogits, param_grads=param_grads)
    return pg, ig, values


def predict(model, x, batch_size=256):
    x = np.asarray(x)
    return np.concatenate(
        [model.forward(x[i : i + batch_size])[0].argmax(axis=1) for i in range(0, len(x), batch_size)]
    ) if len(x) else np.zeros(0, dtype=np.int64)


def predict_proba(model, x, batch_size=256):
    x = np.asarray(x)
    return np.concatenate(
        [softmax_probs(model.forward(x[i : i + batch_size])[0]) for i in range(0, len(x), batch_size)]
    )


def topk_from_logits(logits, k):
    logits = np.atleast_2d(logits)
    if not 1 <= k <= logits.shape[-1]:
        raise ValueError(f"k must be in [1, {logits.shape[-1]}], got {k}")
    # stable sort on negated scores: equal scores keep ascending class order
    return np.argsort(-logits, axis=-1, kind="stable")[:, :k]


def predict_topk(model, x, k):
    """Top-``k`` classes per sample, by descending probability; ties go to the lower index."""
    if not 1 <= k <= model.num_classes:
        raise ValueError(f"k must be in [1, {model.num_classes}], got {k}")
    return topk_from_logits(model.forward(x)[0], k)


def penultimate_activations(model, x):
    """Input to the final dense layer."""
    if len(model.layers) < 2:
        raise ValueError("penultimate activations need a model with at least two layers")
    _, tape = model.forward(x, record=True)
    return tape.outputs[-2]


# ------------------------------------------------------------------- training


def iterate_batches(n, batch_size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def sgd_train(model, data, lr, epochs, batch_size=32, momentum=0.9, weight_decay=0.0, label_smoothing=0.0,
              seed=0, log=None):
    """Train a copy of ``model`` with minibatch SGD on cross-entropy.

    ``data`` is an ``(inputs, labels)`` pair. ``log``, if given, receives the
    mean loss of every epoch. Raises :class:`NumericalError` on a non-finite loss.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    inputs, labels = data
    inputs = np.asarray(inputs)
    labels = np.asarray(labels)
    model = model.copy()
    rng = np.random.default_rng(seed)
    opt = SGD(model.params, lr, momentum, weight_decay=weight_decay)
    for epoch in range(epochs):
        total = 0.0
        for idx in iterate_batches(len(inputs), batch_size, rng):
            pg, _, values = grad(model, inputs[idx], ce_loss(labels[idx], smoothing=label_smoothing))
            loss = float(values.mean())
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss} in epoch {epoch}")
            opt.step(pg)
            total += loss * len(idx)
        if log is not None:
            log.append(total / len(inputs))
    return model


class SGD:
    """Momentum SGD updating a parameter dict in place."""

    def __init__(self, params, lr, momentum=0.0, names: Iterable[str] | None = None, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.names = list(params) if names is None else list(names)
        self.velocity = {k: np.zeros_like(params[k]) for k in self.names}

    def step(self, grads, masks=None):
        for k in self.names:
            g = grads[k]
            if self.weight_decay and k.endswith(".weight"):
                g = g + self.weight_decay * self.params[k]
            v = self.velocity[k]
            v *= self.momentum
            v += g
            self.params[k] -= (self.lr * v).astype(self.params[k].dtype)
            if masks is not None and k in masks:
                self.params[k] *= masks[k]


def accuracy(model, inputs, labels):
    return float((predict(model, inputs) == np.asarray(labels)).mean())

