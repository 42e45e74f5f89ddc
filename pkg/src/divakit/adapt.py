"""Edge adaptation: affine fake-quantization, QAT, magnitude pruning.

An :class:`AdaptedModel` wraps a float "shadow" :class:`~divakit.nn.Model`
and exposes the same ``forward``/``backward`` interface, so attacks treat
both kinds of model alike. Quantized weights are frozen as integer codes
plus :class:`QuantParams`; activations are fake-quantized with ranges taken
from a calibration pass and gradients flow through every quantize/dequantize
node as a straight-through estimator (identity in range, zero outside).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .nn import (DTYPE, SGD, Model, NumericalError, ce_loss, iterate_batches,
                 layer_from_dict, predict)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int = 8

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not 0 <= self.zero_point <= self.qmax:
            raise ValueError(f"zero_point {self.zero_point} outside [0, {self.qmax}]")

    @property
    def qmax(self):
        return 2**self.bits - 1


def round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def choose_qparams(lo, hi, bits=8):
    """Asymmetric affine parameters for the range [lo, hi].

    The range is widened to contain 0 so that 0 is exactly representable;
    a degenerate range gets scale 1. The scale is kept in double precision
    so that grid midpoints round as the formula says.
    """
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must be in [2, 8], got {bits}")
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    qmax = 2**bits - 1
    scale = (hi - lo) / qmax if hi > lo else 1.0
    if scale == 0.0:
        scale = 1.0
    zp = int(np.clip(round_half_away(-lo / scale), 0, qmax))
    return QuantParams(scale, zp, bits)


def quantize_with(v, qp):
    v = np.asarray(v, dtype=np.float64)
    codes = round_half_away(v / qp.scale) + qp.zero_point
    return np.clip(codes, 0, qp.qmax).astype(np.int32)


def quantize_tensor(t, bits=8):
    """Return ``(codes, qp)`` for a per-tensor asymmetric affine quantization."""
    t = np.asarray(t, dtype=DTYPE)
    if not np.isfinite(t).all():
        raise ValueError("cannot quantize a tensor with non-finite values")
    qp = choose_qparams(t.min(), t.max(), bits) if t.size else choose_qparams(0, 0, bits)
    return quantize_with(t, qp), qp


def dequantize(codes, qp):
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > qp.qmax):
        raise ValueError(f"codes outside [0, {qp.qmax}]")
    return (qp.scale * (codes.astype(np.float64) - qp.zero_point)).astype(DTYPE)


def fake_quant(v, qp):
    return dequantize(quantize_with(v, qp), qp)


# ------------------------------------------------------------- adapted model


class AdaptedModel:
    """A model plus quantization state and/or pruning masks.

    ``mode`` is one of ``"quantized"``, ``"pruned"``, ``"pruned+quantized"``.
    While not ``frozen`` the shadow weights are re-quantized on every forward
    (quantization-aware training); ``freeze`` stores integer codes.
    """

    MODES = ("quantized", "pruned", "pruned+quantized")

    def __init__(self, base: Model, mode, bits=8, masks=None, act_range=None):
        if mode not in self.MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.base = base
        self.mode = mode
        self.bits = bits
        self.masks = masks
        self.act_range = act_range  # per layer (lo, hi) or None
        self.weight_codes = None
        self.weight_qp = None
        self.frozen = False
        self._params = None
        if self.pruned:
            if masks is None:
                raise ValueError("pruned modes need masks")
            for k, m in masks.items():
                if m.shape != base.params[k].shape or not np.isin(m, (0, 1)).all():
                    raise ValueError(f"mask for {k!r} must be 0/1 and shaped like the tensor")

    # shared classifier interface
    layers = property(lambda self: self.base.layers)
    input_shape = property(lambda self: self.base.input_shape)
    num_classes = property(lambda self: self.base.num_classes)
    dtype = property(lambda self: self.base.dtype)

    def architecture(self):
        return self.base.architecture()

    @property
    def quantized(self):
        return "quantized" in self.mode

    @property
    def pruned(self):
        return "pruned" in self.mode

    @property
    def act_qp(self):
        if self.act_range is None:
            return None
        return [choose_qparams(lo, hi, self.bits) for lo, hi in self.act_range]

    def effective_params(self):
        if self.frozen and self._params is not None:
            return self._params
        params = dict(self.base.params)
        for k in self.base.weight_names:
            w = params[k]
            if self.masks is not None and k in self.masks:
                w = w * self.masks[k]
            if self.quantized:
                if self.frozen:
                    w = dequantize(self.weight_codes[k], self.weight_qp[k])
                else:
                    codes, qp = quantize_tensor(w, self.bits)
                    w = dequantize(codes, qp)
            params[k] = w
        if self.frozen:
            self._params = params
        return params

    def _act_hook(self):
        if not self.quantized:
            return None
        if self.act_range is None:
            raise ValueError("quantized model has no activation calibration")
        qps = self.act_qp
        ranges = self.act_range

        def hook(i, z):
            lo, hi = ranges[i]
            return fake_quant(z, qps[i]), (z >= lo) & (z <= hi)

        return hook

    def forward(self, x, record=False):
        return self.base.forward(x, record=record, params=self.effective_params(), act_hook=self._act_hook())

    def backward(self, tape, dlogits, param_grads=True):
        grads, g = self.base.backward(tape, dlogits, param_grads=param_grads)
        if grads is not None and self.masks is not None:
            for k, m in self.masks.items():
                grads[k] = grads[k] * m
        return grads, g

    def logits(self, x):
        return self.forward(x)[0]

    def freeze(self):
        """Fix the weights as integer codes; shadow weights become their dequantized values."""
        if self.pruned:
            for k, m in self.masks.items():
                self.base.params[k] = self.base.params[k] * m
        if self.quantized:
            self.weight_codes, self.weight_qp = {}, {}
            for k in self.base.weight_names:
                codes, qp = quantize_tensor(self.base.params[k], self.bits)
                self.weight_codes[k] = codes.astype(np.uint8)
                self.weight_qp[k] = qp
                self.base.params[k] = dequantize(codes, qp)
        self.frozen = True
        self._params = None
        return self

    def unfreeze(self):
        self.frozen = False
        self._params = None
        return self

    def copy(self):
        other = AdaptedModel(self.base.copy(), self.mode, self.bits,
                             None if self.masks is None else {k: m.copy() for k, m in self.masks.items()},
                             None if self.act_range is None else list(self.act_range))
        if self.weight_codes is not None:
            other.weight_codes = {k: v.copy() for k, v in self.weight_codes.items()}
            other.weight_qp = dict(self.weight_qp)
        other.frozen = self.frozen
        return other

    def dequantized_model(self):
        """Plain float model carrying the adapted (masked, dequantized) weights."""
        return Model(self.base.layers, self.base.input_shape, self.base.num_classes,
                     {k: np.array(v, dtype=DTYPE) for k, v in self.effective_params().items()})

    def __repr__(self):
        return f"AdaptedModel(mode={self.mode!r}, bits={self.bits}, frozen={self.frozen}, base={self.base!r})"


def fake_quant_forward(adapted: AdaptedModel, x):
    """Logits of the fake-quantized model."""
    if not adapted.quantized:
        raise ValueError("fake_quant_forward needs a quantized model")
    return adapted.forward(x)[0]


@dataclass
class ModelPair:
    """A full-precision model and its adapted twin (same architecture)."""

    original: object
    adapted: object

    def __post_init__(self):
        if self.original.architecture() != self.adapted.architecture():
            raise ValueError("model pair architectures differ")


# ------------------------------------------------------------------ training


def calibrate(adapted: AdaptedModel, inputs, batch_size=32, decay=0.99):
    """Record per-layer output ranges with an exponential moving average of batch min/max."""
    lo = hi = None
    params = adapted.effective_params()
    for i in range(0, len(inputs), batch_size):
        _, tape = adapted.base.forward(inputs[i : i + batch_size], record=True, params=params)
        bmin = np.array([float(o.min()) for o in tape.outputs])
        bmax = np.array([float(o.max()) for o in tape.outputs])
        if lo is None:
            lo, hi = bmin, bmax
        else:
            lo = decay * lo + (1 - decay) * bmin
            hi = decay * hi + (1 - decay) * bmax
    if lo is None:
        raise ValueError("calibration needs at least one sample")
    adapted.act_range = [(float(a), float(b)) for a, b in zip(lo, hi)]
    return adapted


def train_adapted(adapted: AdaptedModel, data, lr, epochs, batch_size=32, momentum=0.9, seed=0, weight_decay=0.0, label_smoothing=0.0):
    """Minibatch SGD on cross-entropy through the adapted forward (STE gradients), in place."""
    inputs, labels = data
    rng = np.random.default_rng(seed)
    opt = SGD(adapted.base.params, lr, momentum, weight_decay=weight_decay)
    for epoch in range(epochs):
        for idx in iterate_batches(len(inputs), batch_size, rng):
            logits, tape = adapted.forward(inputs[idx], record=True)
            values, dlogits = ce_loss(labels[idx], smoothing=label_smoothing)(logits)
            if not np.isfinite(values).all():
                raise NumericalError(f"divergent loss in adapted training, epoch {epoch}")
            grads, _ = adapted.backward(tape, dlogits)
            opt.step(grads, masks=adapted.masks)
            # clamped logits keep the loss finite, so check the weights as well
            if not all(np.isfinite(v).all() for v in adapted.base.params.values()):
                raise NumericalError(f"non-finite weights in adapted training, epoch {epoch}")
    return adapted


def qat_train(model: Model, data, lr=0.01, epochs=2, bits=8, batch_size=32, momentum=0.9,
              seed=0, masks=None, decay=0.99, weight_decay=0.0, label_smoothing=0.0):
    """Quantization-aware training of a copy of ``model``.

    A calibration epoch fixes the activation ranges first; weight grids are
    re-derived every step and frozen into integer codes at the end. Passing
    ``masks`` keeps those entries at zero (pruned+quantized mode).
    """
    inputs, labels = np.asarray(data[0]), np.asarray(data[1])
    mode = "quantized" if masks is None else "pruned+quantized"
    adapted = AdaptedModel(model.copy(), mode, bits, masks=masks)
    calibrate(adapted, inputs, batch_size, decay)
    train_adapted(adapted, (inputs, labels), lr, epochs, batch_size, momentum, seed, weight_decay,
                  label_smoothing)
    return adapted.freeze()


def magnitude_masks(model: Model, sparsity):
    if not 0 <= sparsity < 1:
        raise ValueError(f"sparsity must be in [0, 1), got {sparsity}")
    masks = {}
    for k in model.weight_names:
        w = model.params[k]
        n_zero = int(np.floor(sparsity * w.size))
        order = np.argsort(np.abs(w).reshape(-1), kind="stable")
        m = np.ones(w.size, dtype=DTYPE)
        m[order[:n_zero]] = 0
        masks[k] = m.reshape(w.shape)
    return masks


def prune_magnitude(model: Model, sparsity, data=None, finetune_epochs=0, lr=0.01,
                    batch_size=32, momentum=0.9, seed=0):
    """Zero the smallest-magnitude fraction of every kernel, then fine-tune under the mask."""
    masks = magnitude_masks(model, sparsity)
    adapted = AdaptedModel(model.copy(), "pruned", masks=masks)
    for k, m in masks.items():
        adapted.base.params[k] = adapted.base.params[k] * m
    if finetune_epochs:
        if data is None:
            raise ValueError("fine-tuning needs data")
        train_adapted(adapted, (np.asarray(data[0]), np.asarray(data[1])), lr, finetune_epochs,
                      batch_size, momentum, seed)
    return adapted.freeze()


def prune_and_quantize(model: Model, sparsity, data, finetune_epochs=1, qat_epochs=2, lr=0.01, bits=8, seed=0):
    pruned = prune_magnitude(model, sparsity, data, finetune_epochs, lr=lr, seed=seed)
    return qat_train(pruned.base, data, lr=lr, epochs=qat_epochs, bits=bits, seed=seed, masks=pruned.masks)


def instability(pair: ModelPair, data):
    """Fraction of samples on which exactly one of the two models is correct."""
    inputs, labels = data
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("instability needs a non-empty dataset")
    ok_o = predict(pair.original, inputs) == labels
    ok_a = predict(pair.adapted, inputs) == labels
    return float((ok_o != ok_a).mean())


# --------------------------------------------------------------- persistence


def _model_entry(prefix, m):
    """Header entry and blob list for a Model or AdaptedModel."""
    base = m.base if isinstance(m, AdaptedModel) else m
    layers, input_shape, num_classes = base.architecture()
    entry = {"layers": layers, "input_shape": list(input_shape), "num_classes": num_classes}
    blobs = []
    if not isinstance(m, AdaptedModel):
        for k, v in base.params.items():
            blobs.append((f"{prefix}/param/{k}", "<f4", v))
        return entry, blobs
    if m.quantized and not m.frozen:
        raise ValueError("freeze the adapted model before exporting it")
    ad = {"mode": m.mode, "bits": m.bits}
    if m.quantized:
        ad["weights"] = {k: {"scale": qp.scale, "zero_point": qp.zero_point, "bits": qp.bits}
                         for k, qp in m.weight_qp.items()}
        ad["activations"] = [{"lo": lo, "hi": hi} for lo, hi in m.act_range]
    entry["adaptation"] = ad
    for k, v in base.params.items():
        if m.quantized and k in m.weight_codes:
            blobs.append((f"{prefix}/codes/{k}", "u1", m.weight_codes[k]))
        else:
            blobs.append((f"{prefix}/param/{k}", "<f4", v))
    if m.pruned:
        for k, mask in m.masks.items():
            blobs.append((f"{prefix}/mask/{k}", "bits", mask))
    return entry, blobs


def _model_from_entry(prefix, entry, arrays):
    layers = [layer_from_dict(d) for d in entry["layers"]]
    names = {}
    for layer in layers:
        names.update(layer.param_shapes())
    ad = entry.get("adaptation")
    params, codes = {}, {}
    for k in names:
        if f"{prefix}/codes/{k}" in arrays:
            codes[k] = arrays[f"{prefix}/codes/{k}"]
        elif f"{prefix}/param/{k}" in arrays:
            params[k] = arrays[f"{prefix}/param/{k}"]
        else:
            raise checkpoint.CheckpointError(f"missing tensor {k!r} for model {prefix!r}")
    if ad is None:
        return Model(layers, entry["input_shape"], entry["num_classes"], params)
    qps = {k: QuantParams(d["scale"], d["zero_point"], d["bits"]) for k, d in ad.get("weights", {}).items()}
    for k, c in codes.items():
        params[k] = dequantize(c, qps[k])
    base = Model(layers, entry["input_shape"], entry["num_classes"], params)
    masks = None
    if "pruned" in ad["mode"]:
        masks = {k[len(f"{prefix}/mask/"):]: v for k, v in arrays.items() if k.startswith(f"{prefix}/mask/")}
    act = [(d["lo"], d["hi"]) for d in ad["activations"]] if "activations" in ad else None
    m = AdaptedModel(base, ad["mode"], ad["bits"], masks=masks, act_range=act)
    if m.quantized:
        m.weight_codes = codes
        m.weight_qp = qps
    m.frozen = True
    return m


def save_models(path, models: dict, provenance=None):
    """Write named models (plain or adapted) into one DIVA1 checkpoint."""
    header = {"models": {}, "order": list(models)}
    blobs = []
    for name, m in models.items():
        entry, b = _model_entry(name, m)
        header["models"][name] = entry
        blobs += b
    if provenance is not None:
        header["provenance"] = provenance
    checkpoint.write(path, header, blobs)


def load_models(path):
    """Return ``(models, header)`` from a DIVA1 checkpoint."""
    header, arrays = checkpoint.read(path)
    try:
        models = {name: _model_from_entry(name, header["models"][name], arrays) for name in header["order"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise checkpoint.CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return models, header


def export_adapted(path, adapted: AdaptedModel, provenance=None):
    save_models(path, {"adapted": adapted}, provenance)


def import_adapted(path) -> AdaptedModel:
    models, _ = load_models(path)
    m = models.get("adapted")
    if not isinstance(m, AdaptedModel):
        raise checkpoint.CheckpointError(f"{path}: no adapted model")
    return m


def save_pair(path, pair: ModelPair, provenance=None):
    save_models(path, {"original": pair.original, "adapted": pair.adapted}, provenance)


def load_pair(path) -> ModelPair:
    models, _ = load_models(path)
    try:
        return ModelPair(models["original"], models["adapted"])
    except KeyError:
        raise checkpoint.CheckpointError(f"{path}: not a model pair checkpoint") from None
