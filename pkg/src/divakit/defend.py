"""Robust-training defenses against differential attacks.

``minimax_pgd``: adversarial training of the full-precision model with a PGD
inner loop, then quantization-aware training.
``minimax_diva_qat``: with the original model frozen, train only the adapted
weights against DIVA samples generated on the current pair.
``minimax_diva_qat_distill``: the above plus a distillation step pulling the
adapted model's outputs to the original's on fresh DIVA samples.
``distill_only``: the distillation step alone on clean samples (a control).
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapt import AdaptedModel, ModelPair, qat_train, save_pair
from .attack import AttackConfig, pgd
from .diva import diva_attack
from .metrics import config_hash
from .nn import SGD, NumericalError, ce_loss, grad, iterate_batches, label_prob_loss, softmax_probs

DEFENSES = ("minimax_pgd", "minimax_diva_qat", "minimax_diva_qat_distill", "distill_only")


@dataclass(frozen=True)
class DefenseConfig:
    variant: str = "minimax_diva_qat"
    inner: AttackConfig = field(default_factory=AttackConfig)
    outer_lr: float = 0.01
    epochs: int = 2
    n_distill: int = 20
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0
    early_stop_tol: float = 1e-3  # relative train-loss improvement over `patience` epochs
    patience: int = 2
    qat_epochs: int = 2
    qat_lr: float = 0.02
    qat_label_smoothing: float = 0.1

    def __post_init__(self):
        if self.variant not in DEFENSES:
            raise ValueError(f"unknown defense {self.variant!r}")
        if self.epochs < 0 or self.outer_lr <= 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0, outer_lr > 0, batch_size >= 1")
        if self.variant in ("minimax_diva_qat_distill", "distill_only") and not 20 <= self.n_distill <= 50:
            raise ValueError(f"n_distill must be in [20, 50], got {self.n_distill}")

    def to_dict(self):
        return asdict(self)


def params_checksum(model) -> str:
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k]).tobytes())
    return h.hexdigest()


@contextmanager
def frozen_params(model):
    """Make every parameter array read-only; any in-place write raises ValueError."""
    flags = {k: v.flags.writeable for k, v in model.params.items()}
    for v in model.params.values():
        v.flags.writeable = False
    try:
        yield model
    finally:
        for k, v in model.params.items():
            if flags[k]:
                v.flags.writeable = True


# ------------------------------------------------------------- minimax PGD


def robust_sgd(model, data, cfg: DefenseConfig, log=None):
    """Adversarial training of a copy of ``model``; PGD examples replace each batch.

    With ``cfg.inner.steps == 0`` the trajectory is exactly that of
    :func:`~divakit.nn.sgd_train` with the same lr, momentum, batch size and seed.
    """
    inputs, labels = np.asarray(data[0]), np.asarray(data[1])
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.params, cfg.outer_lr, cfg.momentum)
    losses = [] if log is None else log
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in iterate_batches(len(inputs), cfg.batch_size, rng):
            xb, yb = inputs[idx], labels[idx]
            if cfg.inner.steps > 0:
                xb = pgd(model, xb, yb, cfg.inner).x_adv
            pg, _, values = grad(model, xb, ce_loss(yb))
            loss = float(values.mean())
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss} in robust training, epoch {epoch}")
            opt.step(pg)
            total += loss * len(idx)
        losses.append(total / len(inputs))
        if len(losses) > cfg.patience:
            prev = losses[-1 - cfg.patience]
            if prev - losses[-1] < cfg.early_stop_tol * abs(prev):
                break
    return model


def minimax_pgd_train(model, data, cfg: DefenseConfig, log=None) -> ModelPair:
    if cfg.variant != "minimax_pgd":
        raise ValueError("minimax_pgd_train needs variant='minimax_pgd'")
    robust = robust_sgd(model, data, cfg, log)
    adapted = qat_train(robust, data, lr=cfg.qat_lr, epochs=cfg.qat_epochs, seed=cfg.seed,
                        label_smoothing=cfg.qat_label_smoothing)
    return ModelPair(robust, adapted)


# -------------------------------------------------------- minimax DIVA QAT


def _check_quantized(pair):
    if not isinstance(pair.adapted, AdaptedModel):
        raise TypeError("the adapted side must be an AdaptedModel")


def _update_adapted(adapted, opt, x, loss_fn):
    logits, tape = adapted.forward(x, record=True)
    values, d = loss_fn(logits)
    if not np.isfinite(values).all():
        raise NumericalError("non-finite loss while training the adapted model")
    grads, _ = adapted.backward(tape, d)
    opt.step(grads, masks=adapted.masks)
    return values


def _minimax_step(pair, adapted, opt, xb, yb, cfg):
    """One inner DIVA maximization and one outer step lowering the joint loss over the adapted weights.

    Only ``-c * P_adapted[y]`` depends on the adapted weights, so that is the
    term differentiated.
    """
    x_adv = diva_attack(pair, xb, yb, cfg.inner).x_adv
    n = len(yb)

    def loss_fn(logits):
        v, d = label_prob_loss(yb, -cfg.inner.c, cfg.inner.prob_mode)(logits)
        return v, d / n

    return _update_adapted(adapted, opt, x_adv, loss_fn)


def _distill_step(pair, adapted, opt, x):
    """Match the adapted model's softmax to the original's (temperature 1) on ``x``."""
    p_o = softmax_probs(pair.original.logits(x))
    n = len(x)

    def loss_fn(logits):
        p_a = softmax_probs(logits)
        kl = (p_o * (np.log(p_o + 1e-12) - np.log(p_a + 1e-12))).sum(axis=1)
        return kl, ((p_a - p_o) / n).astype(logits.dtype)

    return _update_adapted(adapted, opt, x, loss_fn)


def _diva_defense(pair: ModelPair, data, cfg: DefenseConfig, minimax: bool, distill: bool) -> ModelPair:
    _check_quantized(pair)
    if cfg.epochs == 0:
        return ModelPair(pair.original, pair.adapted.copy())
    inputs, labels = np.asarray(data[0]), np.asarray(data[1])
    original = pair.original
    before = params_checksum(original)
    adapted = pair.adapted.copy().unfreeze()
    work = ModelPair(original, adapted)
    rng = np.random.default_rng(cfg.seed)
    pick = np.random.default_rng(cfg.seed + 1)
    opt = SGD(adapted.base.params, cfg.outer_lr, cfg.momentum)
    with frozen_params(original):
        for _ in range(cfg.epochs):
            for idx in iterate_batches(len(inputs), cfg.batch_size, rng):
                if minimax:
                    _minimax_step(work, adapted, opt, inputs[idx], labels[idx], cfg)
                if distill:
                    d_idx = pick.choice(len(inputs), size=min(cfg.n_distill, len(inputs)), replace=False)
                    xd = inputs[d_idx]
                    if minimax:
                        xd = diva_attack(work, xd, labels[d_idx], cfg.inner).x_adv
                    _distill_step(work, adapted, opt, xd)
    if params_checksum(original) != before:
        raise RuntimeError("original model parameters changed during a frozen-original defense")
    adapted.freeze()
    return ModelPair(original, adapted)


def minimax_diva_qat(pair: ModelPair, data, cfg: DefenseConfig) -> ModelPair:
    if cfg.variant != "minimax_diva_qat":
        raise ValueError("minimax_diva_qat needs variant='minimax_diva_qat'")
    return _diva_defense(pair, data, cfg, minimax=True, distill=False)


def minimax_diva_qat_distill(pair: ModelPair, data, cfg: DefenseConfig) -> ModelPair:
    if cfg.variant != "minimax_diva_qat_distill":
        raise ValueError("minimax_diva_qat_distill needs variant='minimax_diva_qat_distill'")
    return _diva_defense(pair, data, cfg, minimax=True, distill=True)


def distill_only(pair: ModelPair, data, cfg: DefenseConfig) -> ModelPair:
    if cfg.variant != "distill_only":
        raise ValueError("distill_only needs variant='distill_only'")
    return _diva_defense(pair, data, cfg, minimax=False, distill=True)


def defend(pair_or_model, data, cfg: DefenseConfig) -> ModelPair:
    """Run the defense named by ``cfg.variant``.

    ``minimax_pgd`` takes a full-precision model (or uses a pair's original).
    """
    if cfg.variant == "minimax_pgd":
        model = pair_or_model.original if isinstance(pair_or_model, ModelPair) else pair_or_model
        return minimax_pgd_train(model, data, cfg)
    fn = {"minimax_diva_qat": minimax_diva_qat, "minimax_diva_qat_distill": minimax_diva_qat_distill,
          "distill_only": distill_only}[cfg.variant]
    return fn(pair_or_model, data, cfg)


def export_defended(path, pair: ModelPair, cfg: DefenseConfig):
    save_pair(path, pair, provenance={"defense": cfg.variant, "config_hash": config_hash(cfg.to_dict())})
