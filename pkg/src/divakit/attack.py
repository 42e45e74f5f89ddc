"""L-infinity gradient-sign attacks on a single classifier.

All attacks take a batch ``x`` of shape ``(n, H, W, C)`` in [0, 1] and integer
labels ``y``; every sample is treated independently, so a batch of one is
the per-sample attack. ``model`` is anything with the
``forward(x, record)`` / ``backward(tape, dlogits)`` interface
(:class:`~divakit.nn.Model` or :class:`~divakit.adapt.AdaptedModel`).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .nn import ce_loss

VARIANTS = ("fgsm", "rfgsm", "pgd", "momentum_pgd", "diva", "diva_targeted")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    alpha: float = 1 / 255
    steps: int = 20
    momentum_mu: float = 0.5
    random_start: bool = False
    sigma: float = 4 / 255  # R+FGSM start radius
    c: float = 1.0
    variant: str = "pgd"
    stop_on_success: bool = False
    prob_mode: str = "softmax"  # or "logit"
    target_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if not 0 < self.alpha <= self.epsilon:
            raise ValueError("alpha must be in (0, epsilon]")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.momentum_mu < 0 or self.c < 0 or self.target_weight < 0:
            raise ValueError("momentum_mu, c and target_weight must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attack variant {self.variant!r}")
        if self.prob_mode not in ("softmax", "logit"):
            raise ValueError(f"unknown prob_mode {self.prob_mode!r}")

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass
class AttackState:
    x0: np.ndarray
    xt: np.ndarray
    velocity: np.ndarray
    step: int = 0
    loss_trace: list = field(default_factory=list)


@dataclass
class AttackResult:
    """Outcome of an attack on a batch.

    ``pred`` is the attacked (adapted) model's top-1 on ``x_adv``;
    ``pred_orig`` is the original model's, when a pair was involved.
    ``loss_trace`` has one row per executed step. ``rejected`` marks samples
    that failed the attack precondition and were left untouched.
    """

    x: np.ndarray
    y: np.ndarray
    x_adv: np.ndarray
    pred: np.ndarray
    loss_trace: np.ndarray
    pred_orig: np.ndarray | None = None
    target: np.ndarray | None = None
    rejected: np.ndarray | None = None
    iterates: list | None = None

    @property
    def perturbation(self):
        return self.x_adv - self.x

    @property
    def attack_success(self):
        ok = self.pred != self.y
        return ok if self.rejected is None else ok & ~self.rejected

    @property
    def evasive_success(self):
        if self.pred_orig is None:
            raise ValueError("evasive success needs the original model's predictions")
        return self.attack_success & (self.pred_orig == self.y)

    @property
    def targeted_success(self):
        if self.target is None or self.pred_orig is None:
            raise ValueError("targeted success needs a target and the original model's predictions")
        ok = (self.pred == self.target) & (self.pred_orig == self.y)
        return ok if self.rejected is None else ok & ~self.rejected


def clip_project(xt, x0, epsilon):
    """Clamp ``xt`` into the L-inf ball of radius ``epsilon`` around ``x0``, intersected with [0, 1]."""
    xt, x0 = np.asarray(xt), np.asarray(x0)
    if xt.shape != x0.shape:
        raise ValueError(f"shape mismatch {xt.shape} vs {x0.shape}")
    lo = np.maximum(0, x0 - epsilon)
    hi = np.minimum(1, x0 + epsilon)
    return np.clip(xt, lo, hi).astype(x0.dtype, copy=False)


def input_gradient(model, x, loss_fn):
    """Per-sample loss values and d(sum loss)/dx."""
    logits, tape = model.forward(x, record=True)
    values, dlogits = loss_fn(logits)
    _, g = model.backward(tape, dlogits, param_grads=False)
    return values, g


def ce_objective(model, y):
    return lambda xt: input_gradient(model, xt, ce_loss(y, reduction="sum"))


def _as_batch(x, y):
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if len(x) != len(y):
        raise ValueError("x and y disagree on batch size")
    return x, y


def _l1_normalize(g):
    norm = np.abs(g).reshape(len(g), -1).sum(axis=1)
    norm = np.where(norm > 0, norm, 1.0)
    return g / norm.reshape((-1,) + (1,) * (g.ndim - 1))


def iterate_sign_ascent(x, objective, cfg: AttackConfig, momentum=False, start=None,
                        success_fn=None, record_iterates=False):
    """Projected sign-gradient ascent shared by PGD, momentum PGD and DIVA.

    ``objective(xt)`` returns ``(per-sample loss, gradient)``. Returns the
    final :class:`AttackState` and the list of iterates (when recorded).
    """
    xt = x.copy() if start is None else clip_project(start, x, cfg.epsilon)
    state = AttackState(x0=x, xt=xt, velocity=np.zeros_like(x))
    iterates = [xt.copy()] if record_iterates else None
    active = np.ones(len(x), dtype=bool)
    for _ in range(cfg.steps):
        values, g = objective(state.xt)
        state.loss_trace.append(np.asarray(values, dtype=np.float64))
        if momentum:
            state.velocity = cfg.momentum_mu * state.velocity + _l1_normalize(g)
            direction = np.sign(state.velocity)
        else:
            direction = np.sign(g)
        if cfg.stop_on_success:
            direction = direction * active.reshape((-1,) + (1,) * (x.ndim - 1))
        state.xt = clip_project(state.xt + cfg.alpha * direction, x, cfg.epsilon)
        state.step += 1
        if record_iterates:
            iterates.append(state.xt.copy())
        if cfg.stop_on_success and success_fn is not None:
            active &= ~success_fn(state.xt)
            if not active.any():
                break
    return state, iterates


def _trace(state, n):
    return np.array(state.loss_trace).reshape(-1, n)


def fgsm(model, x, y, epsilon):
    """One signed-gradient step of size ``epsilon`` on the cross-entropy."""
    x, y = _as_batch(x, y)
    _, g = ce_objective(model, y)(x)
    return clip_project(x + epsilon * np.sign(g), x, epsilon)


def rfgsm(model, x, y, epsilon, sigma, seed=0):
    """FGSM from a uniformly jittered start, projected back to the ball around ``x``."""
    if not 0 <= sigma < epsilon:
        raise ValueError("sigma must be in [0, epsilon)")
    x, y = _as_batch(x, y)
    rng = np.random.default_rng(seed)
    start = x if sigma == 0 else np.clip(x + rng.uniform(-sigma, sigma, size=x.shape).astype(x.dtype), 0, 1)
    _, g = ce_objective(model, y)(start)
    return clip_project(start + epsilon * np.sign(g), x, epsilon)


def _predict(model, x):
    return model.forward(x)[0].argmax(axis=1)


def pgd(model, x, y, cfg: AttackConfig = AttackConfig(), record_iterates=False):
    """Untargeted L-inf PGD on the cross-entropy; gradient taken at the current iterate."""
    x, y = _as_batch(x, y)
    start = None
    if cfg.random_start:
        rng = np.random.default_rng(cfg.seed)
        start = x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(x.dtype)
    state, its = iterate_sign_ascent(
        x, ce_objective(model, y), cfg, start=start,
        success_fn=lambda xt: _predict(model, xt) != y, record_iterates=record_iterates)
    return AttackResult(x, y, state.xt, _predict(model, state.xt), _trace(state, len(x)), iterates=its)


def momentum_pgd(model, x, y, cfg: AttackConfig = AttackConfig(variant="momentum_pgd"), record_iterates=False):
    """PGD whose step follows the sign of an L1-normalized gradient momentum."""
    x, y = _as_batch(x, y)
    state, its = iterate_sign_ascent(
        x, ce_objective(model, y), cfg, momentum=True,
        success_fn=lambda xt: _predict(model, xt) != y, record_iterates=record_iterates)
    return AttackResult(x, y, state.xt, _predict(model, state.xt), _trace(state, len(x)), iterates=its)


def cw_attack(*args, **kwargs):
    raise NotImplementedError("the CW baseline is not part of this toolkit")


def run_single_model_attack(model, x, y, cfg: AttackConfig):
    """Dispatch a baseline attack by ``cfg.variant``."""
    if cfg.variant == "pgd":
        return pgd(model, x, y, cfg)
    if cfg.variant == "momentum_pgd":
        return momentum_pgd(model, x, y, cfg)
    x, y = _as_batch(x, y)
    if cfg.variant == "fgsm":
        xa = fgsm(model, x, y, cfg.epsilon)
    elif cfg.variant == "rfgsm":
        xa = rfgsm(model, x, y, cfg.epsilon, cfg.sigma, cfg.seed)
    else:
        raise ValueError(f"{cfg.variant!r} is not a single-model attack")
    return AttackResult(x, y, xa, _predict(model, xa), np.zeros((0, len(x))))
