"""Differential evasive attack on a (original, adapted) model pair.

The joint objective is ``P_orig(x)[y] - c * P_adapted(x)[y]``; maximizing it
with PGD drives the adapted model away from the true label while holding the
original model on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapt import ModelPair
from .attack import AttackConfig, AttackResult, _as_batch, _predict, iterate_sign_ascent
from .nn import label_prob_loss, softmax_probs


@dataclass(frozen=True)
class DivaObjective:
    c: float = 1.0
    target: object = None  # class index or per-sample array
    target_weight: float = 1.0

    def __post_init__(self):
        if self.c < 0 or self.target_weight < 0:
            raise ValueError("c and target_weight must be >= 0")


def _check_pair(pair):
    if pair.original.architecture() != pair.adapted.architecture():
        raise ValueError("model pair architectures differ")


def diva_loss_and_grad(pair: ModelPair, x, y, c=1.0, mode="softmax", target=None, target_weight=0.0):
    """Per-sample joint loss and its input gradient.

    One reverse pass per model; the adapted model is skipped entirely when its
    weight in the objective is zero.
    """
    _check_pair(pair)
    logits_o, tape_o = pair.original.forward(x, record=True)
    values, d_o = label_prob_loss(y, 1.0, mode)(logits_o)
    _, g = pair.original.backward(tape_o, d_o, param_grads=False)
    use_target = target is not None and target_weight > 0
    if c > 0 or use_target:
        logits_a, tape_a = pair.adapted.forward(x, record=True)
        v_a, d_a = label_prob_loss(y, -c, mode)(logits_a)
        values = values + v_a
        if use_target:
            p = softmax_probs(logits_a)
            onehot = np.zeros_like(p)
            onehot[np.arange(len(p)), np.broadcast_to(target, (len(p),))] = 1
            diff = p - onehot
            values = values - target_weight * (diff**2).sum(axis=1)
            # d/dz of -w * ||p - e_t||^2 through the softmax Jacobian
            u = -2 * target_weight * diff
            d_a = d_a + p * (u - (u * p).sum(axis=1, keepdims=True))
        _, g_a = pair.adapted.backward(tape_a, d_a, param_grads=False)
        g = g + g_a
    return values, g


def diva_loss(pair: ModelPair, x, y, c=1.0, mode="softmax"):
    """Mean over the batch of ``P_orig(x)[y] - c * P_adapted(x)[y]``."""
    x, y = _as_batch(x, y)
    values, _ = diva_loss_and_grad(pair, x, y, c, mode)
    return float(np.mean(values))


def _both_correct(pair, x, y):
    return (_predict(pair.original, x) == y) & (_predict(pair.adapted, x) == y)


def _run(pair, x, y, cfg, target=None, target_weight=0.0, record_iterates=False):
    x, y = _as_batch(x, y)
    _check_pair(pair)
    ok = _both_correct(pair, x, y)
    xs, ys = x[ok], y[ok]
    tgt = None if target is None else np.broadcast_to(np.asarray(target), (len(x),))[ok]
    trace = np.zeros((cfg.steps, len(x)))
    x_adv = x.copy()
    its = None
    if len(xs):
        def objective(xt):
            return diva_loss_and_grad(pair, xt, ys, cfg.c, cfg.prob_mode, tgt, target_weight)

        if tgt is None:
            def success(xt):
                return (_predict(pair.adapted, xt) != ys) & (_predict(pair.original, xt) == ys)
        else:
            def success(xt):
                return (_predict(pair.adapted, xt) == tgt) & (_predict(pair.original, xt) == ys)

        state, sub_its = iterate_sign_ascent(xs, objective, cfg, success_fn=success,
                                             record_iterates=record_iterates)
        x_adv[ok] = state.xt
        t = np.array(state.loss_trace).reshape(-1, len(xs))
        trace = np.zeros((len(t), len(x)))
        trace[:, ok] = t
        if record_iterates:
            its = []
            for it in sub_its:
                full = x.copy()
                full[ok] = it
                its.append(full)
    result = AttackResult(
        x, y, x_adv, _predict(pair.adapted, x_adv), trace,
        pred_orig=_predict(pair.original, x_adv),
        target=None if target is None else np.broadcast_to(np.asarray(target), (len(x),)).copy(),
        rejected=~ok, iterates=its)
    return result


def diva_attack(pair: ModelPair, x, y, cfg: AttackConfig = AttackConfig(variant="diva"), record_iterates=False):
    """Whitebox DIVA: PGD on the joint loss.

    Samples that either model already misclassifies are marked ``rejected``
    and returned unperturbed.
    """
    return _run(pair, x, y, cfg, record_iterates=record_iterates)


def diva_targeted(pair: ModelPair, x, y, objective: DivaObjective, cfg: AttackConfig = AttackConfig(variant="diva_targeted"),
                  record_iterates=False):
    """DIVA with an extra pull of the adapted model's probabilities towards ``onehot(target)``."""
    if objective.target is None:
        raise ValueError("targeted attack needs a target class")
    x, y = _as_batch(x, y)
    target = np.broadcast_to(np.asarray(objective.target, dtype=np.int64), (len(x),))
    if (target == y).any():
        raise ValueError("target class must differ from the true label")
    if not (0 <= target.min() and target.max() < pair.adapted.num_classes):
        raise ValueError("target class out of range")
    cfg = cfg.replace(c=objective.c)
    return _run(pair, x, y, cfg, target=target, target_weight=objective.target_weight,
                record_iterates=record_iterates)


def sweep_c(pair: ModelPair, inputs, labels, cfg: AttackConfig, c_values, batch_size=100):
    """Run whitebox DIVA once per ``c``; rows of ``{c, evasive_rate, attack_rate, n}``.

    Rates are over the samples both models classify correctly.
    """
    c_values = list(c_values)
    if not c_values or min(c_values) < 0:
        raise ValueError("c_values must be a non-empty list of non-negative numbers")
    inputs, labels = _as_batch(inputs, labels)
    keep = _both_correct(pair, inputs, labels)
    if not keep.any():
        raise ValueError("no sample is classified correctly by both models")
    xs, ys = inputs[keep], labels[keep]
    rows = []
    for c in c_values:
        ev = at = 0
        for i in range(0, len(xs), batch_size):
            r = diva_attack(pair, xs[i : i + batch_size], ys[i : i + batch_size], cfg.replace(c=float(c)))
            ev += int(r.evasive_success.sum())
            at += int(r.attack_success.sum())
        rows.append({"c": float(c), "evasive_rate": ev / len(xs), "attack_rate": at / len(xs), "n": len(xs)})
    return rows
