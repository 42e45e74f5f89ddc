import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from divakit import attack, data, nn
from divakit.attack import AttackConfig
from divakit.nn import Dense, Flatten, Model

EPS = 8 / 255


def _linear(seed=0):
    """Flatten + Dense on 2x2x1 inputs, 3 classes."""
    rng = np.random.default_rng(seed)
    params = {"fc.weight": rng.standard_normal((4, 3)).astype(np.float32),
              "fc.bias": rng.standard_normal(3).astype(np.float32)}
    return Model([Flatten("f"), Dense("fc", 4, 3)], (2, 2, 1), 3, params)


def _batch(seed, n=6):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, (n, 2, 2, 1)).astype(np.float32), rng.integers(0, 3, n)


def _in_box(xt, x0, eps):
    return np.all(np.abs(xt.astype(np.float64) - x0) <= eps + 1e-6) and xt.min() >= 0 and xt.max() <= 1


# ------------------------------------------------------------ clip_project


def test_clip_project_identity():
    x = np.random.default_rng(0).uniform(0, 1, (3, 4)).astype(np.float32)
    assert np.array_equal(attack.clip_project(x, x, 0.1), x)


def test_clip_project_plus_one():
    x = np.array([0.2, 0.5, 0.95], np.float32)
    out = attack.clip_project(x + 1, x, 0.1)
    assert np.allclose(out, [0.3, 0.6, 1.0])


def test_clip_project_shape_mismatch():
    with pytest.raises(ValueError):
        attack.clip_project(np.zeros(3), np.zeros(4), 0.1)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, 20, elements=st.floats(0, 1, width=32)),
       arrays(np.float32, 20, elements=st.floats(-2, 3, width=32)),
       st.floats(1e-3, 1.0))
def test_clip_project_elementwise_oracle(x0, xt, eps):
    out = attack.clip_project(xt, x0, eps)
    for i in range(len(x0)):
        lo, hi = max(0.0, float(x0[i]) - eps), min(1.0, float(x0[i]) + eps)
        want = min(max(float(xt[i]), lo), hi)
        assert abs(float(out[i]) - want) <= 1e-7


# -------------------------------------------------------------------- FGSM


def test_fgsm_sign_matches_closed_form():
    model = _linear(3)
    x, y = _batch(4)
    w = model.params["fc.weight"].astype(np.float64)
    logits = x.reshape(len(x), -1).astype(np.float64) @ w + model.params["fc.bias"]
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(len(y)), y] -= 1
    g = (p @ w.T).reshape(x.shape)
    eps = 1 / 255
    xa = attack.fgsm(model, x, y, eps)
    want = attack.clip_project(x + eps * np.sign(g).astype(np.float32), x, eps)
    assert np.array_equal(xa, want)
    assert np.max(np.abs(xa - x)) <= eps + 1e-7


def test_fgsm_dead_net_is_noop():
    model = _linear()
    model.params["fc.weight"][:] = 0
    x, y = _batch(1)
    assert np.array_equal(attack.fgsm(model, x, y, EPS), x)


def test_fgsm_equals_one_step_pgd(small_pair, small_eval):
    x, y = small_eval.inputs[:20], small_eval.labels[:20]
    res = attack.pgd(small_pair.adapted, x, y, AttackConfig(steps=1, alpha=EPS, epsilon=EPS))
    assert np.array_equal(attack.fgsm(small_pair.adapted, x, y, EPS), res.x_adv)


# ------------------------------------------------------------------ R+FGSM


def test_rfgsm_zero_sigma_is_fgsm(small_pair, small_eval):
    x, y = small_eval.inputs[:10], small_eval.labels[:10]
    m = small_pair.original
    assert np.array_equal(attack.rfgsm(m, x, y, EPS, 0.0), attack.fgsm(m, x, y, EPS))


def test_rfgsm_bounds_and_determinism(small_pair, small_eval):
    x, y = small_eval.inputs[:10], small_eval.labels[:10]
    m = small_pair.original
    a = attack.rfgsm(m, x, y, EPS, 4 / 255, seed=5)
    assert _in_box(a, x, EPS)
    assert np.array_equal(a, attack.rfgsm(m, x, y, EPS, 4 / 255, seed=5))


def test_rfgsm_sigma_must_be_below_epsilon():
    x, y = _batch(0)
    with pytest.raises(ValueError):
        attack.rfgsm(_linear(), x, y, EPS, EPS)


# --------------------------------------------------------------------- PGD


def test_pgd_zero_steps():
    model = _linear()
    x, y = _batch(0)
    y = nn.predict(model, x)  # all correct, so an untouched input is a failed attack
    res = attack.pgd(model, x, y, AttackConfig(steps=0))
    assert np.array_equal(res.x_adv, x)
    assert not res.attack_success.any()
    assert res.loss_trace.shape == (0, len(x))


def test_pgd_iterates_in_box_and_trace_length(small_pair, small_eval):
    x, y = small_eval.inputs[:16], small_eval.labels[:16]
    cfg = AttackConfig(steps=12)
    res = attack.pgd(small_pair.adapted, x, y, cfg, record_iterates=True)
    assert len(res.iterates) == cfg.steps + 1
    assert all(_in_box(it, x, cfg.epsilon) for it in res.iterates)
    assert res.loss_trace.shape == (cfg.steps, len(x))


def test_pgd_gradient_taken_at_iterate():
    model = _linear(1)
    x, y = _batch(2)
    cfg = AttackConfig(steps=3, alpha=2 / 255)
    res = attack.pgd(model, x, y, cfg, record_iterates=True)
    for t in range(cfg.steps):
        _, g = attack.ce_objective(model, y)(res.iterates[t])
        want = attack.clip_project(res.iterates[t] + cfg.alpha * np.sign(g), x, cfg.epsilon)
        assert np.array_equal(res.iterates[t + 1], want)


def test_pgd_fools_reference_quantized_model(ref_setup):
    _, _, _, val, pair = ref_setup
    ev = data.filter_correct(pair, val)
    res = attack.pgd(pair.adapted, ev.inputs[:200], ev.labels[:200], AttackConfig())
    assert res.attack_success.mean() >= 0.9


def test_stop_on_success_keeps_successful_samples():
    model = _linear(0)
    x, y = _batch(1, n=8)
    cfg = AttackConfig(steps=20, epsilon=0.5, alpha=0.05, stop_on_success=True)
    res = attack.pgd(model, x, y, cfg)
    assert _in_box(res.x_adv, x, cfg.epsilon)


# ------------------------------------------------------------ momentum PGD


def test_momentum_zero_equals_pgd(small_pair, small_eval):
    x, y = small_eval.inputs[:16], small_eval.labels[:16]
    cfg = AttackConfig(momentum_mu=0.0)
    a = attack.momentum_pgd(small_pair.adapted, x, y, cfg.replace(variant="momentum_pgd"), record_iterates=True)
    b = attack.pgd(small_pair.adapted, x, y, cfg, record_iterates=True)
    for u, v in zip(a.iterates, b.iterates):
        assert np.array_equal(u, v)


def test_momentum_bounds_and_reproducible(small_pair, small_eval):
    x, y = small_eval.inputs[:16], small_eval.labels[:16]
    cfg = AttackConfig(variant="momentum_pgd")
    a = attack.momentum_pgd(small_pair.adapted, x, y, cfg, record_iterates=True)
    assert all(_in_box(it, x, cfg.epsilon) for it in a.iterates)
    b = attack.momentum_pgd(small_pair.adapted, x, y, cfg)
    assert np.array_equal(a.x_adv, b.x_adv)
    assert np.array_equal(a.loss_trace, b.loss_trace)


# -------------------------------------------------------------- properties


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["pgd", "momentum_pgd", "fgsm", "rfgsm"]),
       st.floats(1 / 255, 0.3), st.integers(0, 6))
def test_every_variant_respects_box(seed, variant, eps, steps):
    model = _linear(seed)
    x, y = _batch(seed)
    cfg = AttackConfig(variant=variant, epsilon=eps, alpha=eps / 2, steps=steps, sigma=eps / 2, seed=seed)
    res = attack.run_single_model_attack(model, x, y, cfg)
    assert _in_box(res.x_adv, x, eps)


def test_config_invariants():
    with pytest.raises(ValueError):
        AttackConfig(alpha=0.1, epsilon=0.05)
    with pytest.raises(ValueError):
        AttackConfig(steps=-1)
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0)
    with pytest.raises(ValueError):
        AttackConfig(variant="cw")
    assert AttackConfig().epsilon == 8 / 255 and AttackConfig().alpha == 1 / 255 and AttackConfig().steps == 20


def test_batch_size_mismatch():
    x, _ = _batch(0)
    with pytest.raises(ValueError):
        attack.pgd(_linear(), x, np.zeros(2, int))
