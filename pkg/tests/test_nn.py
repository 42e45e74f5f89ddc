import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from divakit import nn
from divakit.nn import Conv2d, Dense, Flatten, MaxPool2x2, Model, ReLU

from conftest import central_diff, rel_err

SEEDS = range(10)


def _check_layer(layer, x, params, seed):
    """Compare backward() of ``sum(out * r)`` against central differences, in float64."""
    rng = np.random.default_rng(seed + 1000)
    out, cache = layer.forward(x, params)
    r = rng.standard_normal(out.shape)
    dx, grads = layer.backward(r, cache, params)

    def f_x(v):
        return float((layer.forward(v, params)[0] * r).sum())

    assert rel_err(dx, central_diff(f_x, x)) < 1e-3
    for k, p in params.items():
        def f_p(v, k=k):
            return float((layer.forward(x, {**params, k: v})[0] * r).sum())

        assert rel_err(grads[k], central_diff(f_p, p)) < 1e-3, k


@pytest.mark.parametrize("seed", SEEDS)
def test_dense_gradient(seed):
    rng = np.random.default_rng(seed)
    layer = Dense("d", 5, 3)
    params = {"d.weight": rng.standard_normal((5, 3)), "d.bias": rng.standard_normal(3)}
    _check_layer(layer, rng.standard_normal((4, 5)), params, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_gradient(seed):
    rng = np.random.default_rng(seed)
    layer = Conv2d("c", 2, 3)
    params = {"c.weight": rng.standard_normal((3, 3, 2, 3)), "c.bias": rng.standard_normal(3)}
    _check_layer(layer, rng.standard_normal((2, 5, 5, 2)), params, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.01, 1, (3, 7)) * rng.choice([-1, 1], (3, 7))  # stay clear of the kink
    _check_layer(ReLU("r"), x, {}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_gradient(seed):
    rng = np.random.default_rng(seed)
    x = (rng.permutation(2 * 4 * 6 * 2) * 0.01).reshape(2, 4, 6, 2)  # distinct values, no near-ties
    _check_layer(MaxPool2x2("p"), x, {}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_flatten_gradient(seed):
    rng = np.random.default_rng(seed)
    _check_layer(Flatten("f"), rng.standard_normal((2, 3, 3, 2)), {}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((4, 6))
    y = rng.integers(0, 6, 4)
    _, d = nn.ce_loss(y)(z)
    assert rel_err(d, central_diff(lambda v: nn.cross_entropy(v, y), z)) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", ["softmax", "logit"])
def test_label_prob_gradient(seed, mode):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((4, 5))
    y = rng.integers(0, 5, 4)
    fn = nn.label_prob_loss(y, -0.7, mode)
    _, d = fn(z)
    assert rel_err(d, central_diff(lambda v: float(fn(v)[0].sum()), z)) < 1e-3


def _small_cnn(seed):
    layers = [Conv2d("conv1", 1, 3), ReLU("relu1"), MaxPool2x2("pool1"), Flatten("flat"),
              Dense("fc1", 3 * 3 * 3, 6), ReLU("relu2"), Dense("fc2", 6, 4)]
    return Model(layers, (6, 6, 1), 4, seed=seed).astype(np.float64)


def _pattern(model, x, params):
    """ReLU on/off masks and max-pool winners: the piecewise-linear region containing ``x``."""
    _, tape = model.forward(x, record=True, params=params)
    parts = []
    for layer, cache in zip(model.layers, tape.caches):
        if layer.kind == "relu":
            parts.append(cache.reshape(-1))
        elif layer.kind == "maxpool2x2":
            parts.append(cache[0].reshape(-1))
    return np.concatenate(parts).astype(np.int64)


def _smooth_coords(model, x, params, key, coords, h=1e-3):
    """Coordinates whose +-h probes stay inside one linear region (central differences are valid there)."""
    base = _pattern(model, x, params)
    keep = []
    for i in coords:
        ok = True
        for s in (h, -h):
            if key is None:
                v = x.copy()
                v.reshape(-1)[i] += s
                p = _pattern(model, v, params)
            else:
                w = params[key].copy()
                w.reshape(-1)[i] += s
                p = _pattern(model, x, {**params, key: w})
            ok &= np.array_equal(p, base)
        if ok:
            keep.append(i)
    return np.array(keep, dtype=np.int64)


@pytest.mark.parametrize("seed", SEEDS)
def test_network_gradients(seed):
    """Input and parameter gradients of a seeded CNN, on a random coordinate subset."""
    rng = np.random.default_rng(seed)
    model = _small_cnn(seed)
    x = rng.uniform(0, 1, (3, 6, 6, 1))
    y = rng.integers(0, 4, 3)
    pg, ig, _ = nn.grad(model, x, nn.ce_loss(y))

    def loss_x(v):
        return nn.cross_entropy(model.forward(v)[0], y)

    coords = _smooth_coords(model, x, model.params, None, rng.choice(x.size, 30, replace=False))
    assert len(coords) >= 20
    fd = central_diff(loss_x, x, coords=coords)
    assert rel_err(ig.reshape(-1)[coords], fd.reshape(-1)[coords]) < 1e-3
    checked = 0
    for k in ("conv1.weight", "conv1.bias", "fc1.weight", "fc2.bias"):
        p = model.params[k]

        def loss_p(v, k=k):
            return nn.cross_entropy(model.forward(x, params={**model.params, k: v})[0], y)

        c = _smooth_coords(model, x, model.params, k, rng.choice(p.size, min(15, p.size), replace=False))
        if len(c) == 0:
            continue
        checked += len(c)
        fd = central_diff(loss_p, p, coords=c)
        assert rel_err(pg[k].reshape(-1)[c], fd.reshape(-1)[c]) < 1e-3, k
    assert checked >= 10


def test_dense_identity_forward():
    m = Model([Dense("d", 2, 2)], (2,), 2, params={"d.weight": np.eye(2, dtype=np.float32),
                                                   "d.bias": np.zeros(2, dtype=np.float32)})
    np.testing.assert_allclose(m.logits(np.array([[0.3, 0.7]])), [[0.3, 0.7]], rtol=0, atol=1e-7)


def test_relu_forward():
    out, _ = ReLU("r").forward(np.array([[-1.0, 2.0]]), {})
    assert out.tolist() == [[0.0, 2.0]]


def test_two_layer_forward_matches_scalar_oracle():
    m = nn.mlp(3, [4], 2, seed=5)
    x = np.array([[0.2, -0.5, 0.9]], dtype=np.float32)
    w1, b1, w2, b2 = (m.params[k].astype(np.float64) for k in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"))
    h = [max(0.0, sum(x[0, i] * w1[i, j] for i in range(3)) + b1[j]) for j in range(4)]
    want = [sum(h[j] * w2[j, k] for j in range(4)) + b2[k] for k in range(2)]
    np.testing.assert_allclose(m.logits(x)[0], want, rtol=1e-5, atol=1e-6)


def test_shape_error_names_layer():
    m = nn.lenet()
    with pytest.raises(nn.ShapeError):
        m.forward(np.zeros((1, 27, 28, 1), dtype=np.float32))
    with pytest.raises(nn.ShapeError, match="fc"):
        Model([Flatten("flat"), Dense("fc", 10, 2)], (3, 3, 1), 2)


def test_tape_only_when_recording():
    m = nn.mlp(3, [4], 2)
    x = np.ones((2, 3), dtype=np.float32)
    assert m.forward(x)[1] is None
    assert m.forward(x, record=True)[1] is not None
    assert np.array_equal(m.logits(x), m.logits(x))


def test_softmax_examples():
    np.testing.assert_allclose(nn.softmax_probs(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    p = nn.softmax_probs(np.array([[1000.0, 0.0]]))
    assert np.isfinite(p).all() and p[0, 0] == pytest.approx(1.0) and p[0, 1] < 1e-300
    oracle = [math.exp(v) / sum(math.exp(u) for u in (1, 2, 3)) for v in (1, 2, 3)]
    np.testing.assert_allclose(nn.softmax_probs(np.array([[1.0, 2.0, 3.0]]))[0], oracle, atol=1e-6)


def test_cross_entropy_examples():
    z = np.zeros((1, 4))
    z[0, 2] = 100
    assert nn.cross_entropy(z, [2]) < 1e-6
    assert nn.cross_entropy(np.zeros((3, 7)), [0, 3, 6]) == pytest.approx(math.log(7))
    rng = np.random.default_rng(1)
    z = rng.standard_normal((1, 3))
    oracle = -math.log(math.exp(z[0, 1]) / sum(math.exp(v) for v in z[0]))
    assert nn.cross_entropy(z, [1]) == pytest.approx(oracle, abs=1e-6)
    with pytest.raises(ValueError):
        nn.cross_entropy(z, [3])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(z):
    p = nn.softmax_probs(z)
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50, allow_nan=False)),
       st.lists(st.integers(0, 3), min_size=3, max_size=3))
def test_cross_entropy_non_negative(z, y):
    assert nn.cross_entropy(z, y) >= 0


def test_grad_linear_layer_is_weight_row_sum():
    rng = np.random.default_rng(0)
    m = Model([Dense("d", 4, 3)], (4,), 3, seed=0)
    x = rng.standard_normal((2, 4)).astype(np.float32)
    _, ig, _ = nn.grad(m, x, lambda z: (z.sum(axis=1), np.ones_like(z)))
    np.testing.assert_allclose(ig, np.tile(m.params["d.weight"].sum(axis=1), (2, 1)), rtol=1e-6)


def test_dead_network_has_zero_input_gradient():
    m = nn.mlp(5, [4], 3)
    for k in m.params:
        m.params[k][...] = 0
    _, ig, _ = nn.grad(m, np.ones((2, 5), dtype=np.float32), nn.ce_loss([0, 1]))
    assert not ig.any()


def _blobs(seed=0, n=200):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.standard_normal((n, 2)) * 0.5 + np.where(y[:, None] == 1, 2.0, -2.0)
    return x.astype(np.float32), y


def test_sgd_zero_epochs_is_noop():
    m = nn.mlp(2, [8], 2)
    out = nn.sgd_train(m, _blobs(), 0.1, 0)
    assert all(np.array_equal(out.params[k], m.params[k]) for k in m.params)


def test_sgd_learns_separable_blobs():
    x, y = _blobs()
    log = []
    m = nn.sgd_train(nn.mlp(2, [8], 2, seed=1), (x, y), 0.05, 20, log=log)
    assert nn.accuracy(m, x, y) >= 0.99
    assert all(b <= a + 1e-9 for a, b in zip(log, log[1:]))


def test_sgd_deterministic():
    a = nn.sgd_train(nn.mlp(2, [8], 2), _blobs(), 0.05, 3, seed=4)
    b = nn.sgd_train(nn.mlp(2, [8], 2), _blobs(), 0.05, 3, seed=4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sgd_divergence_raises():
    x, y = _blobs()
    with pytest.raises(nn.NumericalError):
        nn.sgd_train(nn.mlp(2, [8], 2), (x * 1e30, y), 1e10, 3)
    with pytest.raises(ValueError):
        nn.sgd_train(nn.mlp(2, [8], 2), (x, y), 0.0, 1)


def test_sgd_masks_keep_zeros():
    m = nn.mlp(2, [8], 2)
    mask = {"fc1.weight": (np.arange(16).reshape(2, 8) % 2).astype(np.float32)}
    opt = nn.SGD(m.params, 0.1, 0.9)
    x, y = _blobs()
    for _ in range(5):
        pg, _, _ = nn.grad(m, x, nn.ce_loss(y))
        opt.step(pg, masks=mask)
    assert not m.params["fc1.weight"][mask["fc1.weight"] == 0].any()


def test_predict_topk_examples():
    m = Model([Dense("d", 2, 2)], (2,), 2, params={"d.weight": np.eye(2, dtype=np.float32),
                                                   "d.bias": np.zeros(2, dtype=np.float32)})
    assert nn.predict_topk(m, np.array([[0.1, 0.9]]), 1).tolist() == [[1]]
    assert nn.predict_topk(m, np.array([[0.5, 0.5]]), 2).tolist() == [[0, 1]]
    with pytest.raises(ValueError):
        nn.predict_topk(m, np.array([[0.5, 0.5]]), 3)
    with pytest.raises(ValueError):
        nn.predict_topk(m, np.array([[0.5, 0.5]]), 0)


def test_predict_topk_matches_full_sort():
    m = nn.lenet(seed=2)
    x = np.random.default_rng(2).uniform(0, 1, (5, 28, 28, 1)).astype(np.float32)
    z = m.logits(x)
    want = [sorted(range(10), key=lambda c: (-z[i, c], c))[:5] for i in range(5)]
    assert nn.predict_topk(m, x, 5).tolist() == want


def test_penultimate_examples():
    m = nn.mlp(3, [4], 2, seed=1)
    x = np.random.default_rng(0).standard_normal((2, 3)).astype(np.float32)
    # final dense input is the relu output of the first layer
    h = np.maximum(x @ m.params["fc1.weight"] + m.params["fc1.bias"], 0)
    np.testing.assert_allclose(nn.penultimate_activations(m, x), h, rtol=1e-6)
    ident = Model([Dense("a", 3, 3), Dense("b", 3, 2)], (3,), 2, seed=0)
    ident.params["a.weight"] = np.eye(3, dtype=np.float32)
    ident.params["a.bias"] = np.zeros(3, dtype=np.float32)
    np.testing.assert_array_equal(nn.penultimate_activations(ident, x), x)
    with pytest.raises(ValueError):
        nn.penultimate_activations(Model([Dense("d", 3, 2)], (3,), 2), x)


def test_penultimate_consistent_with_tape():
    m = nn.lenet(seed=4)
    x = np.random.default_rng(4).uniform(0, 1, (3, 28, 28, 1)).astype(np.float32)
    _, tape = m.forward(x, record=True)
    np.testing.assert_array_equal(nn.penultimate_activations(m, x), tape.outputs[-2])
    assert nn.penultimate_activations(m, x).shape == (3, 64)


def test_model_validation():
    with pytest.raises(ValueError):
        Model([Dense("d", 2, 2), Dense("d", 2, 2)], (2,), 2)
    with pytest.raises(nn.ShapeError):
        Model([Dense("d", 2, 3)], (2,), 2)
    with pytest.raises(ValueError):
        Model([Dense("d", 2, 2)], (2,), 2, params={"d.weight": np.zeros((2, 2))})


def test_he_init_seeded():
    a, b = nn.lenet(seed=9), nn.lenet(seed=9)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert all(v.dtype == np.float32 for v in a.params.values())
    assert not np.array_equal(a.params["conv1.weight"], nn.lenet(seed=10).params["conv1.weight"])
