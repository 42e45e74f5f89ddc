import numpy as np
import pytest

from divakit import adapt, data, nn


def central_diff(f, x, h=1e-3, coords=None):
    """Central finite differences of scalar ``f`` at ``x`` (float64), optionally on a subset of coordinates."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))


@pytest.fixture(scope="session")
def small_data():
    # higher-contrast gratings so a tiny net learns them in a few epochs
    return data.synth_splits(7, 800, 200, 400, contrast=(0.3, 0.45), noise=0.05, jitter_deg=2.0)


@pytest.fixture(scope="session")
def small_pair(small_data):
    """Quickly trained small CNN and its int8 twin."""
    train, _, _ = small_data
    model = nn.sgd_train(nn.lenet(channels=(4, 8), hidden=32, seed=3), train.xy, 0.02, 4, seed=3)
    q = adapt.qat_train(model, train.xy, lr=0.01, epochs=1, seed=3, label_smoothing=0.1)
    return adapt.ModelPair(model, q)


@pytest.fixture(scope="session")
def small_eval(small_pair, small_data):
    return data.filter_correct(small_pair, small_data[2])


@pytest.fixture(scope="session")
def ref_setup():
    """The desk-scale reference run (seed 0): splits and the trained pair."""
    from divakit import experiment

    cfg = experiment.reference_config(0)
    train, transfer, val = experiment.load_data(cfg)
    model = experiment.train_original(cfg, train)
    pair = experiment.adapt_model(cfg, model, train)
    return cfg, train, transfer, val, pair
