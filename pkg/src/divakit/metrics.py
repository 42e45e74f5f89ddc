"""Attack evaluation: success metrics, confidence delta, DSSIM, PCA projection."""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapt import ModelPair, instability
from .attack import AttackConfig, run_single_model_attack
from .data import DataError, Dataset
from .diva import diva_attack
from .nn import predict_proba, topk_from_logits

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def dssim(a, b, window=7):
    """Structural dissimilarity ``(1 - SSIM) / 2`` of two images in [0, 1].

    SSIM uses a uniform ``window x window`` window at stride 1 (no padding),
    averaged over all windows and channels. Images are ``(H, W)`` or ``(H, W, C)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"images must be at least {window}x{window}")
    if np.array_equal(a, b):
        return 0.0

    def mean(v):
        return np.lib.stride_tricks.sliding_window_view(v, (window, window), axis=(0, 1)).mean(axis=(-2, -1))

    mu_a, mu_b = mean(a), mean(b)
    var_a = mean(a * a) - mu_a * mu_a
    var_b = mean(b * b) - mu_b * mu_b
    cov = mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    ssim = float((num / den).mean())
    return float(np.clip((1 - ssim) / 2, 0.0, 1.0))


def pca2(activations, iters=200, tol=1e-7, seed=0):
    """Project rows onto the top two principal components.

    Power iteration with deflation on the covariance matrix. Each component's
    sign is fixed so that its largest-magnitude coordinate is positive.
    Returns ``(projected (n, 2), components (2, d), variances (2,))``.
    """
    x = np.asarray(activations, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError("pca2 needs an (n, d) matrix with n >= 2 and d >= 2")
    x = x - x.mean(axis=0)
    cov = x.T @ x / (len(x) - 1)
    if np.abs(cov).max() == 0:
        raise ValueError("pca2: data has rank 0")
    rng = np.random.default_rng(seed)
    comps, variances = [], []
    for _ in range(2):
        v = rng.standard_normal(cov.shape[0])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm < 1e-300:
                break
            w /= norm
            done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
            v = w
            if done:
                break
        lam = float(v @ cov @ v)
        v = v * np.sign(v[np.argmax(np.abs(v))])
        comps.append(v)
        variances.append(max(lam, 0.0))
        cov = cov - lam * np.outer(v, v)
    comps = np.array(comps)
    return x @ comps.T, comps, np.array(variances)


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class MetricsReport:
    n_samples: int
    top1_evasive_rate: float
    top5_evasive_rate: float
    top5_orig_only_rate: float
    attack_only_rate: float
    confidence_delta_mean: float
    clean_confidence_delta_mean: float
    instability: float
    dssim_max: float
    dssim_mean: float
    dssim_threshold: float
    dssim_flagged: list
    n_rejected: int
    config_hash: str
    seed: int
    samples: list = field(default_factory=list, repr=False)

    def summary(self):
        d = asdict(self)
        d.pop("samples")
        return d

    def to_dict(self):
        return asdict(self)


SAMPLE_FIELDS = ("index", "label", "pred_orig", "pred_adapted", "top1_evasive", "top5_evasive",
                 "top5_orig_only", "attack_only", "conf_orig", "conf_adapted", "confidence_delta",
                 "dssim", "dssim_flag", "rejected")


def run_attack(pair: ModelPair, x, y, cfg: AttackConfig):
    """Generate adversarial inputs on ``pair``; baselines attack the adapted model alone."""
    if cfg.variant == "diva":
        r = diva_attack(pair, x, y, cfg)
        return r.x_adv, r.rejected
    if cfg.variant == "diva_targeted":
        raise ValueError("use diva.diva_targeted for targeted attacks")
    r = run_single_model_attack(pair.adapted, x, y, cfg)
    return r.x_adv, np.zeros(len(y), dtype=bool)


def _threads():
    try:
        return max(1, int(os.environ.get("DIVA_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(pair: ModelPair, eval_pair: ModelPair, dataset: Dataset, cfg: AttackConfig,
             batch_size=50, dssim_threshold=0.01, instability_data=None, return_adversarial=False):
    """Attack with ``pair`` and judge the result on ``eval_pair``.

    For whitebox runs the two pairs are the same object; for surrogate-based
    runs ``pair`` is the attacker's reconstruction and ``eval_pair`` the victim.
    Work is split into fixed chunks of ``batch_size`` (run on up to
    ``DIVA_THREADS`` threads) and reassembled by sample index.
    """
    if len(dataset) == 0:
        raise DataError("evaluation dataset is empty")
    x, y = dataset.inputs, dataset.labels
    chunks = [(i, min(i + batch_size, len(y))) for i in range(0, len(y), batch_size)]

    def work(bounds):
        lo, hi = bounds
        c = cfg.replace(seed=cfg.seed + lo) if cfg.variant == "rfgsm" else cfg
        return run_attack(pair, x[lo:hi], y[lo:hi], c)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        parts = list(pool.map(work, chunks))
    x_adv = np.concatenate([p[0] for p in parts])
    rejected = np.concatenate([p[1] for p in parts])

    rows = np.arange(len(y))
    p_orig = predict_proba(eval_pair.original, x_adv)
    p_adap = predict_proba(eval_pair.adapted, x_adv)
    pred_o, pred_a = p_orig.argmax(1), p_adap.argmax(1)
    top5_o = topk_from_logits(np.log(p_orig + 1e-30), min(5, p_orig.shape[1]))
    in_top5 = (top5_o == pred_a[:, None]).any(axis=1)
    attack_only = pred_a != y
    top1 = attack_only & (pred_o == y)
    top5 = top1 & ~in_top5
    top5_orig_only = ~in_top5
    conf_o, conf_a = p_orig[rows, y], p_adap[rows, y]
    clean_o = predict_proba(eval_pair.original, x)[rows, y]
    clean_a = predict_proba(eval_pair.adapted, x)[rows, y]
    d = np.array([dssim(a[..., 0] if a.shape[-1] == 1 else a, b[..., 0] if b.shape[-1] == 1 else b)
                  for a, b in zip(x, x_adv)])
    flagged = [int(i) for i in np.flatnonzero(d > dssim_threshold)]
    inst_x, inst_y = instability_data if instability_data is not None else (x, y)
    samples = [
        {"index": int(i), "label": int(y[i]), "pred_orig": int(pred_o[i]), "pred_adapted": int(pred_a[i]),
         "top1_evasive": bool(top1[i]), "top5_evasive": bool(top5[i]), "top5_orig_only": bool(top5_orig_only[i]),
         "attack_only": bool(attack_only[i]), "conf_orig": float(conf_o[i]), "conf_adapted": float(conf_a[i]),
         "confidence_delta": float(conf_o[i] - conf_a[i]), "dssim": float(d[i]),
         "dssim_flag": bool(d[i] > dssim_threshold), "rejected": bool(rejected[i])}
        for i in rows
    ]
    report = MetricsReport(
        n_samples=len(y),
        top1_evasive_rate=float(top1.mean()),
        top5_evasive_rate=float(top5.mean()),
        top5_orig_only_rate=float(top5_orig_only.mean()),
        attack_only_rate=float(attack_only.mean()),
        confidence_delta_mean=float((conf_o - conf_a).mean()),
        clean_confidence_delta_mean=float((clean_o - clean_a).mean()),
        instability=instability(eval_pair, (inst_x, inst_y)),
        dssim_max=float(d.max()),
        dssim_mean=float(d.mean()),
        dssim_threshold=float(dssim_threshold),
        dssim_flagged=flagged,
        n_rejected=int(rejected.sum()),
        config_hash=config_hash({"attack": asdict(cfg), "batch_size": batch_size,
                                 "dssim_threshold": dssim_threshold, "dataset": dataset.id, "n": len(y)}),
        seed=cfg.seed,
        samples=samples,
    )
    if return_adversarial:
        return report, x_adv
    return report
