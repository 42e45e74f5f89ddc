"""Surrogate reconstruction by distillation from query access.

The attacker only ever sees a teacher *function* mapping a batch of inputs to
probability vectors. It can be in-process (:func:`query_access`) or a model
served from another process over line-delimited JSON on stdio
(:func:`serve` / :class:`RemoteTeacher`).
"""

from __future__ import annotations

import base64
import json
import subprocess
import sys
from dataclasses import dataclass

import numpy as np

from .adapt import AdaptedModel, ModelPair, load_models, qat_train
from .data import DataError, Dataset, check_disjoint
from .nn import SGD, Model, NumericalError, iterate_batches, layer_from_dict, log_softmax, predict_proba

TEACHER_EPS = 1e-12


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 4.0
    mix_lambda: float = 0.5
    epochs: int = 4
    lr: float = 0.01
    batch_size: int = 32
    momentum: float = 0.9
    query_budget: int | None = None  # max transfer samples sent to the teacher
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.mix_lambda <= 1:
            raise ValueError("mix_lambda must be in [0, 1]")
        if self.epochs < 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0 and lr > 0")
        if self.query_budget is not None and self.query_budget < 0:
            raise ValueError("query_budget must be >= 0")


class QueryOracle:
    """Probability-only view of a classifier that counts its calls.

    The wrapped model lives in a closure, so nothing reachable from the
    oracle exposes parameters.
    """

    def __init__(self, model, batch_size=256):
        def _query(x):
            return predict_proba(model, x, batch_size)

        self._query = _query
        self.calls = 0
        self.samples = 0

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float32)
        self.calls += 1
        self.samples += len(x)
        return self._query(x)


def query_access(model, batch_size=256):
    return QueryOracle(model, batch_size)


def teacher_logits(probs):
    return np.log(np.asarray(probs, dtype=np.float64) + TEACHER_EPS)


def distill_loss(student_logits, teacher_probs, temperature=4.0, mix_lambda=0.5):
    """Per-sample mixed loss and its gradient w.r.t. the student logits (batch mean).

    ``lambda * CE(student, argmax teacher) + (1 - lambda) * T^2 * KL(q_t || q_s)``
    where ``q = softmax(logits / T)``.
    """
    z = np.asarray(student_logits, dtype=np.float64)
    t = teacher_logits(teacher_probs)
    n = len(z)
    hard = t.argmax(axis=1)
    rows = np.arange(n)
    ls = log_softmax(z)
    ce = -ls[rows, hard]
    lq_t = log_softmax(t / temperature)
    lq_s = log_softmax(z / temperature)
    q_t, q_s = np.exp(lq_t), np.exp(lq_s)
    kl = np.maximum((q_t * (lq_t - lq_s)).sum(axis=1), 0.0)
    values = mix_lambda * ce + (1 - mix_lambda) * temperature**2 * kl
    onehot = np.zeros_like(z)
    onehot[rows, hard] = 1
    d = mix_lambda * (np.exp(ls) - onehot) + (1 - mix_lambda) * temperature * (q_s - q_t)
    return values, (d / n).astype(np.asarray(student_logits).dtype)


def _transfer_inputs(transfer, cfg):
    x = transfer.inputs if isinstance(transfer, Dataset) else np.asarray(transfer, dtype=np.float32)
    if cfg.query_budget is not None:
        x = x[: cfg.query_budget]
    if len(x) == 0:
        raise DataError("empty transfer set: no teacher predictions to learn from")
    return x


def query_teacher(teacher, inputs, chunk=256):
    probs = np.concatenate([teacher(inputs[i : i + chunk]) for i in range(0, len(inputs), chunk)])
    if probs.shape[0] != len(inputs) or not np.isfinite(probs).all():
        raise DataError("teacher returned malformed predictions")
    return probs


def distill(teacher, student: Model, cfg: DistillConfig, transfer, victim_train: Dataset | None = None,
            teacher_probs=None):
    """Train a copy of ``student`` to imitate ``teacher`` on the transfer inputs.

    ``teacher`` is any callable returning probability vectors. If
    ``victim_train`` is given, the transfer set is checked disjoint from it
    before any query is made.
    """
    if victim_train is not None:
        if not isinstance(transfer, Dataset):
            raise DataError("disjointness check needs a Dataset transfer set")
        check_disjoint(victim_train, transfer)
    x = _transfer_inputs(transfer, cfg)
    probs = query_teacher(teacher, x) if teacher_probs is None else teacher_probs
    student = student.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(student.params, cfg.lr, cfg.momentum)
    for epoch in range(cfg.epochs):
        for idx in iterate_batches(len(x), cfg.batch_size, rng):
            logits, tape = student.forward(x[idx], record=True)
            values, d = distill_loss(logits, probs[idx], cfg.temperature, cfg.mix_lambda)
            if not np.isfinite(values).all():
                raise NumericalError(f"distillation diverged in epoch {epoch}")
            grads, _ = student.backward(tape, d)
            opt.step(grads)
    return student


def agreement(a, b, inputs):
    """Top-1 agreement between two classifiers (or probability callables)."""
    pa = a(inputs) if callable(a) and not hasattr(a, "forward") else predict_proba(a, inputs)
    pb = b(inputs) if callable(b) and not hasattr(b, "forward") else predict_proba(b, inputs)
    return float((pa.argmax(1) == pb.argmax(1)).mean())


def build_semi_blackbox(adapted: AdaptedModel, cfg: DistillConfig, transfer, victim_train=None):
    """Full-precision surrogate for the hidden original, distilled from the visible adapted model.

    The student starts from the adapted model's dequantized weights.
    """
    try:
        student = adapted.dequantized_model()
    except Exception as exc:  # noqa: BLE001
        raise ValueError(f"cannot extract architecture from adapted model: {exc}") from exc
    surrogate = distill(query_access(adapted), student, cfg, transfer, victim_train)
    return ModelPair(surrogate, adapted)


def model_from_hint(arch_hint, seed=0):
    layers, input_shape, num_classes = arch_hint
    layers = [layer_from_dict(d) if isinstance(d, dict) else d for d in layers]
    return Model(layers, input_shape, num_classes, seed=seed)


def build_blackbox(adapted_query, arch_hint, cfg: DistillConfig, transfer, victim_train=None,
                   qat_epochs=2, qat_lr=0.02, bits=8, qat_label_smoothing=0.1):
    """Surrogate original and surrogate adapted model from query access alone.

    The fp surrogate is distilled from scratch; the adapted surrogate is
    derived from it by quantization-aware training on the teacher's labels.
    """
    if victim_train is not None and isinstance(transfer, Dataset):
        check_disjoint(victim_train, transfer)
    x = _transfer_inputs(transfer, cfg)
    probs = query_teacher(adapted_query, x)
    student = model_from_hint(arch_hint, cfg.seed)
    surrogate = distill(adapted_query, student, cfg, x, teacher_probs=probs)
    labels = probs.argmax(axis=1)
    surrogate_adapted = qat_train(surrogate, (x, labels), lr=qat_lr, epochs=qat_epochs, bits=bits,
                                  seed=cfg.seed, label_smoothing=qat_label_smoothing)
    return ModelPair(surrogate, surrogate_adapted)


# ------------------------------------------------------------ stdio protocol


def _encode(a):
    a = np.ascontiguousarray(a, dtype="<f4")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(d):
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f4").reshape(d["shape"])


def serve(model, instream=None, outstream=None):
    """Answer query lines ``{"inputs": {...}}`` with ``{"probs": {...}}`` until EOF or ``{"op": "close"}``."""
    instream = instream or sys.stdin
    outstream = outstream or sys.stdout
    for line in instream:
        if not line.strip():
            continue
        try:
            req = json.loads(line)
            if req.get("op") == "close":
                break
            resp = {"probs": _encode(predict_proba(model, _decode(req["inputs"])))}
        except Exception as exc:  # noqa: BLE001 - report and keep serving
            resp = {"error": str(exc)}
        outstream.write(json.dumps(resp) + "\n")
        outstream.flush()


class RemoteTeacher:
    """Query client for a model served by ``python -m divakit.surrogate CHECKPOINT NAME``."""

    def __init__(self, checkpoint_path, name="adapted"):
        self.proc = subprocess.Popen([sys.executable, "-m", "divakit.surrogate", str(checkpoint_path), name],
                                     stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True)
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        self.proc.stdin.write(json.dumps({"inputs": _encode(x)}) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise RuntimeError("teacher process closed the stream")
        resp = json.loads(line)
        if "error" in resp:
            raise RuntimeError(f"teacher error: {resp['error']}")
        return _decode(resp["probs"]).copy()

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.write(json.dumps({"op": "close"}) + "\n")
            self.proc.stdin.close()
            self.proc.wait(timeout=30)
            self.proc.stdout.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 2:
        sys.stderr.write("usage: python -m divakit.surrogate CHECKPOINT MODEL_NAME\n")
        return 2
    models, _ = load_models(argv[0])
    serve(models[argv[1]])
    return 0


if __name__ == "__main__":
    sys.exit(main())
