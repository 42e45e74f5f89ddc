"""Robust training against DIVA.

Each defense retrains only the int8 model (the full-precision one stays
frozen), then the same 200 samples are attacked again. Takes several minutes
on one core; pass a smaller training subset to speed it up.

    python demos/defenses.py [n_train]
"""

import sys
import time

import numpy as np

from divakit import adapt, data, defend, experiment, metrics
from divakit.attack import AttackConfig


def main(n_train=1500):
    cfg = experiment.reference_config(0)
    train, _, val = experiment.load_data(cfg)
    pair = experiment.adapt_model(cfg, experiment.train_original(cfg, train), train)
    ev = data.filter_correct(pair, val).subset(np.arange(200))
    sub = (train.inputs[:n_train], train.labels[:n_train])

    def show(name, p, secs=0.0):
        r = metrics.evaluate(p, p, ev, AttackConfig(variant="diva"))
        print(f"{name:>26}: DIVA evasive {r.top1_evasive_rate:.3f}  instability {adapt.instability(p, val.xy):.4f}"
              f"  ({secs:.0f}s)")

    show("undefended", pair)
    for variant in ("minimax_diva_qat", "minimax_diva_qat_distill", "distill_only"):
        t = time.perf_counter()
        out = defend.defend(pair, sub, defend.DefenseConfig(variant=variant, epochs=2))
        show(variant, out, time.perf_counter() - t)
        assert defend.params_checksum(out.original) == defend.params_checksum(pair.original)


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 1500)
