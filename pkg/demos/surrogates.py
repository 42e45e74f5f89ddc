"""Attacks without the victim's parameters.

Semi-blackbox: the attacker holds the int8 model and distills a
full-precision stand-in from it. Blackbox: the attacker only gets
probabilities back and rebuilds both models. Adversarial inputs are crafted
on the reconstruction and scored on the real pair.

    python demos/surrogates.py [blackbox-epochs]
"""

import sys

import numpy as np

from divakit import data, experiment, metrics, surrogate
from divakit.attack import AttackConfig


def main(bb_epochs=30):
    cfg = experiment.reference_config(0)
    train, transfer, val = experiment.load_data(cfg)
    pair = experiment.adapt_model(cfg, experiment.train_original(cfg, train), train)
    ev = data.filter_correct(pair, val).subset(np.arange(200))

    pgd = metrics.evaluate(pair, pair, ev, AttackConfig(variant="pgd"))
    print(f"whitebox PGD evasive {pgd.top1_evasive_rate:.3f}")

    semi = surrogate.build_semi_blackbox(
        pair.adapted, surrogate.DistillConfig(temperature=1.0, mix_lambda=1.0, epochs=6), transfer,
        victim_train=train)
    r = metrics.evaluate(semi, pair, ev, AttackConfig(variant="diva"))
    print(f"semi-blackbox: agreement {surrogate.agreement(semi.original, pair.adapted, val.inputs):.3f}"
          f"  DIVA evasive on the real pair {r.top1_evasive_rate:.3f}")

    oracle = surrogate.query_access(pair.adapted)
    bb = surrogate.build_blackbox(oracle, pair.adapted.architecture(),
                                  surrogate.DistillConfig(temperature=1.0, mix_lambda=1.0, epochs=bb_epochs),
                                  transfer, victim_train=train)
    r = metrics.evaluate(bb, pair, ev, AttackConfig(variant="diva"))
    own = metrics.evaluate(bb, bb, ev, AttackConfig(variant="diva"))
    print(f"blackbox: {oracle.samples} queried samples, agreement "
          f"{surrogate.agreement(bb.original, pair.adapted, val.inputs):.3f}")
    print(f"  DIVA evasive on the surrogate pair {own.top1_evasive_rate:.3f}, on the real pair {r.top1_evasive_rate:.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 30)
