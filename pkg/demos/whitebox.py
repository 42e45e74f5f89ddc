"""Whitebox walk-through on the desk-scale reference pair.

Trains a small CNN on synthetic gratings, builds its int8 twin, then compares
PGD (which only looks at the quantized model) with DIVA (which also keeps the
full-precision model correct). Finishes with the c sweep and a 2-D PCA of the
penultimate activations before and after the attack.

    python demos/whitebox.py
"""

import time

import numpy as np

from divakit import adapt, data, diva, experiment, metrics, nn
from divakit.attack import AttackConfig


def main():
    cfg = experiment.reference_config(0)
    train, _, val = experiment.load_data(cfg)

    t = time.perf_counter()
    model = experiment.train_original(cfg, train)
    pair = experiment.adapt_model(cfg, model, train)
    print(f"trained pair in {time.perf_counter() - t:.1f}s")
    print(f"  accuracy  original {nn.accuracy(pair.original, *val.xy):.3f}"
          f"  adapted {nn.accuracy(pair.adapted, *val.xy):.3f}")
    print(f"  instability {adapt.instability(pair, val.xy):.4f}")

    ev = data.filter_correct(pair, val).subset(np.arange(200))
    for variant in ("pgd", "momentum_pgd", "diva"):
        r, x_adv = metrics.evaluate(pair, pair, ev, AttackConfig(variant=variant), return_adversarial=True)
        print(f"{variant:>13}: top-1 evasive {r.top1_evasive_rate:.3f}  top-5 evasive {r.top5_evasive_rate:.3f}"
              f"  attack-only {r.attack_only_rate:.3f}  DSSIM max {r.dssim_max:.4f}")

    # the DIVA samples separate the two models' representations
    a_clean = nn.penultimate_activations(pair.adapted, ev.inputs)
    a_adv = nn.penultimate_activations(pair.adapted, x_adv)
    proj, _, var = metrics.pca2(np.concatenate([a_clean, a_adv]))
    shift = np.linalg.norm(proj[len(ev):] - proj[: len(ev)], axis=1).mean()
    print(f"PCA variance {var[0]:.2f}/{var[1]:.2f}; mean shift of adapted activations under DIVA {shift:.2f}")

    print("c sweep (attack rate / evasive rate):")
    for row in diva.sweep_c(pair, ev.inputs, ev.labels, AttackConfig(variant="diva"), [0, 0.001, 0.1, 1, 5, 10]):
        print(f"  c={row['c']:<6g} {row['attack_rate']:.3f} / {row['evasive_rate']:.3f}")


if __name__ == "__main__":
    main()
