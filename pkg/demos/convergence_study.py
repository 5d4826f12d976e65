"""Do kinematic priors help a small forecaster train faster?

Trains the unconstrained baseline and the four prior formulations on the same
synthetic scenes for three seeds, once on all training scenes and once on a
10% subsample, and prints the held-out minADE summary. Takes a few minutes.

Run: python demos/convergence_study.py [n_scenes] [epochs]
"""

import sys

from kinprior.forecast import TrainConfig, run_study, synth_generate
from kinprior.forecast.study import BASELINE, PRIORS

n_scenes = int(sys.argv[1]) if len(sys.argv) > 1 else 500
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 50

scenes = synth_generate(n_scenes, seed=0)
cfg = TrainConfig(epochs=epochs)

for fraction in (1.0, 0.1):
    study = run_study(scenes, cfg, fraction=fraction, log=print)
    print(f"\n{fraction:.0%} of training data, median final minADE over seeds {study.seeds()}:")
    for form in (BASELINE,) + PRIORS:
        reach = [study.epochs_to_reach(form, s, study.final(BASELINE, s)) for s in study.seeds()]
        print(f"  {form:>4}: {study.median_final(form):.3f} m   epochs to reach baseline final: {reach}")
    print(f"  best prior {study.best_prior()}, advantage {study.relative_advantage():.1%}\n")
