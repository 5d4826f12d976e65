"""Convergence study: every formulation against the no-prior baseline.

One study trains each formulation once per seed on the same scene split and
records the held-out minADE after every epoch. The summaries below answer two
questions: does a prior model end at least as low as the baseline, and how
many epochs does it need to reach the baseline's final value.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import TrainConfig, build_batch
from .train import split_scenes, subsample_scenes, train

BASELINE = "none"
PRIORS = ("f1", "f2", "f3", "f4")


@dataclass
class Study:
    """Held-out minADE curves keyed by ``(formulation, seed)``."""

    fraction: float
    epochs: int
    curves: dict = field(default_factory=dict)

    def final(self, form: str, seed: int) -> float:
        return self.curves[(form, seed)][-1]

    def seeds(self) -> list[int]:
        return sorted({s for _, s in self.curves})

    def median_final(self, form: str) -> float:
        return float(np.median([self.final(form, s) for s in self.seeds()]))

    def epochs_to_reach(self, form: str, seed: int, target: float):
        """First epoch (1-based) whose minADE is ``<= target``; ``None`` if never."""
        hit = np.flatnonzero(np.asarray(self.curves[(form, seed)]) <= target)
        return int(hit[0]) + 1 if hit.size else None

    def best_prior(self) -> str:
        forms = [f for f in PRIORS if (f, self.seeds()[0]) in self.curves]
        return min(forms, key=self.median_final)

    def relative_advantage(self) -> float:
        """``(baseline - best prior) / baseline`` on median final minADE."""
        base = self.median_final(BASELINE)
        return (base - self.median_final(self.best_prior())) / base


def run_study(scenes, base_cfg: TrainConfig, *, fraction: float = 1.0, seeds=(0, 1, 2),
              forms=(BASELINE,) + PRIORS, test_fraction: float = 0.2, split_seed: int = 0, log=None) -> Study:
    """Train every formulation for every seed and collect held-out curves.

    The test split is fixed by ``split_seed``; with ``fraction < 1`` each seed
    trains on its own subsample of the training scenes, shared by all
    formulations of that seed.
    """
    train_scenes, test_scenes = split_scenes(scenes, test_fraction, split_seed)
    study = Study(fraction, base_cfg.epochs)
    for seed in seeds:
        subset = subsample_scenes(train_scenes, fraction, seed)
        for form in forms:
            cfg = replace(base_cfg, formulation=form, seed=seed, data_fraction=fraction)
            result = train(build_batch(subset, cfg), cfg, build_batch(test_scenes, cfg))
            study.curves[(form, seed)] = [float(x) for x in result.ade_curve]
            if log is not None:
                log(f"{form} seed {seed} fraction {fraction}: final minADE {study.curves[(form, seed)][-1]:.4f}")
    return study
