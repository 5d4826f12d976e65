"""Displacement metrics for multi-modal forecasts."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

REPORT_SCHEMA = 1


@dataclass
class EvalReport:
    min_ade: float
    min_fde: float
    miss_rate: float
    nll: float
    n_agents: int
    miss_threshold: float
    loss_curve: list = field(default_factory=list)
    ade_curve: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {"schema_version": REPORT_SCHEMA}
        d.update(asdict(self))
        return d


def displacement_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-step L2 errors of each component mean, ``(N, K, T)``.

    Args:
        pred: component mean trajectories ``(N, K, T, 2)``.
        truth: ground-truth futures ``(N, T, 2)``.
    """
    return np.linalg.norm(pred - truth[:, None], axis=-1)


def min_ade_fde(pred: np.ndarray, truth: np.ndarray):
    """Per-agent minADE and minFDE, each of shape ``(N,)``.

    The two minima are taken independently over components.
    """
    err = displacement_errors(pred, truth)
    return err.mean(axis=-1).min(axis=-1), err[..., -1].min(axis=-1)


def summarize(pred: np.ndarray, truth: np.ndarray, threshold: float = 2.0) -> tuple[float, float, float]:
    """Mean minADE, mean minFDE and miss rate over agents.

    An agent misses when the component with the smallest final displacement
    still ends more than ``threshold`` metres from the truth.
    """
    if threshold <= 0:
        raise ValueError("miss threshold must be > 0")
    ade, fde = min_ade_fde(pred, truth)
    return float(ade.mean()), float(fde.mean()), float(np.mean(fde > threshold))
