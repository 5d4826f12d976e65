"""Plain gradient-descent training and evaluation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .. import autodiff as ad
from ..errors import NonFiniteForward
from .metrics import EvalReport, summarize
from .model import Batch, TrainConfig, fit_normalizer, forward, init_params, loss_fn, param_names

log = logging.getLogger(__name__)

EVAL_CHUNK = 1024


def total_loss(params: dict, batch: Batch, cfg: TrainConfig):
    """Scalar training loss of ``params`` on ``batch`` (tape-aware)."""
    return loss_fn(forward(params, batch, cfg), batch, cfg).total


def loss_and_grads(params: dict, batch: Batch, cfg: TrainConfig):
    tape = ad.Tape()
    names = param_names(params)
    vars_ = dict(params)
    vars_.update({k: tape.variable(params[k]) for k in names})
    try:
        loss = total_loss(vars_, batch, cfg)
    except NonFiniteForward as exc:
        raise NonFiniteForward(f"{exc} (batch of {len(batch)} agents, first {batch.keys[:3]})") from None
    grads = tape.gradient(loss, [vars_[k] for k in names])
    return float(loss.value), dict(zip(names, grads))


def training_step(params: dict, batch: Batch, cfg: TrainConfig):
    """One gradient-descent update; returns ``(new_params, loss)``.

    Gradients are rescaled to a global norm of at most ``cfg.clip_norm``.

    Raises:
        NonFiniteForward: the forward pass produced NaN or inf.
    """
    if len(batch) == 0:
        raise ValueError("training_step needs a non-empty batch")
    loss, grads = loss_and_grads(params, batch, cfg)
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if not np.isfinite(norm):
        raise NonFiniteForward(f"non-finite gradient (batch first {batch.keys[:3]})")
    scale = cfg.lr
    if cfg.clip_norm and norm > cfg.clip_norm:
        scale *= cfg.clip_norm / norm
    new = dict(params)
    new.update({k: params[k] - scale * grads[k] for k in grads})
    return new, loss


def _chunk_map(fn, batch: Batch, workers: int):
    """Apply ``fn`` to fixed chunks of ``batch``; results come back in chunk order."""
    chunks = [batch.take(np.arange(lo, min(lo + EVAL_CHUNK, len(batch)))) for lo in range(0, len(batch), EVAL_CHUNK)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, chunks))
    return [fn(c) for c in chunks]


def predict(params: dict, batch: Batch, cfg: TrainConfig, workers: int = 1):
    """Forward pass without a tape, in chunks; returns stacked outputs.

    Returns:
        ``(means (N, K, T, 2), log_probs (N, K))``.
    """
    def run(part):
        out = forward(params, part, cfg)
        return out.mean_trajectories(), np.asarray(out.log_probs)

    parts = _chunk_map(run, batch, workers)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def evaluate(params: dict, batch: Batch, cfg: TrainConfig, *, loss_curve=(), ade_curve=(),
             workers: int = 1) -> EvalReport:
    """Metrics of ``params`` on ``batch`` (agents are the unit of averaging).

    Chunks may be evaluated on several threads; they are combined in a fixed
    order, so the report does not depend on ``workers``.
    """
    def run(part):
        out = forward(params, part, cfg)
        return out.mean_trajectories(), loss_fn(out, part, cfg).nll * len(part)

    parts = _chunk_map(run, batch, workers)
    means = np.concatenate([p[0] for p in parts])
    ade, fde, miss = summarize(means, batch.future, cfg.miss_threshold)
    nll = 0.0
    for _, chunk_nll in parts:
        nll += chunk_nll
    return EvalReport(ade, fde, miss, nll / len(batch), len(batch), cfg.miss_threshold,
                      [float(x) for x in loss_curve], [float(x) for x in ade_curve])


def held_out_ade(params: dict, batch: Batch, cfg: TrainConfig) -> float:
    means, _ = predict(params, batch, cfg)
    return summarize(means, batch.future, cfg.miss_threshold)[0]


@dataclass
class TrainResult:
    params: dict
    loss_curve: list = field(default_factory=list)
    ade_curve: list = field(default_factory=list)


def train(batch: Batch, cfg: TrainConfig, eval_batch: Optional[Batch] = None, params: dict | None = None,
          on_epoch: Callable | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of shuffled mini-batch gradient descent.

    The shuffling stream and the initial weights both derive from
    ``cfg.seed``. With ``eval_batch`` the held-out minADE is recorded after
    every epoch (``ade_curve[e]`` is the value after epoch ``e + 1``).
    """
    seq = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(seq[0])
    params = fit_normalizer(init_params(cfg), batch) if params is None else dict(params)
    result = TrainResult(params)
    n = len(batch)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            params, loss = training_step(params, batch.take(idx), cfg)
            total += loss * len(idx)
            count += len(idx)
        result.loss_curve.append(total / max(count, 1))
        if eval_batch is not None:
            result.ade_curve.append(held_out_ade(params, eval_batch, cfg))
        log.debug("epoch %d loss %.4f", epoch + 1, result.loss_curve[-1])
        if on_epoch is not None:
            on_epoch(epoch, params, result)
    result.params = params
    return result


def split_scenes(scenes, test_fraction: float = 0.2, seed: int = 0):
    """Deterministic scene-level train/test split."""
    idx = np.random.default_rng(seed).permutation(len(scenes))
    n_test = max(1, int(round(test_fraction * len(scenes))))
    test = sorted(idx[:n_test])
    train_ = sorted(idx[n_test:])
    return [scenes[i] for i in train_], [scenes[i] for i in test]


def subsample_scenes(scenes, fraction: float, seed: int = 0):
    """Keep ``ceil(fraction * n)`` scenes chosen by ``seed`` (order preserved)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1:
        return list(scenes)
    k = max(1, int(np.ceil(fraction * len(scenes))))
    keep = sorted(np.random.default_rng(seed).choice(len(scenes), size=k, replace=False))
    return [scenes[i] for i in keep]
