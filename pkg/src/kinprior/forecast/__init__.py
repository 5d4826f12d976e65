"""Desk-scale probabilistic forecaster on synthetic platoon scenes."""

from .metrics import EvalReport, min_ade_fde, summarize
from .model import (
    Batch,
    GmmOutput,
    TrainConfig,
    build_batch,
    forward,
    init_params,
    load_checkpoint,
    loss_fn,
    save_checkpoint,
)
from .study import Study, run_study
from .synth import SynthConfig, synth_generate
from .train import evaluate, split_scenes, subsample_scenes, train, training_step

__all__ = [
    "Batch", "EvalReport", "GmmOutput", "Study", "SynthConfig", "TrainConfig", "build_batch", "evaluate", "forward",
    "init_params", "load_checkpoint", "loss_fn", "min_ade_fde", "run_study", "save_checkpoint", "split_scenes",
    "subsample_scenes", "summarize", "synth_generate", "train", "training_step",
]
