"""Synthetic single-lane traffic scenes.

Each scene is a platoon on a constant-curvature lane. Longitudinal motion
comes from the IDM (the lead vehicle tracks a random piecewise-linear speed
profile); lateral motion is the bicycle model with the constant steering
angle ``atan(kappa * L)`` that keeps a vehicle on the lane, whose exact
solution is the lane arc itself. The simulator integrates with several
substeps per recorded step so differenced accelerations stay accurate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..cfm import IdmParams, SimState, SpeedProfile, simulate
from ..core import Scene, Trajectory
from ..errors import CollisionState, GenerationFailed

DEFAULT_PARAM_RANGES = {
    "v0": (18.0, 32.0),
    "T_headway": (0.8, 2.2),
    "s0": (1.0, 4.0),
    "a_max": (0.8, 2.5),
    "b_comf": (1.0, 3.0),
}


@dataclass(frozen=True)
class SynthConfig:
    n_agents: int = 3
    history: int = 10
    horizon: int = 20
    dt: float = 0.1
    substeps: int = 10
    noise: float = 0.0
    curvature_max: float = 0.02
    speed_range: tuple = (5.0, 20.0)
    gap_range: tuple = (8.0, 35.0)
    length: float = 4.5
    warmup: float = 3.0
    profile: str = "random"  # or "constant"
    profile_knot: float = 2.0
    param_ranges: dict = field(default_factory=lambda: dict(DEFAULT_PARAM_RANGES))
    max_attempts: int = 20

    def __post_init__(self):
        if self.n_agents < 1 or self.history < 1 or self.horizon < 1:
            raise ValueError("n_agents, history and horizon must be >= 1")
        if not self.dt > 0 or self.substeps < 1:
            raise ValueError("dt must be > 0 and substeps >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.profile not in ("random", "constant"):
            raise ValueError(f"unknown lead profile kind {self.profile!r}")

    @property
    def n_steps(self) -> int:
        return self.history + self.horizon


def lane_pose(s, kappa, origin=(0.0, 0.0), heading0=0.0):
    """Planar pose at arc length ``s`` along a constant-curvature lane."""
    s = np.asarray(s, dtype=float)
    if abs(kappa) < 1e-12:
        lx, ly, th = s, np.zeros_like(s), np.zeros_like(s)
    else:
        lx = np.sin(kappa * s) / kappa
        ly = (1.0 - np.cos(kappa * s)) / kappa
        th = kappa * s
    c, sn = math.cos(heading0), math.sin(heading0)
    th = (th + heading0 + math.pi) % (2 * math.pi) - math.pi
    return origin[0] + c * lx - sn * ly, origin[1] + sn * lx + c * ly, th


def _draw_profile(rng, cfg: SynthConfig, v_start: float, duration: float) -> SpeedProfile:
    if cfg.profile == "constant":
        return SpeedProfile.constant(v_start)
    n = max(2, int(math.ceil(duration / cfg.profile_knot)) + 1)
    times = tuple(float(i * cfg.profile_knot) for i in range(n))
    lo, hi = cfg.speed_range
    speeds = [v_start] + [float(rng.uniform(lo, hi)) for _ in range(n - 1)]
    return SpeedProfile(times, tuple(speeds))


def _draw_params(rng, ranges) -> IdmParams:
    return IdmParams(**{k: float(rng.uniform(*ranges[k])) for k in DEFAULT_PARAM_RANGES})


def generate_platoon(rng, cfg: SynthConfig, n_steps: int | None = None):
    """Simulate one platoon in lane coordinates.

    Returns ``(s, v, params, profile)`` with ``s, v`` of shape
    ``(n_steps, n_agents)`` sampled every ``cfg.dt`` after the warm-up.
    Vehicle 0 leads; vehicle ``i`` follows ``i - 1``.
    """
    n_steps = n_steps or cfg.n_steps
    lo, hi = cfg.gap_range
    if lo <= 0 or hi < lo:
        raise GenerationFailed(f"gap range {cfg.gap_range} cannot place vehicles without overlap")
    for name, (a, b) in cfg.param_ranges.items():
        if a <= 0 or b < a:
            raise GenerationFailed(f"parameter range for {name} is infeasible: {(a, b)}")
    sim_dt = cfg.dt / cfg.substeps
    warm = int(round(cfg.warmup / sim_dt))
    total = warm + (n_steps - 1) * cfg.substeps
    last = None
    for _ in range(cfg.max_attempts):
        v_start = float(rng.uniform(*cfg.speed_range))
        gaps = rng.uniform(lo, hi, size=cfg.n_agents - 1)
        pos = np.zeros(cfg.n_agents)
        for i in range(1, cfg.n_agents):
            pos[i] = pos[i - 1] - cfg.length - gaps[i - 1]
        pos -= pos[-1]
        params = [_draw_params(rng, cfg.param_ranges) for _ in range(cfg.n_agents)]
        profile = _draw_profile(rng, cfg, v_start, total * sim_dt)
        state = SimState(pos, np.full(cfg.n_agents, v_start), [-1] + list(range(cfg.n_agents - 1)),
                         [cfg.length] * cfg.n_agents, sim_dt)
        try:
            xs, vs = simulate(state, params, total, profile)
        except CollisionState as exc:
            last = exc
            continue
        return xs[warm::cfg.substeps], vs[warm::cfg.substeps], params, profile
    raise GenerationFailed(f"no collision-free platoon after {cfg.max_attempts} attempts: {last}")


def synth_generate(n_scenes: int, cfg: SynthConfig | None = None, seed: int = 0) -> list[Scene]:
    """Generate ``n_scenes`` scenes of ``cfg.history + cfg.horizon`` steps.

    Observation noise (``cfg.noise``, metres) is added to x and y only.

    Raises:
        GenerationFailed: the configured ranges cannot produce a valid platoon.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    cfg = cfg or SynthConfig()
    scenes = []
    for k, child in enumerate(np.random.SeedSequence(seed).spawn(n_scenes)):
        rng = np.random.default_rng(child)
        s, v, _, _ = generate_platoon(rng, cfg)
        kappa = float(rng.uniform(-cfg.curvature_max, cfg.curvature_max))
        origin = tuple(rng.uniform(-50.0, 50.0, size=2))
        heading0 = float(rng.uniform(-math.pi, math.pi))
        agents = []
        for i in range(cfg.n_agents):
            x, y, th = lane_pose(s[:, i], kappa, origin, heading0)
            if cfg.noise > 0:
                x = x + rng.normal(0.0, cfg.noise, size=x.shape)
                y = y + rng.normal(0.0, cfg.noise, size=y.shape)
            states = np.stack([x, y, th, v[:, i]], axis=1)
            agents.append(Trajectory(i, states, cfg.dt, cfg.length, None if i == 0 else i - 1))
        scenes.append(Scene(k, cfg.dt, agents))
    return scenes
