"""Gaussian and mixture primitives, agent trajectories and their text format.

All Gaussian fields may hold floats, numpy arrays (evaluated elementwise) or
:class:`kinprior.autodiff.Var` values, so the same types carry batched model
outputs and differentiable quantities.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import (
    DataError,
    DegenerateGaussian,
    EmptyMixture,
    InvalidCorrelation,
    UnnormalizedMixture,
)

RHO_LIMIT = 0.999
DENSITY_FLOOR = 1e-300
LOG_DENSITY_FLOOR = math.log(DENSITY_FLOOR)
PROB_TOL = 1e-9
LOG_2PI = math.log(2.0 * math.pi)


class Formulation(str, enum.Enum):
    """What the mixture head predicts per timestep."""

    NONE = "none"  # positions directly
    F1 = "f1"  # velocity components
    F2 = "f2"  # acceleration components
    F3 = "f3"  # speed and heading
    F4 = "f4"  # acceleration and steering

    @classmethod
    def parse(cls, tag) -> "Formulation":
        if isinstance(tag, cls):
            return tag
        try:
            return cls(str(tag).lower())
        except ValueError:
            raise ValueError(f"unknown formulation {tag!r}; expected one of {[f.value for f in cls]}") from None


def _v(x):
    return np.asarray(ad.value(x), dtype=float)


@dataclass(frozen=True)
class Gaussian1D:
    mu: object
    sigma: object

    def __post_init__(self):
        if np.any(_v(self.sigma) < 0):
            raise DegenerateGaussian(f"negative standard deviation {ad.value(self.sigma)}")


@dataclass(frozen=True)
class Gaussian2D:
    """Planar Gaussian parameterized by means, standard deviations and correlation.

    Correlations with ``0.999 < |rho| < 1`` are clamped to ``+-0.999`` and
    ``rho_clamped`` is set; ``|rho| >= 1`` raises :class:`InvalidCorrelation`.
    """

    mu_x: object
    mu_y: object
    sigma_x: object
    sigma_y: object
    rho: object = 0.0
    rho_clamped: bool = field(default=False, compare=False)

    def __post_init__(self):
        if np.any(_v(self.sigma_x) < 0) or np.any(_v(self.sigma_y) < 0):
            raise DegenerateGaussian("negative standard deviation")
        r = _v(self.rho)
        if np.any(np.abs(r) >= 1.0):
            raise InvalidCorrelation(f"|rho| must be < 1, got {ad.value(self.rho)}")
        if np.any(np.abs(r) > RHO_LIMIT):
            object.__setattr__(self, "rho", ad.clamp(self.rho, -RHO_LIMIT, RHO_LIMIT))
            object.__setattr__(self, "rho_clamped", True)

    @property
    def mean(self):
        return (self.mu_x, self.mu_y)

    def covariance(self) -> np.ndarray:
        sx, sy, r = float(_v(self.sigma_x)), float(_v(self.sigma_y)), float(_v(self.rho))
        return np.array([[sx * sx, r * sx * sy], [r * sx * sy, sy * sy]])


@dataclass(frozen=True)
class MixtureComponent:
    prob: object
    pos: Gaussian2D
    cfm: tuple = ()

    def __post_init__(self):
        p = _v(self.prob)
        if np.any(p < 0) or np.any(p > 1):
            raise UnnormalizedMixture(f"component probability outside [0, 1]: {ad.value(self.prob)}")


@dataclass(frozen=True)
class KinematicDist:
    """Position and kinematic-variable Gaussians of one agent at one timestep.

    Which kinematic fields are populated is fixed by ``formulation``:
    F1 ``vx, vy``; F2 ``vx, vy, ax, ay``; F3 ``speed, heading``;
    F4 ``speed, heading, accel, steer``.
    """

    formulation: Formulation
    position: Gaussian2D
    vx: Optional[Gaussian1D] = None
    vy: Optional[Gaussian1D] = None
    ax: Optional[Gaussian1D] = None
    ay: Optional[Gaussian1D] = None
    speed: Optional[Gaussian1D] = None
    heading: Optional[Gaussian1D] = None
    accel: Optional[Gaussian1D] = None
    steer: Optional[Gaussian1D] = None

    FIELDS = {
        Formulation.NONE: (),
        Formulation.F1: ("vx", "vy"),
        Formulation.F2: ("vx", "vy", "ax", "ay"),
        Formulation.F3: ("speed", "heading"),
        Formulation.F4: ("speed", "heading", "accel", "steer"),
    }

    def __post_init__(self):
        object.__setattr__(self, "formulation", Formulation.parse(self.formulation))
        wanted = set(self.FIELDS[self.formulation])
        for name in ("vx", "vy", "ax", "ay", "speed", "heading", "accel", "steer"):
            present = getattr(self, name) is not None
            if present != (name in wanted):
                state = "missing" if name in wanted else "unexpected"
                raise ValueError(f"{self.formulation.value}: {state} field {name!r}")


@dataclass(frozen=True)
class AgentProfile:
    length: float
    dt: float

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("agent length must be > 0")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")


# ---------------------------------------------------------------- densities

def _check_density_args(g: Gaussian2D):
    if np.any(_v(g.sigma_x) <= 0) or np.any(_v(g.sigma_y) <= 0):
        raise DegenerateGaussian("density needs sigma_x, sigma_y > 0")
    if np.any(np.abs(_v(g.rho)) >= 1):
        raise InvalidCorrelation("density needs |rho| < 1")


def gaussian2d_log_density(g: Gaussian2D, o):
    """Log of the bivariate normal pdf of ``g`` at point ``o = (x, y)``."""
    _check_density_args(g)
    zx = (o[0] - g.mu_x) / g.sigma_x
    zy = (o[1] - g.mu_y) / g.sigma_y
    one_m_r2 = 1.0 - g.rho * g.rho
    quad = (zx * zx + zy * zy - 2.0 * g.rho * zx * zy) / one_m_r2
    return -LOG_2PI - ad.log(g.sigma_x) - ad.log(g.sigma_y) - 0.5 * ad.log(one_m_r2) - 0.5 * quad


def gaussian2d_density(g: Gaussian2D, o):
    """Bivariate normal pdf of ``g`` evaluated at ``o``.

    Raises:
        DegenerateGaussian: a standard deviation is not strictly positive.
        InvalidCorrelation: ``|rho| >= 1``.
    """
    return ad.exp(gaussian2d_log_density(g, o))


def _check_mixture(components: Sequence[MixtureComponent]):
    if len(components) == 0:
        raise EmptyMixture("mixture has no components")
    total = sum(_v(c.prob) for c in components)
    if np.any(np.abs(total - 1.0) > PROB_TOL):
        raise UnnormalizedMixture(f"component probabilities sum to {total}, not 1")


def mixture_density(components: Sequence[MixtureComponent], o):
    """``sum_k p_k N_k(o)`` over the components."""
    _check_mixture(components)
    total = 0.0
    for c in components:
        total = total + c.prob * gaussian2d_density(c.pos, o)
    return total


def nll_loss(component: MixtureComponent, truth, *, return_clamped: bool = False):
    """Negative log-likelihood ``-log p - log N(truth)`` of one component.

    The density is floored at ``1e-300`` before the log so far-off truths give
    a large finite loss; pass ``return_clamped=True`` to also get a boolean
    (array) telling where the floor was hit.
    """
    logn = gaussian2d_log_density(component.pos, truth)
    clamped = _v(logn) < LOG_DENSITY_FLOOR
    logn = ad.clamp(logn, lo=LOG_DENSITY_FLOOR)
    loss = -ad.log(component.prob) - logn
    if return_clamped:
        return loss, (bool(clamped) if np.ndim(clamped) == 0 else clamped)
    return loss


# ---------------------------------------------------------------- trajectories

STATE_FIELDS = ("x", "y", "theta", "v")


@dataclass
class Trajectory:
    """Uniformly sampled states ``(x, y, theta, v)`` of one agent."""

    agent_id: int
    states: np.ndarray
    dt: float
    length: float = 4.5
    leader_id: Optional[int] = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != 4:
            raise DataError(f"agent {self.agent_id}: states must have shape (n, 4), got {self.states.shape}")
        if not self.dt > 0:
            raise DataError(f"agent {self.agent_id}: dt must be > 0")

    def __len__(self):
        return len(self.states)

    @property
    def x(self):
        return self.states[:, 0]

    @property
    def y(self):
        return self.states[:, 1]

    @property
    def theta(self):
        return self.states[:, 2]

    @property
    def v(self):
        return self.states[:, 3]

    def slice(self, start, stop) -> "Trajectory":
        return Trajectory(self.agent_id, self.states[start:stop].copy(), self.dt, self.length, self.leader_id)


@dataclass
class Scene:
    scene_id: int
    dt: float
    agents: list[Trajectory]

    def agent(self, agent_id) -> Trajectory:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(agent_id)

    @property
    def n_steps(self) -> int:
        return len(self.agents[0]) if self.agents else 0


def _num(x: float):
    # json has no NaN/inf; keep ints as ints for stable output
    x = float(x)
    if not math.isfinite(x):
        raise DataError(f"non-finite state value {x}")
    return x


def trajectory_records(scenes: Iterable[Scene]):
    """Yield one dict per agent-timestep, in scene/agent/time order."""
    for scene in scenes:
        for agent in scene.agents:
            for t, (x, y, th, v) in enumerate(agent.states):
                yield {
                    "scene_id": int(scene.scene_id),
                    "agent_id": int(agent.agent_id),
                    "t_index": t,
                    "x": _num(x),
                    "y": _num(y),
                    "theta": _num(th),
                    "v": _num(v),
                    "leader_id": None if agent.leader_id is None else int(agent.leader_id),
                    "length": _num(agent.length),
                    "dt": _num(scene.dt),
                }


def write_trajectories(path, scenes: Iterable[Scene]) -> None:
    """Write scenes as JSON Lines, one agent-timestep record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in trajectory_records(scenes):
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


REQUIRED_FIELDS = ("scene_id", "agent_id", "t_index", "x", "y", "theta", "v")


def read_trajectories(path) -> list[Scene]:
    """Parse a JSON Lines trajectory file back into scenes."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such dataset: {path}")
    grouped: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            missing = [k for k in REQUIRED_FIELDS if k not in rec]
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {missing}")
            sc = grouped.setdefault(rec["scene_id"], {"dt": rec.get("dt", 0.1), "agents": {}})
            ag = sc["agents"].setdefault(
                rec["agent_id"], {"rows": {}, "leader": rec.get("leader_id"), "length": rec.get("length", 4.5)}
            )
            ag["rows"][int(rec["t_index"])] = [rec["x"], rec["y"], rec["theta"], rec["v"]]
    scenes = []
    for sid, sc in grouped.items():
        agents = []
        for aid, ag in sc["agents"].items():
            idx = sorted(ag["rows"])
            if idx != list(range(len(idx))):
                raise DataError(f"scene {sid} agent {aid}: t_index not contiguous from 0")
            agents.append(Trajectory(aid, [ag["rows"][i] for i in idx], sc["dt"], ag["length"], ag["leader"]))
        scenes.append(Scene(sid, sc["dt"], agents))
    return scenes
