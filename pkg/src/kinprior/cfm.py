"""Differentiable Intelligent Driver Model and the network/simulator blend.

The IDM gives a follower's acceleration from its speed ``v``, the bumper gap
``s`` and the approach rate ``dv = v - v_leader``::

    s* = s0 + v T + v dv / (2 sqrt(a_max b_comf))
    a  = a_max [1 - (v / v0)^4 - (s* / s)^2]

Everything here runs on plain floats/arrays or on autodiff ``Var`` values.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .core import Gaussian2D, MixtureComponent, Trajectory
from .errors import (
    CollisionState,
    DataError,
    FitDiverged,
    InvalidAlpha,
    InvalidHistory,
    ZeroVector,
)

PARAM_NAMES = ("v0", "T_headway", "s0", "a_max", "b_comf")

# physical ranges used for validation and for projecting fitted parameters
PARAM_BOUNDS = {
    "v0": (1.0, 60.0),
    "T_headway": (0.1, 5.0),
    "s0": (0.1, 10.0),
    "a_max": (0.1, 6.0),
    "b_comf": (0.1, 8.0),
}

# typical magnitudes; dividing by these puts all parameters on a common scale
NOMINAL = {"v0": 30.0, "T_headway": 1.5, "s0": 2.0, "a_max": 1.5, "b_comf": 2.0}


@dataclass(frozen=True)
class IdmParams:
    v0: object = 30.0
    T_headway: object = 1.5
    s0: object = 2.0
    a_max: object = 1.5
    b_comf: object = 2.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            val = np.asarray(ad.value(getattr(self, name)), dtype=float)
            lo, hi = PARAM_BOUNDS[name]
            if np.any(val <= 0):
                raise ValueError(f"IDM parameter {name} must be > 0, got {val}")
            if np.any(val > hi * (1 + 1e-12)):
                raise ValueError(f"IDM parameter {name}={val} above its physical bound {hi}")

    def as_vector(self):
        return [getattr(self, n) for n in PARAM_NAMES]

    def as_array(self) -> np.ndarray:
        return np.array([float(ad.value(v)) for v in self.as_vector()])

    @classmethod
    def from_vector(cls, vec) -> "IdmParams":
        return cls(*vec)

    def projected(self) -> "IdmParams":
        return IdmParams(*[float(np.clip(float(ad.value(getattr(self, n))), *PARAM_BOUNDS[n])) for n in PARAM_NAMES])


def idm_accel(v, gap, dv, params: IdmParams):
    """IDM acceleration; ``gap`` may be ``inf`` for a free road.

    Raises:
        CollisionState: some ``gap <= 0``.
    """
    if np.any(np.asarray(ad.value(gap)) <= 0):
        raise CollisionState(f"non-positive gap {ad.value(gap)}")
    p = params
    desired = p.s0 + v * p.T_headway + v * dv / (2.0 * ad.sqrt(p.a_max * p.b_comf))
    desired = ad.clamp(desired, lo=0.0)
    r = v / p.v0
    r2 = r * r
    q = desired / gap
    return p.a_max * (1.0 - r2 * r2 - q * q)


# ---------------------------------------------------------------- simulation

@dataclass(frozen=True)
class SpeedProfile:
    """Piecewise-linear speed over time; constant outside the breakpoints."""

    times: tuple
    speeds: tuple

    def __post_init__(self):
        if len(self.times) != len(self.speeds) or not self.times:
            raise ValueError("speed profile needs matching, non-empty times and speeds")
        if any(b < a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("speed profile times must be non-decreasing")

    @classmethod
    def constant(cls, speed: float) -> "SpeedProfile":
        return cls((0.0,), (float(speed),))

    def __call__(self, t):
        return np.interp(t, self.times, self.speeds)


@dataclass(frozen=True)
class SimState:
    """Single-lane platoon state; ``leaders[i] == -1`` marks a lead vehicle."""

    positions: object
    speeds: object
    leaders: tuple
    lengths: tuple
    dt: float
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "leaders", tuple(int(i) for i in self.leaders))
        object.__setattr__(self, "lengths", tuple(float(x) for x in self.lengths))
        n = len(self.leaders)
        if np.shape(ad.value(self.positions)) != (n,) or np.shape(ad.value(self.speeds)) != (n,):
            raise ValueError("positions and speeds must have one entry per vehicle")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")

    @property
    def n(self) -> int:
        return len(self.leaders)

    def gaps(self):
        """Bumper gaps to each leader (``inf`` for lead vehicles)."""
        x = np.asarray(ad.value(self.positions), dtype=float)
        out = np.full(self.n, np.inf)
        for i, j in enumerate(self.leaders):
            if j >= 0:
                out[i] = x[j] - x[i] - self.lengths[j]
        return out


def stack_params(params: Sequence[IdmParams]) -> IdmParams:
    """Per-vehicle parameters as one IdmParams of arrays (keeps Vars)."""
    if isinstance(params, IdmParams):
        return params
    cols = []
    for name in PARAM_NAMES:
        vals = [getattr(p, name) for p in params]
        cols.append(ad.stack(vals) if any(ad.is_var(v) for v in vals) else np.array(vals, dtype=float))
    return IdmParams(*cols)


def sim_step(state: SimState, params, lead_profile: Optional[SpeedProfile] = None) -> SimState:
    """Advance every vehicle one explicit Euler step.

    Followers use :func:`idm_accel`. Lead vehicles track ``lead_profile``
    when one is given and drive on a free road otherwise. Speeds are floored
    at zero.

    Raises:
        CollisionState: a follower's gap is non-positive after the step.
    """
    p = stack_params(params)
    x, v, dt = state.positions, state.speeds, state.dt
    leaders = np.array(state.leaders)
    has = (leaders >= 0).astype(float)
    li = np.where(leaders >= 0, leaders, np.arange(state.n))
    lengths = np.array(state.lengths)
    gap = ad.getitem(x, li) - x - lengths[li]
    gap_val = np.asarray(ad.value(gap))
    if np.any((gap_val <= 0) & (has > 0)):
        bad = int(np.flatnonzero((gap_val <= 0) & (has > 0))[0])
        raise CollisionState(f"vehicle {bad} overlaps its leader", vehicle=bad)
    # lead vehicles get a dummy positive gap whose interaction term is masked out
    gap_eff = gap * has + (1.0 - has)
    dv = v - ad.getitem(v, li)
    acc = idm_accel(v, gap_eff, dv, p) + p.a_max * (1.0 - has) * _interaction(v, gap_eff, dv, p)
    new_x = x + v * dt
    new_v = ad.clamp(v + acc * dt, lo=0.0)
    if lead_profile is not None:
        target = float(lead_profile(state.time + dt))
        new_v = new_v * has + (1.0 - has) * target
    out = SimState(new_x, new_v, state.leaders, state.lengths, dt, state.time + dt)
    gaps = out.gaps()
    if np.any(gaps <= 0):
        bad = int(np.flatnonzero(gaps <= 0)[0])
        raise CollisionState(f"vehicle {bad} collided with its leader at t={out.time:.3f}s", vehicle=bad)
    return out


def _interaction(v, gap, dv, p):
    """``(s*/s)^2``, added back to cancel the gap term for lead vehicles."""
    desired = ad.clamp(p.s0 + v * p.T_headway + v * dv / (2.0 * ad.sqrt(p.a_max * p.b_comf)), lo=0.0)
    q = desired / gap
    return q * q


def simulate(state: SimState, params, steps: int, lead_profile: Optional[SpeedProfile] = None):
    """Run ``steps`` sim steps; returns positions and speeds of shape ``(steps + 1, n)``."""
    xs = [np.asarray(ad.value(state.positions), dtype=float)]
    vs = [np.asarray(ad.value(state.speeds), dtype=float)]
    for k in range(steps):
        try:
            state = sim_step(state, params, lead_profile)
        except CollisionState as exc:
            exc.step = k
            raise
        xs.append(np.asarray(ad.value(state.positions), dtype=float))
        vs.append(np.asarray(ad.value(state.speeds), dtype=float))
    return np.array(xs), np.array(vs)


# ---------------------------------------------------------------- parameter fit

def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def lane_gap(follower: Trajectory, leader: Trajectory) -> np.ndarray:
    """Along-lane bumper gap from planar positions.

    The chord between the two vehicles is converted to arc length using the
    heading change between them (exact on constant-curvature lanes).
    """
    chord = np.hypot(leader.x - follower.x, leader.y - follower.y)
    half = 0.5 * _wrap(leader.theta - follower.theta)
    with np.errstate(invalid="ignore", divide="ignore"):
        factor = np.where(np.abs(half) > 1e-9, half / np.sin(half), 1.0)
    return chord * factor - leader.length


def observed_accel(speeds, dt) -> np.ndarray:
    """Central differences inside, one-sided differences at both ends."""
    return np.gradient(np.asarray(speeds, dtype=float), dt, edge_order=1)


def fit_loss(params: IdmParams, v, gap, dv, accel):
    """Mean squared error between observed and IDM accelerations."""
    r = idm_accel(v, gap, dv, params) - accel
    return ad.vsum(r * r) / float(np.size(accel))


@dataclass
class FitResult:
    params: IdmParams
    loss: float
    iterations: int
    losses: list = field(default_factory=list)


def _fit_arrays(history: Trajectory, leader_history: Trajectory):
    if len(history) != len(leader_history):
        raise InvalidHistory("follower and leader histories have different lengths")
    if len(history) < 3:
        raise InvalidHistory("need at least 3 samples to difference accelerations")
    gap = lane_gap(history, leader_history)
    if np.any(gap <= 0):
        raise InvalidHistory("history contains non-positive gaps")
    v = history.v
    return v, gap, v - leader_history.v, observed_accel(v, history.dt)


def estimate_params(history: Trajectory, leader_history: Trajectory, init: IdmParams | None = None,
                    iters: int = 200, lr: float = 1.0, *, return_result: bool = False):
    """Fit IDM parameters to a follower's history.

    Minimizes :func:`fit_loss` over log-parameters with damped Gauss-Newton
    steps (gradient descent preconditioned by ``J^T J``; ``lr`` scales each
    step). The residual Jacobian comes from one reverse pass: every residual
    gets its own copy of the parameters, so the gradient of the residual sum
    w.r.t. each copy is one Jacobian row. Parameters are projected into
    ``PARAM_BOUNDS`` after every step.

    Raises:
        InvalidHistory: misaligned or too short histories, or a gap <= 0.
        FitDiverged: 10 consecutive steps failed to lower the loss while the
            gradient was still large; ``exc.best`` holds the best parameters.
    """
    v, gap, dv, acc = _fit_arrays(history, leader_history)
    init = (init or IdmParams()).projected()
    lo = np.log([PARAM_BOUNDS[n][0] for n in PARAM_NAMES])
    hi = np.log([PARAM_BOUNDS[n][1] for n in PARAM_NAMES])
    m = len(v)

    def residuals_and_jac(theta):
        tape = ad.Tape()
        copies = [tape.variable(np.full(m, t)) for t in theta]
        params = IdmParams(*[ad.exp(c) for c in copies])
        r = idm_accel(v, gap, dv, params) - acc
        jac = np.stack(tape.gradient(ad.vsum(r), copies), axis=1)
        return np.asarray(r.value), jac

    def loss_at(theta):
        r = np.asarray(idm_accel(v, gap, dv, IdmParams(*np.exp(theta))) - acc)
        return float(np.mean(r * r))

    theta = np.clip(np.log(init.as_array()), lo, hi)
    loss = loss_at(theta)
    best, best_loss = theta.copy(), loss
    losses = [loss]
    damping, failures, it = 1e-3, 0, 0
    for it in range(1, iters + 1):
        if loss < 1e-24:
            break
        r, jac = residuals_and_jac(theta)
        g = jac.T @ r
        h = jac.T @ jac
        step = np.linalg.solve(h + damping * np.diag(np.diag(h) + 1e-12), g)
        cand = np.clip(theta - lr * step, lo, hi)
        cand_loss = loss_at(cand)
        if cand_loss < loss:
            rel = (loss - cand_loss) / max(loss, 1e-300)
            theta, loss = cand, cand_loss
            damping = max(damping / 3.0, 1e-12)
            failures = 0
            if loss < best_loss:
                best, best_loss = theta.copy(), loss
            losses.append(loss)
            if rel < 1e-12:
                break
        else:
            failures += 1
            damping *= 5.0
            losses.append(cand_loss)
            if failures >= 10:
                grad_norm = float(np.linalg.norm(2.0 * g / m))
                if grad_norm > 1e-6 * max(1.0, math.sqrt(loss)):
                    raise FitDiverged(f"loss failed to decrease for 10 iterations (loss {loss:.3e})",
                                      best=IdmParams(*np.exp(best)), loss=best_loss)
                break
    # no accepted step: hand back init itself rather than exp(log(init))
    result = init if best_loss == losses[0] else IdmParams(*np.exp(best)).projected()
    if return_result:
        return FitResult(result, best_loss, it, losses)
    return result


# ---------------------------------------------------------------- blending

def cosine_alpha(pred, est, scale=None):
    """Blend weight ``clamp(cos(pred, est), 0, 1)``.

    ``pred``/``est`` are IdmParams or equal-length sequences; entries are
    divided by ``scale`` (e.g. the nominal magnitudes) before comparison when
    given.

    Raises:
        ZeroVector: either vector has zero norm.
    """
    u = pred.as_vector() if isinstance(pred, IdmParams) else list(pred)
    w = est.as_vector() if isinstance(est, IdmParams) else list(est)
    if len(u) != len(w):
        raise ValueError("parameter vectors differ in length")
    if scale is not None:
        u = [a / s for a, s in zip(u, scale)]
        w = [b / s for b, s in zip(w, scale)]
    dot = uu = ww = 0.0
    for a, b in zip(u, w):
        dot = dot + a * b
        uu = uu + a * a
        ww = ww + b * b
    if np.any(np.asarray(ad.value(uu)) == 0) or np.any(np.asarray(ad.value(ww)) == 0):
        raise ZeroVector("cosine similarity of a zero vector")
    return ad.clamp(dot / ad.sqrt(uu * ww), 0.0, 1.0)


NOMINAL_SCALE = tuple(NOMINAL[n] for n in PARAM_NAMES)


def blend_distributions(p_net: Gaussian2D, p_sim_point, alpha) -> list[MixtureComponent]:
    """Two-component mixture ``alpha * P_net + (1 - alpha) * P_sim``.

    The simulator component sits at ``p_sim_point`` and copies the network's
    spread and correlation.

    Raises:
        InvalidAlpha: ``alpha`` outside ``[0, 1]``.
    """
    a = np.asarray(ad.value(alpha))
    if np.any(a < 0) or np.any(a > 1):
        raise InvalidAlpha(f"alpha must lie in [0, 1], got {a}")
    sim = Gaussian2D(p_sim_point[0], p_sim_point[1], p_net.sigma_x, p_net.sigma_y, p_net.rho)
    return [MixtureComponent(alpha, p_net), MixtureComponent(1.0 - alpha, sim)]


def cfm_loss_term(alpha, gamma: float, printed: bool = False):
    """Alignment penalty ``gamma * (1 - alpha)``; ``printed=True`` gives ``gamma * alpha``."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return gamma * alpha if printed else gamma * (1.0 - alpha)


@dataclass(frozen=True)
class BlendConfig:
    gamma: float = 0.0
    alpha_mapping: str = "clamped-cosine"
    printed_loss: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.alpha_mapping != "clamped-cosine":
            raise ValueError(f"unsupported alpha mapping {self.alpha_mapping!r}")


# ---------------------------------------------------------------- platoon files

PLATOON_SCHEMA = 1


@dataclass
class Platoon:
    state: SimState
    params: list
    steps: int
    lead_profile: Optional[SpeedProfile] = None
    ids: list = field(default_factory=list)


def load_platoon(path) -> Platoon:
    """Read a platoon description (JSON); see README for the schema."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"no such platoon file: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None
    try:
        vehicles = doc["vehicles"]
        ids = [veh["id"] for veh in vehicles]
        index = {vid: i for i, vid in enumerate(ids)}
        leaders = [-1 if veh.get("leader") is None else index[veh["leader"]] for veh in vehicles]
        state = SimState(
            np.array([float(veh["position"]) for veh in vehicles]),
            np.array([float(veh["speed"]) for veh in vehicles]),
            leaders,
            [float(veh.get("length", 4.5)) for veh in vehicles],
            float(doc["dt"]),
        )
        params = [IdmParams(**veh.get("params", {})) for veh in vehicles]
        prof = doc.get("lead_profile")
        profile = SpeedProfile(tuple(prof["times"]), tuple(prof["speeds"])) if prof else None
        return Platoon(state, params, int(doc["steps"]), profile, ids)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: invalid platoon description ({exc})") from None


def save_platoon(path, platoon: Platoon) -> None:
    st = platoon.state
    ids = platoon.ids or list(range(st.n))
    doc = {
        "schema_version": PLATOON_SCHEMA,
        "dt": st.dt,
        "steps": platoon.steps,
        "vehicles": [
            {
                "id": ids[i],
                "position": float(np.asarray(ad.value(st.positions))[i]),
                "speed": float(np.asarray(ad.value(st.speeds))[i]),
                "length": st.lengths[i],
                "leader": None if st.leaders[i] < 0 else ids[st.leaders[i]],
                "params": {n: float(ad.value(getattr(platoon.params[i], n))) for n in PARAM_NAMES},
            }
            for i in range(st.n)
        ],
    }
    if platoon.lead_profile is not None:
        doc["lead_profile"] = {"times": list(platoon.lead_profile.times), "speeds": list(platoon.lead_profile.speeds)}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
