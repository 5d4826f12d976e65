"""Closed-form propagation of Gaussian kinematic variables to positions.

Each one-step propagator pushes independent Gaussians through one explicit
Euler step of a kinematic model:

* F1 - velocity components ``(v_x, v_y)``: exact.
* F2 - acceleration components ``(a_x, a_y)``: exact, updates velocities
  which then feed F1.
* F3 - speed and heading ``(s, theta)``: ``sin``/``cos`` replaced by their
  first-order expansion around the mean heading.
* F4 - acceleration and steering ``(a, delta)``: bicycle-model update of
  speed and heading (``tan`` linearized around the mean steering), which then
  feed F3.

Rollouts chain the kinematic update first and the position update second, so
the ``t``-th position uses the ``t``-th propagated kinematic distribution and
every predicted control reaches the positions.

All functions accept floats, numpy arrays or autodiff ``Var`` values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .core import AgentProfile, Formulation, Gaussian1D, Gaussian2D, KinematicDist
from .errors import ControlLengthMismatch, LinearizationDomain, NonFiniteInput, SteeringDomain

HEADING_SIGMA_LIMIT = math.pi / 2
STEER_MEAN_LIMIT = math.pi / 2
STEER_SIGMA_LIMIT = math.pi / 4

SIGMA_PRINTED = "printed"
SIGMA_QUADRATURE = "quadrature"


def _finite(*xs):
    for x in xs:
        if not np.all(np.isfinite(ad.value(x))):
            raise NonFiniteInput(f"non-finite propagation input: {ad.value(x)}")


def _check_dt(dt):
    if not np.all(np.asarray(ad.value(dt)) > 0):
        raise ValueError("dt must be > 0")


@dataclass(frozen=True)
class LinearizedTrig:
    """First-order expansion of ``sin``/``cos`` around ``base_angle``."""

    base_angle: float
    sin_at_mu: float
    cos_at_mu: float

    @classmethod
    def at(cls, mu_theta) -> "LinearizedTrig":
        return cls(mu_theta, np.sin(mu_theta), np.cos(mu_theta))

    def sin(self, theta):
        return self.sin_at_mu + self.cos_at_mu * (theta - self.base_angle)

    def cos(self, theta):
        return self.cos_at_mu - self.sin_at_mu * (theta - self.base_angle)


@dataclass(frozen=True)
class ErrorBound:
    """Second-order remainder bound of the trig linearization.

    ``per_step`` is ``sigma_theta**2 / 2`` (the remainder scale at unit
    ``eps**2``); ``accumulated`` is the running sum over a rollout.
    """

    per_step: float
    accumulated: float


def lagrange_bound(sigma_theta, previous: ErrorBound | None = None) -> ErrorBound:
    if np.any(np.asarray(sigma_theta) < 0):
        raise ValueError("sigma_theta must be >= 0")
    step = 0.5 * np.asarray(sigma_theta, dtype=float) ** 2
    step = float(step) if step.ndim == 0 else step
    return ErrorBound(step, step + (previous.accumulated if previous else 0.0))


def accumulated_bounds(sigma_thetas: Sequence[float]) -> list[ErrorBound]:
    out, prev = [], None
    for s in sigma_thetas:
        prev = lagrange_bound(s, prev)
        out.append(prev)
    return out


# window (in steering sigmas) over which |tan''| is maximized
TAN_WINDOW = 4.0


def _tan_curvature_bound(mu_delta, sigma_delta):
    """``max |tan''|`` over ``|delta| <= |mu| + TAN_WINDOW * sigma``."""
    d = min(abs(mu_delta) + TAN_WINDOW * sigma_delta, STEER_MEAN_LIMIT - 1e-3)
    return 2.0 * abs(math.tan(d)) / math.cos(d) ** 2


@dataclass(frozen=True)
class PositionBound:
    """Accumulated linearization error of one rollout step, in meters."""

    mean: float
    sigma: float


def rollout_error_bounds(initial: KinematicDist, controls: Sequence[tuple], profile: AgentProfile, T: int,
                         sigma_mode: str = SIGMA_PRINTED) -> list[PositionBound]:
    """Position-scale accumulation of the per-step trig remainder bounds.

    Each ``sin``/``cos`` call contributes ``sigma_theta**2 / 2`` (times
    ``E[eps**2] = 1`` for the mean, ``sqrt(E[eps**4]) = sqrt(3)`` for the
    spread) scaled by the speed moving through it. F4 adds the ``tan``
    remainder of the heading update, carried forward as a heading offset.
    F1/F2 are exact and get zero bounds.
    """
    form = initial.formulation
    if form in (Formulation.F1, Formulation.F2):
        return [PositionBound(0.0, 0.0)] * T
    dt, L = profile.dt, profile.length
    root3 = math.sqrt(3.0)
    states = rollout_states(initial, controls, profile, T, sigma_mode)
    bm = bs = heading_off = 0.0
    prev_ms, prev_ss = (float(ad.value(initial.speed.mu)), float(ad.value(initial.speed.sigma))) \
        if form is Formulation.F4 else (0.0, 0.0)
    out = []
    for t, st in enumerate(states):
        ms, ss = float(ad.value(st.speed.mu)), float(ad.value(st.speed.sigma))
        trig = lagrange_bound(float(ad.value(st.heading.sigma))).per_step
        if form is Formulation.F4:
            steer = controls[t][1]
            md, sd = float(ad.value(steer.mu)), float(ad.value(steer.sigma))
            tan_rem = 0.5 * _tan_curvature_bound(md, sd) * sd * sd
            heading_off += math.hypot(prev_ms, prev_ss) * dt / L * tan_rem * root3
            prev_ms, prev_ss = ms, ss
        rms = math.hypot(ms, ss)
        bm += dt * (abs(ms) * trig + rms * heading_off)
        bs += dt * rms * (root3 * trig + heading_off)
        out.append(PositionBound(bm, bs))
    return out


# ---------------------------------------------------------------- one step

def propagate_f1(pos: Gaussian2D, vel: tuple[Gaussian1D, Gaussian1D], dt) -> Gaussian2D:
    """Euler position step driven by Gaussian velocity components."""
    vx, vy = vel
    _finite(pos.mu_x, pos.mu_y, pos.sigma_x, pos.sigma_y, vx.mu, vx.sigma, vy.mu, vy.sigma, dt)
    _check_dt(dt)
    return Gaussian2D(
        pos.mu_x + vx.mu * dt,
        pos.mu_y + vy.mu * dt,
        ad.sqrt(pos.sigma_x * pos.sigma_x + vx.sigma * vx.sigma * (dt * dt)),
        ad.sqrt(pos.sigma_y * pos.sigma_y + vy.sigma * vy.sigma * (dt * dt)),
        pos.rho,
    )


def _euler_gaussian(state: Gaussian1D, rate: Gaussian1D, dt) -> Gaussian1D:
    return Gaussian1D(
        state.mu + rate.mu * dt,
        ad.sqrt(state.sigma * state.sigma + rate.sigma * rate.sigma * (dt * dt)),
    )


def propagate_f2(vel, acc, dt) -> tuple[Gaussian1D, Gaussian1D]:
    """Velocity step driven by Gaussian acceleration components."""
    (vx, vy), (ax, ay) = vel, acc
    _finite(vx.mu, vx.sigma, vy.mu, vy.sigma, ax.mu, ax.sigma, ay.mu, ay.sigma, dt)
    _check_dt(dt)
    return _euler_gaussian(vx, ax, dt), _euler_gaussian(vy, ay, dt)


def propagate_f3(pos: Gaussian2D, speed: Gaussian1D, heading: Gaussian1D, dt) -> Gaussian2D:
    """Position step from speed and heading with linearized trigonometry.

    Raises:
        LinearizationDomain: ``heading.sigma >= pi/2``.
    """
    _finite(pos.mu_x, pos.mu_y, pos.sigma_x, pos.sigma_y, speed.mu, speed.sigma, heading.mu, heading.sigma, dt)
    _check_dt(dt)
    if np.any(np.asarray(ad.value(heading.sigma)) >= HEADING_SIGMA_LIMIT):
        raise LinearizationDomain(f"heading sigma {ad.value(heading.sigma)} >= pi/2")
    sin_m, cos_m = ad.sin(heading.mu), ad.cos(heading.mu)
    ms, ss, st = speed.mu, speed.sigma, heading.sigma
    a = ms * st * sin_m * dt
    b = ss * cos_m * dt
    c = ss * st * sin_m * dt
    d = ms * st * cos_m * dt
    e = ss * sin_m * dt
    f = ss * st * cos_m * dt
    return Gaussian2D(
        pos.mu_x + ms * cos_m * dt,
        pos.mu_y + ms * sin_m * dt,
        ad.sqrt(pos.sigma_x * pos.sigma_x + a * a + b * b + c * c),
        ad.sqrt(pos.sigma_y * pos.sigma_y + d * d + e * e + f * f),
        pos.rho,
    )


def propagate_f4(speed: Gaussian1D, heading: Gaussian1D, accel: Gaussian1D, steer: Gaussian1D, L, dt,
                 sigma_mode: str = SIGMA_PRINTED) -> tuple[Gaussian1D, Gaussian1D]:
    """Bicycle-model speed/heading step from acceleration and steering.

    ``sigma_mode="printed"`` adds speed spread linearly (``s + a*dt``);
    ``"quadrature"`` adds it as independent variances, like F2.

    Raises:
        SteeringDomain: ``|steer.mu| >= pi/2``.
        LinearizationDomain: ``steer.sigma >= pi/4``.
    """
    _finite(speed.mu, speed.sigma, heading.mu, heading.sigma, accel.mu, accel.sigma, steer.mu, steer.sigma, L, dt)
    _check_dt(dt)
    if not np.all(np.asarray(ad.value(L)) > 0):
        raise ValueError("vehicle length must be > 0")
    if np.any(np.abs(np.asarray(ad.value(steer.mu))) >= STEER_MEAN_LIMIT):
        raise SteeringDomain(f"|steering mean| {ad.value(steer.mu)} >= pi/2")
    if np.any(np.asarray(ad.value(steer.sigma)) >= STEER_SIGMA_LIMIT):
        raise LinearizationDomain(f"steering sigma {ad.value(steer.sigma)} >= pi/4")

    if sigma_mode == SIGMA_PRINTED:
        sigma_s = speed.sigma + accel.sigma * dt
    elif sigma_mode == SIGMA_QUADRATURE:
        sigma_s = ad.sqrt(speed.sigma * speed.sigma + accel.sigma * accel.sigma * (dt * dt))
    else:
        raise ValueError(f"unknown sigma_mode {sigma_mode!r}")

    tan_m = ad.tan(steer.mu)
    cos_m = ad.cos(steer.mu)
    sec2 = 1.0 / (cos_m * cos_m)
    k = dt / L
    x = speed.mu * steer.sigma * sec2 * k
    y = speed.sigma * tan_m * k
    z = speed.sigma * steer.sigma * sec2 * k
    new_speed = Gaussian1D(speed.mu + accel.mu * dt, sigma_s)
    new_heading = Gaussian1D(
        heading.mu + speed.mu * tan_m * k,
        ad.sqrt(heading.sigma * heading.sigma + x * x + y * y + z * z),
    )
    return new_speed, new_heading


# ---------------------------------------------------------------- rollouts

def _zero():
    return Gaussian1D(0.0, 0.0)


def rollout_states(initial: KinematicDist, controls: Sequence[tuple], profile: AgentProfile, T: int,
                   sigma_mode: str = SIGMA_PRINTED) -> list[KinematicDist]:
    """Chain one-step propagators for ``T`` steps.

    ``controls[t]`` holds the Gaussians the formulation predicts at step
    ``t``: ``(vx, vy)`` for F1, ``(ax, ay)`` for F2, ``(speed, heading)`` for
    F3 and ``(accel, steer)`` for F4. For F2/F4 the first-order state
    (velocity, or speed and heading) starts from ``initial``.
    """
    if len(controls) != T:
        raise ControlLengthMismatch(f"expected {T} control steps, got {len(controls)}")
    form = initial.formulation
    dt, L = profile.dt, profile.length
    pos = initial.position
    states = []
    if form is Formulation.F1:
        for vx, vy in controls:
            pos = propagate_f1(pos, (vx, vy), dt)
            states.append(KinematicDist(form, pos, vx=vx, vy=vy))
    elif form is Formulation.F2:
        vel = (initial.vx, initial.vy)
        for ax, ay in controls:
            vel = propagate_f2(vel, (ax, ay), dt)
            pos = propagate_f1(pos, vel, dt)
            states.append(KinematicDist(form, pos, vx=vel[0], vy=vel[1], ax=ax, ay=ay))
    elif form is Formulation.F3:
        for s, th in controls:
            pos = propagate_f3(pos, s, th, dt)
            states.append(KinematicDist(form, pos, speed=s, heading=th))
    elif form is Formulation.F4:
        s, th = initial.speed, initial.heading
        for a, d in controls:
            s, th = propagate_f4(s, th, a, d, L, dt, sigma_mode)
            pos = propagate_f3(pos, s, th, dt)
            states.append(KinematicDist(form, pos, speed=s, heading=th, accel=a, steer=d))
    else:
        raise ValueError("rollout needs a kinematic formulation (f1-f4)")
    return states


def rollout(initial: KinematicDist, controls: Sequence[tuple], profile: AgentProfile, T: int,
            sigma_mode: str = SIGMA_PRINTED) -> list[Gaussian2D]:
    """Position Gaussians for steps ``1..T``; see :func:`rollout_states`."""
    return [s.position for s in rollout_states(initial, controls, profile, T, sigma_mode)]


def heading_sigmas(initial: KinematicDist, controls: Sequence[tuple], profile: AgentProfile, T: int,
                   sigma_mode: str = SIGMA_PRINTED) -> list[float]:
    """Heading spread entering each position step (0 for F1/F2)."""
    form = initial.formulation
    if form in (Formulation.F1, Formulation.F2):
        return [0.0] * T
    if form is Formulation.F3:
        return [float(ad.value(th.sigma)) for _, th in controls]
    states = rollout_states(initial, controls, profile, T, sigma_mode)
    return [float(ad.value(s.heading.sigma)) for s in states]


# ---------------------------------------------------------------- batched rollouts

def _shift_in(first, seq):
    """``[first, seq[..., 0], ..., seq[..., -2]]`` along the last axis."""
    shape = np.shape(ad.value(seq))
    first = ad.reshape(first * np.ones(shape[:-1]), shape[:-1] + (1,))
    return ad.concatenate([first, ad.getitem(seq, (..., slice(0, -1)))], axis=-1)


def rollout_batched(formulation, controls: tuple, dt, L=None, *, start=None, sigma_mode: str = SIGMA_PRINTED):
    """Vectorized rollout over leading batch axes using cumulative sums.

    Args:
        formulation: F1-F4.
        controls: ``(mu_1, sigma_1, mu_2, sigma_2)`` arrays of shape
            ``(..., T)``, the per-step Gaussians of the two predicted
            variables (same order as :func:`rollout_states`).
        dt: time step.
        L: vehicle length(s) for F4, broadcastable to the batch shape.
        start: dict with keys ``x, y`` (positions, deterministic) and, for
            F2, ``vx, vy`` / for F4, ``speed, heading`` (means; spread 0).

    Returns:
        ``(mu_x, mu_y, sigma_x, sigma_y)`` arrays of shape ``(..., T)``.
    """
    form = Formulation.parse(formulation)
    start = start or {}
    m1, s1, m2, s2 = controls
    x0 = _expand(start.get("x", 0.0))
    y0 = _expand(start.get("y", 0.0))
    dt2 = dt * dt

    if form is Formulation.F1:
        return (x0 + ad.cumsum(m1 * dt), y0 + ad.cumsum(m2 * dt),
                ad.sqrt(ad.cumsum(s1 * s1 * dt2)), ad.sqrt(ad.cumsum(s2 * s2 * dt2)))
    if form is Formulation.F2:
        vx = _expand(start.get("vx", 0.0)) + ad.cumsum(m1 * dt)
        vy = _expand(start.get("vy", 0.0)) + ad.cumsum(m2 * dt)
        svx2 = ad.cumsum(s1 * s1 * dt2)
        svy2 = ad.cumsum(s2 * s2 * dt2)
        return (x0 + ad.cumsum(vx * dt), y0 + ad.cumsum(vy * dt),
                ad.sqrt(ad.cumsum(svx2 * dt2)), ad.sqrt(ad.cumsum(svy2 * dt2)))
    if form is Formulation.F3:
        _heading_domain(s2)
        return _f3_batched(x0, y0, m1, s1, m2, s2, dt)
    if form is Formulation.F4:
        if L is None:
            raise ValueError("F4 needs the vehicle length L")
        _steer_domain(m2, s2)
        s_start = start.get("speed", 0.0)
        th_start = _expand(start.get("heading", 0.0))
        mu_s = _expand(s_start) + ad.cumsum(m1 * dt)
        if sigma_mode == SIGMA_PRINTED:
            sig_s = ad.cumsum(s1 * dt)
        elif sigma_mode == SIGMA_QUADRATURE:
            sig_s = ad.sqrt(ad.cumsum(s1 * s1 * dt2))
        else:
            raise ValueError(f"unknown sigma_mode {sigma_mode!r}")
        mu_s_prev = _shift_in(s_start, mu_s)
        sig_s_prev = _shift_in(0.0, sig_s)
        k = dt / _expand(L)
        tan_m = ad.tan(m2)
        cos_m = ad.cos(m2)
        sec2 = 1.0 / (cos_m * cos_m)
        x = mu_s_prev * s2 * sec2 * k
        y = sig_s_prev * tan_m * k
        z = sig_s_prev * s2 * sec2 * k
        mu_th = th_start + ad.cumsum(mu_s_prev * tan_m * k)
        sig_th = ad.sqrt(ad.cumsum(x * x + y * y + z * z))
        _heading_domain(sig_th)
        return _f3_batched(x0, y0, mu_s, sig_s, mu_th, sig_th, dt)
    raise ValueError("rollout_batched needs a kinematic formulation (f1-f4)")


def _expand(x):
    """Append a trailing axis so batch-shaped starts broadcast against ``(..., T)``."""
    if np.ndim(ad.value(x)) == 0:
        return x
    return ad.reshape(x, np.shape(ad.value(x)) + (1,))


def _heading_domain(sig):
    if np.any(np.asarray(ad.value(sig)) >= HEADING_SIGMA_LIMIT):
        raise LinearizationDomain("heading sigma >= pi/2")


def _steer_domain(mu, sig):
    if np.any(np.abs(np.asarray(ad.value(mu))) >= STEER_MEAN_LIMIT):
        raise SteeringDomain("|steering mean| >= pi/2")
    if np.any(np.asarray(ad.value(sig)) >= STEER_SIGMA_LIMIT):
        raise LinearizationDomain("steering sigma >= pi/4")


def _f3_batched(x0, y0, ms, ss, mt, st, dt):
    sin_m, cos_m = ad.sin(mt), ad.cos(mt)
    a = ms * st * sin_m
    b = ss * cos_m
    c = ss * st * sin_m
    d = ms * st * cos_m
    e = ss * sin_m
    f = ss * st * cos_m
    dt2 = dt * dt
    return (x0 + ad.cumsum(ms * cos_m * dt), y0 + ad.cumsum(ms * sin_m * dt),
            ad.sqrt(ad.cumsum((a * a + b * b + c * c) * dt2)),
            ad.sqrt(ad.cumsum((d * d + e * e + f * f) * dt2)))
