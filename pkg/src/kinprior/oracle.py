"""Monte-Carlo reference for the analytical propagators.

Samples are pushed through the exact kinematic updates (true ``sin``, ``cos``
and ``tan``), with fresh control draws at every step. The analytical
formulas treat each step's kinematic variables as independent of the current
position and of each other; the sampler reproduces that by re-pairing the
sampled state arrays with an independent random permutation each step, which
keeps every marginal exact.

Randomness is counter-based: samples are simulated in fixed-size blocks and
block ``b`` draws from a Philox stream keyed by ``(seed, b)``. Sample ``i``
is therefore the same whatever the number of workers, and per-block moments
are merged in block order so summaries are bit-identical.

The re-pairing makes samples inside a block share kinematic draws, so the
plain iid standard errors can be too small (the block mean of a position
drifts coherently over steps). Blocks use independent streams, so the
reported standard errors are the larger of the iid formula and the
batch-means estimate over blocks.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import AgentProfile, Formulation, Gaussian1D, Gaussian2D, KinematicDist
from .errors import ResourceLimit

BLOCK_SIZE = 1 << 13
MAX_SAMPLE_STEPS = 2_000_000_000


@dataclass(frozen=True)
class McSummary:
    """Sample statistics of positions at one step."""

    n_samples: int
    mean_x: float
    mean_y: float
    std_x: float
    std_y: float
    se_std_x: float
    se_std_y: float
    se_mean_x: float
    se_mean_y: float


def _rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, block], dtype=np.uint64)))


def _controls_array(controls) -> np.ndarray:
    """``(T, 4)`` array of ``(mu_1, sigma_1, mu_2, sigma_2)`` per step."""
    return np.array([[float(g1.mu), float(g1.sigma), float(g2.mu), float(g2.sigma)] for g1, g2 in controls])


def _initial_state(initial: KinematicDist):
    p = initial.position
    st = [float(p.mu_x), float(p.sigma_x), float(p.mu_y), float(p.sigma_y)]
    if initial.formulation is Formulation.F2:
        st += [float(initial.vx.mu), float(initial.vx.sigma), float(initial.vy.mu), float(initial.vy.sigma)]
    elif initial.formulation is Formulation.F4:
        st += [float(initial.speed.mu), float(initial.speed.sigma),
               float(initial.heading.mu), float(initial.heading.sigma)]
    return st


def _simulate_block(form, init, ctrl, L, dt, seed, block, size):
    """Return ``(T, 2, size)`` sampled positions for one block."""
    rng = _rng(seed, block)
    T = len(ctrl)

    def draw(mu, sigma):
        return mu + sigma * rng.standard_normal(size)

    x = draw(init[0], init[1])
    y = draw(init[2], init[3])
    out = np.empty((T, 2, size))
    if form is Formulation.F2:
        vx, vy = draw(init[4], init[5]), draw(init[6], init[7])
    elif form is Formulation.F4:
        s, th = draw(init[4], init[5]), draw(init[6], init[7])
    for t in range(T):
        m1, s1, m2, s2 = ctrl[t]
        c1, c2 = draw(m1, s1), draw(m2, s2)
        if form is Formulation.F1:
            x = x + c1 * dt
            y = y + c2 * dt
        elif form is Formulation.F2:
            vx = (vx + c1 * dt)[rng.permutation(size)]
            vy = (vy + c2 * dt)[rng.permutation(size)]
            x = x + vx * dt
            y = y + vy * dt
        elif form is Formulation.F3:
            x = x + c1 * np.cos(c2) * dt
            y = y + c1 * np.sin(c2) * dt
        else:
            s_new = s + c1 * dt
            th_new = th + s * np.tan(c2) / L * dt
            s = s_new[rng.permutation(size)]
            th = th_new[rng.permutation(size)]
            x = x + s * np.cos(th) * dt
            y = y + s * np.sin(th) * dt
        out[t, 0] = x
        out[t, 1] = y
    return out


def _moments(samples):
    # samples: (T, 2, n) -> n, mean (T, 2), M2 (T, 2)
    # shifted by the first sample so identical samples give exactly zero spread
    n = samples.shape[-1]
    ref = samples[..., :1]
    d = samples - ref
    dm = d.mean(axis=-1)
    m2 = ((d - dm[..., None]) ** 2).sum(axis=-1)
    return n, ref[..., 0] + dm, m2


def _batch_se(counts, values, overall):
    """Batch-means standard error of a weighted average of per-block values."""
    w = np.asarray(counts, dtype=float)
    w = w / w.sum()
    v = np.stack(values)
    var = np.tensordot(w, (v - overall) ** 2, axes=1) / (len(w) - 1)
    return np.sqrt(var)


def _merge(a, b):
    na, ma, qa = a
    nb, mb, qb = b
    n = na + nb
    delta = mb - ma
    return n, ma + delta * (nb / n), qa + qb + delta * delta * (na * nb / n)


def mc_rollout(initial: KinematicDist, controls: Sequence[tuple], profile: AgentProfile, T: int,
               n_samples: int, seed: int, *, workers: int = 1, block_size: int = BLOCK_SIZE,
               max_sample_steps: int = MAX_SAMPLE_STEPS) -> list[McSummary]:
    """Sample the exact pushforward of a kinematic rollout.

    ``initial`` and ``controls`` follow :func:`kinprior.propagation.rollout`;
    the formulation tag is taken from ``initial``.

    Raises:
        ResourceLimit: ``n_samples * T`` exceeds ``max_sample_steps``.
    """
    form = initial.formulation
    if form is Formulation.NONE:
        raise ValueError("mc_rollout needs a kinematic formulation (f1-f4)")
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if len(controls) != T:
        raise ValueError(f"expected {T} control steps, got {len(controls)}")
    if n_samples * T > max_sample_steps:
        raise ResourceLimit(f"{n_samples} samples x {T} steps exceeds the cap of {max_sample_steps}")
    init = _initial_state(initial)
    ctrl = _controls_array(controls)
    n_blocks = -(-n_samples // block_size)

    def run(b):
        pos = _simulate_block(form, init, ctrl, profile.length, profile.dt, seed, b, block_size)
        keep = min(block_size, n_samples - b * block_size)
        return _moments(pos[..., :keep])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(n_blocks)))
    else:
        parts = [run(b) for b in range(n_blocks)]
    acc = parts[0]
    for p in parts[1:]:
        acc = _merge(acc, p)
    n, mean, m2 = acc
    std = np.sqrt(m2 / (n - 1))
    se_std = std / math.sqrt(2 * (n - 1))
    se_mean = std / math.sqrt(n)
    if len(parts) >= 8:
        se_mean = np.maximum(se_mean, _batch_se([p[0] for p in parts], [p[1] for p in parts], mean))
        block_std = [np.sqrt(p[2] / (p[0] - 1)) for p in parts]
        se_std = np.maximum(se_std, _batch_se([p[0] for p in parts], block_std, std))
    return [
        McSummary(int(n), float(mean[t, 0]), float(mean[t, 1]), float(std[t, 0]), float(std[t, 1]),
                  float(se_std[t, 0]), float(se_std[t, 1]), float(se_mean[t, 0]), float(se_mean[t, 1]))
        for t in range(T)
    ]


def deterministic_rollout(formulation, start: dict, controls: Sequence[tuple[float, float]], L: float, dt: float):
    """Plain-float Euler rollout with exact trigonometry.

    ``controls[t]`` are the two control means of step ``t``. Returns a list of
    ``(x, y)`` positions for steps ``1..T``.
    """
    form = Formulation.parse(formulation)
    x, y = start.get("x", 0.0), start.get("y", 0.0)
    vx, vy = start.get("vx", 0.0), start.get("vy", 0.0)
    s, th = start.get("speed", 0.0), start.get("heading", 0.0)
    out = []
    for c1, c2 in controls:
        if form is Formulation.F1:
            x, y = x + c1 * dt, y + c2 * dt
        elif form is Formulation.F2:
            vx, vy = vx + c1 * dt, vy + c2 * dt
            x, y = x + vx * dt, y + vy * dt
        elif form is Formulation.F3:
            x, y = x + c1 * math.cos(c2) * dt, y + c1 * math.sin(c2) * dt
        elif form is Formulation.F4:
            s, th = s + c1 * dt, th + s * math.tan(c2) / L * dt
            x, y = x + s * math.cos(th) * dt, y + s * math.sin(th) * dt
        else:
            raise ValueError("deterministic_rollout needs f1-f4")
        out.append((x, y))
    return out


def remainder_estimate(mu_theta: float, sigma_theta: float, n_samples: int, seed: int, func: str = "cos",
                       *, return_eps2: bool = False):
    """Mean absolute error of the first-order trig expansion at ``mu_theta``.

    Draws ``theta = mu + sigma * eps`` and averages
    ``|f(theta) - (f(mu) + f'(mu) * (theta - mu))|``. With
    ``return_eps2=True`` also returns the sample mean of ``eps**2``, the scale
    that multiplies ``sigma**2 / 2`` in the bound.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    eps = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64))).standard_normal(n_samples)
    theta = mu_theta + sigma_theta * eps
    if func == "cos":
        exact = np.cos(theta)
        lin = math.cos(mu_theta) - math.sin(mu_theta) * (theta - mu_theta)
    elif func == "sin":
        exact = np.sin(theta)
        lin = math.sin(mu_theta) + math.cos(mu_theta) * (theta - mu_theta)
    else:
        raise ValueError("func must be 'sin' or 'cos'")
    est = float(np.mean(np.abs(exact - lin)))
    if return_eps2:
        return est, float(np.mean(eps * eps))
    return est


# ---------------------------------------------------------------- validation

SE_MULTIPLIER = 5.0


def random_case(formulation, seed: int, T: int = 20, dt: float = 0.1):
    """Random but well-posed rollout inputs for oracle comparisons.

    Heading and steering spreads stay at or below 0.1 rad.

    Returns:
        ``(initial, controls, profile)``.
    """
    form = Formulation.parse(formulation)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    profile = AgentProfile(float(rng.uniform(3.0, 5.0)), dt)
    G = Gaussian1D
    pos = Gaussian2D(float(rng.uniform(-10, 10)), float(rng.uniform(-10, 10)),
                     float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
    if form is Formulation.F1:
        controls = [(G(rng.uniform(-15, 15), rng.uniform(0, 2)), G(rng.uniform(-15, 15), rng.uniform(0, 2)))
                    for _ in range(T)]
        initial = KinematicDist(form, pos, vx=G(0.0, 0.0), vy=G(0.0, 0.0))
    elif form is Formulation.F2:
        controls = [(G(rng.uniform(-3, 3), rng.uniform(0, 1)), G(rng.uniform(-3, 3), rng.uniform(0, 1)))
                    for _ in range(T)]
        initial = KinematicDist(form, pos, vx=G(rng.uniform(-15, 15), rng.uniform(0, 1)),
                                vy=G(rng.uniform(-15, 15), rng.uniform(0, 1)), ax=G(0.0, 0.0), ay=G(0.0, 0.0))
    elif form is Formulation.F3:
        pos = Gaussian2D(pos.mu_x, pos.mu_y, 0.0, 0.0)
        controls = [(G(rng.uniform(2, 15), rng.uniform(0, 1)), G(rng.uniform(-1, 1), rng.uniform(0, 0.1)))
                    for _ in range(T)]
        initial = KinematicDist(form, pos, speed=G(0.0, 0.0), heading=G(0.0, 0.0))
    elif form is Formulation.F4:
        pos = Gaussian2D(pos.mu_x, pos.mu_y, 0.0, 0.0)
        controls = [(G(rng.uniform(-2, 2), rng.uniform(0, 1)), G(rng.uniform(-0.3, 0.3), rng.uniform(0, 0.1)))
                    for _ in range(T)]
        initial = KinematicDist(form, pos, speed=G(rng.uniform(2, 15), 0.0), heading=G(rng.uniform(-1, 1), 0.0),
                                accel=G(0.0, 0.0), steer=G(0.0, 0.0))
    else:
        raise ValueError("random_case needs f1-f4")
    return initial, controls, profile


@dataclass(frozen=True)
class StepCheck:
    step: int
    analytic_mean: tuple
    analytic_sigma: tuple
    mc_mean: tuple
    mc_sigma: tuple
    tol_mean: tuple
    tol_sigma: tuple

    @property
    def passed(self) -> bool:
        ok = True
        for a, m, tol in zip(self.analytic_mean + self.analytic_sigma, self.mc_mean + self.mc_sigma,
                             self.tol_mean + self.tol_sigma):
            ok &= abs(a - m) <= tol
        return ok


def compare_with_mc(initial: KinematicDist, controls, profile: AgentProfile, T: int, n_samples: int, seed: int,
                    *, sigma_mode: str = "quadrature", workers: int = 1) -> list[StepCheck]:
    """Analytical rollout vs. the sampler, step by step.

    The tolerance of every mean and standard deviation is
    ``bound + SE_MULTIPLIER * standard error``, where ``bound`` is the
    accumulated linearization bound (zero for the exact formulations).
    """
    from .propagation import rollout, rollout_error_bounds

    analytic = rollout(initial, controls, profile, T, sigma_mode)
    bounds = rollout_error_bounds(initial, controls, profile, T, sigma_mode)
    mc = mc_rollout(initial, controls, profile, T, n_samples, seed, workers=workers)
    k = SE_MULTIPLIER
    out = []
    for t, (a, b, m) in enumerate(zip(analytic, bounds, mc)):
        out.append(StepCheck(
            t + 1,
            (float(a.mu_x), float(a.mu_y)),
            (float(a.sigma_x), float(a.sigma_y)),
            (m.mean_x, m.mean_y),
            (m.std_x, m.std_y),
            (b.mean + k * m.se_mean_x, b.mean + k * m.se_mean_y),
            (b.sigma + k * m.se_std_x, b.sigma + k * m.se_std_y),
        ))
    return out
