"""Feed-forward encoder with a Gaussian-mixture head.

Every agent is encoded in its own frame: the origin sits at its last observed
position and the x axis points along its last observed heading. The network
sees the flattened history plus a few leader features and emits, for each of
``K`` components, a logit, per-step Gaussians over the variables of the
active formulation, and Gaussians over the five IDM parameters. Kinematic
formulations are pushed through :func:`kinprior.propagation.rollout_batched`
to obtain position Gaussians.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .. import autodiff as ad
from ..cfm import NOMINAL_SCALE, PARAM_NAMES, IdmParams, estimate_params, idm_accel, lane_gap
from ..core import LOG_2PI, LOG_DENSITY_FLOOR, RHO_LIMIT, Formulation, Gaussian2D, MixtureComponent, Scene
from ..errors import (
    ConfigError,
    DataError,
    FitDiverged,
    InvalidHistory,
    LinearizationDomain,
    NumericalError,
    SteeringDomain,
)
from ..propagation import SIGMA_PRINTED, rollout_batched

SOFTPLUS_ONE = math.log(math.e - 1.0)  # softplus(SOFTPLUS_ONE) == 1
CHECKPOINT_SCHEMA = 1

# (mean scale, sigma scale) of the two predicted variables per formulation
# sigma scales give position spreads of roughly a metre at the horizon
OUTPUT_SCALES = {
    Formulation.NONE: ((10.0, 1.0), (10.0, 1.0)),
    Formulation.F1: ((10.0, 5.0), (10.0, 5.0)),
    Formulation.F2: ((2.0, 2.0), (2.0, 2.0)),
    Formulation.F3: ((10.0, 5.0), (0.5, 0.1)),
    Formulation.F4: ((2.0, 2.0), (0.3, 0.02)),
}
MAX_HEADING_SIGMA = 1.0
RHO_SCALE = 0.1  # slows the correlation head; its curvature grows as 1 / (1 - rho^2)
MAX_STEER_SIGMA = 0.5


@dataclass(frozen=True)
class TrainConfig:
    formulation: str = "none"
    K: int = 3
    hidden: tuple = (64,)
    lr: float = 0.1
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    gamma: float = 0.0
    data_fraction: float = 1.0
    dt: float = 0.1
    history: int = 10
    horizon: int = 20
    blend: bool = False
    printed_cfm_loss: bool = False
    sigma_mode: str = SIGMA_PRINTED
    sigma_floor: float = 0.05
    clip_norm: float = 1.0
    miss_threshold: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "formulation", Formulation.parse(self.formulation).value)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.horizon < 1 or self.history < 1:
            raise ConfigError("history and horizon must be >= 1")
        if not 0 < self.data_fraction <= 1:
            raise ConfigError("data_fraction must lie in (0, 1]")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("lr and epochs must be >= 0 and batch_size >= 1")
        if not self.dt > 0 or self.sigma_floor < 0:
            raise ConfigError("dt must be > 0 and sigma_floor >= 0")

    @property
    def form(self) -> Formulation:
        return Formulation.parse(self.formulation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- features

def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


@dataclass
class Batch:
    """Agent-frame inputs and targets for a set of agents."""

    features: np.ndarray  # (N, F)
    future: np.ndarray  # (N, T, 2)
    speed: np.ndarray  # (N,) last observed speed
    length: np.ndarray  # (N,)
    has_leader: np.ndarray  # (N,) bool
    keys: list  # (scene_id, agent_id)
    est_params: Optional[np.ndarray] = None  # (N, 5), nan without a leader
    sim_points: Optional[np.ndarray] = None  # (N, T, 2)

    def __len__(self):
        return len(self.features)

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx)
        opt = lambda a: None if a is None else a[idx]  # noqa: E731
        return Batch(self.features[idx], self.future[idx], self.speed[idx], self.length[idx],
                     self.has_leader[idx], [self.keys[i] for i in idx], opt(self.est_params), opt(self.sim_points))


def n_features(history: int) -> int:
    return 4 * history + 3


def agent_frame(traj, h):
    """Origin and heading of the agent frame at history step ``h - 1``."""
    c = traj.states[h - 1]
    return c[0], c[1], c[2]


def _to_frame(xy, origin, heading):
    c, s = math.cos(heading), math.sin(heading)
    dx, dy = xy[..., 0] - origin[0], xy[..., 1] - origin[1]
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def build_batch(scenes: list[Scene], cfg: TrainConfig, *, with_cfm: bool | None = None) -> Batch:
    """Features and agent-frame targets for every agent of every scene.

    With ``with_cfm`` (default: ``cfg.gamma > 0 or cfg.blend``) each agent
    that has a leader also gets IDM parameters fitted to its history and the
    simulator's future positions.
    """
    H, T = cfg.history, cfg.horizon
    with_cfm = (cfg.gamma > 0 or cfg.blend) if with_cfm is None else with_cfm
    feats, fut, speed, length, has, keys, est, sims = [], [], [], [], [], [], [], []
    for scene in scenes:
        if scene.n_steps < H + T:
            raise DataError(f"scene {scene.scene_id} has {scene.n_steps} steps, need {H + T}")
        for ag in scene.agents:
            x0, y0, th0 = agent_frame(ag, H)
            hist = ag.states[:H]
            rel = _to_frame(hist[:, :2], (x0, y0), th0)
            leader = None
            if ag.leader_id is not None:
                try:
                    leader = scene.agent(ag.leader_id)
                except KeyError:
                    leader = None
            if leader is not None:
                gap = float(lane_gap(ag.slice(H - 1, H), leader.slice(H - 1, H))[0])
                lead = [1.0, min(max(gap, 0.0), 100.0) / 50.0, (leader.v[H - 1] - ag.v[H - 1]) / 10.0]
            else:
                lead = [0.0, 2.0, 0.0]
            feats.append(np.concatenate([rel[:, 0] / 10.0, rel[:, 1] / 10.0, _wrap(hist[:, 2] - th0),
                                         hist[:, 3] / 10.0, lead]))
            fut.append(_to_frame(ag.states[H:H + T, :2], (x0, y0), th0))
            speed.append(ag.v[H - 1])
            length.append(ag.length)
            has.append(leader is not None)
            keys.append((scene.scene_id, ag.agent_id))
            if with_cfm:
                p, pts = cfm_anchor(ag, leader, cfg)
                est.append(p)
                sims.append(pts)
    batch = Batch(np.array(feats), np.array(fut), np.array(speed), np.array(length), np.array(has, dtype=bool), keys)
    if with_cfm:
        batch.est_params = np.array(est)
        batch.sim_points = np.array(sims)
    return batch


def cfm_anchor(agent, leader, cfg: TrainConfig):
    """IDM parameters fitted to an agent's history and its simulated future.

    The leader is extrapolated at constant speed; the follower is advanced by
    Euler steps of the fitted IDM and placed on the arc whose curvature
    matches the observed heading change. Agents without a leader (or whose
    fit fails) get NaN parameters and a constant-speed future.
    """
    H, T, dt = cfg.history, cfg.horizon, cfg.dt
    hist = agent.slice(0, H)
    v = float(agent.v[H - 1])
    params = None
    if leader is not None:
        try:
            params = estimate_params(hist, leader.slice(0, H), iters=50)
        except FitDiverged as exc:
            params = exc.best
        except InvalidHistory:
            params = None
    travelled = float(np.sum(np.hypot(np.diff(hist.x), np.diff(hist.y))))
    kappa = float(_wrap(hist.theta[-1] - hist.theta[0])) / travelled if travelled > 1e-6 else 0.0
    s, arc = 0.0, []
    if params is not None:
        gap = float(lane_gap(agent.slice(H - 1, H), leader.slice(H - 1, H))[0])
        vl = float(leader.v[H - 1])
        for _ in range(T):
            a = idm_accel(v, max(gap, 1e-3), v - vl, params)
            s += v * dt
            gap += (vl - v) * dt
            v = max(v + a * dt, 0.0)
            arc.append(s)
    else:
        arc = [v * dt * (t + 1) for t in range(T)]
    arc = np.array(arc)
    if abs(kappa) > 1e-9:
        pts = np.stack([np.sin(kappa * arc) / kappa, (1.0 - np.cos(kappa * arc)) / kappa], axis=-1)
    else:
        pts = np.stack([arc, np.zeros_like(arc)], axis=-1)
    est = params.as_array() if params is not None else np.full(len(PARAM_NAMES), np.nan)
    return est, pts


# ---------------------------------------------------------------- parameters

def _layer_sizes(cfg: TrainConfig):
    n_out = cfg.K + cfg.K * (5 * cfg.horizon + 2 * len(PARAM_NAMES))
    return [n_features(cfg.history), *cfg.hidden, n_out]


def init_params(cfg: TrainConfig, seed: int | None = None) -> dict:
    """Glorot-uniform hidden layers; small random output layer."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed if seed is None else seed).spawn(2)[1])
    sizes = _layer_sizes(cfg)
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = math.sqrt(6.0 / (a + b))
        if i == len(sizes) - 2:
            limit *= 0.1
        params[f"W{i}"] = rng.uniform(-limit, limit, size=(a, b))
        params[f"b{i}"] = np.zeros(b)
    return params


def n_layers(params: dict) -> int:
    return sum(1 for k in params if k.startswith("W"))


def param_names(params: dict) -> list[str]:
    """Trainable entries; ``in_mu``/``in_sd`` hold fixed input statistics."""
    return [k for i in range(n_layers(params)) for k in (f"W{i}", f"b{i}")]


def fit_normalizer(params: dict, batch: "Batch") -> dict:
    """Attach per-feature mean and spread of ``batch`` to ``params``."""
    out = dict(params)
    out["in_mu"] = batch.features.mean(axis=0)
    sd = batch.features.std(axis=0)
    out["in_sd"] = np.where(sd > 1e-6, sd, 1.0)
    return out


# ---------------------------------------------------------------- forward

@dataclass
class GmmOutput:
    """Per-agent mixture over ``T`` steps; fields may be autodiff Vars.

    Shapes: ``log_probs (N, K)``; position fields ``(N, K, T)``;
    ``cfm_mu``/``cfm_sigma`` ``(N, K, 5)``.
    """

    log_probs: object
    mu_x: object
    mu_y: object
    sigma_x: object
    sigma_y: object
    rho: object
    cfm_mu: object
    cfm_sigma: object
    controls: Optional[tuple] = None

    @property
    def probs(self) -> np.ndarray:
        return np.exp(np.asarray(ad.value(self.log_probs)))

    def components(self, agent: int, step: int) -> list[MixtureComponent]:
        """Mixture components of one agent at one step (plain floats)."""
        v = lambda a: np.asarray(ad.value(a))  # noqa: E731
        p = self.probs[agent]
        return [
            MixtureComponent(float(p[k]), Gaussian2D(float(v(self.mu_x)[agent, k, step]), float(v(self.mu_y)[agent, k, step]),
                                                     float(v(self.sigma_x)[agent, k, step]), float(v(self.sigma_y)[agent, k, step]),
                                                     float(v(self.rho)[agent, k, step])))
            for k in range(len(p))
        ]

    def mean_trajectories(self) -> np.ndarray:
        """Component mean positions, shape ``(N, K, T, 2)``."""
        return np.stack([np.asarray(ad.value(self.mu_x)), np.asarray(ad.value(self.mu_y))], axis=-1)


def log_softmax(logits, axis=-1):
    m = np.max(np.asarray(ad.value(logits)), axis=axis, keepdims=True)
    shifted = logits - m
    return shifted - ad.log(ad.vsum(ad.exp(shifted), axis=axis, keepdims=True))


def _sigma(raw, scale):
    return ad.softplus(raw + SOFTPLUS_ONE) * scale


def forward(params: dict, batch: Batch, cfg: TrainConfig) -> GmmOutput:
    """Run the network and turn its raw outputs into position mixtures.

    Raises:
        NumericalError: a propagation domain check failed; the message names
            the first offending agent and step.
    """
    form = cfg.form
    K, T = cfg.K, cfg.horizon
    n = len(batch)
    h = batch.features
    if "in_mu" in params:
        h = (h - params["in_mu"]) / params["in_sd"]
    depth = n_layers(params)
    for i in range(depth):
        h = h @ params[f"W{i}"] + params[f"b{i}"]
        if i < depth - 1:
            h = ad.tanh(h)
    log_probs = log_softmax(ad.getitem(h, (slice(None), slice(0, K))))
    body = ad.reshape(ad.getitem(h, (slice(None), slice(K, None))), (n, K, 5 * T + 2 * len(PARAM_NAMES)))
    steps = ad.reshape(ad.getitem(body, (..., slice(0, 5 * T))), (n, K, T, 5))
    raw = [ad.getitem(steps, (..., c)) for c in range(5)]
    nc = len(PARAM_NAMES)
    nominal = np.array(NOMINAL_SCALE)
    cfm_mu = _sigma(ad.getitem(body, (..., slice(5 * T, 5 * T + nc))), nominal)
    cfm_sigma = _sigma(ad.getitem(body, (..., slice(5 * T + nc, None))), nominal * 0.1)

    (ms1, ss1), (ms2, ss2) = OUTPUT_SCALES[form]
    m1, s1 = raw[0] * ms1, _sigma(raw[1], ss1)
    if form is Formulation.F4:
        m2 = ad.tanh(raw[2]) * ms2
        s2 = ad.clamp(_sigma(raw[3], ss2), hi=MAX_STEER_SIGMA)
    elif form is Formulation.F3:
        m2 = raw[2] * ms2
        s2 = ad.clamp(_sigma(raw[3], ss2), hi=MAX_HEADING_SIGMA)
    else:
        m2, s2 = raw[2] * ms2, _sigma(raw[3], ss2)

    if form is Formulation.NONE:
        mx, my, sx, sy = m1, m2, s1, s2
        rho = ad.tanh(raw[4] * RHO_SCALE) * RHO_LIMIT
    else:
        v0 = batch.speed[:, None]
        start = {"x": np.zeros((n, 1)), "y": np.zeros((n, 1)), "vx": v0, "vy": np.zeros((n, 1)),
                 "speed": v0, "heading": np.zeros((n, 1))}
        try:
            mx, my, sx, sy = rollout_batched(form, (m1, s1, m2, s2), cfg.dt, batch.length[:, None],
                                             start=start, sigma_mode=cfg.sigma_mode)
        except (LinearizationDomain, SteeringDomain) as exc:
            raise type(exc)(f"{exc} ({_locate_domain(form, m2, s2, batch)})") from None
        rho = np.zeros((n, K, T))
    if cfg.sigma_floor > 0:
        floor2 = cfg.sigma_floor ** 2
        sx = ad.sqrt(sx * sx + floor2)
        sy = ad.sqrt(sy * sy + floor2)
    return GmmOutput(log_probs, mx, my, sx, sy, rho, cfm_mu, cfm_sigma, controls=(m1, s1, m2, s2))


def _locate_domain(form, m2, s2, batch):
    mu, sig = np.asarray(ad.value(m2)), np.asarray(ad.value(s2))
    bad = np.abs(mu) >= np.pi / 2 if form is Formulation.F4 else sig >= np.pi / 2
    if not bad.any():
        return "accumulated heading spread"
    a, _, t = np.argwhere(bad)[0]
    return f"agent {batch.keys[a]}, step {t + 1}"


# ---------------------------------------------------------------- loss

def step_log_density(out: GmmOutput, target: np.ndarray):
    """``log N(target_t)`` per agent, component and step, ``(N, K, T)``."""
    tx = target[:, None, :, 0]
    ty = target[:, None, :, 1]
    return _log_normal(out.mu_x, out.mu_y, out.sigma_x, out.sigma_y, out.rho, tx, ty)


def _log_normal(mx, my, sx, sy, rho, tx, ty):
    zx = (tx - mx) / sx
    zy = (ty - my) / sy
    one_m_r2 = 1.0 - rho * rho
    quad = (zx * zx + zy * zy - 2.0 * rho * zx * zy) / one_m_r2
    return -LOG_2PI - ad.log(sx) - ad.log(sy) - 0.5 * ad.log(one_m_r2) - 0.5 * quad


def cfm_alpha(out: GmmOutput, est: np.ndarray):
    """Clamped cosine similarity of predicted and fitted IDM means, ``(N, K)``.

    Both vectors are divided by the nominal IDM magnitudes first. Rows whose
    fit is missing (NaN) get ``alpha = 1``.
    """
    scale = np.array(NOMINAL_SCALE)
    missing = np.any(~np.isfinite(est), axis=-1)
    w = np.where(missing[:, None], 1.0, est) / scale
    u = out.cfm_mu / scale
    dot = ad.vsum(u * w[:, None, :], axis=-1)
    norm = ad.sqrt(ad.vsum(u * u, axis=-1) * np.sum(w * w, axis=-1)[:, None])
    alpha = ad.clamp(dot / norm, 0.0, 1.0)
    return alpha * (1.0 - missing[:, None]) + missing[:, None].astype(float)


def blended_log_density(out: GmmOutput, batch: Batch, alpha):
    """``log(alpha N_net + (1 - alpha) N_sim)`` per step, ``(N, K, T)``."""
    target = batch.future
    log_net = step_log_density(out, target)
    sim = batch.sim_points
    log_sim = _log_normal(sim[:, None, :, 0], sim[:, None, :, 1], out.sigma_x, out.sigma_y, out.rho,
                          target[:, None, :, 0], target[:, None, :, 1])
    m = np.maximum(np.asarray(ad.value(log_net)), np.asarray(ad.value(log_sim)))
    a = ad.reshape(alpha, np.shape(ad.value(alpha)) + (1,))
    mix = a * ad.exp(log_net - m) + (1.0 - a) * ad.exp(log_sim - m)
    return ad.log(mix + 1e-300) + m


@dataclass
class LossParts:
    total: object
    best: np.ndarray  # (N,) selected component
    nll: float
    cfm: float


def loss_fn(out: GmmOutput, batch: Batch, cfg: TrainConfig) -> LossParts:
    """Hard-assignment mixture loss.

    For every agent the component with the lowest total negative
    log-likelihood is selected; the loss is the mean over agents and steps of
    ``-log N_t - log p_k / T + gamma * (1 - alpha_k)``.
    """
    T = cfg.horizon
    use_cfm = (cfg.gamma > 0 or cfg.blend) and batch.est_params is not None
    alpha = cfm_alpha(out, batch.est_params) if use_cfm else None
    if cfg.blend and use_cfm:
        logn = blended_log_density(out, batch, alpha)
    else:
        logn = step_log_density(out, batch.future)
    logn = ad.clamp(logn, lo=LOG_DENSITY_FLOOR)
    per_comp = -ad.vsum(logn, axis=-1) - out.log_probs  # (N, K)
    best = np.argmin(np.asarray(ad.value(per_comp)), axis=1)
    rows = np.arange(len(best))
    chosen = ad.getitem(per_comp, (rows, best))
    nll = ad.vsum(chosen) / (len(best) * T)
    total, cfm_val = nll, 0.0
    if cfg.gamma > 0 and use_cfm:
        a_best = ad.getitem(alpha, (rows, best))
        pen = a_best if cfg.printed_cfm_loss else 1.0 - a_best
        term = cfg.gamma * ad.vsum(pen) / len(best)
        total = total + term
        cfm_val = float(ad.value(term))
    return LossParts(total, best, float(ad.value(nll)), cfm_val)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: dict, cfg: TrainConfig, extra: dict | None = None) -> None:
    """Named arrays in an ``.npz`` container plus the config as JSON."""
    meta = {"schema_version": CHECKPOINT_SCHEMA, "config": cfg.to_dict(), "names": sorted(params)}
    if extra:
        meta.update(extra)
    arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    arrays.update((k, np.asarray(params[k])) for k in sorted(params))
    # zip entries carry a fixed timestamp so identical models give identical files
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path):
    """Return ``(params, cfg, meta)`` from :func:`save_checkpoint` output."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such checkpoint: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            params = {k: data[k].copy() for k in meta["names"]}
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: unreadable checkpoint ({exc})") from None
    if meta.get("schema_version") != CHECKPOINT_SCHEMA:
        raise DataError(f"{path}: unsupported checkpoint schema {meta.get('schema_version')}")
    return params, TrainConfig.from_dict(meta["config"]), meta
