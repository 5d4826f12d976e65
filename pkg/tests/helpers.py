"""Shared fixtures-by-function for the test modules."""

import numpy as np

from kinprior import cfm
from kinprior.core import Trajectory
from kinprior.forecast.synth import lane_pose

# stop-and-go lead profile that excites every IDM term
STOP_AND_GO = cfm.SpeedProfile((0, 5, 10, 15, 20, 25, 30), (10, 15, 15, 5, 0, 12, 20))


def random_idm(rng):
    return cfm.IdmParams(rng.uniform(15, 35), rng.uniform(0.8, 2.5), rng.uniform(1, 4), rng.uniform(0.8, 2.5),
                         rng.uniform(1, 3))


def platoon_histories(true: cfm.IdmParams, kappa=0.01, substeps=10, dt=0.1, steps=300, noise=0.0, seed=0):
    """Leader and follower trajectories on a curved lane, follower driven by ``true``."""
    st = cfm.SimState(np.array([40.0, 15.5]), np.array([10.0, 10.0]), [-1, 0], [4.5, 4.5], dt / substeps)
    xs, vs = cfm.simulate(st, [cfm.IdmParams(), true], steps * substeps, STOP_AND_GO)
    xs, vs = xs[::substeps], vs[::substeps]
    rng = np.random.default_rng(seed)
    out = []
    for i in (0, 1):
        x, y, th = lane_pose(xs[:, i], kappa)
        if noise:
            x = x + rng.normal(0, noise, x.shape)
            y = y + rng.normal(0, noise, y.shape)
        out.append(Trajectory(i, np.stack([x, y, th, vs[:, i]], 1), dt, 4.5, None if i == 0 else 0))
    return out[1], out[0]
