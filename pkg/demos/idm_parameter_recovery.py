"""Recover car-following parameters from a simulated follower.

A leader drives a stop-and-go speed profile, a follower reacts with known IDM
parameters, and we hand only the two recorded trajectories to the estimator.
The fit works on observed accelerations, so it never sees the true values.
"""

import numpy as np

from kinprior import cfm
from kinprior.core import Trajectory

dt, substeps, steps = 0.1, 10, 300
truth = cfm.IdmParams(v0=24.0, T_headway=1.6, s0=2.5, a_max=1.2, b_comf=2.1)
profile = cfm.SpeedProfile((0, 5, 10, 15, 20, 25, 30), (10, 15, 15, 5, 0, 12, 20))

state = cfm.SimState(np.array([40.0, 15.5]), np.array([10.0, 10.0]), [-1, 0], [4.5, 4.5], dt / substeps)
xs, vs = cfm.simulate(state, [cfm.IdmParams(), truth], steps * substeps, profile)
xs, vs = xs[::substeps], vs[::substeps]


def track(i):
    zeros = np.zeros_like(xs[:, i])
    return Trajectory(i, np.stack([xs[:, i], zeros, zeros, vs[:, i]], axis=1), dt, 4.5, None if i == 0 else 0)


result = cfm.estimate_params(track(1), track(0), return_result=True)
print(f"fit loss {result.loss:.3e} after {result.iterations} iterations")
for name, true, est in zip(cfm.PARAM_NAMES, truth.as_array(), result.params.as_array()):
    print(f"  {name:>9}: true {true:6.3f}  estimated {est:6.3f}  ({(est / true - 1):+.2%})")
