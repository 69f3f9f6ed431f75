"""Inspect what the decoder attends to and how the two control branches are blended.

The attention dump groups tokens into prediction, measurement, side-view and
main-view blocks, so the share of attention each block receives can be read
directly.  The preference weight turns the two loss estimates into a blend
between the control head and the waypoint tracker.
"""

import numpy as np

from fusedrive.agent import observation_batch
from fusedrive.attention_dump import attention_dump
from fusedrive.config import tiny_model
from fusedrive.heads import prefer
from fusedrive.model import DrivingModel
from fusedrive.sim.expert import observe
from fusedrive.sim.routes import generate_route
from fusedrive.sim.world import World

model = DrivingModel(tiny_model(), seed=0)
obs = observe(World.create(generate_route(3)))
dump = attention_dump(model, observation_batch(obs))
att = np.asarray(dump["attention"])
print("attention maps (depth, heads, T, T):", dump["shape"])

# mean attention mass each block receives from the two prediction queries
for name, (lo, hi) in dump["blocks"].items():
    mass = att[:, :, :2, lo:hi].sum(-1).mean()
    print(f"  {name:<12s} tokens [{lo:3d}, {hi:3d})  mass {mass:.3f}")

print()
print("control-branch weight for (control loss est, waypoint loss est):")
for lc, lw in [(0.1, 0.1), (0.1, 1.0), (1.0, 0.1), (0.0, 5.0)]:
    print(f"  ({lc:.1f}, {lw:.1f}) -> {prefer(lc, lw):.3f}")
