"""Drive the scripted expert and the two reference baselines over a few shipped routes.

The expert sees the full world state, so it should finish every route cleanly.
The zero policy never moves (blocked) and the random policy wanders off the road.
Comparing the three shows the range a learned policy is expected to fall into.
"""

from fusedrive.config import SimConfig
from fusedrive.sim import shipped_routes
from fusedrive.sim.evaluate import ExpertPolicy, RandomPolicy, ZeroPolicy, evaluate

routes = shipped_routes("heldout")[:3]
# short standstill limit so the baselines fail fast
cfg = SimConfig(blocked_time=10.0)

for name, policy in [("expert", ExpertPolicy()), ("zero", ZeroPolicy()), ("random", RandomPolicy(0))]:
    report = evaluate(policy, routes, cfg)
    print(f"== {name}")
    print("\n".join(report.lines()))
    print()
