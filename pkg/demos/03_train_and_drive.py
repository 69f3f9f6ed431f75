"""End to end on the tiny model: collect demonstrations, train, then drive closed loop.

Everything runs in a temporary directory and takes under a minute on one CPU.
The tiny model is small and briefly trained, so its driving is rough; the
point is the pipeline, the loss going down and the checkpoint round trip.
"""

import tempfile
from pathlib import Path

from fusedrive.agent import ModelPolicy
from fusedrive.config import ScheduleConfig, SimConfig, tiny_experiment
from fusedrive.sim.dataset import Dataset, collect_dataset
from fusedrive.sim.evaluate import evaluate
from fusedrive.sim.routes import generate_route
from fusedrive.train import model_from_checkpoint, train

work = Path(tempfile.mkdtemp(prefix="fusedrive-demo-"))
routes = [generate_route(seed, hazards=False, n_segments=2) for seed in range(3)]

manifest = collect_dataset(routes, work / "data", seed=0)
print(f"collected {manifest['n_samples']} samples into {work / 'data'}")
data = Dataset.open(work / "data")

cfg = tiny_experiment(epochs=80, batch_size=16, schedule=ScheduleConfig((1e-3,), 80, 40))
result = train(cfg, data, work / "run")
first, last = result.history[0], result.history[-1]
print(f"total loss {first['total']:.3f} -> {last['total']:.3f} over {len(result.history)} steps")

model, cfg = model_from_checkpoint(result.checkpoint)
policy = ModelPolicy(model, cfg.control)
report = evaluate(policy, routes[:1], SimConfig(blocked_time=10.0))
print("\n".join(report.lines()))
