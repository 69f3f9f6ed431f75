"""Analytic parameter and MAC counts, checked against an instantiated model.

The cost model never builds the network, yet its parameter total must equal the
number of scalars the model actually allocates.  It also isolates what
cross-stream fusion costs and how decoder attention grows with the token count.
"""

import dataclasses

from fusedrive.config import ModelConfig, tiny_model
from fusedrive.cost_model import analyze, decoder_tokens, fusion_cost, quadratic_macs
from fusedrive.model import DrivingModel

for label, cfg in [("tiny", tiny_model()), ("desk", ModelConfig())]:
    report = analyze(cfg)
    built = DrivingModel(cfg).n_params()
    print(f"{label}: {report.params:,} params analytic, {built:,} instantiated, {report.macs:,} MACs")
    print(f"  fusion adds {fusion_cost(cfg):,} params")

print()
print(analyze(tiny_model()).to_text())

# decoder attention is quadratic in the number of tokens
for size in (64, 128):
    cfg = dataclasses.replace(ModelConfig(), image_size=size)
    print(f"image {size}: {decoder_tokens(cfg)} decoder tokens, {quadratic_macs(analyze(cfg)):,} quadratic MACs")
