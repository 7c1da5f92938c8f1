"""Train a base SchNet and a relation-aware SchNet with all auxiliary tasks on
scaled crystal-growth systems, then compare test AE and DSG.

Pass ``--quick`` for a tiny run that finishes in seconds.
"""
import sys

from chemgnn.datagen import FamilyConfig, generate_family
from chemgnn.harness import TrainConfig, run_one, split

quick = "--quick" in sys.argv
if quick:
    ds = generate_family(FamilyConfig(family="ucg", seeds=3, max_size=19, size_stride=2))
    size, epochs = 8, 3
else:
    ds = generate_family(FamilyConfig(family="ucg", seeds=5, max_size=75, size_stride=15))
    size, epochs = 32, 40
rules, grid = ds.rules(), tuple(ds.metadata["grid"])
print(f"{len(ds)} systems")

common = {"state_size": size, "elements": ["Al", "Cu"], "relations": list(rules.relations),
          "connectivity": "fully-connected"}
runs = {
    "base": TrainConfig(model={**common, "variant": "none"}, max_epochs=epochs, patience=15,
                        optimizer={"learning_rate": 1e-3}),
    "augmented": TrainConfig(model={**common, "variant": "message"}, max_epochs=epochs, patience=15,
                             optimizer={"learning_rate": 1e-3},
                             loss={"tasks": ["atom-counts", "orbital-counts", "scaling-distribution"]}),
}
for name, cfg in runs.items():
    tr, va, te = split(ds, cfg)
    out = run_one(cfg, tr, va, te, rules, grid)
    alpha = "-" if out["alpha"] is None else f"{out['alpha']:.3f}"
    print(f"{name:10s} AE {out['ae']:.5f}  DSG {out['dsg']:.4f}  alpha {alpha}  epochs {out['epochs']}")
