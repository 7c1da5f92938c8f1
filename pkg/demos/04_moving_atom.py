"""Per-atom energy contributions while one atom is pulled away from a crystal.

Uses the analytic oracle by default; with ``--train`` a small relation-aware
SchNet is fitted first and its contributions are shown instead.
"""
import sys

from chemgnn.chemgraph import freeze_bonds
from chemgnn.datagen import FamilyConfig, gen_fcc_lattice, generate_family
from chemgnn.harness import ModelPredictor, OraclePredictor, TrainConfig, moving_atom_sweep, split, train

seed = gen_fcc_lattice("Cu", 1)
ds = generate_family(FamilyConfig(family="pc", elements=("Cu",), reps=(1,)))
rules = ds.rules()
seed = freeze_bonds(seed, rules)

predictor = OraclePredictor(rules)
if "--train" in sys.argv:
    cfg = TrainConfig(model={"state_size": 16, "elements": ["Cu"], "relations": list(rules.relations),
                             "variant": "message"},
                      loss={"tasks": ["atom-counts", "scaling-distribution"]},
                      optimizer={"learning_rate": 1e-2}, max_epochs=30, split={"fractions": [1.0, 0.0, 0.0]})
    tr, va, _ = split(ds, cfg)
    predictor = ModelPredictor(train(cfg, tr, va, rules).model, rules)

print(f"{'displacement':>12s} {'energy':>10s} {'c_moving':>9s} {'c_static':>9s}")
for row in moving_atom_sweep(predictor, seed, atom=0):
    cm = "-" if row["c_moving"] is None else f"{row['c_moving']:.4f}"
    cs = "-" if row["c_static_mean"] is None else f"{row['c_static_mean']:.4f}"
    print(f"{row['displacement']:12.3f} {row['energy']:10.5f} {cm:>9s} {cs:>9s}")
