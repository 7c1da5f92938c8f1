"""How many parameters each relation-aware variant adds to the base network."""
from chemgnn.chemgraph import molecule_rules
from chemgnn.models import build_model
from chemgnn.nn import VARIANTS

rules = molecule_rules()
print(f"relations owned (bonded-only): {[r for r in rules.relations if r != 'no-bond']}\n")
print(f"{'backbone':8s} {'variant':18s} {'base':>9s} {'added':>9s} {'+%':>8s}")
for backbone in ("mpnn", "schnet"):
    for variant in VARIANTS:
        try:
            model = build_model(backbone, {"variant": variant, "relations": list(rules.relations)})
        except Exception:
            continue  # update-concat / update-tied exist for the GRU update only
        c = model.count_params()
        print(f"{backbone:8s} {variant:18s} {c['base']:9d} {c['added']:9d} {c['percent']:8.2f}")
