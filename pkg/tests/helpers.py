"""Small models and graphs shared by the backbone tests."""
import numpy as np

from chemgnn.chemgraph import GraphBatch, build_graph, molecule_rules
from chemgnn.datagen import gen_synthetic_molecules
from chemgnn.mpnn import Mpnn, MpnnConfig
from chemgnn.schnet import Schnet, SchnetConfig

ELEMS = ("H", "C", "N", "O")
MOL_RELATIONS = molecule_rules().relations
MPNN_VARIANTS = ("message", "weighting-scalar", "weighting-vector", "update-separate", "update-concat", "update-tied")
SCHNET_VARIANTS = ("message", "weighting-scalar", "weighting-vector", "update-separate")
ALL_TASKS = ("atom-counts", "orbital-counts", "scaling-distribution")


def tiny_mpnn(variant="none", **kw):
    cfg = dict(elements=ELEMS, relations=MOL_RELATIONS, state_size=4, edge_hidden=3, readout_hidden=3)
    cfg.update(kw)
    return Mpnn(MpnnConfig(variant=variant, **cfg))


def tiny_schnet(variant="none", **kw):
    cfg = dict(elements=ELEMS, relations=MOL_RELATIONS, state_size=4, n_rbf=5, rbf_gamma=0.5, readout_hidden=3)
    cfg.update(kw)
    return Schnet(SchnetConfig(variant=variant, **cfg))


def molecules(count, seed, sizes=(2, 5)):
    return gen_synthetic_molecules(count, sizes, element_set=ELEMS, rng=seed)


def graphs(systems, mode="bonded-only", btf=False):
    return [build_graph(s, molecule_rules(), mode, ELEMS, btf) for s in systems]


def batch_of(systems, mode="bonded-only", btf=False):
    return GraphBatch.from_graphs(graphs(systems, mode, btf))


def randomise(model, seed, spread=0.3):
    """Move every parameter off its initial value, including mixing logits."""
    rng = np.random.default_rng(seed)
    for k, p in model.params.items():
        if "lambda" in k:
            p.data[...] = 1.0 + spread * rng.normal(size=p.shape)
        elif "alpha" in k:
            p.data[...] = rng.normal(size=p.shape)
        else:
            p.data[...] += spread * rng.normal(size=p.shape) / np.sqrt(max(1, p.shape[-1]))
    n_el = len(model.config.elements)
    model.set_energy_normalisation(rng.normal(size=n_el), 0.5 + rng.random())
    return model


def share_base(src, dst):
    """Copy every parameter and buffer the two models have in common."""
    for k, p in dst.params.items():
        if k in src.params:
            p.data[...] = src.params[k].data
    dst.store.buffers = {k: v.copy() for k, v in src.store.buffers.items()}


def force_alpha_one(model):
    for k, p in model.params.items():
        if k.endswith("alpha.logit"):
            p.data[...] = np.inf
