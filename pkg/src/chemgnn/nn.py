"""Parameter storage, dense stacks and the shared energy-model scaffolding.

Both backbones keep their learnable arrays in a flat, name-keyed
:class:`ParamStore`.  Keys carry a component prefix (``message.base``,
``update.r0``, ``alpha.logit`` ...) and every key is tagged with a role so
that parameter accounting can separate the base network from what a
specialisation adds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import diffkernel as dk
from .chemgraph import NO_BOND, GraphBatch
from .errors import ConfigurationError, DataError

CHECKPOINT_FORMAT = "chemgnn-checkpoint/1"

VARIANTS = (
    "none",
    "message",
    "weighting-scalar",
    "weighting-vector",
    "update-separate",
    "update-concat",
    "update-tied",
)

# roles used by count_params
BASE, SPECIALISED, MIXING, AUX = "base", "specialised", "mixing", "aux"


class ParamStore:
    """Ordered map of named parameters plus non-trainable buffers."""

    def __init__(self, rng: np.random.Generator | None = None):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, dk.Tensor] = {}
        self.roles: dict[str, str] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray, role: str = BASE) -> dk.Tensor:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter {name!r}")
        t = dk.parameter(np.array(value, dtype=np.float64), name=name)
        self.params[name] = t
        self.roles[name] = role
        return t

    def uniform(self, name: str, shape: tuple, fan_in: int, role: str = BASE) -> dk.Tensor:
        return self.add(name, dk.uniform_init(self.rng, shape, fan_in), role)

    def __getitem__(self, name: str) -> dk.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def count(self, role: str | None = None, prefix: str = "") -> int:
        return sum(
            p.size
            for k, p in self.params.items()
            if k.startswith(prefix) and (role is None or self.roles[k] == role)
        )


def init_dense(store: ParamStore, name: str, n_in: int, n_out: int, role: str = BASE, scale: float = 1.0):
    store.add(f"{name}.W", scale * dk.uniform_init(store.rng, (n_out, n_in), n_in), role)
    store.add(f"{name}.b", scale * dk.uniform_init(store.rng, (n_out,), n_in), role)


def dense(store: ParamStore, name: str, x) -> dk.Tensor:
    return dk.dense_affine(x, store[f"{name}.W"], store[f"{name}.b"])


def init_mlp(store: ParamStore, name: str, sizes: list, role: str = BASE, last_scale: float = 1.0):
    """Dense layers ``name.l1 ... name.lK`` between consecutive ``sizes``."""
    for k in range(len(sizes) - 1):
        scale = last_scale if k == len(sizes) - 2 else 1.0
        init_dense(store, f"{name}.l{k + 1}", sizes[k], sizes[k + 1], role, scale)


def mlp(store: ParamStore, name: str, x, n_layers: int, act: str = "shifted-softplus", final_act: bool = False):
    for k in range(n_layers):
        x = dense(store, f"{name}.l{k + 1}", x)
        if k < n_layers - 1 or final_act:
            x = dk.activation(x, act)
    return x


def copy_params(store: ParamStore, src_prefix: str, dst_prefix: str) -> None:
    """Overwrite every ``dst_prefix*`` array with its ``src_prefix*`` twin."""
    for k in list(store.params):
        if k.startswith(src_prefix):
            store[dst_prefix + k[len(src_prefix):]].data[...] = store[k].data


@dataclass
class Prediction:
    """Forward bundle: per-graph energy, per-node contributions, pooled state."""

    energy: dk.Tensor
    contributions: dk.Tensor
    pooled: dk.Tensor
    aux: dict = field(default_factory=dict)


def active_relations(relations: tuple, connectivity: str) -> tuple:
    """Relation indices a model owns kernels for."""
    if connectivity == "bonded-only":
        return tuple(i for i, r in enumerate(relations) if r != NO_BOND)
    return tuple(range(len(relations)))


def check_relations(batch: GraphBatch, relations: tuple, active: tuple) -> None:
    if tuple(batch.relations) != tuple(relations):
        raise DataError(f"batch relations {batch.relations} differ from the model catalogue {relations}")
    if batch.n_edges:
        bad = np.setdiff1d(np.unique(batch.relation), np.asarray(active))
        if bad.size:
            names = [relations[i] if 0 <= i < len(relations) else str(i) for i in bad]
            raise DataError(f"edges carry relations {names} outside the model's relation set")


def sum_pool(x: dk.Tensor, batch: GraphBatch) -> dk.Tensor:
    return dk.segment_sum(x, batch.node_graph, batch.n_graphs)


def sum_mean_pool(x: dk.Tensor, batch: GraphBatch) -> dk.Tensor:
    """Per-graph ``[sum; mean]`` of node rows."""
    s = sum_pool(x, batch)
    inv = dk.constant((1.0 / batch.sizes)[:, None])
    return dk.concat([s, s * inv], axis=1)


class EnergyModel:
    """Common surface of the two backbones.

    Subclasses fill ``self.store`` and implement :meth:`forward`.  Energies
    leave the model in physical units: the per-node network output is
    multiplied by ``energy.scale`` and shifted by a per-element
    ``energy.shift`` buffer, so contributions always sum to the energy.
    """

    family = "abstract"

    def __init__(self, config):
        self.config = config
        self.store = ParamStore(np.random.default_rng(config.seed))
        n_el = len(config.elements)
        self.store.buffers["energy.shift"] = np.zeros(n_el)
        self.store.buffers["energy.scale"] = np.ones(1)
        if config.variant not in VARIANTS:
            raise ConfigurationError(f"unknown specialisation {config.variant!r}; expected one of {VARIANTS}")
        self.active = active_relations(tuple(config.relations), config.connectivity)
        if config.variant != "none" and not self.active:
            raise ConfigurationError("specialisation needs at least one relation")
        # catalogue index -> position among the model's own relations
        self.local = np.full(len(config.relations), -1, dtype=np.int64)
        self.local[list(self.active)] = np.arange(len(self.active))

    # -- parameters ---------------------------------------------------------

    @property
    def params(self) -> dict:
        return self.store.params

    def alpha_values(self) -> np.ndarray:
        key = self.key("alpha.logit")
        if key not in self.store:
            return np.ones(0)
        return expit(self.store[key].data)

    @property
    def alpha(self) -> float | None:
        """Reported mixing weight: mean of the sigmoid of every alpha logit."""
        a = self.alpha_values()
        return float(a.mean()) if a.size else None

    def key(self, name: str) -> str:
        return name

    def set_energy_normalisation(self, shift: np.ndarray, scale: float) -> None:
        self.store.buffers["energy.shift"] = np.asarray(shift, dtype=np.float64).copy()
        self.store.buffers["energy.scale"] = np.array([float(scale)])

    def finish_energy(self, node_out: dk.Tensor, batch: GraphBatch) -> tuple:
        """Per-node contributions in physical units and their per-graph sums."""
        scale = self.store.buffers["energy.scale"][0]
        shift = self.store.buffers["energy.shift"][batch.element_index]
        contrib = dk.reshape(node_out, (batch.n_nodes,)) * scale + dk.constant(shift)
        energy = dk.segment_sum(contrib, batch.node_graph, batch.n_graphs)
        return contrib, energy

    def count_params(self) -> dict:
        """Exact parameter counts by role.

        ``added`` is what the specialisation contributes on top of the base
        network (mixing logits are listed separately and not included);
        ``percent`` is ``100 * added / base``.
        """
        s = self.store
        base, spec, mix, aux = s.count(BASE), s.count(SPECIALISED), s.count(MIXING), s.count(AUX)
        return {
            "base": base,
            "added": spec,
            "mixing": mix,
            "aux": aux,
            "total": base + spec + mix + aux,
            "percent": 100.0 * spec / base,
        }

    # -- forward ------------------------------------------------------------

    def relation_sums(self, m_e: dk.Tensor, batch: GraphBatch) -> dk.Tensor:
        """``(N, R, d)`` partial sums of edge messages per owned relation."""
        R = len(self.active)
        seg = batch.dst * R + self.local[batch.relation]
        s = dk.segment_sum(m_e, seg, batch.n_nodes * R)
        return dk.reshape(s, (batch.n_nodes, R, m_e.shape[1]))

    def forward(self, batch: GraphBatch) -> Prediction:
        raise NotImplementedError

    def __call__(self, batch: GraphBatch) -> Prediction:
        check_relations(batch, tuple(self.config.relations), self.active if self.config.variant != "none" else tuple(range(len(self.config.relations))))
        return self.forward(batch)

    def predict_energy(self, batch: GraphBatch) -> np.ndarray:
        return self(batch).energy.data.copy()

    # -- checkpoints ----------------------------------------------------------

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.store.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.store.params) - set(state)
        extra = set(state) - set(self.store.params) - set(self.store.buffers)
        if missing or extra:
            raise DataError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, p in self.store.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise DataError(f"checkpoint array {k!r} has shape {v.shape}, expected {p.shape}")
            p.data[...] = v
        for k in self.store.buffers:
            if k in state:
                self.store.buffers[k] = np.asarray(state[k], dtype=np.float64).reshape(self.store.buffers[k].shape)

    def to_checkpoint(self) -> dict:
        def enc(a):
            return {"shape": list(a.shape), "data": np.asarray(a).reshape(-1).tolist()}

        return {
            "format": CHECKPOINT_FORMAT,
            "family": self.family,
            "config": self.config.to_dict(),
            "params": {k: enc(p.data) for k, p in self.store.params.items()},
            "buffers": {k: enc(v) for k, v in self.store.buffers.items()},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_checkpoint(), sort_keys=True, separators=(",", ":")))


def decode_arrays(blob: dict) -> dict:
    out = {}
    for k, v in blob.items():
        out[k] = np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
    return out
