"""Continuous-filter convolution network with residual interaction layers.

Node states start from a per-element embedding.  In each of ``L``
interaction layers every neighbour's state goes through a dense layer and is
multiplied element-wise by a filter generated from the pair distance
(Gaussian basis expansion, then two shifted-softplus dense layers); the
summed result feeds a residual update ``h + V(m)``.  Layers share no
weights.  An atom-wise stack maps each final state to one scalar.

Relation-aware variants (``config.variant``):

``message``
    per-relation filters, blended with the generic filter term by ``alpha``.
``weighting-scalar`` / ``weighting-vector``
    ``alpha * sum(m) + (1 - alpha) * sum_r lambda_r * sum_{N^r}(m)``.
``update-separate``
    ``h + alpha * V(m) + (1 - alpha) * sum_r V_r(m^r)``.

Every layer has its own alpha logit unless ``tie_alpha`` is set.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffkernel as dk
from .chemgraph import ELEMENTS, GraphBatch
from .errors import ConfigurationError
from .mpnn import config_from_dict
from .multitask import aux_heads_forward, init_aux_heads
from .nn import BASE, MIXING, SPECIALISED, EnergyModel, Prediction, dense, init_mlp, mlp, sum_mean_pool

SCHNET_VARIANTS = ("none", "message", "weighting-scalar", "weighting-vector", "update-separate")


@dataclass
class SchnetConfig:
    elements: tuple = ELEMENTS
    relations: tuple = ("single", "double", "no-bond")
    connectivity: str = "fully-connected"
    variant: str = "none"
    state_size: int = 128
    layers: int = 3
    n_rbf: int | None = None
    rbf_cutoff: float = 8.0
    rbf_gamma: float = 10.0
    readout_hidden: int | None = None
    literal_eq6: bool = False
    tie_alpha: bool = False
    aux_tasks: tuple = ()
    n_grid: int = 13
    seed: int = 0

    def __post_init__(self):
        self.elements, self.relations, self.aux_tasks = tuple(self.elements), tuple(self.relations), tuple(self.aux_tasks)
        if self.variant not in SCHNET_VARIANTS:
            raise ConfigurationError(f"variant {self.variant!r} is not available for this backbone; expected one of {SCHNET_VARIANTS}")
        if self.layers < 1:
            raise ConfigurationError("at least one interaction layer is required")
        if self.connectivity not in ("bonded-only", "fully-connected"):
            raise ConfigurationError(f"unknown connectivity {self.connectivity!r}")
        if self.rbf_cutoff <= 0 or self.rbf_gamma <= 0:
            raise ConfigurationError("radial basis cutoff and width must be positive")

    @property
    def rbf_size(self) -> int:
        # mirrors the state size by default, so filters and update networks match in size
        return self.n_rbf or self.state_size

    @property
    def readout_size(self) -> int:
        return self.readout_hidden or max(1, self.state_size // 2)

    def centers(self) -> np.ndarray:
        return np.linspace(0.0, self.rbf_cutoff, self.rbf_size)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SchnetConfig":
        return config_from_dict(cls, d)


class Schnet(EnergyModel):
    family = "schnet"

    def __init__(self, config: SchnetConfig):
        super().__init__(config)
        c, s = config, self.store
        F, K, R = c.state_size, c.rbf_size, len(self.active)
        s.uniform(self.key("embedding"), (len(c.elements), F), 1)
        for l in range(c.layers):
            p = self.key(f"layer{l}")
            init_mlp(s, f"{p}.dense", [F, F], BASE)
            init_mlp(s, f"{p}.filter.base", [K, F, F], BASE)
            init_mlp(s, f"{p}.update.base", [F, F, F], BASE)
            if c.variant == "message":
                for k in range(R):
                    init_mlp(s, f"{p}.filter.r{k}", [K, F, F], SPECIALISED)
            elif c.variant == "update-separate":
                for k in range(R):
                    init_mlp(s, f"{p}.update.r{k}", [F, F, F], SPECIALISED)
        if c.variant in ("weighting-scalar", "weighting-vector"):
            shape = (1,) if c.variant == "weighting-scalar" else (F,)
            for k in range(R):
                s.add(self.key(f"lambda.r{k}"), np.ones(shape), SPECIALISED)
        if c.variant != "none":
            s.add(self.key("alpha.logit"), np.zeros(1 if c.tie_alpha else c.layers), MIXING)
        init_mlp(s, self.key("readout"), [F, c.readout_size, 1], BASE)
        if c.aux_tasks:
            init_aux_heads(s, self.key(""), 2 * c.readout_size, c.aux_tasks, len(c.elements), c.n_grid)

    def key(self, name: str) -> str:
        return f"schnet.{name}"

    def alpha_tensor(self, layer: int) -> dk.Tensor:
        logit = self.store[self.key("alpha.logit")]
        return dk.sigmoid(logit[0:1] if self.config.tie_alpha else logit[layer:layer + 1])

    def filters(self, layer: int, which: str, rbf: np.ndarray) -> dk.Tensor:
        """Filter rows for each given basis row; shifted softplus after both layers."""
        return mlp(self.store, self.key(f"layer{layer}.filter.{which}"), dk.constant(rbf), 2, final_act=True)

    def interaction(self, h: dk.Tensor, layer: int, batch: GraphBatch, rbf: np.ndarray) -> tuple:
        """Aggregated message and per-edge messages of one layer."""
        c = self.config
        p = self.key(f"layer{layer}")
        x = dense(self.store, f"{p}.dense.l1", h)
        filt = self.filters(layer, "base", rbf)
        m_e = dk.gather(x, batch.src) * dk.gather(filt, batch.distance_inverse)
        m = dk.segment_sum(m_e, batch.dst, batch.n_nodes)
        if c.variant == "message":
            source = h if c.literal_eq6 else x
            spec = None
            for k, r in enumerate(self.active):
                edges, _, _, drows, dinv = batch.relation_edges(r)
                fr = self.filters(layer, f"r{k}", rbf[drows])
                part = dk.segment_sum(dk.gather(source, batch.src[edges]) * dk.gather(fr, dinv), batch.dst[edges], batch.n_nodes)
                spec = part if spec is None else spec + part
            a = self.alpha_tensor(layer)
            m = a * m + (1.0 - a) * spec
        elif c.variant in ("weighting-scalar", "weighting-vector"):
            S = self.relation_sums(m_e, batch)
            lam = dk.concat([dk.reshape(self.store[self.key(f"lambda.r{k}")], (1, -1)) for k in range(len(self.active))], axis=0)
            a = self.alpha_tensor(layer)
            m = a * m + (1.0 - a) * dk.tsum(S * lam, axis=1)
        return m, m_e

    def update(self, h: dk.Tensor, m: dk.Tensor, m_e: dk.Tensor, layer: int, batch: GraphBatch) -> dk.Tensor:
        p = self.key(f"layer{layer}")
        v = mlp(self.store, f"{p}.update.base", m, 2)
        if self.config.variant != "update-separate":
            return h + v
        S = self.relation_sums(m_e, batch)
        spec = None
        for k in range(len(self.active)):
            u = mlp(self.store, f"{p}.update.r{k}", S[:, k, :], 2)
            spec = u if spec is None else spec + u
        a = self.alpha_tensor(layer)
        return h + a * v + (1.0 - a) * spec

    def forward(self, batch: GraphBatch) -> Prediction:
        c = self.config
        rbf = dk.rbf_expand(batch.unique_distance, c.centers(), c.rbf_gamma)
        h = dk.gather(self.store[self.key("embedding")], batch.element_index)
        for l in range(c.layers):
            m, m_e = self.interaction(h, l, batch, rbf)
            h = self.update(h, m, m_e, l, batch)
        r = self.key("readout")
        hidden = dk.shifted_softplus(dense(self.store, f"{r}.l1", h))
        out = dense(self.store, f"{r}.l2", hidden)
        contrib, energy = self.finish_energy(out, batch)
        pooled = sum_mean_pool(hidden, batch)
        aux = aux_heads_forward(self.store, self.key(""), pooled, c.aux_tasks) if c.aux_tasks else {}
        return Prediction(energy, contrib, pooled, aux)
