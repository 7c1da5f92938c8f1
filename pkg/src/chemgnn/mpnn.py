"""Message passing network with an edge network and a gated node update.

Each edge's feature vector (distance, optionally a one-hot bond code) goes
through a two-layer perceptron that emits a ``d x d`` matrix; the message
from ``w`` to ``v`` is that matrix applied to ``h_w``.  Node states start as
zero-padded one-hot element codes, are updated ``T`` times by a GRU, and a
per-node perceptron on ``[h^0; ...; h^T]`` gives each atom's energy term.

Relation-aware variants (``config.variant``):

``message``
    per-relation edge networks, blended with the generic one by ``alpha``.
``weighting-scalar`` / ``weighting-vector``
    the aggregated message is ``alpha * sum(m) + (1 - alpha) *
    sum_r lambda_r * sum_{N^r}(m)``.
``update-separate``
    one extra GRU per relation on that relation's partial message sum.
``update-concat``
    one wide GRU reading ``[m^1; ...; m^R]``.
``update-tied``
    as ``update-concat`` with every relation block tied to one matrix.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffkernel as dk
from .chemgraph import ELEMENTS, GraphBatch
from .errors import ConfigurationError
from .multitask import aux_heads_forward, init_aux_heads
from .nn import (
    BASE,
    MIXING,
    SPECIALISED,
    EnergyModel,
    Prediction,
    init_mlp,
    mlp,
    sum_mean_pool,
)

GRU_KEYS = ("Wz", "Wr", "Wh", "bz", "br", "bh")


def config_from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**kw)


@dataclass
class MpnnConfig:
    elements: tuple = ELEMENTS
    relations: tuple = ("single", "double", "no-bond")
    connectivity: str = "bonded-only"
    variant: str = "none"
    state_size: int = 73
    iterations: int = 3
    edge_hidden: int = 128
    readout_hidden: int = 128
    bond_type_feature: bool = False
    aux_tasks: tuple = ()
    n_grid: int = 13
    seed: int = 0

    def __post_init__(self):
        self.elements, self.relations, self.aux_tasks = tuple(self.elements), tuple(self.relations), tuple(self.aux_tasks)
        if self.state_size < len(self.elements):
            raise ConfigurationError(f"state size {self.state_size} cannot hold {len(self.elements)} element codes")
        if self.iterations < 1:
            raise ConfigurationError("at least one message-passing iteration is required")
        if self.connectivity not in ("bonded-only", "fully-connected"):
            raise ConfigurationError(f"unknown connectivity {self.connectivity!r}")

    @property
    def edge_feature_size(self) -> int:
        return 1 + (len(self.relations) if self.bond_type_feature else 0)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "MpnnConfig":
        return config_from_dict(cls, d)


def _gru(store, prefix: str) -> dk.GruParams:
    p = [store[f"{prefix}.{k}"] for k in GRU_KEYS]
    return dk.GruParams(*p)


class Mpnn(EnergyModel):
    family = "mpnn"

    def __init__(self, config: MpnnConfig):
        super().__init__(config)
        c, s = config, self.store
        d, R = c.state_size, len(self.active)
        edge_sizes = [c.edge_feature_size, c.edge_hidden, d * d]
        last = 1.0 / math.sqrt(d)
        init_mlp(s, "message.base", edge_sizes, BASE, last)
        self._init_gru("update.base", d, d, BASE)
        v = c.variant
        if v != "none":
            s.add("alpha.logit", np.zeros(1), MIXING)
        if v == "message":
            for k in range(R):
                init_mlp(s, f"message.r{k}", edge_sizes, SPECIALISED, last)
        elif v in ("weighting-scalar", "weighting-vector"):
            shape = (1,) if v == "weighting-scalar" else (d,)
            for k in range(R):
                s.add(f"lambda.r{k}", np.ones(shape), SPECIALISED)
        elif v == "update-separate":
            for k in range(R):
                self._init_gru(f"update.r{k}", d, d, SPECIALISED)
        elif v == "update-concat":
            self._init_gru("update.impl2", d, R * d, SPECIALISED)
        elif v == "update-tied":
            fan = 2 * d
            for g in "zrh":
                s.uniform(f"update.impl3.W{g}", (d, d), fan, SPECIALISED)
                s.uniform(f"update.impl3.Q{g}", (d, d), fan, SPECIALISED)
            for g in "zrh":
                s.uniform(f"update.impl3.b{g}", (d,), fan, SPECIALISED)
        readout_in = (c.iterations + 1) * d
        init_mlp(s, "readout", [readout_in, c.readout_hidden, 1], BASE)
        if c.aux_tasks:
            init_aux_heads(s, "", 2 * c.readout_hidden, c.aux_tasks, len(c.elements), c.n_grid)

    def _init_gru(self, prefix: str, d: int, n_in: int, role: str) -> None:
        fan = d + n_in
        for g in "zrh":
            self.store.uniform(f"{prefix}.W{g}", (d, d + n_in), fan, role)
        for g in "zrh":
            self.store.uniform(f"{prefix}.b{g}", (d,), fan, role)

    # -- pieces ----------------------------------------------------------------

    def tied_gru(self) -> dk.GruParams:
        """Wide GRU whose relation blocks are stacked copies of the Q matrices."""
        s, R = self.store, len(self.active)
        W = [dk.concat([s[f"update.impl3.W{g}"]] + [s[f"update.impl3.Q{g}"]] * R, axis=1) for g in "zrh"]
        b = [s[f"update.impl3.b{g}"] for g in "zrh"]
        return dk.GruParams(*W, *b)

    def edge_matrices(self, prefix: str, feats: np.ndarray) -> dk.Tensor:
        d = self.config.state_size
        out = mlp(self.store, prefix, dk.constant(feats), 2)
        return dk.reshape(out, (feats.shape[0], d, d))

    def initial_state(self, batch: GraphBatch) -> dk.Tensor:
        x = batch.node_features
        h0 = np.zeros((batch.n_nodes, self.config.state_size))
        h0[:, : x.shape[1]] = x
        return dk.constant(h0)

    def alpha_tensor(self) -> dk.Tensor:
        return dk.sigmoid(self.store["alpha.logit"])

    def messages(self, h: dk.Tensor, batch: GraphBatch, A: dk.Tensor, A_rel: list) -> tuple:
        """Aggregated message, per-edge messages and (message variant) the blend."""
        m_e = dk.edge_matvec(A, batch.edge_feature_inverse, dk.gather(h, batch.src))
        m = dk.segment_sum(m_e, batch.dst, batch.n_nodes)
        if self.config.variant == "message":
            spec = None
            for k, r in enumerate(self.active):
                edges, _, finv, _, _ = batch.relation_edges(r)
                mr = dk.edge_matvec(A_rel[k], finv, dk.gather(h, batch.src[edges]))
                part = dk.segment_sum(mr, batch.dst[edges], batch.n_nodes)
                spec = part if spec is None else spec + part
            a = self.alpha_tensor()
            m = a * m + (1.0 - a) * spec
        return m, m_e

    def update(self, h: dk.Tensor, m: dk.Tensor, m_e: dk.Tensor, batch: GraphBatch) -> dk.Tensor:
        v, s = self.config.variant, self.store
        if v in ("weighting-scalar", "weighting-vector"):
            S = self.relation_sums(m_e, batch)
            lam = dk.concat([dk.reshape(s[f"lambda.r{k}"], (1, -1)) for k in range(len(self.active))], axis=0)
            a = self.alpha_tensor()
            m = a * m + (1.0 - a) * dk.tsum(S * lam, axis=1)
            return dk.gru_step(h, m, _gru(s, "update.base"))
        base = dk.gru_step(h, m, _gru(s, "update.base"))
        if v in ("none", "message"):
            return base
        a = self.alpha_tensor()
        S = self.relation_sums(m_e, batch)
        if v == "update-separate":
            spec = None
            for k in range(len(self.active)):
                u = dk.gru_step(h, S[:, k, :], _gru(s, f"update.r{k}"))
                spec = u if spec is None else spec + u
        else:
            wide = dk.reshape(S, (batch.n_nodes, -1))
            p = _gru(s, "update.impl2") if v == "update-concat" else self.tied_gru()
            spec = dk.gru_step(h, wide, p)
        return a * base + (1.0 - a) * spec

    def forward(self, batch: GraphBatch) -> Prediction:
        c = self.config
        feats = batch.unique_edge_features
        A = self.edge_matrices("message.base", feats)
        A_rel = []
        if c.variant == "message":
            for k, r in enumerate(self.active):
                _, frows, _, _, _ = batch.relation_edges(r)
                A_rel.append(self.edge_matrices(f"message.r{k}", feats[frows]))
        h = self.initial_state(batch)
        states = [h]
        for _ in range(c.iterations):
            m, m_e = self.messages(h, batch, A, A_rel)
            h = self.update(h, m, m_e, batch)
            states.append(h)
        hidden = dk.shifted_softplus(dk.dense_affine(dk.concat(states, axis=1), self.store["readout.l1.W"], self.store["readout.l1.b"]))
        out = dk.dense_affine(hidden, self.store["readout.l2.W"], self.store["readout.l2.b"])
        contrib, energy = self.finish_energy(out, batch)
        pooled = sum_mean_pool(hidden, batch)
        aux = aux_heads_forward(self.store, "", pooled, c.aux_tasks) if c.aux_tasks else {}
        return Prediction(energy, contrib, pooled, aux)
