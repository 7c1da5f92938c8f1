"""Chemical systems, bond typing and typed-graph construction."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, DomainError

NO_BOND = "no-bond"
ELEMENTS = ("H", "C", "N", "O", "F", "Al", "Cu")
CONNECTIVITY = ("bonded-only", "fully-connected")
DATASET_FORMAT = "chemgnn-dataset/1"


@dataclass(frozen=True, eq=False)
class ChemicalSystem:
    """Atoms and their positions in Angstrom; energy in Hartree when labelled.

    ``bonds`` holds relation labels frozen from the stable geometry as
    ``(i, j, label)`` triples with ``i < j``; pairs not listed are unbonded.
    """

    elements: tuple
    coords: np.ndarray
    energy: float | None = None
    scaling: float | None = None
    provenance: dict = field(default_factory=dict)
    bonds: tuple | None = None

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise DataError(f"coordinates must be (N, 3), got {coords.shape}")
        elements = tuple(self.elements)
        if len(elements) != coords.shape[0] or not elements:
            raise DataError(f"{len(elements)} elements for {coords.shape[0]} coordinate rows")
        coords.flags.writeable = False
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "elements", elements)
        if self.bonds is not None:
            object.__setattr__(self, "bonds", tuple((int(i), int(j), str(l)) for i, j, l in self.bonds))
        _check_no_coincident(coords)

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def system_id(self) -> str | None:
        return self.provenance.get("system_id")

    def with_energy(self, energy: float) -> "ChemicalSystem":
        return replace(self, energy=float(energy))


def _check_no_coincident(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    d = np.sqrt((diff * diff).sum(-1))
    n = len(coords)
    if n > 1 and np.min(d[np.triu_indices(n, 1)]) <= 0.0:
        i, j = np.argwhere(np.triu(d <= 0.0, 1))[0]
        raise DataError(f"atoms {i} and {j} coincide")
    return d


def pairwise_distances(system: ChemicalSystem) -> np.ndarray:
    return _check_no_coincident(system.coords)


@dataclass(frozen=True)
class BondRule:
    r0: float
    label: str
    multiplier: float = 1.2

    def __post_init__(self):
        if self.r0 <= 0 or self.multiplier <= 0:
            raise ConfigurationError(f"bond rule thresholds must be positive: {self}")

    @property
    def threshold(self) -> float:
        return self.r0 * self.multiplier


def _pair(a: str, b: str) -> tuple:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class BondRuleSet:
    rules: Mapping
    relations: tuple

    def __post_init__(self):
        rules = {_pair(*k): v for k, v in self.rules.items()}
        object.__setattr__(self, "rules", rules)
        object.__setattr__(self, "relations", tuple(self.relations))
        for rule in rules.values():
            if rule.label not in self.relations:
                raise ConfigurationError(f"bond label {rule.label!r} missing from relation catalogue")

    def rule(self, a: str, b: str) -> BondRule:
        try:
            return self.rules[_pair(a, b)]
        except KeyError:
            raise ConfigurationError(f"no bond rule for element pair {a}-{b}") from None

    def relation_index(self, label: str) -> int:
        try:
            return self.relations.index(label)
        except ValueError:
            raise DataError(f"relation {label!r} not in catalogue {self.relations}") from None

    def bonded_relations(self) -> tuple:
        return tuple(r for r in self.relations if r != NO_BOND)

    def to_dict(self) -> dict:
        return {
            "relations": list(self.relations),
            "rules": [
                {"pair": list(k), "r0": v.r0, "label": v.label, "multiplier": v.multiplier}
                for k, v in sorted(self.rules.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BondRuleSet":
        rules = {tuple(r["pair"]): BondRule(r["r0"], r["label"], r.get("multiplier", 1.2)) for r in d["rules"]}
        return cls(rules, tuple(d["relations"]))


LATTICE_CONSTANTS = {"Al": 4.05, "Cu": 3.61}


def molecule_rules(multiplier: float = 1.2) -> BondRuleSet:
    table = {
        ("H", "H"): (0.74, "single"),
        ("C", "H"): (1.09, "single"),
        ("H", "N"): (1.01, "single"),
        ("H", "O"): (0.96, "single"),
        ("C", "C"): (1.54, "single"),
        ("C", "N"): (1.47, "single"),
        ("C", "O"): (1.23, "double"),
        ("N", "N"): (1.45, "single"),
        ("N", "O"): (1.21, "double"),
        ("O", "O"): (1.48, "single"),
    }
    rules = {k: BondRule(r0, label, multiplier) for k, (r0, label) in table.items()}
    return BondRuleSet(rules, ("single", "double", NO_BOND))


def crystal_rules(multiplier: float = 1.2) -> BondRuleSet:
    nn = {el: a / math.sqrt(2.0) for el, a in LATTICE_CONSTANTS.items()}
    rules = {
        ("Al", "Al"): BondRule(nn["Al"], "metallic", multiplier),
        ("Cu", "Cu"): BondRule(nn["Cu"], "metallic", multiplier),
        ("Al", "Cu"): BondRule(0.5 * (nn["Al"] + nn["Cu"]), "metallic", multiplier),
    }
    return BondRuleSet(rules, ("metallic", NO_BOND))


def _bonded_from_geometry(system: ChemicalSystem, rules: BondRuleSet, d: np.ndarray) -> tuple:
    n = len(system)
    iu, ju = np.triu_indices(n, 1)
    species = sorted(set(system.elements))
    code = np.array([species.index(e) for e in system.elements])
    threshold = np.zeros((len(species), len(species)))
    label_of = {}
    for a_i, a in enumerate(species):
        for b_i, b in enumerate(species):
            rule = rules.rule(a, b)
            threshold[a_i, b_i] = rule.threshold
            label_of[(a_i, b_i)] = rule.label
    ci, cj = code[iu], code[ju]
    keep = d[iu, ju] <= threshold[ci, cj]
    i, j = iu[keep], ju[keep]
    return i, j, [label_of[(a, b)] for a, b in zip(ci[keep].tolist(), cj[keep].tolist())]


def bonded_pairs(system: ChemicalSystem, rules: BondRuleSet, d: np.ndarray | None = None) -> tuple:
    """Arrays ``i < j`` and labels of bonded pairs, frozen labels taking precedence."""
    if system.bonds is not None:
        if not system.bonds:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), []
        i, j, labels = zip(*system.bonds)
        return np.array(i, dtype=np.int64), np.array(j, dtype=np.int64), list(labels)
    if d is None:
        d = pairwise_distances(system)
    return _bonded_from_geometry(system, rules, d)


def assign_bond_types(system: ChemicalSystem, rules: BondRuleSet) -> dict:
    """Label every atom pair ``(i, j)``, ``i < j``, from the current geometry."""
    d = pairwise_distances(system)
    n = len(system)
    labels = {(i, j): NO_BOND for i in range(n) for j in range(i + 1, n)}
    for i, j, l in zip(*_bonded_from_geometry(system, rules, d)):
        labels[(int(i), int(j))] = l
    return labels


def freeze_bonds(system: ChemicalSystem, rules: BondRuleSet) -> ChemicalSystem:
    """Attach the bonded pairs of the current geometry so scaled copies keep them."""
    i, j, labels = _bonded_from_geometry(system, rules, pairwise_distances(system))
    return replace(system, bonds=tuple(zip(i.tolist(), j.tolist(), labels)))


def pair_labels(system: ChemicalSystem, rules: BondRuleSet) -> dict:
    if system.bonds is None:
        return assign_bond_types(system, rules)
    n = len(system)
    labels = {(i, j): NO_BOND for i in range(n) for j in range(i + 1, n)}
    for i, j, label in system.bonds:
        labels[(i, j)] = label
    return labels


def scale_system(system: ChemicalSystem, lam: float) -> ChemicalSystem:
    """Multiply every coordinate by ``lam`` about the origin."""
    if not lam > 0:
        raise DomainError(f"scaling must be positive, got {lam}")
    base = 1.0 if system.scaling is None else system.scaling
    return replace(system, coords=system.coords * lam, scaling=base * lam, energy=None)


@dataclass(frozen=True, eq=False)
class TypedGraph:
    """Atoms as nodes and undirected typed edges ``src < dst``."""

    elements: tuple
    element_index: np.ndarray
    node_features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    relation: np.ndarray
    distance: np.ndarray
    edge_features: np.ndarray
    relations: tuple
    mode: str

    @property
    def n_nodes(self) -> int:
        return len(self.element_index)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def neighbours(self, v: int, relation: str | None = None) -> set:
        mask = np.ones(self.n_edges, dtype=bool)
        if relation is not None:
            mask &= self.relation == self.relations.index(relation)
        out = set(self.dst[mask & (self.src == v)].tolist())
        out |= set(self.src[mask & (self.dst == v)].tolist())
        return out


def build_graph(
    system: ChemicalSystem,
    rules: BondRuleSet,
    mode: str = "bonded-only",
    elements: Sequence[str] = ELEMENTS,
    bond_type_feature: bool = False,
) -> TypedGraph:
    """Typed graph of a system.

    Bonded-only graphs drop ``no-bond`` pairs; fully-connected graphs keep
    them with that relation. Edge features are the distance, followed by a
    one-hot relation code when ``bond_type_feature`` is set.
    """
    if mode not in CONNECTIVITY:
        raise ConfigurationError(f"unknown connectivity {mode!r}")
    elements = tuple(elements)
    try:
        eidx = np.array([elements.index(e) for e in system.elements], dtype=np.int64)
    except ValueError:
        raise ConfigurationError(f"element outside catalogue {elements}: {set(system.elements)}") from None
    d = pairwise_distances(system)
    bi, bj, blabels = bonded_pairs(system, rules, d)
    brel = np.array([rules.relation_index(l) for l in blabels], dtype=np.int64)
    if mode == "bonded-only":
        order = np.lexsort((bj, bi))
        src, dst, rel = bi[order], bj[order], brel[order]
    else:
        n = len(system)
        src, dst = np.triu_indices(n, 1)
        rel_m = np.full((n, n), rules.relation_index(NO_BOND), dtype=np.int64)
        rel_m[bi, bj] = brel
        rel = rel_m[src, dst]
        src, dst = src.astype(np.int64), dst.astype(np.int64)
    dist = d[src, dst] if len(src) else np.zeros(0)
    feats = [dist[:, None]]
    if bond_type_feature:
        feats.append(np.eye(len(rules.relations))[rel] if len(rel) else np.zeros((0, len(rules.relations))))
    return TypedGraph(
        elements=elements,
        element_index=eidx,
        node_features=np.eye(len(elements))[eidx],
        src=src,
        dst=dst,
        relation=rel,
        distance=dist,
        edge_features=np.concatenate(feats, axis=1),
        relations=rules.relations,
        mode=mode,
    )


def _unique_rows(x: np.ndarray, decimals: int = 10) -> tuple:
    if len(x) == 0:
        return np.zeros((0,) + x.shape[1:]), np.zeros(0, dtype=np.int64)
    key = np.round(x, decimals)
    if key.shape[1] == 1:
        _, first, inv = np.unique(key[:, 0], return_index=True, return_inverse=True)
    else:
        order = np.lexsort(key.T[::-1])
        k = key[order]
        new = np.ones(len(k), dtype=bool)
        new[1:] = np.any(k[1:] != k[:-1], axis=1)
        group = np.cumsum(new) - 1
        first = order[new]
        inv = np.empty(len(k), dtype=np.int64)
        inv[order] = group
    return x[first], inv.reshape(-1)


@dataclass(eq=False)
class GraphBatch:
    """Disjoint union of graphs with directed edges in both directions.

    Edge ``e`` carries a message from ``src[e]`` to ``dst[e]``. Distinct edge
    feature rows (and distinct distances) are deduplicated so that
    distance-only networks run once per distinct value.
    """

    n_graphs: int
    n_nodes: int
    node_graph: np.ndarray
    element_index: np.ndarray
    node_features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    relation: np.ndarray
    distance: np.ndarray
    unique_distance: np.ndarray
    distance_inverse: np.ndarray
    unique_edge_features: np.ndarray
    edge_feature_inverse: np.ndarray
    relations: tuple
    sizes: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_graphs(cls, graphs: Sequence[TypedGraph]) -> "GraphBatch":
        if not graphs:
            raise DataError("cannot batch zero graphs")
        relations = graphs[0].relations
        offset = 0
        src, dst, rel, dist, ef, node_graph = [], [], [], [], [], []
        for g_i, g in enumerate(graphs):
            if g.relations != relations:
                raise DataError("graphs in a batch must share one relation catalogue")
            s, t = g.src + offset, g.dst + offset
            src += [s, t]
            dst += [t, s]
            rel += [g.relation, g.relation]
            dist += [g.distance, g.distance]
            ef += [g.edge_features, g.edge_features]
            node_graph.append(np.full(g.n_nodes, g_i, dtype=np.int64))
            offset += g.n_nodes
        distance = np.concatenate(dist)
        edge_features = np.concatenate(ef)
        ud, dinv = _unique_rows(distance[:, None])
        uf, finv = _unique_rows(edge_features)
        return cls(
            n_graphs=len(graphs),
            n_nodes=offset,
            node_graph=np.concatenate(node_graph),
            element_index=np.concatenate([g.element_index for g in graphs]),
            node_features=np.concatenate([g.node_features for g in graphs]),
            src=np.concatenate(src),
            dst=np.concatenate(dst),
            relation=np.concatenate(rel),
            distance=distance,
            unique_distance=ud[:, 0],
            distance_inverse=dinv,
            unique_edge_features=uf,
            edge_feature_inverse=finv,
            relations=relations,
            sizes=np.array([g.n_nodes for g in graphs], dtype=np.int64),
        )

    @property
    def n_edges(self) -> int:
        return len(self.src)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def relation_edges(self, r: int) -> tuple:
        """Edges of relation ``r`` with their own distinct-feature tables.

        Returns ``(edges, feature_rows, feature_inverse, distance_rows,
        distance_inverse)`` where the row arrays index the batch-wide
        ``unique_*`` tables and the inverses map each selected edge onto them.
        """
        key = ("relation", r)
        if key not in self.cache:
            edges = np.flatnonzero(self.relation == r)
            frows, finv = np.unique(self.edge_feature_inverse[edges], return_inverse=True)
            drows, dinv = np.unique(self.distance_inverse[edges], return_inverse=True)
            self.cache[key] = (edges, frows, finv.reshape(-1), drows, dinv.reshape(-1))
        return self.cache[key]


# -- serialisation ---------------------------------------------------------


def system_to_record(system: ChemicalSystem) -> dict:
    rec = {
        "elements": list(system.elements),
        "coords": system.coords.tolist(),
        "energy": system.energy,
        "scaling": system.scaling,
        "provenance": system.provenance,
    }
    if system.bonds is not None:
        rec["bonds"] = [list(b) for b in system.bonds]
    return rec


_RECORD_KEYS = {"elements", "coords", "energy", "scaling", "provenance", "bonds"}


def system_from_record(rec: dict) -> ChemicalSystem:
    unknown = set(rec) - _RECORD_KEYS
    if unknown:
        raise DataError(f"unknown system record keys {sorted(unknown)}")
    return ChemicalSystem(
        elements=tuple(rec["elements"]),
        coords=np.array(rec["coords"], dtype=np.float64),
        energy=rec.get("energy"),
        scaling=rec.get("scaling"),
        provenance=dict(rec.get("provenance") or {}),
        bonds=None if rec.get("bonds") is None else tuple(tuple(b) for b in rec["bonds"]),
    )


@dataclass
class Dataset:
    systems: list
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.systems)

    def __iter__(self):
        return iter(self.systems)

    def subset(self, systems: Iterable[ChemicalSystem], **extra) -> "Dataset":
        return Dataset(list(systems), {**self.metadata, **extra})

    def to_json(self) -> str:
        payload = {
            "format": DATASET_FORMAT,
            "metadata": self.metadata,
            "systems": [system_to_record(s) for s in self.systems],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from None
        if payload.get("format") != DATASET_FORMAT:
            raise DataError(f"{path}: expected format {DATASET_FORMAT!r}, got {payload.get('format')!r}")
        return cls([system_from_record(r) for r in payload["systems"]], payload.get("metadata", {}))

    def rules(self) -> BondRuleSet:
        if "rules" not in self.metadata:
            raise ConfigurationError("dataset metadata carries no bond rule set")
        return BondRuleSet.from_dict(self.metadata["rules"])
