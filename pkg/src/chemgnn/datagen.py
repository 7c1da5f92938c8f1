"""Dataset families and the analytic energy oracle that labels them.

Three families are produced: periodic fcc crystals, crystals grown atom by
atom from a 14-atom fcc seed, and random tree molecules over H, C, N and O.
Each stable geometry can be expanded into an isometric scaling sweep; bond
labels are always taken from the stable geometry.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .chemgraph import (
    LATTICE_CONSTANTS,
    BondRuleSet,
    ChemicalSystem,
    Dataset,
    bonded_pairs,
    crystal_rules,
    freeze_bonds,
    molecule_rules,
    pairwise_distances,
    scale_system,
)
from .errors import ConfigurationError, DomainError, GenerationError

log = logging.getLogger(__name__)

GENERATOR_VERSION = "1"
DEFAULT_GRID = tuple(round(0.90 + 0.05 * k, 2) for k in range(13))

# nearest-neighbour offsets of the fcc lattice in half-lattice-constant units
FCC_NEIGHBOURS = np.array(
    [v for v in np.ndindex(3, 3, 3) if sum(abs(c - 1) for c in v) == 2], dtype=np.int64
) - 1


def scaling_grid(start: float = 0.90, stop: float = 1.50, step: float = 0.05) -> tuple:
    n = int(round((stop - start) / step)) + 1
    return tuple(round(start + step * k, 10) for k in range(n))


def sample_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent stream per sample so serial and parallel runs agree."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))


# -- oracle ----------------------------------------------------------------


@dataclass(frozen=True)
class MorseTerm:
    depth: float
    width: float
    r0: float

    def __post_init__(self):
        if self.depth <= 0 or self.width <= 0 or self.r0 <= 0:
            raise ConfigurationError(f"Morse parameters must be positive: {self}")

    def energy(self, d):
        x = 1.0 - np.exp(-self.width * (np.asarray(d) - self.r0))
        return self.depth * x * x - self.depth


@dataclass(frozen=True)
class OracleParams:
    """Morse term per (element pair, bond type) plus an optional smooth tail.

    The unbonded tail is ``-c6 / d^6`` multiplied by a cosine switch that
    brings value and slope to zero at ``cutoff``.
    """

    terms: dict
    default_depth: float = 0.1
    default_width: float = 1.5
    no_bond_c6: float = 0.0
    cutoff: float = 6.0

    def term(self, a: str, b: str, label: str, rules: BondRuleSet) -> MorseTerm:
        key = (min(a, b), max(a, b), label)
        if key in self.terms:
            return self.terms[key]
        rule = rules.rule(a, b)
        return MorseTerm(self.default_depth, self.default_width, rule.r0)

    def to_dict(self) -> dict:
        return {
            "default_depth": self.default_depth,
            "default_width": self.default_width,
            "no_bond_c6": self.no_bond_c6,
            "cutoff": self.cutoff,
            "terms": [[*k, t.depth, t.width, t.r0] for k, t in sorted(self.terms.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OracleParams":
        terms = {(a, b, l): MorseTerm(D, w, r0) for a, b, l, D, w, r0 in d.get("terms", [])}
        return cls(terms, d["default_depth"], d["default_width"], d["no_bond_c6"], d["cutoff"])


def _switch(d, cutoff):
    return np.where(d < cutoff, 0.5 * (np.cos(np.pi * d / cutoff) + 1.0), 0.0)


def pair_energies(system: ChemicalSystem, params: OracleParams, rules: BondRuleSet) -> tuple:
    """Arrays ``i``, ``j`` and energy of every interacting pair."""
    d = pairwise_distances(system)
    bi, bj, labels = bonded_pairs(system, rules, d)
    depth, width, r0 = np.empty(len(bi)), np.empty(len(bi)), np.empty(len(bi))
    terms = {}
    for k, (a, b, l) in enumerate(zip(bi.tolist(), bj.tolist(), labels)):
        key = (system.elements[a], system.elements[b], l)
        if key not in terms:
            terms[key] = params.term(*key, rules)
        t = terms[key]
        depth[k], width[k], r0[k] = t.depth, t.width, t.r0
    x = 1.0 - np.exp(-width * (d[bi, bj] - r0))
    energies = depth * x * x - depth
    if params.no_bond_c6:
        n = len(system)
        bonded = np.zeros((n, n), dtype=bool)
        bonded[bi, bj] = True
        iu, ju = np.triu_indices(n, 1)
        keep = ~bonded[iu, ju] & (d[iu, ju] < params.cutoff)
        ui, uj = iu[keep], ju[keep]
        du = d[ui, uj]
        tail = -params.no_bond_c6 / du**6 * _switch(du, params.cutoff)
        bi, bj = np.concatenate([bi, ui]), np.concatenate([bj, uj])
        energies = np.concatenate([energies, tail])
    return bi, bj, energies


def oracle_energy(system: ChemicalSystem, params: OracleParams | None = None, rules: BondRuleSet | None = None) -> float:
    """Sum of Morse bond energies, each ``D (1 - exp(-a (d - r0)))^2 - D``."""
    params = params or OracleParams({})
    if rules is None:
        raise ConfigurationError("oracle_energy needs a bond rule set")
    return float(math.fsum(pair_energies(system, params, rules)[2].tolist()))


def oracle_contributions(system: ChemicalSystem, params: OracleParams, rules: BondRuleSet) -> np.ndarray:
    """Per-atom split of the oracle energy, half of each pair to each end."""
    i, j, v = pair_energies(system, params, rules)
    e = np.zeros(len(system))
    np.add.at(e, i, 0.5 * v)
    np.add.at(e, j, 0.5 * v)
    return e


# -- crystals --------------------------------------------------------------


def fcc_sites(n: int) -> np.ndarray:
    """Integer fcc sites (half-lattice units) of an n x n x n block of cells."""
    if n < 1:
        raise DomainError(f"cell repetitions must be >= 1, got {n}")
    m = 2 * n
    grid = np.array(list(np.ndindex(m + 1, m + 1, m + 1)), dtype=np.int64)
    return grid[grid.sum(axis=1) % 2 == 0]


def fcc_atom_count(n: int) -> int:
    return (n + 1) ** 3 + 3 * n * n * (n + 1)


def _crystal(element: str, sites: np.ndarray, a: float, provenance: dict) -> ChemicalSystem:
    return ChemicalSystem((element,) * len(sites), sites * (a / 2.0), scaling=1.0, provenance=provenance)


def gen_fcc_lattice(element: str, reps: int, a: float | None = None) -> ChemicalSystem:
    """Conventional fcc cells tiled ``reps`` times per axis, boundary atoms shared."""
    a = LATTICE_CONSTANTS[element] if a is None else a
    if a <= 0:
        raise DomainError(f"lattice constant must be positive, got {a}")
    sites = fcc_sites(reps)
    return _crystal(element, sites, a, {"dataset": "pc", "element": element, "reps": reps})


@dataclass(frozen=True)
class GrowthConfig:
    element: str = "Al"
    n_seeds: int = 20
    min_size: int = 15
    max_size: int = 114
    lattice_constant: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not (15 <= self.min_size <= self.max_size <= 114):
            raise ConfigurationError(f"growth sizes must lie within [15, 114], got [{self.min_size}, {self.max_size}]")
        if self.n_seeds < 1:
            raise ConfigurationError("at least one growth seed is required")


def grow_sites(rng: np.random.Generator, max_size: int) -> Iterable[np.ndarray]:
    """Yield occupied sites after every added atom, starting from the 14-atom seed."""
    occupied = {tuple(s) for s in fcc_sites(1).tolist()}
    order = [tuple(s) for s in fcc_sites(1).tolist()]
    frontier = set()
    for s in order:
        for v in FCC_NEIGHBOURS.tolist():
            c = (s[0] + v[0], s[1] + v[1], s[2] + v[2])
            if c not in occupied:
                frontier.add(c)
    while len(order) < max_size:
        if not frontier:
            raise GenerationError("no free surface site adjacent to the crystal")
        candidates = sorted(frontier)
        site = candidates[int(rng.integers(len(candidates)))]
        frontier.discard(site)
        occupied.add(site)
        order.append(site)
        for v in FCC_NEIGHBOURS.tolist():
            c = (site[0] + v[0], site[1] + v[1], site[2] + v[2])
            if c not in occupied:
                frontier.add(c)
        yield np.array(order, dtype=np.int64)


def gen_crystal_growth(config: GrowthConfig, seeds: Sequence[int] | None = None) -> list:
    """One system per size in ``[min_size, max_size]`` for each growth seed."""
    a = LATTICE_CONSTANTS[config.element] if config.lattice_constant is None else config.lattice_constant
    out = []
    for g in seeds if seeds is not None else range(config.n_seeds):
        rng = sample_rng(config.seed, g)
        for sites in grow_sites(rng, config.max_size):
            n = len(sites)
            if n < config.min_size:
                continue
            prov = {
                "dataset": "cg",
                "element": config.element,
                "growth": int(g),
                "size": n,
                "system_id": f"cg-{config.element}-g{g}-n{n}",
            }
            out.append(_crystal(config.element, sites, a, prov))
    return out


# -- molecules -------------------------------------------------------------

VALENCE = {"H": 1, "C": 4, "N": 3, "O": 2}
BOND_ORDER = {"single": 1, "double": 2}


def _random_direction(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _embed_tree(rng, elements, rules, max_tries):
    """Grow a random tree molecule atom by atom; None when embedding keeps failing."""
    placed = [elements[0]]
    coords = [np.zeros(3)]
    free = [VALENCE[elements[0]]]
    bonds = []
    for el in elements[1:]:
        for _ in range(max_tries):
            hosts = [i for i, f in enumerate(free) if f >= 1]
            if not hosts:
                return None
            host = hosts[int(rng.integers(len(hosts)))]
            rule = rules.rule(placed[host], el)
            order = BOND_ORDER.get(rule.label, 1)
            if free[host] < order or VALENCE[el] < order:
                continue
            pos = coords[host] + rule.r0 * _random_direction(rng)
            ok = True
            for k, c in enumerate(coords):
                if k == host:
                    continue
                if np.linalg.norm(pos - c) <= rules.rule(placed[k], el).threshold:
                    ok = False
                    break
            if ok:
                break
        else:
            return None
        bonds.append((host, len(placed), rule.label))
        free[host] -= order
        free.append(VALENCE[el] - order)
        placed.append(el)
        coords.append(pos)
    return placed, np.array(coords), bonds


def gen_synthetic_molecules(
    count: int,
    size_range: tuple = (3, 9),
    element_set: Sequence[str] = ("H", "C", "N", "O"),
    rng: np.random.Generator | int = 0,
    rules: BondRuleSet | None = None,
    max_tries: int = 50,
    max_restarts: int = 20,
) -> list:
    """Random tree molecules with every bond at its rule length.

    Placement is rejected whenever a non-bonded pair would fall within its
    bonding threshold, so re-typing the stable geometry reproduces the tree.
    """
    rules = rules or molecule_rules()
    master = int(rng.integers(2**31)) if isinstance(rng, np.random.Generator) else int(rng)
    lo, hi = size_range
    if lo < 1 or hi < lo:
        raise ConfigurationError(f"invalid size range {size_range}")
    for a in element_set:
        if a not in VALENCE:
            raise ConfigurationError(f"no valence for element {a}")
        for b in element_set:
            rules.rule(a, b)
    heavy = [e for e in element_set if VALENCE[e] > 1] or list(element_set)
    out = []
    for idx in range(count):
        srng = sample_rng(master, idx)
        result = None
        for _ in range(max_restarts):
            n = int(srng.integers(lo, hi + 1))
            first = heavy[int(srng.integers(len(heavy)))] if n > 1 else element_set[int(srng.integers(len(element_set)))]
            elements = [first] + [element_set[int(k)] for k in srng.integers(len(element_set), size=n - 1)]
            result = _embed_tree(srng, elements, rules, max_tries)
            if result is not None:
                break
        if result is None:
            log.warning("molecule %d: embedding failed after %d restarts; skipped", idx, max_restarts)
            continue
        placed, coords, bonds = result
        prov = {"dataset": "mol", "index": idx, "size": len(placed), "system_id": f"mol-{master}-{idx}"}
        out.append(ChemicalSystem(tuple(placed), coords, scaling=1.0, provenance=prov, bonds=tuple(bonds)))
    return out


# -- sweeps and labelling --------------------------------------------------


def label(system: ChemicalSystem, params: OracleParams, rules: BondRuleSet) -> ChemicalSystem:
    return replace(system, energy=oracle_energy(system, params, rules))


def apply_scaling_sweep(
    system: ChemicalSystem,
    grid: Sequence[float] = DEFAULT_GRID,
    params: OracleParams | None = None,
    rules: BondRuleSet | None = None,
) -> list:
    """Scaled, oracle-labelled copies of a stable geometry, one per grid value."""
    if rules is None:
        raise ConfigurationError("apply_scaling_sweep needs a bond rule set")
    params = params or OracleParams({})
    if system.scaling not in (None, 1.0):
        raise DomainError(f"sweep must start from a stable geometry, got scaling {system.scaling}")
    stable = system if system.bonds is not None else freeze_bonds(system, rules)
    out = []
    for lam in grid:
        copy = stable if lam == 1.0 else scale_system(stable, lam)
        copy = replace(copy, scaling=float(lam), provenance={**stable.provenance, "scaling": float(lam)})
        out.append(label(copy, params, rules))
    return out


def split_dataset(
    systems: Sequence[ChemicalSystem],
    fractions: tuple = (0.8, 0.1, 0.1),
    rng: np.random.Generator | int = 0,
    stratify: str = "system-identity",
    train_size_cap: int | None = None,
) -> tuple:
    """Disjoint train/validation/test lists.

    ``stratify`` is ``none`` (individual systems), ``system-identity`` (all
    scalings of one stable geometry together) or ``size-bucket`` (each atom
    count split separately).  ``train_size_cap`` drops training systems
    larger than the cap after splitting, leaving the test split untouched.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigurationError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if stratify == "none":
        keys = [str(i) for i in range(len(systems))]
    elif stratify == "system-identity":
        keys = [s.system_id or str(i) for i, s in enumerate(systems)]
    elif stratify == "size-bucket":
        keys = [str(i) for i in range(len(systems))]
    else:
        raise ConfigurationError(f"unknown stratification {stratify!r}")

    def split_groups(groups: list) -> list:
        n = len(groups)
        perm = rng.permutation(n)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        return [set(groups[i] for i in perm[:n_train]),
                set(groups[i] for i in perm[n_train:n_train + n_val]),
                set(groups[i] for i in perm[n_train + n_val:])]

    if stratify == "size-bucket":
        buckets = {}
        for k, s in zip(keys, systems):
            buckets.setdefault(len(s), []).append(k)
        parts = [set(), set(), set()]
        for size in sorted(buckets):
            if len(buckets[size]) < 3 and min(fractions) > 0:
                raise ConfigurationError(f"size bucket {size} has too few systems for three splits")
            for p, sub in zip(parts, split_groups(buckets[size])):
                p |= sub
    else:
        parts = split_groups(list(dict.fromkeys(keys)))
    train = [s for k, s in zip(keys, systems) if k in parts[0]]
    val = [s for k, s in zip(keys, systems) if k in parts[1]]
    test = [s for k, s in zip(keys, systems) if k in parts[2]]
    if train_size_cap is not None:
        train = [s for s in train if len(s) <= train_size_cap]
        val = [s for s in val if len(s) <= train_size_cap]
    return train, val, test


# -- dataset families ------------------------------------------------------


@dataclass
class FamilyConfig:
    """Knobs for one generated dataset; echoed into the dataset metadata."""

    family: str = "ucg"
    elements: tuple = ("Al", "Cu")
    seeds: int = 5
    min_size: int = 15
    max_size: int = 114
    size_stride: int = 1
    reps: tuple = (1, 2, 3)
    molecules: int = 1000
    molecule_sizes: tuple = (3, 9)
    grid: tuple = DEFAULT_GRID
    seed: int = 0
    oracle: dict = field(default_factory=lambda: OracleParams({}).to_dict())

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


def generate_family(cfg: FamilyConfig) -> Dataset:
    """Periodic crystals (pc), crystal growth (cg), scaled growth (ucg) or molecules (mol)."""
    params = OracleParams.from_dict(cfg.oracle)
    if cfg.family in ("pc", "cg", "ucg"):
        rules = crystal_rules()
    elif cfg.family == "mol":
        rules = molecule_rules()
    else:
        raise ConfigurationError(f"unknown dataset family {cfg.family!r}")
    systems = []
    if cfg.family == "pc":
        for el in cfg.elements:
            for n in cfg.reps:
                stable = gen_fcc_lattice(el, n)
                stable = replace(stable, provenance={**stable.provenance, "system_id": f"pc-{el}-n{n}"})
                systems += apply_scaling_sweep(stable, cfg.grid, params, rules)
    elif cfg.family in ("cg", "ucg"):
        for e_i, el in enumerate(cfg.elements):
            growth = GrowthConfig(el, cfg.seeds, cfg.min_size, cfg.max_size, seed=cfg.seed + 1000 * e_i)
            for s in gen_crystal_growth(growth):
                if (len(s) - cfg.min_size) % cfg.size_stride:
                    continue
                stable = freeze_bonds(s, rules)
                if cfg.family == "cg":
                    systems.append(label(stable, params, rules))
                else:
                    systems += apply_scaling_sweep(stable, cfg.grid, params, rules)
    else:
        mols = gen_synthetic_molecules(cfg.molecules, tuple(cfg.molecule_sizes), rng=cfg.seed, rules=rules)
        for m in mols:
            systems += apply_scaling_sweep(m, cfg.grid, params, rules)
    meta = {
        "generator_version": GENERATOR_VERSION,
        "seed": cfg.seed,
        "family": cfg.family,
        "config": cfg.to_dict(),
        "rules": rules.to_dict(),
        "grid": list(cfg.grid),
    }
    return Dataset(systems, meta)
