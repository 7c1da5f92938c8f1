"""Training, metrics and the experiment protocols.

Models are trained on standardised energies: a per-element energy per atom
is fitted by least squares on the training split and the residual spread
sets the scale.  Both live in the model's buffers, so predictions and
per-atom contributions come out in physical units.

Anything that maps systems to energies can be evaluated: a trained network
wrapped in :class:`ModelPredictor` or the analytic energy function wrapped
in :class:`OraclePredictor`.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import diffkernel as dk
from .chemgraph import BondRuleSet, ChemicalSystem, Dataset, GraphBatch, build_graph, scale_system
from .datagen import DEFAULT_GRID, OracleParams, oracle_contributions, oracle_energy, split_dataset
from .errors import ConfigurationError, DataError, TrainingError
from .models import build_model
from .multitask import TASK_COLUMNS, AuxNormaliser, LossConfig, aux_targets, total_loss
from .nn import EnergyModel

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss_total", "loss_energy", "loss_atoms", "loss_orbitals", "loss_dsg", "val_loss")


# -- configuration ------------------------------------------------------------


@dataclass
class TrainConfig:
    """Everything one training run depends on.

    ``model`` holds backbone config overrides (variant, sizes, connectivity);
    the auxiliary heads follow ``loss["tasks"]``.
    """

    backbone: str = "schnet"
    model: dict = field(default_factory=dict)
    loss: dict = field(default_factory=lambda: {"tasks": []})
    optimizer: dict = field(default_factory=dict)
    batch_size: int = 16
    patience: int = 50
    tolerance: float = 1e-6
    max_epochs: int = 500
    seed: int = 0
    dataset: str | None = None
    split: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigurationError("patience must be at least 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be at least 1")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be at least 1")
        unknown = set(self.split) - {"fractions", "stratify", "train_size_cap"}
        if unknown:
            raise ConfigurationError(f"unknown split keys {sorted(unknown)}")
        self.loss_config()
        dk.OptimizerConfig(**self.optimizer)

    def loss_config(self) -> LossConfig:
        unknown = set(self.loss) - {f.name for f in fields(LossConfig)}
        if unknown:
            raise ConfigurationError(f"unknown loss keys {sorted(unknown)}")
        return LossConfig(**self.loss)

    def model_config(self, n_grid: int) -> dict:
        cfg = dict(self.model)
        tasks = list(self.loss_config().tasks)
        if "aux_tasks" in cfg and list(cfg["aux_tasks"]) != tasks:
            raise ConfigurationError("model aux_tasks disagree with the loss task list")
        cfg["aux_tasks"] = tasks
        cfg.setdefault("n_grid", n_grid)
        cfg.setdefault("seed", self.seed)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)


# -- predictors ----------------------------------------------------------------


def stable_geometry(system: ChemicalSystem) -> ChemicalSystem:
    """Undo the isometric scaling of a labelled copy."""
    lam = 1.0 if system.scaling is None else system.scaling
    base = system if lam == 1.0 else scale_system(system, 1.0 / lam)
    prov = {k: v for k, v in system.provenance.items() if k != "scaling"}
    return replace(base, scaling=1.0, energy=None, provenance=prov)


class ModelPredictor:
    """Batches systems into typed graphs for a trained network."""

    def __init__(self, model: EnergyModel, rules: BondRuleSet, batch_size: int = 32):
        self.model = model
        self.rules = rules
        self.batch_size = batch_size
        self.connectivity = model.config.connectivity
        self.btf = bool(getattr(model.config, "bond_type_feature", False))

    def graph(self, system: ChemicalSystem):
        return build_graph(system, self.rules, self.connectivity, self.model.config.elements, self.btf)

    def predict(self, systems: Sequence[ChemicalSystem]) -> np.ndarray:
        out = []
        for s in range(0, len(systems), self.batch_size):
            batch = GraphBatch.from_graphs([self.graph(x) for x in systems[s:s + self.batch_size]])
            out.append(self.model(batch).energy.data.copy())
        return np.concatenate(out) if out else np.zeros(0)

    def contributions(self, system: ChemicalSystem) -> np.ndarray:
        return self.model(GraphBatch.from_graphs([self.graph(system)])).contributions.data.copy()


class OraclePredictor:
    """The analytic labelling function used as a model."""

    def __init__(self, rules: BondRuleSet, params: OracleParams | None = None):
        self.rules = rules
        self.params = params or OracleParams({})

    def predict(self, systems: Sequence[ChemicalSystem]) -> np.ndarray:
        return np.array([oracle_energy(s, self.params, self.rules) for s in systems])

    def contributions(self, system: ChemicalSystem) -> np.ndarray:
        return oracle_contributions(system, self.params, self.rules)


# -- training ------------------------------------------------------------------


@dataclass
class Prepared:
    graphs: list
    energies: np.ndarray
    aux: dict


def prepare(systems, predictor: ModelPredictor, loss_cfg: LossConfig, grid, normaliser: AuxNormaliser | None) -> Prepared:
    elements = predictor.model.config.elements
    graphs = [predictor.graph(s) for s in systems]
    energies = np.array([s.energy for s in systems], dtype=np.float64)
    if np.any(~np.isfinite(energies)):
        raise DataError("every training system needs a finite energy label")
    aux = {}
    if loss_cfg.tasks:
        targets = [aux_targets(s, loss_cfg, grid, elements) for s in systems]
        normaliser = normaliser or AuxNormaliser.fit(targets, loss_cfg.tasks)
        for task in loss_cfg.tasks:
            aux[task] = normaliser.transform(task, np.stack([t.get(task) for t in targets]))
    return Prepared(graphs, energies, aux)


def fit_energy_normalisation(systems: Sequence[ChemicalSystem], elements: Sequence[str]) -> tuple:
    """Least-squares energy per atom of each element, and the residual spread."""
    elements = tuple(elements)
    C = np.zeros((len(systems), len(elements)))
    for i, s in enumerate(systems):
        for e in s.elements:
            C[i, elements.index(e)] += 1
    y = np.array([s.energy for s in systems])
    shift, *_ = np.linalg.lstsq(C, y, rcond=None)
    resid = y - C @ shift
    scale = float(np.sqrt(np.mean(resid**2))) if len(y) else 1.0
    return shift, (scale if scale > 1e-12 else 1.0)


@dataclass
class TrainResult:
    model: EnergyModel
    log: list
    best_epoch: int
    epochs_run: int
    normaliser: AuxNormaliser | None
    wall_time: float = 0.0


def _batch_loss(model, data: Prepared, idx, loss_cfg, scale):
    batch = GraphBatch.from_graphs([data.graphs[i] for i in idx])
    pred = model(batch)
    aux_true = {t: v[idx] for t, v in data.aux.items()}
    return total_loss(pred.energy, data.energies[idx], pred.aux, aux_true, loss_cfg, scale)


def dataset_loss(model, data: Prepared, loss_cfg, scale, batch_size) -> float:
    """Mean total loss over a prepared split, without recording."""
    n = len(data.graphs)
    acc = 0.0
    for s in range(0, n, batch_size):
        idx = np.arange(s, min(n, s + batch_size))
        _, terms = _batch_loss(model, data, idx, loss_cfg, scale)
        acc += terms["total"] * len(idx)
    return acc / n


def train(
    config: TrainConfig,
    train_systems: Sequence[ChemicalSystem],
    val_systems: Sequence[ChemicalSystem],
    rules: BondRuleSet,
    grid: Sequence[float] = DEFAULT_GRID,
) -> TrainResult:
    """Minimise the composite loss with early stopping on the validation loss.

    An epoch counts as an improvement when the validation loss drops below
    the best so far by more than ``config.tolerance``; training stops after
    ``patience`` epochs without one, and the best-validation weights are
    restored.  Without a validation split the training loss is monitored.
    """
    if not train_systems:
        raise ConfigurationError("the training split is empty")
    t0 = time.perf_counter()
    loss_cfg = config.loss_config()
    model = build_model(config.backbone, config.model_config(len(grid)))
    shift, scale = fit_energy_normalisation(train_systems, model.config.elements)
    model.set_energy_normalisation(shift, scale)
    predictor = ModelPredictor(model, rules)
    normaliser = None
    if loss_cfg.tasks:
        normaliser = AuxNormaliser.fit([aux_targets(s, loss_cfg, grid, model.config.elements) for s in train_systems], loss_cfg.tasks)
    train_data = prepare(train_systems, predictor, loss_cfg, grid, normaliser)
    val_data = prepare(val_systems, predictor, loss_cfg, grid, normaliser) if val_systems else None
    opt = dk.Optimizer(model.params, dk.OptimizerConfig(**config.optimizer))
    rng = np.random.default_rng([config.seed, 7])
    n = len(train_systems)
    best, best_state, best_epoch, stale = math.inf, model.state_dict(), 0, 0
    rows = []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n)
        sums = {}
        for b, s in enumerate(range(0, n, config.batch_size)):
            idx = perm[s:s + config.batch_size]
            with dk.Tape() as tape:
                loss, terms = _batch_loss(model, train_data, idx, loss_cfg, scale)
                if not all(math.isfinite(v) for v in terms.values()):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {terms}")
                tape.backward(loss)
            opt.step()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        row = {"epoch": epoch, "loss_total": sums["total"] / n, "loss_energy": sums["energy"] / n}
        for task, col in TASK_COLUMNS.items():
            row[f"loss_{col}"] = sums[task] / n if task in sums else ""
        monitored = dataset_loss(model, val_data, loss_cfg, scale, 64) if val_data else row["loss_total"]
        row["val_loss"] = monitored
        rows.append(row)
        if monitored < best - config.tolerance:
            best, best_state, best_epoch, stale = monitored, model.state_dict(), epoch, 0
        else:
            stale += 1
        log.debug("epoch %d loss %.6g val %.6g", epoch, row["loss_total"], monitored)
        if stale >= config.patience:
            break
    model.load_state_dict(best_state)
    return TrainResult(model, rows, best_epoch, epoch, normaliser, time.perf_counter() - t0)


# -- metrics ------------------------------------------------------------------


def sample_std(values) -> float | None:
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1)) if v.size > 1 else None


def summary(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()) if v.size else None, "std": sample_std(v), "n": int(v.size)}


def argmin_scaling(grid: Sequence[float], energies: Sequence[float]) -> float:
    """Grid value of minimal energy; ties go to the value nearest 1, then the lower."""
    best = min(zip(energies, grid), key=lambda p: (p[0], abs(p[1] - 1.0), p[1]))
    return float(best[1])


def dsg_search(predictor, stable: ChemicalSystem, grid: Sequence[float] = DEFAULT_GRID) -> tuple:
    """Query the predictor on every scaled copy; return ``(lambda*, DSG, energies)``."""
    if not any(abs(g - 1.0) < 1e-12 for g in grid):
        raise ConfigurationError("the scaling grid must contain 1.0")
    copies = [stable if g == 1.0 else scale_system(stable, g) for g in grid]
    energies = predictor.predict(copies)
    lam = argmin_scaling(grid, energies)
    return lam, abs(lam - 1.0), energies


@dataclass
class MetricsRecord:
    systems: list
    geometries: list
    aggregate: dict

    def to_dict(self) -> dict:
        return {"systems": self.systems, "geometries": self.geometries, "aggregate": self.aggregate}


def _geometry_key(s: ChemicalSystem, i: int) -> str:
    return s.system_id or f"#{i}"


def evaluate(predictor, systems: Sequence[ChemicalSystem], grid: Sequence[float] = DEFAULT_GRID) -> MetricsRecord:
    """Per-system AE/RE, per-geometry DSG, and mean/std aggregates.

    DSG is computed once per stable geometry: from the dataset's own sweep
    when it covers the whole grid, otherwise by a fresh grid search.  RE
    skips systems whose true energy is exactly zero and counts them.
    """
    systems = list(systems)
    if any(s.energy is None for s in systems):
        raise DataError("evaluation needs labelled systems")
    pred = predictor.predict(systems)
    rows, ae, re, excluded = [], [], [], 0
    groups: dict = {}
    for i, (s, p) in enumerate(zip(systems, pred)):
        err = abs(float(p) - s.energy)
        rel = err / abs(s.energy) if s.energy != 0 else None
        if rel is None:
            excluded += 1
        else:
            re.append(rel)
        ae.append(err)
        rows.append({
            "system_id": s.system_id,
            "size": len(s),
            "scaling": s.scaling,
            "energy": s.energy,
            "predicted": float(p),
            "ae": err,
            "re": rel,
        })
        groups.setdefault(_geometry_key(s, i), []).append(i)
    geoms, dsg = [], []
    grid_set = {round(g, 9) for g in grid}
    for key, idx in groups.items():
        scalings = [systems[i].scaling for i in idx]
        if None in scalings:
            continue
        if {round(x, 9) for x in scalings} >= grid_set:
            by = {round(systems[i].scaling, 9): i for i in idx}
            order = [by[round(g, 9)] for g in grid]
            lam = argmin_scaling(grid, [pred[i] for i in order])
            lam_true = argmin_scaling(grid, [systems[i].energy for i in order])
        else:
            stable = stable_geometry(systems[idx[0]])
            lam, _, _ = dsg_search(predictor, stable, grid)
            lam_true = None
        geoms.append({"system_id": key, "size": len(systems[idx[0]]), "lambda_pred": lam,
                      "lambda_true": lam_true, "dsg": abs(lam - 1.0)})
        dsg.append(abs(lam - 1.0))
    aggregate = {"ae": summary(ae), "re": {**summary(re), "excluded": excluded}, "dsg": summary(dsg)}
    return MetricsRecord(rows, geoms, aggregate)


def pearson(x, y) -> float:
    """Pearson correlation; zero when either variable is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0 or sy == 0:
        return 0.0
    return float(dx @ dy / (sx * sy))


# -- contributions --------------------------------------------------------------


def atom_contributions(predictor, system: ChemicalSystem) -> tuple:
    """Raw per-atom terms and their normalised shares (``None`` when undefined)."""
    raw = predictor.contributions(system)
    total = math.fsum(raw.tolist())
    if abs(total) <= 1e-12:
        return raw, None
    return raw, raw / total


def moving_atom_sweep(predictor, system: ChemicalSystem, atom: int = 0, grid: Sequence[float] = DEFAULT_GRID) -> list:
    """Stretch one atom's shortest bond through the grid, others fixed.

    The atom moves along the line from its nearest neighbour, placing it at
    ``lambda`` times the original bond length.  Returns rows of
    (displacement, energy, c_moving, mean c_static) with ``None`` shares when
    the contributions cannot be normalised.
    """
    coords = system.coords
    d = np.linalg.norm(coords - coords[atom], axis=1)
    d[atom] = np.inf
    nb = int(np.argmin(d))
    r0 = float(d[nb])
    u = (coords[atom] - coords[nb]) / r0
    rows = []
    for g in grid:
        disp = (g - 1.0) * r0
        moved = coords.copy()
        moved[atom] = coords[atom] + disp * u
        s = replace(system, coords=moved, energy=None)
        raw, share = atom_contributions(predictor, s)
        energy = math.fsum(raw.tolist())
        static = np.delete(share, atom) if share is not None else None
        rows.append({
            "displacement": disp,
            "energy": energy,
            "c_moving": float(share[atom]) if share is not None else None,
            "c_static_mean": float(static.mean()) if static is not None else None,
        })
    return rows


# -- experiment protocols ---------------------------------------------------------


def split(dataset: Dataset, config: TrainConfig) -> tuple:
    sp = config.split
    return split_dataset(
        dataset.systems,
        tuple(sp.get("fractions", (0.8, 0.1, 0.1))),
        np.random.default_rng([config.seed, 11]),
        sp.get("stratify", "system-identity"),
        sp.get("train_size_cap"),
    )


def run_one(config: TrainConfig, train_s, val_s, test_s, rules, grid) -> dict:
    """Train, evaluate on the test split and return a summary row."""
    res = train(config, train_s, val_s, rules, grid)
    metrics = evaluate(ModelPredictor(res.model, rules), test_s, grid)
    return {
        "ae": metrics.aggregate["ae"]["mean"],
        "dsg": metrics.aggregate["dsg"]["mean"],
        "alpha": res.model.alpha,
        "epochs": res.epochs_run,
        "best_epoch": res.best_epoch,
        "metrics": metrics,
        "result": res,
    }


def _run_job(args):
    config, train_s, val_s, test_s, rules, grid = args
    out = run_one(config, train_s, val_s, test_s, rules, grid)
    out.pop("result")
    return out


def run_many(jobs: list, workers: int = 1) -> list:
    """Independent runs, in parallel when ``workers > 1``; output order is job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def size_generalization(
    dataset: Dataset,
    variants: dict,
    cap: int = 25,
    caps: Sequence = (25, None),
    workers: int = 1,
) -> dict:
    """Train each variant with and without the training size cap.

    All runs share one test split.  Returns the AE-per-size table and, per
    (variant, cap), the Pearson correlation between system size and AE.
    """
    rules, grid = dataset.rules(), tuple(dataset.metadata.get("grid", DEFAULT_GRID))
    jobs, keys = [], []
    for name, cfg in variants.items():
        train_s, val_s, test_s = split(dataset, cfg)
        for c in caps:
            tr = [s for s in train_s if c is None or len(s) <= c]
            va = [s for s in val_s if c is None or len(s) <= c]
            jobs.append((cfg, tr, va, test_s, rules, grid))
            keys.append((name, c))
    outs = run_many(jobs, workers)
    table, stats = [], {}
    for (name, c), out in zip(keys, outs):
        rows = out["metrics"].systems
        sizes = np.array([r["size"] for r in rows])
        ae = np.array([r["ae"] for r in rows])
        for size in sorted(set(sizes.tolist())):
            table.append({"variant": name, "cap": c, "size": size, "ae_mean": float(ae[sizes == size].mean())})
        stats[(name, c)] = {"pearson": pearson(sizes, ae), "ae": out["ae"], "dsg": out["dsg"]}
    return {"table": table, "stats": stats}


def reduce_scalings(systems: Sequence[ChemicalSystem], fraction: float, rng: np.random.Generator, n_grid: int = 13) -> list:
    """Keep ``ceil(n_grid * fraction)`` scalings per geometry, always including 1.0."""
    keep = max(1, math.ceil(n_grid * fraction - 1e-9))
    groups: dict = {}
    for i, s in enumerate(systems):
        groups.setdefault(_geometry_key(s, i), []).append(i)
    chosen = []
    for key in sorted(groups):
        idx = groups[key]
        ones = [i for i in idx if systems[i].scaling == 1.0]
        rest = [i for i in idx if systems[i].scaling != 1.0]
        take = keep - len(ones[:1])
        picked = ones[:1] + [rest[k] for k in sorted(rng.choice(len(rest), size=min(take, len(rest)), replace=False))]
        chosen.extend(sorted(picked))
    return [systems[i] for i in sorted(chosen)]


def reduce_systems(systems: Sequence[ChemicalSystem], fraction: float, rng: np.random.Generator) -> list:
    """Keep a random fraction of the stable geometries with all their scalings."""
    keys = sorted({_geometry_key(s, i) for i, s in enumerate(systems)})
    n = math.ceil(len(keys) * fraction - 1e-9)
    kept = {keys[k] for k in rng.permutation(len(keys))[:n]}
    return [s for i, s in enumerate(systems) if _geometry_key(s, i) in kept]


def reduced_training(
    dataset: Dataset,
    variants: dict,
    schedule: Sequence[float] = (1.0, 9 / 13, 5 / 13, 3 / 13),
    axis: str = "scalings",
    workers: int = 1,
) -> list:
    """Retrain every variant on shrinking training sets against one fixed test split."""
    if axis not in ("systems", "scalings"):
        raise ConfigurationError(f"unknown reduction axis {axis!r}")
    rules, grid = dataset.rules(), tuple(dataset.metadata.get("grid", DEFAULT_GRID))
    jobs, keys = [], []
    for name, cfg in variants.items():
        train_s, val_s, test_s = split(dataset, cfg)
        if axis == "scalings" and not any(s.scaling not in (None, 1.0) for s in train_s):
            raise ConfigurationError("reducing scalings needs a scaled dataset")
        for f in schedule:
            if not 0 < f <= 1:
                raise ConfigurationError(f"fraction {f} outside (0, 1]")
            rng = np.random.default_rng([cfg.seed, 13, int(round(f * 1e6))])
            if axis == "scalings":
                tr = reduce_scalings(train_s, f, rng, len(grid))
            else:
                tr = reduce_systems(train_s, f, rng)
            if not tr:
                raise ConfigurationError(f"fraction {f} leaves an empty training set")
            jobs.append((cfg, tr, val_s, test_s, rules, grid))
            keys.append((name, f, len(tr)))
    outs = run_many(jobs, workers)
    return [
        {"variant": name, "fraction": f, "n_train": n, "n_scalings": math.ceil(len(grid) * f - 1e-9) if axis == "scalings" else None,
         "ae_mean": out["ae"], "dsg_mean": out["dsg"]}
        for (name, f, n), out in zip(keys, outs)
    ]


ABLATION_ROWS = ("full", "w/o r-spec. interactions", "w/o atom counts", "w/o orbital counts", "w/o scaling distribution")


def ablation_configs(full: TrainConfig) -> dict:
    """The fully augmented config and its four leave-one-out variants."""
    tasks = list(full.loss_config().tasks)
    out = {"full": full}
    out["w/o r-spec. interactions"] = replace(full, model={**full.model, "variant": "none"})
    for task, label in zip(("atom-counts", "orbital-counts", "scaling-distribution"), ABLATION_ROWS[2:]):
        out[label] = replace(full, loss={**full.loss, "tasks": [t for t in tasks if t != task]})
    return out


def element_subsets(systems: Sequence[ChemicalSystem]) -> dict:
    """Test subsets: everything, then systems made of one element only."""
    out = {"all": list(systems)}
    for el in sorted({e for s in systems for e in s.elements}):
        sub = [s for s in systems if set(s.elements) == {el}]
        if sub:
            out[el] = sub
    return out


def ablation(dataset: Dataset, full: TrainConfig, workers: int = 1) -> list:
    """One row per ablation, AE and DSG per element subset."""
    rules, grid = dataset.rules(), tuple(dataset.metadata.get("grid", DEFAULT_GRID))
    configs = ablation_configs(full)
    train_s, val_s, test_s = split(dataset, full)
    subsets = element_subsets(test_s)
    jobs = [(cfg, train_s, val_s, test_s, rules, grid) for cfg in configs.values()]
    outs = run_many(jobs, workers)
    rows = []
    for label, out in zip(configs, outs):
        per = out["metrics"]
        row = {"model": label}
        by_id = {}
        for r in per.systems:
            by_id.setdefault(r["system_id"], []).append(r["ae"])
        dsg_by_id = {g["system_id"]: g["dsg"] for g in per.geometries}
        for name, sub in subsets.items():
            ids = {s.system_id for s in sub}
            ae = [a for i in ids for a in by_id.get(i, [])]
            dsg = [dsg_by_id[i] for i in ids if i in dsg_by_id]
            row[f"ae_{name}"] = float(np.mean(ae)) if ae else None
            row[f"dsg_{name}"] = float(np.mean(dsg)) if dsg else None
        rows.append(row)
    return rows


# -- artifacts ------------------------------------------------------------------


def write_csv(path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k])) for k in columns})
    Path(path).write_text(buf.getvalue())


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, config: dict, seed: int, inputs: Sequence = (), outputs: Sequence = (),
                   wall_time: float | None = None, argv: Sequence[str] | None = None) -> dict:
    """Run manifest; the timestamp and wall time are the only run-dependent fields."""
    manifest = {
        "command": command,
        "argv": list(argv) if argv is not None else None,
        "config": config,
        "seed": seed,
        "tool_version": __version__,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "wall_time": wall_time,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
