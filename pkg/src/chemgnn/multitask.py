"""Auxiliary targets, auxiliary output heads and the composite loss.

Three graph-level side tasks share the backbone's pooled representation:
per-element atom counts, per-element orbital counts and a probability
distribution over the scaling grid centred on the system's true scaling.
The training loss is the energy MSE plus ``beta`` times the sum of the
auxiliary MSEs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import diffkernel as dk
from .chemgraph import ELEMENTS, ChemicalSystem
from .errors import ConfigurationError, ContractError, DataError
from .nn import AUX, dense, init_dense

AUX_TASKS = ("atom-counts", "orbital-counts", "scaling-distribution")

# log column suffix for each task
TASK_COLUMNS = {"atom-counts": "atoms", "orbital-counts": "orbitals", "scaling-distribution": "dsg"}

# minimal-basis orbital counts
ORBITALS = {"H": 1, "C": 5, "N": 5, "O": 5, "F": 5, "Al": 9, "Cu": 15}


@dataclass
class LossConfig:
    beta: float = 0.3
    tasks: tuple = AUX_TASKS
    orbitals: Mapping[str, int] = field(default_factory=lambda: dict(ORBITALS))
    sigma: float = 0.05

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if self.beta < 0:
            raise ConfigurationError(f"beta must be non-negative, got {self.beta}")
        unknown = set(self.tasks) - set(AUX_TASKS)
        if unknown:
            raise ConfigurationError(f"unknown auxiliary tasks {sorted(unknown)}")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigurationError("auxiliary tasks listed twice")
        if self.sigma <= 0:
            raise ConfigurationError("scaling-distribution sigma must be positive")

    def to_dict(self) -> dict:
        return {"beta": self.beta, "tasks": list(self.tasks), "orbitals": dict(self.orbitals), "sigma": self.sigma}


@dataclass
class AuxTargets:
    atom_counts: np.ndarray | None = None
    orbital_counts: np.ndarray | None = None
    scaling_distribution: np.ndarray | None = None

    def get(self, task: str):
        return getattr(self, task.replace("-", "_"))


def scaling_distribution(lam: float, grid: Sequence[float], sigma: float) -> np.ndarray:
    """Gaussian bump at ``lam`` evaluated on the grid and renormalised."""
    g = np.asarray(grid, dtype=np.float64)
    w = np.exp(-0.5 * ((g - lam) / sigma) ** 2)
    total = w.sum()
    if not total > 0:
        raise DataError(f"scaling {lam} is too far from the grid for sigma {sigma}")
    return w / total


def aux_targets(
    system: ChemicalSystem,
    config: LossConfig,
    grid: Sequence[float],
    elements: Sequence[str] = ELEMENTS,
) -> AuxTargets:
    """Exact side-task targets of one system over the element catalogue."""
    elements = tuple(elements)
    counts = np.zeros(len(elements))
    for e in system.elements:
        if e not in elements:
            raise ConfigurationError(f"element {e} outside catalogue {elements}")
        counts[elements.index(e)] += 1
    out = AuxTargets(atom_counts=counts)
    if "orbital-counts" in config.tasks:
        missing = {e for e in system.elements if e not in config.orbitals}
        if missing:
            raise ConfigurationError(f"no orbital count for elements {sorted(missing)}")
        per = np.array([config.orbitals.get(e, 0) for e in elements], dtype=np.float64)
        out.orbital_counts = counts * per
    if "scaling-distribution" in config.tasks:
        if system.scaling is None:
            raise DataError(f"system {system.system_id!r} has no scaling label")
        out.scaling_distribution = scaling_distribution(system.scaling, grid, config.sigma)
    return out


def head_sizes(tasks: Sequence[str], n_elements: int, n_grid: int) -> dict:
    sizes = {"atom-counts": n_elements, "orbital-counts": n_elements, "scaling-distribution": n_grid}
    return {t: sizes[t] for t in tasks}


def init_aux_heads(store, prefix: str, pooled_dim: int, tasks: Sequence[str], n_elements: int, n_grid: int) -> None:
    """One linear head per task, keyed ``{prefix}aux.<task>.W/b``."""
    for task, size in head_sizes(tasks, n_elements, n_grid).items():
        init_dense(store, f"{prefix}aux.{TASK_COLUMNS[task]}", pooled_dim, size, AUX)


def aux_heads_forward(store, prefix: str, pooled: dk.Tensor, tasks: Sequence[str]) -> dict:
    """Predicted side targets; the scaling head is pushed onto the simplex."""
    out = {}
    for task in tasks:
        y = dense(store, f"{prefix}aux.{TASK_COLUMNS[task]}", pooled)
        if task == "scaling-distribution":
            y = dk.softmax(y, axis=-1)
        out[task] = y
    return out


class AuxNormaliser:
    """Per-component centring and scaling of the count targets.

    Orbital counts reach four digits on the larger crystals, so the count
    heads regress standardised values; the scaling distribution is used as
    is.
    """

    def __init__(self, mean: dict | None = None, std: dict | None = None):
        self.mean = mean or {}
        self.std = std or {}

    @classmethod
    def fit(cls, targets: Sequence[AuxTargets], tasks: Sequence[str]) -> "AuxNormaliser":
        mean, std = {}, {}
        for task in tasks:
            if task == "scaling-distribution":
                continue
            arr = np.stack([t.get(task) for t in targets])
            mean[task] = arr.mean(axis=0)
            s = arr.std(axis=0)
            std[task] = np.where(s > 1e-12, s, 1.0)
        return cls(mean, std)

    def transform(self, task: str, values: np.ndarray) -> np.ndarray:
        if task not in self.mean:
            return values
        return (values - self.mean[task]) / self.std[task]

    def to_dict(self) -> dict:
        return {
            "mean": {k: v.tolist() for k, v in self.mean.items()},
            "std": {k: v.tolist() for k, v in self.std.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AuxNormaliser":
        return cls({k: np.asarray(v) for k, v in d["mean"].items()}, {k: np.asarray(v) for k, v in d["std"].items()})


def total_loss(
    energy_pred: dk.Tensor,
    energy_true: np.ndarray,
    aux_pred: Mapping[str, dk.Tensor],
    aux_true: Mapping[str, np.ndarray],
    config: LossConfig,
    energy_scale: float = 1.0,
) -> tuple:
    """Energy MSE plus ``beta`` times the summed auxiliary MSEs.

    Energies are compared after division by ``energy_scale``.  Returns the
    scalar loss tensor and a dict of per-term floats (``total``, ``energy``
    and one entry per enabled task).
    """
    e_true = np.asarray(energy_true, dtype=np.float64).reshape(energy_pred.shape)
    inv = 1.0 / energy_scale
    loss_e = dk.mse_loss(energy_pred * inv, e_true * inv)
    terms = {"energy": loss_e.item()}
    aux_sum = None
    for task in config.tasks:
        if task not in aux_pred or aux_pred[task] is None:
            raise ContractError(f"auxiliary task {task!r} is enabled but has no prediction")
        if task not in aux_true or aux_true[task] is None:
            raise ContractError(f"auxiliary task {task!r} is enabled but has no target")
        term = dk.mse_loss(aux_pred[task], np.asarray(aux_true[task], dtype=np.float64))
        terms[task] = term.item()
        aux_sum = term if aux_sum is None else aux_sum + term
    total = loss_e if aux_sum is None else loss_e + config.beta * aux_sum
    terms["total"] = total.item()
    return total, terms
