"""Synthetic 2D two-class datasets and evaluation grids.

Datasets are two interleaved circular arcs scaled into the unit box, with
per-variant Gaussian jitter controlling how much the classes mix:
variant ``a`` is nearly separable, ``c`` heavily overlapping.  Evaluation
grids are uniform lattices over the in-domain box [-1, 1]^2 or the
out-of-domain box [-10, 10]^2.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .net import Dataset
from .rng import derive_rng

__all__ = [
    "ToySpec",
    "EvalGrid",
    "VARIANT_MIXING",
    "DOMAIN_BOUNDS",
    "generate_toy",
    "eval_grid",
    "save_dataset",
    "load_dataset",
    "save_grid",
    "load_grid",
]

VARIANT_MIXING = {"a": 0.05, "b": 0.15, "c": 0.30}
DOMAIN_BOUNDS = {
    "in": ((-1.0, 1.0), (-1.0, 1.0)),
    "out": ((-10.0, 10.0), (-10.0, 10.0)),
}

# Arc layout: the standard interleaved-moons construction spans
# [-1, 2] x [-0.5, 1]; recenter and scale so jittered points rarely
# leave the unit box (clamp fraction ~3% at the largest mixing level).
_ARC_CENTER = np.array([0.5, 0.25])
_ARC_SCALE = 0.42


@dataclass(frozen=True)
class ToySpec:
    """Dataset recipe: variant picks the default class-mixing level."""

    variant: str = "a"
    n_per_class: int = 100
    mixing: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANT_MIXING:
            raise ConfigError(f"variant must be one of a/b/c, got {self.variant!r}")
        if self.n_per_class < 1:
            raise ConfigError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if self.mixing is None:
            object.__setattr__(self, "mixing", VARIANT_MIXING[self.variant])
        elif self.mixing < 0:
            raise ConfigError(f"mixing must be >= 0, got {self.mixing}")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "n_per_class": self.n_per_class,
            "mixing": self.mixing,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class EvalGrid:
    """Uniform lattice over an evaluation domain, row-major in (x0, x1)."""

    domain: str
    resolution: int
    points: np.ndarray
    bounds: tuple = (((-1.0, 1.0), (-1.0, 1.0)))

    @property
    def n(self) -> int:
        return self.points.shape[0]


def generate_toy(spec: ToySpec) -> Dataset:
    """Sample the two-arc dataset described by ``spec``.

    Pure function of the spec: the same seed always yields identical bytes.
    Points are clamped to the unit box after jitter; labels are exactly
    balanced with ``n_per_class`` points each.
    """
    rng = derive_rng(spec.seed, "toy-data", spec.variant, spec.n_per_class)
    n = spec.n_per_class
    t0 = rng.uniform(0.0, np.pi, n)
    t1 = rng.uniform(0.0, np.pi, n)
    arc0 = np.column_stack([np.cos(t0), np.sin(t0)])
    arc1 = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    points = np.concatenate([arc0, arc1], axis=0)
    points = (points - _ARC_CENTER) * _ARC_SCALE
    if spec.mixing > 0:
        points = points + rng.normal(0.0, spec.mixing, points.shape)
    points = np.clip(points, -1.0, 1.0)
    labels = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    return Dataset(points, labels, domain_bounds=DOMAIN_BOUNDS["in"], n_classes=2)


def eval_grid(domain, resolution: int) -> EvalGrid:
    """Uniform lattice with ``resolution`` points per axis, corners included.

    ``domain`` is ``"in"``, ``"out"``, or an explicit bounds pair.
    """
    if resolution < 2:
        raise ConfigError(f"grid resolution must be >= 2, got {resolution}")
    if isinstance(domain, str):
        if domain not in DOMAIN_BOUNDS:
            raise ConfigError(f"domain must be 'in' or 'out', got {domain!r}")
        name, bounds = domain, DOMAIN_BOUNDS[domain]
    else:
        name, bounds = "custom", tuple((float(lo), float(hi)) for lo, hi in domain)
    axes = [np.linspace(lo, hi, resolution) for lo, hi in bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack(mesh, axis=-1).reshape(-1, 2)
    return EvalGrid(domain=name, resolution=resolution, points=points, bounds=bounds)


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def save_dataset(path, data: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x0", "x1", "label"])
        for (x0, x1), label in zip(data.points, data.labels):
            writer.writerow([_fmt(x0), _fmt(x1), int(label)])


def load_dataset(path, n_classes: int = 2) -> Dataset:
    points, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x0", "x1", "label"]:
            raise ShapeError(f"{path}:1: expected header x0,x1,label, got {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                points.append([float(row[0]), float(row[1])])
                labels.append(int(row[2]))
            except (ValueError, IndexError) as exc:
                raise ShapeError(f"{path}:{lineno}: malformed row {row}") from exc
    if not points:
        raise ShapeError(f"{path}: no data rows")
    return Dataset(np.array(points), np.array(labels), n_classes=n_classes)


def save_grid(path, grid: EvalGrid) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x0", "x1"])
        for x0, x1 in grid.points:
            writer.writerow([_fmt(x0), _fmt(x1)])


def load_grid(path) -> np.ndarray:
    points = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x0", "x1"]:
            raise ShapeError(f"{path}:1: expected header x0,x1, got {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                points.append([float(row[0]), float(row[1])])
            except (ValueError, IndexError) as exc:
                raise ShapeError(f"{path}:{lineno}: malformed row {row}") from exc
    if not points:
        raise ShapeError(f"{path}: no data rows")
    arr = np.array(points)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{path}: non-finite grid coordinates")
    return arr
