"""Synthetic datasets with known structure, standing in for image corpora.

The gaussian-mixture family is wired to the analytic score oracle; the other
families exercise the denoising-estimate training path and the distribution
metrics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ScoreOracle, make_rng

__all__ = ["DatasetSpec", "sample_dataset", "oracle_for", "export_csv", "FAMILIES"]

FAMILIES = ("gaussian-mixture-2d", "two-moons", "swiss-roll-2d",
            "checkerboard-2d", "image-grid")


@dataclass
class DatasetSpec:
    family: str
    size: int = 10000
    seed: int = 0
    noise: float = 0.05
    weights: list = field(default_factory=lambda: [0.5, 0.5])
    means: list = field(default_factory=lambda: [[-1.5, 0.0], [1.5, 0.0]])
    variances: list = field(default_factory=lambda: [0.3, 0.3])
    n_classes: int = 4  # image-grid prototypes

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown dataset family {self.family!r}")
        if self.size <= 0:
            raise ValueError(f"size must be positive, got {self.size}")

    @property
    def dim(self) -> int:
        return 64 if self.family == "image-grid" else 2


def oracle_for(spec: DatasetSpec) -> ScoreOracle:
    if spec.family != "gaussian-mixture-2d":
        raise ValueError(f"no analytic score oracle for family {spec.family!r}")
    return ScoreOracle(np.asarray(spec.weights), np.asarray(spec.means),
                       np.asarray(spec.variances))


def _two_moons(n, noise, rng):
    n_up = n // 2
    n_down = n - n_up
    a = rng.uniform(0.0, np.pi, n_up)
    b = rng.uniform(0.0, np.pi, n_down)
    upper = np.stack([np.cos(a), np.sin(a)], axis=1)
    lower = np.stack([1.0 - np.cos(b), 0.5 - np.sin(b)], axis=1)
    x = np.concatenate([upper, lower])
    x += noise * rng.standard_normal(x.shape)
    labels = np.concatenate([np.zeros(n_up, dtype=int), np.ones(n_down, dtype=int)])
    perm = rng.permutation(n)
    return x[perm], labels[perm]


def _swiss_roll(n, noise, rng):
    phi = rng.uniform(1.5 * np.pi, 4.5 * np.pi, n)
    x = np.stack([phi * np.cos(phi), phi * np.sin(phi)], axis=1) / (4.5 * np.pi)
    x = 2.0 * x + noise * rng.standard_normal(x.shape)
    return x, None


def _checkerboard(n, rng):
    # allowed cells of [-2, 2)^2: floor(x) + floor(y) even
    out = np.empty((n, 2))
    filled = 0
    while filled < n:
        cand = rng.uniform(-2.0, 2.0, (2 * (n - filled), 2))
        keep = (np.floor(cand[:, 0]) + np.floor(cand[:, 1])) % 2 == 0
        got = cand[keep][: n - filled]
        out[filled:filled + len(got)] = got
        filled += len(got)
    return out, None


def _grid_prototypes() -> np.ndarray:
    protos = np.zeros((4, 8, 8))
    protos[0, ::2, :] = 1.0          # horizontal stripes
    protos[1, :, ::2] = 1.0          # vertical stripes
    ii, jj = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    protos[2] = ((ii + jj) % 2).astype(float)  # checker
    protos[3, 3:5, :] = 1.0          # center bar
    protos[3, :, 3:5] = 1.0
    return protos.reshape(4, 64)


def sample_dataset(spec: DatasetSpec, n: int, seed: int):
    """Draw n points; returns (batch, labels-or-None), deterministic under seed."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    rng = make_rng(seed)
    fam = spec.family
    if fam == "gaussian-mixture-2d":
        x, comp = oracle_for(spec).sample(n, rng)
        return x, comp
    if fam == "two-moons":
        return _two_moons(n, spec.noise, rng)
    if fam == "swiss-roll-2d":
        return _swiss_roll(n, spec.noise, rng)
    if fam == "checkerboard-2d":
        return _checkerboard(n, rng)
    protos = _grid_prototypes()[: spec.n_classes]
    labels = rng.integers(0, len(protos), n)
    x = protos[labels] + spec.noise * rng.standard_normal((n, 64))
    return x, labels


def export_csv(path, x: np.ndarray, labels=None) -> None:
    """Write a batch as ``x0,x1,...[,label]`` rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    fields = [f"x{i}" for i in range(x.shape[1])]
    if labels is not None:
        fields.append("label")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for i, row in enumerate(x):
            cells = [repr(float(v)) for v in row]
            if labels is not None:
                cells.append(int(labels[i]))
            writer.writerow(cells)
