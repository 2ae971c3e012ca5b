"""Pseudo-unknown sample generation by cross-class convex mixing.

Each pseudo sample interpolates two batch rows with different labels using
a Beta(omega, omega) coefficient; by default one coefficient is shared
across all views of a sample so the mixed object stays consistent between
views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Batch


class ParameterError(ValueError):
    """Mixing parameter outside its domain."""


class GenerationError(ValueError):
    """Batch cannot support pseudo-sample generation."""


@dataclass
class MixConfig:
    omega: float = 2.0
    pseudo_ratio: float = 1.0
    unknown_label: int = 0
    per_view_zeta: bool = False

    def validate(self) -> None:
        if self.omega <= 0:
            raise ParameterError(f"omega must be positive, got {self.omega}")
        if not 0.0 < self.pseudo_ratio <= 1.0:
            raise ParameterError(f"pseudo_ratio must lie in (0, 1], got {self.pseudo_ratio}")


def sample_beta(omega: float, rng: np.random.Generator) -> float:
    """Draw Beta(omega, omega) via two Gamma(omega, 1) variates."""
    if omega <= 0:
        raise ParameterError(f"omega must be positive, got {omega}")
    g1 = rng.gamma(omega, 1.0)
    g2 = rng.gamma(omega, 1.0)
    return float(g1 / (g1 + g2))


def generate_pseudo(batch: Batch, config: MixConfig, rng: np.random.Generator) -> Batch:
    """Append ceil(pseudo_ratio * B) mixed rows per view to the batch.

    Source pairs always carry different labels; pseudo rows get
    `config.unknown_label` and raised is_pseudo flags. Draw order per
    pseudo sample is (i, j, zeta...), so generation is reproducible from
    the generator state.
    """
    config.validate()
    labels = batch.labels
    if np.unique(labels).size < 2:
        raise GenerationError("pseudo generation needs at least 2 distinct classes in the batch")
    b = batch.size
    n_pseudo = math.ceil(config.pseudo_ratio * b)
    n_views = len(batch.views)

    pseudo_rows = [np.empty((n_pseudo, v.shape[1])) for v in batch.views]
    for k in range(n_pseudo):
        i = int(rng.integers(b))
        others = np.flatnonzero(labels != labels[i])
        j = int(others[rng.integers(others.size)])
        if config.per_view_zeta:
            zetas = [sample_beta(config.omega, rng) for _ in range(n_views)]
        else:
            zetas = [sample_beta(config.omega, rng)] * n_views
        for v, zeta in enumerate(zetas):
            pseudo_rows[v][k] = zeta * batch.views[v][i] + (1.0 - zeta) * batch.views[v][j]

    return Batch(
        views=[np.vstack([v, rows]) for v, rows in zip(batch.views, pseudo_rows)],
        labels=np.concatenate([labels, np.full(n_pseudo, config.unknown_label, dtype=np.int64)]),
        is_pseudo=np.concatenate([batch.is_pseudo, np.ones(n_pseudo, dtype=bool)]),
    )
