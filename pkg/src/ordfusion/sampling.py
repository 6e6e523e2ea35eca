"""Reference-image samplers over adjacent ordinal categories.

Given a main image of category m, a reference is drawn from category m-1 or
m+1. The equal sampler picks either side with probability 0.5; the
inverse-ratio sampler weights side m-1 by N_{m+1}/(N_{m-1}+N_{m+1}) and side
m+1 by N_{m-1}/(N_{m-1}+N_{m+1}), biasing references toward the minority
neighbor. Boundary categories (m=1, m=K) and empty neighbors force all mass
to the one available side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import OrdinalDataset, OrdinalSample

SAMPLER_KINDS = ("equal", "inverse_ratio")


class NoReferenceAvailable(RuntimeError):
    """Both adjacent categories are empty; the caller should skip fusion."""


@dataclass(frozen=True)
class AdjacencyProbabilities:
    """Probability of drawing the reference from m-1 (left) vs m+1 (right)."""

    p_left: float
    p_right: float

    def __post_init__(self):
        if self.p_left < 0 or self.p_right < 0:
            raise ValueError("probabilities must be nonnegative")
        if abs(self.p_left + self.p_right - 1.0) > 1e-12:
            raise ValueError(
                f"probabilities must sum to 1, got {self.p_left + self.p_right}"
            )


def _check_kind(kind: str) -> None:
    if kind not in SAMPLER_KINDS:
        raise ValueError(f"unknown sampler kind {kind!r}; expected one of {SAMPLER_KINDS}")


def adjacency_probabilities(
    kind: str, counts, m: int, k: int
) -> AdjacencyProbabilities:
    """Left/right sampling probabilities for a main image of category ``m``."""
    _check_kind(kind)
    if not 1 <= m <= k:
        raise ValueError(f"label {m} outside 1..{k}")
    n_left = counts[m - 2] if m > 1 else 0
    n_right = counts[m] if m < k else 0
    if n_left == 0 and n_right == 0:
        raise NoReferenceAvailable(
            f"category {m} has no populated adjacent category"
        )
    if n_left == 0:
        return AdjacencyProbabilities(0.0, 1.0)
    if n_right == 0:
        return AdjacencyProbabilities(1.0, 0.0)
    if kind == "equal":
        return AdjacencyProbabilities(0.5, 0.5)
    n_adj = n_left + n_right
    return AdjacencyProbabilities(n_right / n_adj, n_left / n_adj)


def sample_reference_label(
    kind: str, counts, m: int, k: int, rng: np.random.Generator
) -> int:
    """Draw the reference category (m-1 or m+1)."""
    probs = adjacency_probabilities(kind, counts, m, k)
    if probs.p_left == 1.0:
        return m - 1
    if probs.p_right == 1.0:
        return m + 1
    return m - 1 if rng.random() < probs.p_left else m + 1


def sample_reference_index(
    kind: str, ds: OrdinalDataset, m: int, rng: np.random.Generator
) -> int:
    """Index into ``ds`` of a reference drawn for a main image of category m."""
    r = sample_reference_label(kind, ds.counts, m, ds.k, rng)
    candidates = ds.indices_of_label(r)
    return int(candidates[rng.integers(len(candidates))])


def sample_reference(
    kind: str, ds: OrdinalDataset, m: int, rng: np.random.Generator
) -> OrdinalSample:
    """Reference sample with |m - r| = 1, uniform within the chosen category."""
    return ds.samples[sample_reference_index(kind, ds, m, rng)]
