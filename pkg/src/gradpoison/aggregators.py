"""Aggregation rules over message gradients: Averaging and MultiKrum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class AggregatorSpec:
    kind: str = "averaging"  # "averaging" | "multikrum"
    f: float = 0.1

    def __post_init__(self):
        if self.kind not in ("averaging", "multikrum"):
            raise ValueError(f"unknown aggregator {self.kind!r}")
        if self.kind == "multikrum" and not 0 < self.f < 0.5:
            raise ValueError(f"MultiKrum needs f in (0, 0.5), got {self.f}")


@dataclass
class AggregationResult:
    aggregate: np.ndarray
    selected: np.ndarray  # sorted input indices


def multikrum_count(n: int, f: float) -> int:
    """Number of neighbours scored and vectors averaged: n - ceil(f*n) - 2."""
    # guard against f*n landing a hair above an integer
    return n - math.ceil(f * n - 1e-9) - 2


def krum_scores(dists: np.ndarray, m: int) -> np.ndarray:
    """s(i) = sum of squared distances from i to its m nearest other vectors."""
    D = np.array(dists, dtype=np.float64)
    np.fill_diagonal(D, np.inf)
    return np.sort(D, axis=1)[:, :m].sum(axis=1)


def aggregate(spec: AggregatorSpec, vectors) -> AggregationResult:
    V = np.asarray(vectors, dtype=np.float64)
    if V.ndim != 2:
        raise ValueError(f"expected a list of equal-length vectors, got array of shape {V.shape}")
    n = V.shape[0]
    if n < 1:
        raise ValueError("no vectors to aggregate")
    if spec.kind == "averaging":
        return AggregationResult(V.mean(axis=0), np.arange(n))
    m = multikrum_count(n, spec.f)
    if m < 1:
        raise ValueError(f"MultiKrum needs n - ceil(f*n) - 2 >= 1, got n={n}, f={spec.f}")
    scores = krum_scores(kernels.pairwise_sq_dists(np.ascontiguousarray(V)), m)
    chosen = np.sort(np.argsort(scores, kind="stable")[:m])
    return AggregationResult(V[chosen].mean(axis=0), chosen)


def selection_rate(selected_per_step, poison_per_step) -> float:
    """Mean over steps of (# selected poison messages) / (# submitted poison messages).

    Steps without poison messages are skipped; returns nan if there are none.
    """
    rates = []
    for sel, pois in zip(selected_per_step, poison_per_step):
        pois = np.asarray(pois)
        if pois.size == 0:
            continue
        rates.append(np.isin(pois, sel).sum() / pois.size)
    return float(np.mean(rates)) if rates else float("nan")
