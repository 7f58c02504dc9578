"""Gradient attacks crafted from the attacker's auxiliary gradients.

* GA  - poisoned auxiliary mean equals ``-lam * g_a``.
* OG  - poisoned auxiliary mean is orthogonal to ``g_a`` with the same norm.
* LIE - ``g_a - z * sigma`` with z picked on a grid to maximise the shift
  of the aggregate (A Little Is Enough, adaptive variant).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .aggregators import AggregatorSpec, krum_scores, multikrum_count

ATTACKS = ("ga", "og", "lie")


class DegenerateAttackWarning(RuntimeWarning):
    pass


def default_z_grid() -> tuple[float, ...]:
    return tuple(np.logspace(-1, 1, 50))


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "ga"
    lam: float = 1.0
    z_grid: tuple[float, ...] = field(default_factory=default_z_grid)

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"unknown attack {self.kind!r}")
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        z = np.asarray(self.z_grid, dtype=np.float64)
        if z.size == 0 or np.any(z <= 0) or np.any(np.diff(z) <= 0):
            raise ValueError("z grid must be non-empty, positive and strictly ascending")


@dataclass
class AuxiliaryStats:
    grads: np.ndarray  # (n_a, d)
    mean: np.ndarray
    std: np.ndarray  # population std, per coordinate

    @classmethod
    def from_grads(cls, grads) -> "AuxiliaryStats":
        G = np.asarray(grads, dtype=np.float64)
        if G.ndim != 2 or len(G) == 0:
            raise ValueError("need a non-empty (n_a, d) array of auxiliary gradients")
        return cls(G, G.mean(axis=0), G.std(axis=0))

    @property
    def n(self) -> int:
        return self.grads.shape[0]


def craft_ga(stats: AuxiliaryStats, lam: float, n_p: int) -> np.ndarray:
    if n_p < 1:
        raise ValueError("n_p must be >= 1")
    g_a, n_a = stats.mean, stats.n
    if not np.any(g_a):
        warnings.warn("auxiliary mean gradient is zero; GA attack is degenerate", DegenerateAttackWarning)
        return np.zeros_like(g_a)
    return -((lam * (n_a + n_p) + n_a) / n_p) * g_a


def orthogonal_direction(g: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Seeded random vector orthogonal to ``g`` with ``||t|| == ||g||``."""
    norm = np.linalg.norm(g)
    u = g / norm
    while True:
        r = rng.standard_normal(g.shape)
        r = r - np.dot(r, u) * u
        r = r - np.dot(r, u) * u  # second pass for orthogonality to rounding
        rn = np.linalg.norm(r)
        if rn >= 1e-12 * norm and rn > 0:
            return r * (norm / rn)


def craft_og(stats: AuxiliaryStats, n_p: int, rng: np.random.Generator) -> np.ndarray:
    g_a, n_a = stats.mean, stats.n
    if g_a.size < 2:
        raise ValueError("OG attack needs dimension >= 2")
    if n_p < 1:
        raise ValueError("n_p must be >= 1")
    if not np.any(g_a):
        warnings.warn("auxiliary mean gradient is zero; OG attack is degenerate", DegenerateAttackWarning)
        return np.zeros_like(g_a)
    t = orthogonal_direction(g_a, rng)
    return ((n_a + n_p) * t - n_a * g_a) / n_p


def _lie_shift_multikrum(stats: AuxiliaryStats, n_p: int, f: float, z_grid) -> tuple[np.ndarray, np.ndarray]:
    """Shift of the MultiKrum aggregate and number of selected copies for each z.

    Aux-aux distances are computed once and reused across the grid.
    """
    G, n_a = stats.grads, stats.n
    base_m = multikrum_count(n_a, f)
    m = multikrum_count(n_a + n_p, f)
    if m < 1:
        raise ValueError(f"MultiKrum needs n - ceil(f*n) - 2 >= 1, got n={n_a + n_p}, f={f}")
    D_aa = kernels.pairwise_sq_dists(np.ascontiguousarray(G))
    if base_m >= 1:
        base_sel = np.sort(np.argsort(krum_scores(D_aa, base_m), kind="stable")[:base_m])
        base = G[base_sel].mean(axis=0)
    else:
        base = stats.mean
    n = n_a + n_p
    D = np.zeros((n, n))
    D[:n_a, :n_a] = D_aa
    shifts = np.empty(len(z_grid))
    counts = np.empty(len(z_grid), dtype=np.int64)
    for k, z in enumerate(z_grid):
        cand = stats.mean - z * stats.std
        diff = G - cand
        dc = np.einsum("ij,ij->i", diff, diff)
        D[:n_a, n_a:] = dc[:, None]
        D[n_a:, :n_a] = dc[None, :]
        sel = np.sort(np.argsort(krum_scores(D, m), kind="stable")[:m])
        n_pois = int(np.sum(sel >= n_a))
        aux_sel = sel[sel < n_a]
        agg = (G[aux_sel].sum(axis=0) + n_pois * cand) / m
        shifts[k] = np.linalg.norm(agg - base)
        counts[k] = n_pois
    return shifts, counts


def lie_shifts(stats: AuxiliaryStats, n_p: int, z_grid, aggregator: AggregatorSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per grid value: ||Agg(S_a + copies of g_a - z*sigma) - Agg(S_a)|| and how many copies Agg keeps."""
    z_grid = np.asarray(z_grid, dtype=np.float64)
    if aggregator.kind == "averaging":
        n_a = stats.n
        # Agg(S_a + copies) - g_a = n_p * (cand - g_a) / (n_a + n_p)
        shifts = np.array([np.linalg.norm(n_p * (-z * stats.std) / (n_a + n_p)) for z in z_grid])
        return shifts, np.full(len(z_grid), n_p)
    return _lie_shift_multikrum(stats, n_p, aggregator.f, z_grid)


def craft_lie(stats: AuxiliaryStats, n_p: int, z_grid, aggregator: AggregatorSpec) -> tuple[np.ndarray, float]:
    """Return ``(g_a - z_max * sigma, z_max)``.

    z_max is the smallest grid value reaching the largest aggregate shift
    among the candidates the aggregator keeps on the auxiliary simulation.
    If no candidate is kept, the whole grid is searched.
    """
    if n_p < 1:
        raise ValueError("n_p must be >= 1")
    z_grid = np.asarray(z_grid, dtype=np.float64)
    if not np.any(stats.std):
        warnings.warn("auxiliary gradients have zero spread; LIE attack is degenerate", DegenerateAttackWarning)
    shifts, kept = lie_shifts(stats, n_p, z_grid, aggregator)
    if np.any(kept > 0):
        shifts = np.where(kept > 0, shifts, -np.inf)
    k = int(np.argmax(shifts))  # first maximum -> smallest z
    z_max = float(z_grid[k])
    return stats.mean - z_max * stats.std, z_max
