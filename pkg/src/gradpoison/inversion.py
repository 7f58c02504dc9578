"""Turning a malicious gradient into data poisons.

The poison inputs are optimised so that the gradient they induce at the
current parameters matches the gradient attack:

===== =============================================
GA    cos(g_mix, g_a)
OG    cos(g_mix, g_a) ** 2
LIE   || g_p - g_a + z_max * sigma ||^2
===== =============================================

``g_p`` is the mean gradient over the poisons and
``g_mix = (n_a * g_a + n_p * g_p) / (n_a + n_p)``. Inputs take Adam steps
and are projected back on the feasible set after every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import AuxiliaryStats
from .autodiff import Tensor
from .datasets import Dataset, dump_pfds
from .models import ModelState, forward, param_tensors, sample_losses

LEVELS = 255.0
MEMBERSHIP_SLACK = 1e-12


@dataclass(frozen=True)
class FeasibleSet:
    kind: str = "free"  # "free" | "image" | "neighborhood"
    eps: float = 32.0 / 255.0
    norm: str = "l1"  # "l1" | "linf"

    def __post_init__(self):
        if self.kind not in ("free", "image", "neighborhood"):
            raise ValueError(f"unknown feasible set {self.kind!r}")
        if self.norm not in ("l1", "linf"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass(frozen=True)
class InversionConfig:
    steps: int = 200
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init: str = "uniform"  # "uniform" | "aux_clone"
    try_all_labels: bool = False
    label_budget: int = 10

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.init not in ("uniform", "aux_clone"):
            raise ValueError(f"unknown init policy {self.init!r}")


@dataclass
class PoisonBatch:
    inputs: np.ndarray
    labels: np.ndarray
    anchors: np.ndarray | None = None
    source_index: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)

    def with_inputs(self, x: np.ndarray) -> "PoisonBatch":
        return replace(self, inputs=x)


@dataclass
class InversionResult:
    poisons: PoisonBatch
    trace: list[float]
    best_f: float
    diverged: bool = False
    degenerate: bool = False


# ---------------------------------------------------------------- projection

def quantize(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * LEVELS) / LEVELS


def project_l1_ball(v: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of a 1-D vector onto {w : ||w||_1 <= radius} (sort-based)."""
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    j = np.arange(1, u.size + 1)
    rho = np.nonzero(u - (css - radius) / j > 0)[0][-1]
    theta = (css[rho] - radius) / (rho + 1)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def _quantize_toward(c: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    k = c * LEVELS
    q = np.where(c >= anchor, np.floor(k), np.ceil(k)) / LEVELS
    return np.clip(q, 0.0, 1.0)


def _dist(x, anchor, norm):
    d = np.abs(x - anchor)
    return d.sum() if norm == "l1" else d.max(initial=0.0)


def project(x: np.ndarray, feasible: FeasibleSet, anchor: np.ndarray | None = None) -> np.ndarray:
    """Project one input onto the feasible set."""
    x = np.asarray(x, dtype=np.float64)
    if feasible.kind == "free":
        return x.copy()
    if feasible.kind == "image":
        return quantize(x)
    if anchor is None:
        raise ValueError("neighborhood projection needs an anchor")
    anchor = np.asarray(anchor, dtype=np.float64)
    if anchor.shape != x.shape:
        raise ValueError(f"anchor shape {anchor.shape} does not match input {x.shape}")
    if feasible.norm == "linf":
        c = np.clip(x, anchor - feasible.eps, anchor + feasible.eps)
    else:
        c = anchor + project_l1_ball((x - anchor).ravel(), feasible.eps).reshape(x.shape)
    c = np.clip(c, 0.0, 1.0)
    q = np.rint(c * LEVELS) / LEVELS
    if _dist(q, anchor, feasible.norm) > feasible.eps + MEMBERSHIP_SLACK:
        # nearest rounding left the ball; round toward the (on-grid) anchor instead
        q = _quantize_toward(c, anchor)
    return q


def project_batch(x: np.ndarray, feasible: FeasibleSet, anchors: np.ndarray | None = None) -> np.ndarray:
    if feasible.kind != "neighborhood":
        return project(x, feasible)
    return np.stack([project(xi, feasible, ai) for xi, ai in zip(x, anchors)])


def is_member(x: np.ndarray, feasible: FeasibleSet, anchor: np.ndarray | None = None) -> bool:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        return False
    if feasible.kind == "free":
        return True
    on_grid = bool(np.all((x >= 0) & (x <= 1)) and np.array_equal(np.rint(x * LEVELS) / LEVELS, x))
    if feasible.kind == "image":
        return on_grid
    return on_grid and _dist(x, anchor, feasible.norm) <= feasible.eps + MEMBERSHIP_SLACK


# ---------------------------------------------------------------- init

def init_poisons(policy: str, n_p: int, feasible: FeasibleSet, aux: Dataset,
                 rng: np.random.Generator, num_classes: int | None = None) -> PoisonBatch:
    if n_p < 1:
        raise ValueError("n_p must be >= 1")
    if feasible.kind == "neighborhood" and policy != "aux_clone":
        raise ValueError("the neighborhood feasible set requires the aux_clone init policy")
    if policy == "uniform":
        C = num_classes if num_classes is not None else aux.num_classes
        x = rng.uniform(0.0, 1.0, size=(n_p, *aux.input_shape))
        labels = rng.integers(0, C, size=n_p)
        return PoisonBatch(project_batch(x, feasible), labels)
    if policy == "aux_clone":
        if len(aux) == 0:
            raise ValueError("aux_clone needs a non-empty auxiliary split")
        idx = rng.choice(len(aux), size=n_p, replace=n_p > len(aux))
        src = aux.inputs[idx].copy()
        anchors = src if feasible.kind == "neighborhood" else None
        return PoisonBatch(project_batch(src, feasible, anchors), aux.labels[idx].copy(),
                           anchors=None if anchors is None else src.copy(), source_index=idx)
    raise ValueError(f"unknown init policy {policy!r}")


# ---------------------------------------------------------------- objective

@dataclass
class ObjectiveTarget:
    """What the poisons should imitate. ``z_max`` is only used by LIE."""
    kind: str
    stats: AuxiliaryStats
    z_max: float = 0.0
    _blocks: dict = field(default=None, repr=False)

    def blocks(self, state: ModelState):
        if self._blocks is None:
            shapes = [(k, v.shape, v.size) for k, v in state.params.items()]
            g_a, tgt = [], []
            lie_target = self.stats.mean - self.z_max * self.stats.std
            pos = 0
            for _, shape, n in shapes:
                g_a.append(self.stats.mean[pos:pos + n].reshape(shape))
                tgt.append(lie_target[pos:pos + n].reshape(shape))
                pos += n
            self._blocks = {"g_a": g_a, "lie": tgt}
        return self._blocks


def objective(state: ModelState, poisons: PoisonBatch, target: ObjectiveTarget,
              with_grad: bool = True) -> tuple[float, np.ndarray | None, bool]:
    """Poisoning objective value, its gradient w.r.t. the poison inputs, and
    a degenerate flag (zero-norm vector inside a cosine similarity)."""
    config = state.config
    params = param_tensors(state, requires_grad=True)
    xt = Tensor(poisons.inputs, requires_grad=with_grad)
    loss = sample_losses(config, forward(config, params, xt), poisons.labels).mean()
    g_p = ad.grad(loss, list(params.values()), create_graph=with_grad)
    blk = target.blocks(state)

    if target.kind == "lie":
        f = None
        for gp, t in zip(g_p, blk["lie"]):
            diff = ad.add(gp, Tensor(-t))
            term = ad.sum_(ad.mul(diff, diff))
            f = term if f is None else ad.add(f, term)
    else:
        n_a, n_p = target.stats.n, len(poisons)
        w_a, w_p = n_a / (n_a + n_p), n_p / (n_a + n_p)
        dot = sq = None
        for gp, ga in zip(g_p, blk["g_a"]):
            mix = ad.add(ad.mul(w_p, gp), Tensor(w_a * ga))
            d = ad.sum_(ad.mul(mix, Tensor(ga)))
            s = ad.sum_(ad.mul(mix, mix))
            dot = d if dot is None else ad.add(dot, d)
            sq = s if sq is None else ad.add(sq, s)
        norm_a = float(np.linalg.norm(target.stats.mean))
        if norm_a == 0.0 or sq.data == 0.0:
            return 0.0, np.zeros_like(poisons.inputs) if with_grad else None, True
        cos = ad.div(dot, ad.mul(ad.sqrt(sq), norm_a))
        f = cos if target.kind == "ga" else ad.mul(cos, cos)

    value = float(f.data)
    if not with_grad:
        return value, None, False
    if not f.requires_grad:
        return value, np.zeros_like(poisons.inputs), False
    (gx,) = ad.grad(f, [xt])
    return value, gx.data, False


# ---------------------------------------------------------------- inversion

def invert(target: ObjectiveTarget, init: PoisonBatch, feasible: FeasibleSet, cfg: InversionConfig,
           state: ModelState, steps: int | None = None) -> InversionResult:
    """Adam on the poison inputs with projection after every step.

    Returns the iterate with the lowest objective seen (the init included).
    A non-finite objective reverts the step and halves the rate; the run
    stops with ``diverged=True`` once the rate drops below 1e-12.
    """
    steps = cfg.steps if steps is None else steps
    x = init.inputs.copy()
    batch = init.with_inputs(x)
    f, g, degenerate = objective(state, batch, target)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        return InversionResult(batch, [f], f, diverged=True, degenerate=degenerate)
    best_f, best_x = f, x
    trace = [f]
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    t = 0
    rate = cfg.lr
    diverged = False
    done = 0
    while done < steps:
        t_new = t + 1
        m_new = cfg.beta1 * m + (1 - cfg.beta1) * g
        v_new = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        m_hat = m_new / (1 - cfg.beta1 ** t_new)
        v_hat = v_new / (1 - cfg.beta2 ** t_new)
        x_new = project_batch(x - rate * m_hat / (np.sqrt(v_hat) + cfg.eps), feasible, init.anchors)
        with np.errstate(all="ignore"):
            f_new, g_new, deg = objective(state, batch.with_inputs(x_new), target)
        if not (np.isfinite(f_new) and np.all(np.isfinite(g_new))):
            rate /= 2
            if rate < 1e-12:
                diverged = True
                break
            continue
        x, g, m, v, t = x_new, g_new, m_new, v_new, t_new
        degenerate = degenerate or deg
        trace.append(f_new)
        if f_new < best_f:
            best_f, best_x = f_new, x_new
        done += 1
    return InversionResult(init.with_inputs(best_x), trace, best_f, diverged, degenerate)


def craft_poisons(target: ObjectiveTarget, init: PoisonBatch, feasible: FeasibleSet, cfg: InversionConfig,
                  state: ModelState, num_classes: int) -> InversionResult:
    """Optionally pick each poison's label by short trial runs, then invert."""
    if cfg.try_all_labels and state.config.architecture != "linear_regression":
        labels = init.labels.copy()
        for i in range(len(labels)):
            scores = []
            for c in range(num_classes):
                trial = labels.copy()
                trial[i] = c
                res = invert(target, replace(init, labels=trial), feasible, cfg, state, steps=cfg.label_budget)
                scores.append(res.best_f if np.isfinite(res.best_f) else math.inf)
            labels[i] = int(np.argmin(scores))
        init = replace(init, labels=labels)
    return invert(target, init, feasible, cfg, state)


# ---------------------------------------------------------------- dumps

def dump_poisons_pfds(batch: PoisonBatch, num_classes: int, path) -> None:
    dump_pfds(Dataset(batch.inputs, batch.labels.astype(np.int64), num_classes), path)


def dump_poisons_u8(batch: PoisonBatch, path) -> None:
    """One label byte followed by the quantised input bytes per poison
    (for 3x32x32 inputs this is exactly the CIFAR-10 record layout)."""
    flat = np.rint(np.clip(batch.inputs.reshape(len(batch), -1), 0, 1) * LEVELS).astype(np.uint8)
    out = np.concatenate([batch.labels.astype(np.uint8)[:, None], flat], axis=1)
    with open(path, "wb") as fh:
        fh.write(out.tobytes())
