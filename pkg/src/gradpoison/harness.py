"""Experiment engine: training loop with an attacker appending messages each step."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import aggregators, attacks, datasets, inversion, models, optimizers
from .aggregators import AggregatorSpec
from .attacks import AttackSpec, AuxiliaryStats
from .datasets import Dataset, SplitSpec
from .inversion import FeasibleSet, InversionConfig

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss", "val_acc", "val_loss", "sel_rate", "z_max", "f_p", "diverged")
STREAMS = ("init", "split", "train_shuffle", "aux_shuffle", "attack", "poison_init")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class ModelSection:
    architecture: str = "mlp"
    hidden: tuple[int, ...] = (32,)
    init_seed: int | None = None


@dataclass(frozen=True)
class DataSection:
    source: str = "blobs"  # "blobs" | "cifar10" | "pfds"
    path: str | None = None
    classes: int = 3
    per_class: int = 400
    dim: int = 16
    separation: float = 8.0
    blob_seed: int = 0
    rescale: bool = False  # min-max into [0, 1], snapped to the 8-bit grid
    input_shape: tuple[int, ...] | None = None  # pfds only
    split: SplitSpec = field(default_factory=lambda: SplitSpec(0.5, 0.15, 0.15, 0.2))
    split_seed: int | None = None


@dataclass(frozen=True)
class OptimizerSection:
    kind: str = "sgd"
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    attack: AttackSpec | None = None
    attack_mode: str = "gradient"  # "gradient" | "data"
    alpha: float = 0.0
    feasible: FeasibleSet | None = None
    inversion: InversionConfig = field(default_factory=InversionConfig)
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    out_dir: str | None = None
    dump_poisons: bool = False

    @property
    def n_p(self) -> int:
        if self.attack is None or self.alpha == 0:
            return 0
        return max(1, round(self.alpha * self.batch_size / (1 - self.alpha)))

    @property
    def realized_alpha(self) -> float:
        return self.n_p / (self.batch_size + self.n_p)


def _convert(tp, value, path):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(args[0], value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        inner = typing.get_args(tp)[0]
        return tuple(_convert(inner, v, path) for v in value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict, path: str = "config"):
    """Build a (nested) dataclass from a JSON object; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        if isinstance(v, (np.floating,)):
            return float(v)
        return v
    return conv(cfg)


def parse_config(data: dict) -> ExperimentConfig:
    cfg = from_dict(ExperimentConfig, data)
    validate_config(cfg)
    return cfg


def read_json_object(path) -> dict:
    """JSON object from ``path``; OSError propagates, bad JSON is a ConfigError."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def load_config(path) -> ExperimentConfig:
    return parse_config(read_json_object(path))


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """``a.b.c=value``; the value is parsed as JSON, falling back to a plain string."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        set_path(data, key, value)
    return data


def set_path(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = data
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        node = node[p]
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {p!r} is not an object")
    node[parts[-1]] = value


def _dataset_size(d: DataSection) -> int | None:
    if d.source == "blobs":
        return d.classes * d.per_class
    if d.source == "cifar10":
        return 50000
    if d.path and Path(d.path).is_file():
        with open(d.path, "rb") as fh:
            head = fh.read(16)
        if len(head) == 16 and head[:4] == datasets.PFDS_MAGIC:
            return int.from_bytes(head[4:8], "little")
    return None


def validate_config(cfg: ExperimentConfig) -> None:
    """Feasibility checks that need no data loading."""
    d = cfg.data
    if d.source not in ("blobs", "cifar10", "pfds"):
        raise ConfigError(f"data.source: unknown source {d.source!r}")
    if d.source in ("cifar10", "pfds") and not d.path:
        raise ConfigError(f"data.path is required for source {d.source!r}")
    if cfg.attack_mode not in ("gradient", "data"):
        raise ConfigError(f"attack_mode: unknown mode {cfg.attack_mode!r}")
    if not 0 <= cfg.alpha < 0.5:
        raise ConfigError(f"alpha must be in [0, 0.5), got {cfg.alpha}")
    if cfg.epochs < 1 or cfg.batch_size < 1:
        raise ConfigError("epochs and batch_size must be >= 1")
    if cfg.optimizer.kind not in ("sgd", "adam") or cfg.optimizer.lr <= 0:
        raise ConfigError(f"optimizer: invalid {cfg.optimizer}")
    attacked = cfg.n_p > 0
    if attacked and cfg.attack_mode == "data":
        if cfg.feasible is None:
            raise ConfigError("attack_mode 'data' requires a feasible set")
        if cfg.feasible.kind == "neighborhood" and cfg.inversion.init != "aux_clone":
            raise ConfigError("the neighborhood feasible set requires inversion.init = 'aux_clone'")
    if cfg.model.architecture not in ("mlp", "cifar_cnn"):
        raise ConfigError(f"model.architecture {cfg.model.architecture!r} cannot be trained by the harness")
    n = _dataset_size(d)
    if n is not None:
        sizes = {k: len(v) for k, v in datasets.split_indices(n, d.split).items()}
        needed = ["train", "val"]
        if d.source != "cifar10":
            needed.append("test")
        if attacked:
            needed.append("aux")
        for role in needed:
            if sizes[role] == 0:
                raise ConfigError(f"data.split gives an empty {role!r} split ({sizes})")
        if cfg.aggregator.kind == "multikrum":
            short = sizes["train"] % cfg.batch_size or cfg.batch_size
            smallest = min(short, cfg.batch_size) + cfg.n_p
            if aggregators.multikrum_count(smallest, cfg.aggregator.f) < 1:
                raise ConfigError(f"MultiKrum f={cfg.aggregator.f} leaves no vector for a step with "
                                  f"{smallest} messages")


# ---------------------------------------------------------------- records

@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    val_acc: float
    val_loss: float
    sel_rate: float
    z_max: float
    f_p: float
    diverged: bool


@dataclass
class RunSummary:
    best_val_acc: float
    best_epoch: int
    test_acc_at_best: float
    final_val_acc: float
    alpha_requested: float
    alpha_realized: float
    n_p: int
    diverged: bool
    wall_clock_seconds: float = 0.0


# ---------------------------------------------------------------- engine

def seed_streams(master: int) -> dict[str, np.random.Generator]:
    """Independent generators per named purpose, all derived from the master seed."""
    return {name: np.random.default_rng(np.random.SeedSequence(master, spawn_key=(i,)))
            for i, name in enumerate(STREAMS)}


def _derived_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def load_splits(cfg: ExperimentConfig, split_seed: int) -> dict[str, Dataset]:
    d = cfg.data
    spec = dataclasses.replace(d.split, seed=split_seed)
    if d.source == "blobs":
        ds = datasets.synth_blobs(d.classes, d.per_class, d.dim, d.separation, d.blob_seed)
        if d.rescale:
            ds = datasets.rescale_unit_box(ds)
            ds = Dataset(inversion.quantize(ds.inputs), ds.labels, ds.num_classes)
        return datasets.partition(ds, spec)
    if d.source == "pfds":
        return datasets.partition(datasets.load_pfds(d.path, d.input_shape), spec)
    train_pool, test = datasets.load_cifar10(d.path)
    splits = datasets.partition(train_pool, dataclasses.replace(spec, test=0.0))
    splits["test"] = test
    return splits


def attacker_view(state: models.ModelState, aux: Dataset) -> AuxiliaryStats:
    """Statistics the attacker can compute: auxiliary data and public parameters only."""
    G, _ = models.per_sample_gradients(state, aux.inputs, aux.labels)
    return AuxiliaryStats.from_grads(G)


@dataclass
class Attacker:
    cfg: ExperimentConfig
    aux: Dataset
    stream: datasets.BatchStream
    attack_rng: np.random.Generator
    poison_rng: np.random.Generator
    num_classes: int
    last_poisons: inversion.PoisonBatch | None = None

    def messages(self, state: models.ModelState) -> tuple[np.ndarray, float, float]:
        """Poison messages for this step, with (z_max, f_p) diagnostics (nan if n/a)."""
        cfg, spec, n_p = self.cfg, self.cfg.attack, self.cfg.n_p
        aux_batch = self.aux.subset(self.stream.next())
        stats = attacker_view(state, aux_batch)
        z_max = math.nan
        if spec.kind == "lie":
            vec, z_max = attacks.craft_lie(stats, n_p, spec.z_grid, cfg.aggregator)
        elif spec.kind == "ga":
            vec = attacks.craft_ga(stats, spec.lam, n_p)
        else:
            vec = attacks.craft_og(stats, n_p, self.attack_rng)
        if cfg.attack_mode == "gradient":
            return np.tile(vec, (n_p, 1)), z_max, math.nan
        target = inversion.ObjectiveTarget(spec.kind, stats, 0.0 if math.isnan(z_max) else z_max)
        init = inversion.init_poisons(cfg.inversion.init, n_p, cfg.feasible, self.aux,
                                      self.poison_rng, self.num_classes)
        res = inversion.craft_poisons(target, init, cfg.feasible, cfg.inversion, state, self.num_classes)
        self.last_poisons = res.poisons
        G, _ = models.per_sample_gradients(state, res.poisons.inputs, res.poisons.labels)
        return G, z_max, res.best_f


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> tuple[list[MetricsRecord], RunSummary]:
    """Train under attack; returns per-epoch records and the run summary.

    If ``out_dir`` (or ``cfg.out_dir``) is set, outputs are written there and
    the directory is checked for writability before training starts.
    """
    validate_config(cfg)
    out = out_dir if out_dir is not None else cfg.out_dir
    if out is not None:
        check_writable(out)
    started = time.perf_counter()
    streams = seed_streams(cfg.seed)
    split_seed = cfg.data.split_seed if cfg.data.split_seed is not None else _derived_seed(streams["split"])
    splits = load_splits(cfg, split_seed)
    train, val, test, aux = splits["train"], splits["val"], splits["test"], splits["aux"]
    num_classes = train.num_classes
    init_seed = cfg.model.init_seed if cfg.model.init_seed is not None else _derived_seed(streams["init"])
    mcfg = models.ModelConfig(cfg.model.architecture, train.input_shape, num_classes, cfg.model.hidden, init_seed)
    state = models.init_model(mcfg)
    theta = state.flat()
    o = cfg.optimizer
    opt = optimizers.OptimizerState(o.kind, o.lr, o.beta1, o.beta2, o.eps)
    n_p = cfg.n_p
    attacker = None
    if n_p:
        attacker = Attacker(cfg, aux, datasets.BatchStream(len(aux), cfg.batch_size, streams["aux_shuffle"]),
                            streams["attack"], streams["poison_init"], num_classes)
    if out is not None and cfg.dump_poisons:
        (Path(out) / "poisons").mkdir(parents=True, exist_ok=True)

    records: list[MetricsRecord] = []
    diverged = False
    best_acc, best_epoch, best_theta = -1.0, 0, theta.copy()
    for epoch in range(1, cfg.epochs + 1):
        losses, sel, zs, fps = [], [], [], []
        for step_i, idx in enumerate(datasets.epoch_batches(len(train), cfg.batch_size, streams["train_shuffle"])):
            if diverged:
                continue
            state = state.with_flat(theta)
            with np.errstate(all="ignore"):
                poison_msgs = None
                if attacker is not None:
                    # attacker runs before the clean batch gradients exist
                    poison_msgs, z, fp = attacker.messages(state)
                    zs.append(z)
                    fps.append(fp)
                    if cfg.dump_poisons and out is not None and step_i == 0 and attacker.last_poisons is not None:
                        _dump_poisons(attacker.last_poisons, cfg, num_classes, Path(out) / "poisons" / f"epoch_{epoch:03d}")
                batch = train.subset(idx)
                G, batch_losses = models.per_sample_gradients(state, batch.inputs, batch.labels)
                losses.extend(batch_losses.tolist())
                msgs = G if poison_msgs is None else np.vstack([G, poison_msgs])
                res = aggregators.aggregate(cfg.aggregator, msgs)
                if poison_msgs is not None:
                    pois = np.arange(len(G), len(msgs))
                    sel.append(np.isin(pois, res.selected).mean())
                new_theta = optimizers.step(opt, theta, res.aggregate)
            if not (np.all(np.isfinite(new_theta)) and np.all(np.isfinite(batch_losses))):
                diverged = True
                log.warning("run diverged at epoch %d", epoch)
            theta = new_theta
        state = state.with_flat(theta)
        val_acc, val_loss = models.evaluate(state, val.inputs, val.labels)
        records.append(MetricsRecord(epoch, _nanmean(losses) if losses else math.nan, val_acc, val_loss,
                                     _nanmean(sel), _nanmean(zs), _nanmean(fps), diverged))
        if val_acc > best_acc:
            best_acc, best_epoch, best_theta = val_acc, epoch, theta.copy()
        log.info("epoch %d val_acc %.4f val_loss %.4g", epoch, val_acc, val_loss)

    test_acc = models.evaluate(state.with_flat(best_theta), test.inputs, test.labels)[0] if len(test) else math.nan
    summary = RunSummary(best_acc, best_epoch, test_acc, records[-1].val_acc, cfg.alpha,
                         cfg.realized_alpha, n_p, diverged, time.perf_counter() - started)
    if out is not None:
        emit_outputs(records, summary, cfg, out)
    return records, summary


def _dump_poisons(batch, cfg, num_classes, stem: Path) -> None:
    inversion.dump_poisons_pfds(batch, num_classes, stem.with_suffix(".pfds"))
    if cfg.feasible is not None and cfg.feasible.kind in ("image", "neighborhood"):
        inversion.dump_poisons_u8(batch, stem.with_suffix(".u8"))


# ---------------------------------------------------------------- outputs

def check_writable(out_dir) -> None:
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    probe = path / ".write_probe"
    probe.write_text("")
    probe.unlink()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    return format(float(v), ".9g")


def _json_num(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def emit_outputs(records: list[MetricsRecord], summary: RunSummary, cfg: ExperimentConfig, out_dir) -> None:
    """metrics.csv and summary.json (deterministic); timing.json carries wall-clock."""
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    lines = [",".join(METRICS_HEADER)]
    for r in records:
        lines.append(",".join(_fmt(getattr(r, k)) for k in METRICS_HEADER))
    (path / "metrics.csv").write_text("\n".join(lines) + "\n")
    body = {k: _json_num(v) for k, v in dataclasses.asdict(summary).items() if k != "wall_clock_seconds"}
    echo = to_dict(cfg)
    echo.pop("out_dir")  # keeps reruns into different directories byte-identical
    body["config"] = echo
    (path / "summary.json").write_text(json.dumps(body, indent=2) + "\n")
    (path / "timing.json").write_text(json.dumps({"wall_clock_seconds": summary.wall_clock_seconds}) + "\n")


def read_metrics(path) -> list[dict[str, str]]:
    with open(Path(path) / "metrics.csv", newline="") as fh:
        return list(csv.DictReader(fh))
