"""Model definitions, parameter flattening and per-sample gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ARCHITECTURES = ("cifar_cnn", "mlp", "linear_regression")


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "mlp"
    input_shape: tuple[int, ...] = (16,)
    num_classes: int = 3
    hidden: tuple[int, ...] = (32,)
    init_seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.architecture != "linear_regression" and self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.architecture == "cifar_cnn" and len(self.input_shape) != 3:
            raise ValueError(f"cifar_cnn needs (C, H, W) input, got {self.input_shape}")


@dataclass
class Layer:
    kind: str  # "conv", "linear", "relu", "flatten"
    name: str = ""
    fan_in: int = 0
    fan_out: int = 0
    kernel: int = 0
    stride: int = 1
    bias: bool = True


def build_layers(config: ModelConfig) -> list[Layer]:
    if config.architecture == "cifar_cnn":
        c, h, w = config.input_shape
        layers = []
        for i, out_c in enumerate((32, 64), start=1):
            layers += [Layer("conv", f"conv{i}", fan_in=c, fan_out=out_c, kernel=5, stride=2),
                       Layer("relu")]
            c, h, w = out_c, (h - 5) // 2 + 1, (w - 5) // 2 + 1
        if h < 1 or w < 1:
            raise ValueError(f"input {config.input_shape} too small for cifar_cnn")
        layers.append(Layer("flatten"))
        dims = [c * h * w, 512, 64, config.num_classes]
    elif config.architecture == "mlp":
        layers = [Layer("flatten")]
        dims = [int(np.prod(config.input_shape)), *config.hidden, config.num_classes]
    else:
        return [Layer("flatten"),
                Layer("linear", "linear", fan_in=int(np.prod(config.input_shape)), fan_out=1, bias=False)]
    for i in range(len(dims) - 1):
        layers.append(Layer("linear", f"fc{i + 1}", fan_in=dims[i], fan_out=dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(Layer("relu"))
    return layers


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter shapes in canonical (layer declaration) order."""
    shapes = {}
    for layer in build_layers(config):
        if layer.kind == "conv":
            shapes[f"{layer.name}.weight"] = (layer.fan_out, layer.fan_in, layer.kernel, layer.kernel)
        elif layer.kind == "linear":
            shapes[f"{layer.name}.weight"] = (layer.fan_out, layer.fan_in)
        else:
            continue
        if layer.bias:
            shapes[f"{layer.name}.bias"] = (layer.fan_out,)
    return shapes


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat(self) -> np.ndarray:
        return flatten_gradients(self.params)

    def with_flat(self, vec: np.ndarray) -> "ModelState":
        return ModelState(self.config, unflatten(vec, {k: v.shape for k, v in self.params.items()}))

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()})


def init_model(config: ModelConfig) -> ModelState:
    """Uniform(-a, a) weights with a = sqrt(6 / fan_in); zero biases."""
    rng = np.random.default_rng(config.init_seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            a = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-a, a, size=shape)
    return ModelState(config, params)


def flatten_gradients(grad_map: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in grad_map.values()])


def unflatten(vec: np.ndarray, shapes: dict[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    vec = np.asarray(vec, dtype=np.float64)
    total = sum(int(np.prod(s)) for s in shapes.values())
    if vec.ndim != 1 or vec.size != total:
        raise ValueError(f"cannot unflatten vector of shape {vec.shape} into {total} parameters")
    out, pos = {}, 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        out[name] = vec[pos:pos + n].reshape(shape).copy()
        pos += n
    return out


# ---------------------------------------------------------------- forward

def _check_inputs(config: ModelConfig, x: np.ndarray):
    if tuple(x.shape[1:]) != tuple(config.input_shape):
        raise ValueError(f"input shape {tuple(x.shape[1:])} does not match model input {config.input_shape}")


def forward(config: ModelConfig, params: dict[str, Tensor], x: Tensor, records: list | None = None) -> Tensor:
    """Batched forward pass. Returns (B, C) logits, or (B,) predictions for regression.

    When ``records`` is a list, each parametric layer appends
    ``(layer, input_matrix (B, P, fan_in), preactivation Tensor (B*P, O))``.
    """
    h = x
    B = x.shape[0]
    for layer in build_layers(config):
        if layer.kind == "relu":
            h = ad.relu(h)
        elif layer.kind == "flatten":
            h = ad.reshape(h, (B, -1))
        elif layer.kind == "conv":
            _, C, H, W = h.shape
            K, s = layer.kernel, layer.stride
            Ho, Wo = (H - K) // s + 1, (W - K) // s + 1
            cols = ad.reshape(ad.im2col(h, K, s), (B * Ho * Wo, C * K * K))
            w = ad.reshape(params[f"{layer.name}.weight"], (layer.fan_out, C * K * K))
            z = ad.add(ad.matmul(cols, ad.transpose(w)), params[f"{layer.name}.bias"])
            if records is not None:
                records.append((layer, cols.data.reshape(B, Ho * Wo, -1), z))
            h = ad.transpose(ad.reshape(z, (B, Ho, Wo, layer.fan_out)), (0, 3, 1, 2))
        elif layer.kind == "linear":
            z = ad.matmul(h, ad.transpose(params[f"{layer.name}.weight"]))
            if layer.bias:
                z = ad.add(z, params[f"{layer.name}.bias"])
            if records is not None:
                records.append((layer, h.data.reshape(B, 1, -1), z))
            h = z
    if config.architecture == "linear_regression":
        h = ad.reshape(h, (B,))
    return h


def sample_losses(config: ModelConfig, out: Tensor, labels) -> Tensor:
    if config.architecture == "linear_regression":
        return ad.squared_error(out, labels)
    return ad.softmax_cross_entropy(out, labels)


def _as_batch(config: ModelConfig, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == len(config.input_shape):
        x = x[None]
    _check_inputs(config, x)
    return x


def param_tensors(state: ModelState, requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in state.params.items()}


def logits(state: ModelState, inputs) -> np.ndarray:
    with ad.no_grad():
        return forward(state.config, param_tensors(state, False), Tensor(_as_batch(state.config, inputs))).data


def batch_gradient(state: ModelState, inputs, labels) -> tuple[np.ndarray, float]:
    """Gradient of the mean loss over the batch, and that mean loss."""
    x = _as_batch(state.config, inputs)
    params = param_tensors(state)
    loss = sample_losses(state.config, forward(state.config, params, Tensor(x)), labels).mean()
    grads = ad.grad(loss, list(params.values()))
    return np.concatenate([g.data.ravel() for g in grads]), float(loss.data)


def per_sample_gradients(state: ModelState, inputs, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-example gradients as rows of a (B, d) array, plus the (B,) losses.

    One batched forward pass; the backward pass stops at each layer's
    pre-activation, whose rows belong to single examples, and the weight
    gradients are formed per example from those deltas.
    """
    config = state.config
    x = _as_batch(config, inputs)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    B = x.shape[0]
    params = param_tensors(state, requires_grad=False)
    x_t = Tensor(x, requires_grad=True)  # anchors the tape
    records: list = []
    losses = sample_losses(config, forward(config, params, x_t, records), labels)
    deltas = ad.grad(losses.sum(), [z for _, _, z in records])
    blocks = {}
    for (layer, a, _), delta in zip(records, deltas):
        d = delta.data.reshape(B, a.shape[1], layer.fan_out)
        blocks[f"{layer.name}.weight"] = np.einsum("bpo,bpk->bok", d, a).reshape(B, -1)
        if layer.bias:
            blocks[f"{layer.name}.bias"] = d.sum(axis=1)
    G = np.concatenate([blocks[name] for name in state.params], axis=1)
    return G, losses.data.copy()


def evaluate(state: ModelState, inputs, labels, chunk: int = 1000) -> tuple[float, float]:
    """(accuracy, mean loss). Argmax ties go to the lowest class index;
    rows with non-finite logits count as predicting class 0."""
    x = _as_batch(state.config, inputs)
    labels = np.asarray(labels)
    if len(x) == 0:
        raise ValueError("empty dataset")
    correct, loss_sum = 0, 0.0
    params = param_tensors(state, False)
    with ad.no_grad(), np.errstate(all="ignore"):
        for i in range(0, len(x), chunk):
            xb, yb = x[i:i + chunk], labels[i:i + chunk]
            out = forward(state.config, params, Tensor(xb))
            loss_sum += float(sample_losses(state.config, out, yb).data.sum())
            if state.config.architecture == "linear_regression":
                continue
            z = out.data
            pred = np.where(np.all(np.isfinite(z), axis=1), np.argmax(np.nan_to_num(z, nan=-np.inf), axis=1), 0)
            correct += int(np.sum(pred == yb))
    acc = correct / len(x) if state.config.architecture != "linear_regression" else float("nan")
    return acc, loss_sum / len(x)
