"""Small MLP, synthetic-data trainer, and activation capture.

Everything here exists so that genuine weight-update deltas and calibration
activations are available at desk scale: a rectifier MLP is trained with
plain gradient descent against a seeded teacher network, snapshots of the
weights are taken along the way, and forward passes record the input matrix
of every linear module. All randomness flows from explicit integer seeds;
the same (dims, seed, config) always produces bit-identical snapshots.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .container import TensorMap

# parameter cap for the finite-difference gradient check
_FDIFF_PARAM_LIMIT = 1000


class TrainingDivergedError(Exception):
    """Training loss became non-finite."""

    def __init__(self, step: int):
        super().__init__(f"non-finite training loss at step {step}")
        self.step = step


@dataclass
class LinearLayer:
    name: str
    weight: np.ndarray  # [out_features, in_features] float32
    bias: np.ndarray  # [out_features] float32


@dataclass
class ToyModel:
    layers: list[LinearLayer]
    dims: tuple[int, ...]
    seed: int

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def module_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def num_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    learning_rate: float = 0.05
    batch_size: int = 32
    data_seed: int = 1
    snapshot_every: int = 100

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")


@dataclass
class CalibrationSet:
    """Per-module input rows captured from forward passes.

    ``inputs[m]`` is the exact [n_samples, in_features] matrix fed to module
    ``m``; ``mean_abs``/``mean_square`` are its per-channel statistics.
    """

    inputs: dict[str, np.ndarray] = field(default_factory=dict)
    mean_abs: dict[str, np.ndarray] = field(default_factory=dict)
    mean_square: dict[str, np.ndarray] = field(default_factory=dict)

    def num_samples(self) -> int:
        if not self.inputs:
            return 0
        return next(iter(self.inputs.values())).shape[0]

    def to_tensor_map(self, meta: dict[str, str] | None = None) -> TensorMap:
        tmap = TensorMap(meta=meta or {})
        for module in sorted(self.inputs):
            tmap[f"{module}.calib_inputs"] = np.ascontiguousarray(
                self.inputs[module], dtype=np.float32
            )
            tmap[f"{module}.mean_abs"] = np.ascontiguousarray(
                self.mean_abs[module], dtype=np.float32
            )
            tmap[f"{module}.mean_square"] = np.ascontiguousarray(
                self.mean_square[module], dtype=np.float32
            )
        return tmap

    @classmethod
    def from_tensor_map(cls, tmap: TensorMap) -> "CalibrationSet":
        calib = cls()
        for name in tmap.names():
            if name.endswith(".calib_inputs"):
                module = name[: -len(".calib_inputs")]
                calib.inputs[module] = tmap[name]
                calib.mean_abs[module] = tmap[f"{module}.mean_abs"]
                calib.mean_square[module] = tmap[f"{module}.mean_square"]
        return calib


def init_model(dims: list[int] | tuple[int, ...], seed: int) -> ToyModel:
    """Build a seeded rectifier MLP with the given layer widths.

    Weights are drawn from a normal distribution scaled by 1/sqrt(in)
    per layer; biases start at zero. Deterministic in (dims, seed).
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2:
        raise ValueError("dims needs at least an input and an output size")
    if any(d < 1 for d in dims):
        raise ValueError("all dims must be >= 1")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        scale = np.float32(1.0 / np.sqrt(n_in))
        weight = rng.standard_normal((n_out, n_in), dtype=np.float32) * scale
        bias = np.zeros(n_out, dtype=np.float32)
        layers.append(LinearLayer(name=f"layer{i}", weight=weight, bias=bias))
    return ToyModel(layers=layers, dims=dims, seed=int(seed))


def _forward_activations(layers: list[LinearLayer], inputs: np.ndarray) -> list[np.ndarray]:
    """Return [input, hidden..., output]; entry i is the input of layer i."""
    acts = [inputs]
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        z = acts[-1] @ layer.weight.T + layer.bias
        acts.append(np.maximum(z, 0.0, dtype=np.float32) if i < last else z)
    return acts


def forward(model: ToyModel, inputs: np.ndarray) -> tuple[np.ndarray, CalibrationSet]:
    """Run the model on a batch and capture per-module calibration inputs."""
    inputs = np.ascontiguousarray(inputs, dtype=np.float32)
    if inputs.ndim != 2 or inputs.shape[1] != model.in_dim:
        raise ValueError(
            f"inputs must be [n, {model.in_dim}], got {tuple(inputs.shape)}"
        )
    acts = _forward_activations(model.layers, inputs)
    calib = CalibrationSet()
    for i, layer in enumerate(model.layers):
        x = acts[i]
        calib.inputs[layer.name] = x.copy()
        x64 = x.astype(np.float64)
        calib.mean_abs[layer.name] = np.abs(x64).mean(axis=0).astype(np.float32)
        calib.mean_square[layer.name] = (x64 * x64).mean(axis=0).astype(np.float32)
    return acts[-1], calib


def gradients(
    model: ToyModel, inputs: np.ndarray, targets: np.ndarray
) -> tuple[float, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Mean-squared-error loss and its analytic gradients per layer.

    Loss is the mean over all batch x output elements of (out - target)^2.
    Returns (loss, {layer name: (dW, db)}).
    """
    inputs = np.ascontiguousarray(inputs, dtype=np.float32)
    targets = np.ascontiguousarray(targets, dtype=np.float32)
    acts = _forward_activations(model.layers, inputs)
    out = acts[-1]
    diff = out - targets
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (diff * np.float32(2.0 / diff.size)).astype(np.float32)
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        dw = grad.T @ acts[i]
        db = grad.sum(axis=0)
        grads[layer.name] = (dw.astype(np.float32), db.astype(np.float32))
        if i > 0:
            grad = (grad @ layer.weight) * (acts[i] > 0)
    return loss, grads


def checkpoint_map(model: ToyModel, step: int, extra_meta: dict[str, str] | None = None) -> TensorMap:
    """Snapshot the model weights and biases as a TensorMap."""
    meta = {
        "dims": ",".join(str(d) for d in model.dims),
        "seed": str(model.seed),
        "step": str(step),
    }
    if extra_meta:
        meta.update(extra_meta)
    tmap = TensorMap(meta=meta)
    for layer in model.layers:
        tmap[f"{layer.name}.weight"] = layer.weight.copy()
        tmap[f"{layer.name}.bias"] = layer.bias.copy()
    return tmap


def model_from_map(tmap: TensorMap) -> ToyModel:
    """Rebuild a ToyModel from a checkpoint TensorMap."""
    modules = sorted(
        {n[: -len(".weight")] for n in tmap.names() if n.endswith(".weight")},
        key=lambda n: (len(n), n),
    )
    if not modules:
        raise ValueError("checkpoint contains no '.weight' tensors")
    layers = []
    for name in modules:
        weight = tmap[f"{name}.weight"]
        bias_name = f"{name}.bias"
        bias = tmap[bias_name] if bias_name in tmap else np.zeros(weight.shape[0], np.float32)
        layers.append(LinearLayer(name=name, weight=weight.copy(), bias=bias.copy()))
    for prev, nxt in zip(layers[:-1], layers[1:]):
        if prev.weight.shape[0] != nxt.weight.shape[1]:
            raise ValueError(
                f"layer shapes do not chain: {prev.name} -> {nxt.name}"
            )
    dims = (layers[0].weight.shape[1],) + tuple(l.weight.shape[0] for l in layers)
    seed = int(tmap.meta.get("seed", "0"))
    return ToyModel(layers=layers, dims=dims, seed=seed)


def _teacher_for(model: ToyModel, data_seed: int) -> ToyModel:
    # fixed mix keeps the teacher distinct from a student with the same seed
    return init_model(model.dims, seed=(int(data_seed) ^ 0x5EED_7EAC) & 0xFFFFFFFF)


def train(
    model: ToyModel, cfg: TrainConfig
) -> tuple[ToyModel, list[tuple[int, TensorMap]]]:
    """Gradient-descent the model against a seeded synthetic teacher.

    Returns the trained model and checkpoint snapshots, always including
    step 0 (the pre-update weights) and the final step.
    """
    model = copy.deepcopy(model)
    teacher = _teacher_for(model, cfg.data_seed)
    rng = np.random.default_rng(cfg.data_seed)
    lr = np.float32(cfg.learning_rate)
    extra = {"data_seed": str(cfg.data_seed)}

    snapshots: list[tuple[int, TensorMap]] = [(0, checkpoint_map(model, 0, extra))]
    for step in range(1, cfg.steps + 1):
        batch = rng.standard_normal((cfg.batch_size, model.in_dim), dtype=np.float32)
        targets = _forward_activations(teacher.layers, batch)[-1]
        loss, grads = gradients(model, batch, targets)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step)
        for layer in model.layers:
            dw, db = grads[layer.name]
            layer.weight -= lr * dw
            layer.bias -= lr * db
        if step % cfg.snapshot_every == 0 or step == cfg.steps:
            snapshots.append((step, checkpoint_map(model, step, extra)))
    return model, snapshots


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    num_checked: int
    tolerance: float
    passed: bool
    worst: tuple[str, str, int] | None  # (layer, 'weight'|'bias', flat index)


def _loss_f64_frozen(
    model: ToyModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    masks: list[np.ndarray],
) -> float:
    """Loss with the rectifier pattern pinned to the base point.

    Freezing the masks keeps the loss exactly quadratic in every single
    parameter, so central differences probe the same piece of the
    piecewise function that the analytic subgradient describes.
    """
    x = inputs.astype(np.float64)
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        z = x @ layer.weight.astype(np.float64).T + layer.bias.astype(np.float64)
        x = z * masks[i] if i < last else z
    d = x - targets.astype(np.float64)
    return float(np.mean(d * d))


def finite_diff_check(
    model: ToyModel,
    inputs: np.ndarray,
    targets: np.ndarray | None = None,
    *,
    tolerance: float = 1e-3,
    num_samples: int = 64,
    step: float = 1e-3,
    seed: int = 0,
    grad_fn=None,
) -> FiniteDiffReport:
    """Compare analytic gradients against central finite differences.

    Samples parameters across all layers, perturbs each by +-step, and
    reports the worst relative error (absolute where both gradients are
    below 1e-6). The rectifier activation pattern is frozen at the base
    point, so the difference quotient stays inside the smooth piece whose
    derivative the analytic path computes. ``grad_fn`` defaults to
    :func:`gradients` and exists so tests can inject deliberately
    corrupted gradients.
    """
    if model.num_params() > _FDIFF_PARAM_LIMIT:
        raise ValueError(
            f"model has {model.num_params()} parameters; "
            f"finite_diff_check is limited to {_FDIFF_PARAM_LIMIT}"
        )
    inputs = np.ascontiguousarray(inputs, dtype=np.float32)
    if targets is None:
        targets = np.zeros((inputs.shape[0], model.out_dim), dtype=np.float32)
    targets = np.ascontiguousarray(targets, dtype=np.float32)

    _, grads = (grad_fn or gradients)(model, inputs, targets)
    acts = _forward_activations(model.layers, inputs)
    masks = [(acts[i + 1] > 0).astype(np.float64) for i in range(len(model.layers) - 1)]

    slots: list[tuple[str, str, int]] = []
    for layer in model.layers:
        slots.extend((layer.name, "weight", j) for j in range(layer.weight.size))
        slots.extend((layer.name, "bias", j) for j in range(layer.bias.size))
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(slots), size=min(num_samples, len(slots)), replace=False)

    by_name = {layer.name: layer for layer in model.layers}
    max_err = 0.0
    worst = None
    for raw in sorted(int(i) for i in picked):
        lname, pname, j = slots[raw]
        layer = by_name[lname]
        param = getattr(layer, pname)
        old = param.flat[j]
        param.flat[j] = old + np.float32(step)
        loss_plus = _loss_f64_frozen(model, inputs, targets, masks)
        param.flat[j] = old - np.float32(step)
        loss_minus = _loss_f64_frozen(model, inputs, targets, masks)
        param.flat[j] = old
        numeric = (loss_plus - loss_minus) / (2.0 * step)
        analytic = float(grads[lname][0 if pname == "weight" else 1].reshape(-1)[j])
        denom = max(abs(analytic), abs(numeric))
        err = abs(analytic - numeric) if denom < 1e-6 else abs(analytic - numeric) / denom
        if err > max_err:
            max_err = err
            worst = (lname, pname, j)
    return FiniteDiffReport(
        max_rel_error=max_err,
        num_checked=len(picked),
        tolerance=tolerance,
        passed=max_err <= tolerance,
        worst=worst,
    )
