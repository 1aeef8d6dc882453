"""Small feedforward binary classifiers with privacy-compatible layers.

Models here are built so the gradient of one sample's loss never depends on
other samples in a batch: dense layers, activations and group normalization
all operate strictly within a sample. A deliberately batch-coupled
normalization layer is included as a negative example; ``validate_model``
flags it and the DP optimizer refuses to step such a model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import (
    GradientSet,
    ShapeMismatchError,
    Tape,
    Tensor,
    add,
    backward,
    binary_cross_entropy,
    group_norm,
    matmul,
    mul,
    reduce_mean,
    relu,
    reshape,
    sigmoid,
)

__all__ = [
    "DenseLayer",
    "ActivationLayer",
    "GroupNormLayer",
    "BatchCoupledNormLayer",
    "Model",
    "ValidationReport",
    "Violation",
    "ModelValidationError",
    "build_mlp",
    "per_sample_gradient",
    "batch_gradient",
    "predict_proba",
    "accuracy",
    "validate_model",
    "save_checkpoint",
    "load_checkpoint",
]


class ModelValidationError(RuntimeError):
    """A model failed the per-sample isolation validation."""


@dataclass(frozen=True)
class DenseLayer:
    in_dim: int
    out_dim: int
    weight_slot: int
    bias_slot: int

    kind = "dense"
    mixes_samples = False


@dataclass(frozen=True)
class ActivationLayer:
    activation: str  # currently "relu"

    kind = "activation"
    mixes_samples = False


@dataclass(frozen=True)
class GroupNormLayer:
    channels: int
    num_groups: int
    gamma_slot: int
    beta_slot: int

    kind = "group_norm"
    mixes_samples = False


@dataclass(frozen=True)
class BatchCoupledNormLayer:
    """Normalizes each feature using statistics of the whole batch.

    Exists as the canonical example of a layer that breaks per-sample
    gradient isolation: sample i's output reads the mean and variance of
    every other sample. It cannot be traced for gradients and any model
    containing it is rejected by ``validate_model``.
    """

    channels: int
    gamma_slot: int
    beta_slot: int
    eps: float = 1e-5

    kind = "batch_norm"
    mixes_samples = True


class Model:
    """Layer sequence plus its parameter store.

    ``parameters`` is an ordered list of float64 arrays; every
    :class:`~dptrain.tensor.GradientSet` produced for this model aligns with
    it index-for-index. ``trainable`` masks parameters frozen by
    ``set_freeze_prefix``. Parameters are replaced, never mutated in place,
    so tensors handed out during a forward pass stay valid.
    """

    def __init__(self, layers, parameters, seed: int | None = None):
        self.layers = tuple(layers)
        self.parameters: list[np.ndarray] = [
            np.asarray(p, dtype=np.float64) for p in parameters
        ]
        self.trainable: list[bool] = [True] * len(self.parameters)
        self.seed = seed
        self.freeze_prefix = 0

    @property
    def input_dim(self) -> int:
        for layer in self.layers:
            if isinstance(layer, DenseLayer):
                return layer.in_dim
        raise ValueError("model has no dense layer")

    def parameter_shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(p.shape for p in self.parameters)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters))

    def set_freeze_prefix(self, k: int) -> None:
        """Freeze the first ``k`` dense blocks (dense + attached norm).

        Mirrors fine-tuning depth experiments: ``k = 0`` trains everything,
        larger ``k`` leaves only the later blocks trainable. The output layer
        can never be frozen.
        """
        n_dense = sum(1 for l in self.layers if isinstance(l, DenseLayer))
        if not 0 <= k <= n_dense - 1:
            raise ValueError(f"freeze prefix {k} out of range for {n_dense} dense layers")
        self.freeze_prefix = k
        frozen_slots: set[int] = set()
        seen_dense = 0
        for i, layer in enumerate(self.layers):
            if isinstance(layer, DenseLayer):
                seen_dense += 1
                if seen_dense <= k:
                    frozen_slots.update((layer.weight_slot, layer.bias_slot))
                    # Norm directly after the dense layer belongs to the block.
                    for later in self.layers[i + 1:]:
                        if isinstance(later, GroupNormLayer):
                            frozen_slots.update((later.gamma_slot, later.beta_slot))
                        if isinstance(later, DenseLayer):
                            break
        self.trainable = [s not in frozen_slots for s in range(len(self.parameters))]

    def forward(self, x, tape: Tape | None = None) -> Tensor:
        """Run a batch through the network, returning logits of shape [B].

        When ``tape`` is given it must already be entered (active); parameter
        tensors are watched on it in index order.
        """
        data = np.asarray(x, dtype=np.float64)
        if data.ndim == 1:
            data = data.reshape(1, -1)
        if data.ndim != 2 or data.shape[1] != self.input_dim:
            raise ShapeMismatchError(
                f"input of shape {np.asarray(x).shape} does not match "
                f"input layer width {self.input_dim}"
            )
        params = [Tensor(p) for p in self.parameters]
        if tape is not None:
            for p in params:
                tape.watch(p)
        h = Tensor(data)
        for layer in self.layers:
            if isinstance(layer, DenseLayer):
                h = add(matmul(h, params[layer.weight_slot]), params[layer.bias_slot])
            elif isinstance(layer, ActivationLayer):
                h = relu(h)
            elif isinstance(layer, GroupNormLayer):
                normed = group_norm(h, layer.num_groups)
                h = add(mul(normed, params[layer.gamma_slot]), params[layer.beta_slot])
            elif isinstance(layer, BatchCoupledNormLayer):
                if tape is not None:
                    raise ModelValidationError(
                        "batch-coupled normalization cannot be traced for "
                        "per-sample gradients"
                    )
                mean = h.data.mean(axis=0)
                var = h.data.var(axis=0)
                normed_np = (h.data - mean) / np.sqrt(var + layer.eps)
                gamma = self.parameters[layer.gamma_slot]
                beta = self.parameters[layer.beta_slot]
                h = Tensor(normed_np * gamma + beta)
            else:
                raise TypeError(f"unknown layer {layer!r}")
        return reshape(h, (data.shape[0],))

    def set_parameters(self, new_params) -> None:
        new_params = [np.asarray(p, dtype=np.float64) for p in new_params]
        if tuple(p.shape for p in new_params) != self.parameter_shapes():
            raise ShapeMismatchError("replacement parameters are not shape-aligned")
        self.parameters = new_params


def build_mlp(widths, norm: str = "none", seed: int = 0) -> Model:
    """Construct a fully connected binary classifier.

    Args:
        widths: layer widths including input and output; at least two entries
            and the final width must be 1 (a single logit per sample).
        norm: "none", or "group:G" to insert a G-group normalization after
            every hidden dense layer. G must divide each normalized width.
        seed: initialization seed. Dense weights are drawn uniformly from
            +-sqrt(6 / (fan_in + fan_out)); biases start at zero, norm scale
            at one and shift at zero, so the same seed rebuilds the model
            bit-identically.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ValueError(f"invalid widths {widths}: need >= 2 positive entries")
    if widths[-1] != 1:
        raise ValueError(f"invalid widths {widths}: final width must be 1")
    num_groups = 0
    if norm != "none":
        if not norm.startswith("group:"):
            raise ValueError(f"unknown norm kind {norm!r}")
        num_groups = int(norm.split(":", 1)[1])
        if num_groups < 1:
            raise ValueError("group norm needs at least one group")
        for w in widths[1:-1]:
            if w % num_groups != 0:
                raise ValueError(f"num_groups {num_groups} does not divide width {w}")

    rng = np.random.Generator(np.random.PCG64(seed))
    layers: list = []
    params: list[np.ndarray] = []
    for li in range(len(widths) - 1):
        fan_in, fan_out = widths[li], widths[li + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        layers.append(DenseLayer(fan_in, fan_out, len(params), len(params) + 1))
        params.extend([w, b])
        is_hidden = li < len(widths) - 2
        if is_hidden:
            if num_groups:
                layers.append(GroupNormLayer(fan_out, num_groups, len(params), len(params) + 1))
                params.extend([np.ones(fan_out), np.zeros(fan_out)])
            layers.append(ActivationLayer("relu"))
    return Model(layers, params, seed=seed)


def _loss_graph(model: Model, x: np.ndarray, y: np.ndarray, tape: Tape) -> Tensor:
    logits = model.forward(x, tape=tape)
    probs = sigmoid(logits)
    losses = binary_cross_entropy(probs, Tensor(y))
    return reduce_mean(losses)


def per_sample_gradient(model: Model, x, y) -> tuple[float, GradientSet]:
    """Loss and exact gradient of one sample's BCE loss w.r.t. all parameters.

    ``x`` is a single sample (1-D of input_dim, or shape [1, input_dim]);
    ``y`` must be 0 or 1. Pure: repeated calls return identical values.
    """
    xa = np.asarray(x, dtype=np.float64)
    if xa.ndim == 1:
        xa = xa.reshape(1, -1)
    if xa.shape[0] != 1:
        raise ShapeMismatchError(f"per_sample_gradient expects one sample, got {xa.shape}")
    yv = float(y)
    if yv not in (0.0, 1.0):
        raise ValueError(f"label must be 0 or 1, got {y!r}")
    with Tape() as tape:
        loss = _loss_graph(model, xa, np.array([yv]), tape)
        grad = backward(tape, loss)
    return loss.item(), grad


def batch_gradient(model: Model, xs, ys) -> tuple[float, GradientSet]:
    """Mean loss over a batch and its gradient (the full-batch gradient)."""
    xa = np.asarray(xs, dtype=np.float64)
    ya = np.asarray(ys, dtype=np.float64).reshape(-1)
    with Tape() as tape:
        loss = _loss_graph(model, xa, ya, tape)
        grad = backward(tape, loss)
    return loss.item(), grad


def predict_proba(model: Model, xs) -> np.ndarray:
    logits = model.forward(xs)
    return sigmoid(logits).data


def accuracy(model: Model, xs, ys) -> float:
    probs = predict_proba(model, xs)
    preds = (probs > 0.5).astype(np.float64)
    return float(np.mean(preds == np.asarray(ys, dtype=np.float64).reshape(-1)))


@dataclass(frozen=True)
class Violation:
    layer_index: int
    layer_kind: str
    reason: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_model(model: Model) -> ValidationReport:
    """Flag layers whose forward pass mixes information across samples.

    An empty report means per-sample gradient isolation holds by
    construction: every layer computes sample i's output from sample i
    alone, so per-sample gradients are exact.
    """
    violations = []
    for i, layer in enumerate(model.layers):
        if layer.mixes_samples:
            violations.append(
                Violation(
                    layer_index=i,
                    layer_kind=layer.kind,
                    reason=(
                        f"layer {i} ({layer.kind}) normalizes sample i with "
                        "statistics of other samples in the batch"
                    ),
                )
            )
    return ValidationReport(tuple(violations))


_CHECKPOINT_FORMAT = "dptrain-model"
_CHECKPOINT_VERSION = 1


def _layer_to_doc(layer) -> dict:
    if isinstance(layer, DenseLayer):
        return {
            "kind": "dense",
            "in_dim": layer.in_dim,
            "out_dim": layer.out_dim,
            "weight_slot": layer.weight_slot,
            "bias_slot": layer.bias_slot,
        }
    if isinstance(layer, ActivationLayer):
        return {"kind": "activation", "activation": layer.activation}
    if isinstance(layer, GroupNormLayer):
        return {
            "kind": "group_norm",
            "channels": layer.channels,
            "num_groups": layer.num_groups,
            "gamma_slot": layer.gamma_slot,
            "beta_slot": layer.beta_slot,
        }
    if isinstance(layer, BatchCoupledNormLayer):
        return {
            "kind": "batch_norm",
            "channels": layer.channels,
            "gamma_slot": layer.gamma_slot,
            "beta_slot": layer.beta_slot,
            "eps": layer.eps,
        }
    raise TypeError(f"cannot serialize layer {layer!r}")


def _layer_from_doc(doc: dict):
    kind = doc["kind"]
    if kind == "dense":
        return DenseLayer(doc["in_dim"], doc["out_dim"], doc["weight_slot"], doc["bias_slot"])
    if kind == "activation":
        return ActivationLayer(doc["activation"])
    if kind == "group_norm":
        return GroupNormLayer(
            doc["channels"], doc["num_groups"], doc["gamma_slot"], doc["beta_slot"]
        )
    if kind == "batch_norm":
        return BatchCoupledNormLayer(
            doc["channels"], doc["gamma_slot"], doc["beta_slot"], doc["eps"]
        )
    raise ValueError(f"unknown layer kind {kind!r} in checkpoint")


def save_checkpoint(model: Model, path) -> None:
    """Write a JSON checkpoint that round-trips parameters bit-exactly.

    Python's float repr is shortest-round-trip, so dumping raw float64
    values through json preserves them exactly.
    """
    doc = {
        "format": _CHECKPOINT_FORMAT,
        "version": _CHECKPOINT_VERSION,
        "seed": model.seed,
        "freeze_prefix": model.freeze_prefix,
        "layers": [_layer_to_doc(l) for l in model.layers],
        "param_shapes": [list(p.shape) for p in model.parameters],
        "params": [p.reshape(-1).tolist() for p in model.parameters],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> Model:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    if doc.get("version") != _CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    layers = [_layer_from_doc(d) for d in doc["layers"]]
    params = [
        np.array(flat, dtype=np.float64).reshape(shape)
        for flat, shape in zip(doc["params"], doc["param_shapes"])
    ]
    model = Model(layers, params, seed=doc.get("seed"))
    if doc.get("freeze_prefix"):
        model.set_freeze_prefix(int(doc["freeze_prefix"]))
    return model
