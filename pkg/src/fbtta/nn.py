"""Feed-forward classifier with hand-written forward and backward passes.

The network is a stack of dense -> batch-norm -> leaky-ReLU -> dropout
blocks feeding a dense softmax head. Everything runs on float64 numpy
arrays with explicit seeding, so repeated calls are bit-reproducible.

Conventions fixed here:
  * batch norm normalizes with the biased (population) variance and
    blends running statistics as ``stat <- (1 - m) * stat + m * batch``;
  * dropout is the inverted variant (kept activations scaled by
    ``1 / (1 - rate)``), so a rate of zero is exactly the identity;
  * probabilities fed into the loss helpers are clipped to
    ``[eps, 1 - eps]`` with ``eps = 1e-6``.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_seed

BN_EPS = 1e-5
CLIP_EPS = 1e-6
LEAKY_SLOPE = 0.01
VAR_FLOOR = 1e-12
CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class Architecture:
    """Immutable layer-size descriptor. One dropout site follows each hidden block."""

    in_dim: int
    hidden: tuple[int, ...]
    n_classes: int

    def __post_init__(self):
        if self.in_dim < 1 or self.n_classes < 2 or len(self.hidden) < 1:
            raise ValueError(f"degenerate architecture: {self}")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden widths must be positive: {self.hidden}")

    @property
    def n_hidden(self) -> int:
        return len(self.hidden)

    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = [self.in_dim, *self.hidden, self.n_classes]
        return list(zip(sizes[:-1], sizes[1:]))


@dataclass
class ModelState:
    """Parameters, batch-norm statistics and dropout rates of one classifier.

    The architecture descriptor is immutable; parameter arrays are owned
    exclusively by this instance and mutated in place by the update ops.
    """

    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bn_gamma: list[np.ndarray]
    bn_beta: list[np.ndarray]
    bn_mean: list[np.ndarray]
    bn_var: list[np.ndarray]
    dropout_rates: list[float]
    bn_frozen: bool = False

    def __post_init__(self):
        dims = self.arch.layer_dims()
        if len(self.weights) != len(dims) or len(self.biases) != len(dims):
            raise ValueError("dense parameter count does not match architecture")
        for (d_in, d_out), w, b in zip(dims, self.weights, self.biases):
            if w.shape != (d_in, d_out) or b.shape != (d_out,):
                raise ValueError(f"parameter shape mismatch for layer ({d_in}, {d_out})")
        n_h = self.arch.n_hidden
        for name, group in (("gamma", self.bn_gamma), ("beta", self.bn_beta),
                            ("mean", self.bn_mean), ("var", self.bn_var)):
            if len(group) != n_h:
                raise ValueError(f"bn {name} count does not match hidden layers")
            for width, arr in zip(self.arch.hidden, group):
                if arr.shape != (width,):
                    raise ValueError(f"bn {name} shape mismatch")
        if len(self.dropout_rates) != n_h:
            raise ValueError("one dropout rate per hidden block required")
        if any(not (0.0 <= r < 1.0) for r in self.dropout_rates):
            raise ValueError(f"dropout rates must lie in [0, 1): {self.dropout_rates}")
        if any(np.any(v <= 0.0) for v in self.bn_var):
            raise ValueError("running variances must be strictly positive")

    @property
    def param_count(self) -> int:
        tensors = self.weights + self.biases + self.bn_gamma + self.bn_beta
        return int(sum(t.size for t in tensors))

    def param_tensors(self) -> list[np.ndarray]:
        """Trainable tensors in a fixed order (dense weights/biases, BN affine)."""
        return [*self.weights, *self.biases, *self.bn_gamma, *self.bn_beta]


@dataclass(frozen=True)
class ForwardMode:
    """Execution mode of one forward pass.

    ``dropout_seed is None`` selects the deterministic network; any
    integer seed enables stochastic dropout with masks derived from that
    seed alone. ``use_batch_stats`` requests batch statistics inside the
    batch-norm layers; a frozen model ignores the request and always
    normalizes with its running statistics.
    """

    dropout_seed: int | None = None
    use_batch_stats: bool = False

    @classmethod
    def deterministic(cls, use_batch_stats: bool = False) -> "ForwardMode":
        return cls(dropout_seed=None, use_batch_stats=use_batch_stats)

    @classmethod
    def dropout(cls, seed: int, use_batch_stats: bool = False) -> "ForwardMode":
        return cls(dropout_seed=int(seed), use_batch_stats=use_batch_stats)


@dataclass
class GradientVector:
    """Per-tensor gradients, shape-congruent with the model that produced them."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bn_gamma: list[np.ndarray]
    bn_beta: list[np.ndarray]

    @classmethod
    def zeros_like(cls, model: ModelState) -> "GradientVector":
        return cls(
            weights=[np.zeros_like(w) for w in model.weights],
            biases=[np.zeros_like(b) for b in model.biases],
            bn_gamma=[np.zeros_like(g) for g in model.bn_gamma],
            bn_beta=[np.zeros_like(b) for b in model.bn_beta],
        )

    def tensors(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, *self.bn_gamma, *self.bn_beta]

    def add_(self, other: "GradientVector") -> "GradientVector":
        for mine, theirs in zip(self.tensors(), other.tensors()):
            mine += theirs
        return self

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())


def init_model(arch: Architecture, dropout_rate: float, seed: int) -> ModelState:
    """He-initialized model with unit running variances and zero means."""
    rng = np.random.default_rng(derive_seed("init", seed))
    weights, biases = [], []
    for d_in, d_out in arch.layer_dims():
        weights.append(rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return ModelState(
        arch=arch,
        weights=weights,
        biases=biases,
        bn_gamma=[np.ones(h) for h in arch.hidden],
        bn_beta=[np.zeros(h) for h in arch.hidden],
        bn_mean=[np.zeros(h) for h in arch.hidden],
        bn_var=[np.ones(h) for h in arch.hidden],
        dropout_rates=[float(dropout_rate)] * arch.n_hidden,
        bn_frozen=False,
    )


def clone_model(model: ModelState) -> ModelState:
    return ModelState(
        arch=model.arch,
        weights=[w.copy() for w in model.weights],
        biases=[b.copy() for b in model.biases],
        bn_gamma=[g.copy() for g in model.bn_gamma],
        bn_beta=[b.copy() for b in model.bn_beta],
        bn_mean=[m.copy() for m in model.bn_mean],
        bn_var=[v.copy() for v in model.bn_var],
        dropout_rates=list(model.dropout_rates),
        bn_frozen=model.bn_frozen,
    )


def copy_state_into(src: ModelState, dst: ModelState) -> None:
    """Overwrite dst's numbers with src's. Used for batch rollback."""
    if src.arch != dst.arch:
        raise ValueError("cannot copy state across architectures")
    for mine, theirs in zip(dst.param_tensors(), src.param_tensors()):
        mine[...] = theirs
    for mine, theirs in zip(dst.bn_mean + dst.bn_var, src.bn_mean + src.bn_var):
        mine[...] = theirs
    dst.dropout_rates = list(src.dropout_rates)
    dst.bn_frozen = src.bn_frozen


def set_dropout_rate(model: ModelState, rate: float) -> ModelState:
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must lie in [0, 1): {rate}")
    model.dropout_rates = [float(rate)] * model.arch.n_hidden
    return model


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, x, LEAKY_SLOPE * x)


def _leaky_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, 1.0, LEAKY_SLOPE)


@dataclass
class Tape:
    """Intermediates of one forward pass, kept for the backward sweep."""

    model: ModelState
    mode: ForwardMode
    inputs: np.ndarray
    layers: list[dict] = field(default_factory=list)
    head_in: np.ndarray | None = None
    probs: np.ndarray | None = None
    batch_stats: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def _validate_inputs(model: ModelState, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != model.arch.in_dim:
        raise ValueError(
            f"expected inputs of shape (batch, {model.arch.in_dim}), got {inputs.shape}"
        )
    if not np.all(np.isfinite(inputs)):
        raise ValueError("inputs contain non-finite values")
    return inputs


def forward_tape(model: ModelState, inputs: np.ndarray, mode: ForwardMode) -> Tape:
    """Forward pass returning class probabilities plus cached intermediates."""
    inputs = _validate_inputs(model, inputs)
    batch_stats_active = mode.use_batch_stats and not model.bn_frozen
    if batch_stats_active and inputs.shape[0] < 2:
        raise ValueError("batch statistics require a batch of at least 2 samples")

    mask_rng = None
    if mode.dropout_seed is not None and any(r > 0.0 for r in model.dropout_rates):
        mask_rng = np.random.default_rng(
            np.random.SeedSequence(mode.dropout_seed & ((1 << 63) - 1))
        )

    tape = Tape(model=model, mode=mode, inputs=inputs)
    x = inputs
    for i in range(model.arch.n_hidden):
        z = x @ model.weights[i] + model.biases[i]
        if batch_stats_active:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            tape.batch_stats.append((mu, var))
        else:
            mu, var = model.bn_mean[i], model.bn_var[i]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (z - mu) * inv_std
        h = model.bn_gamma[i] * xhat + model.bn_beta[i]
        a = leaky_relu(h)
        mask = None
        rate = model.dropout_rates[i]
        if mask_rng is not None and rate > 0.0:
            # Scaled keep-mask: entries are 0 or 1 / (1 - rate).
            mask = (mask_rng.random(a.shape) >= rate) / (1.0 - rate)
            a = a * mask
        tape.layers.append({
            "x_in": x,
            "inv_std": inv_std,
            "xhat": xhat,
            "h": h,
            "mask": mask,
            "batch_mode": batch_stats_active,
        })
        x = a
    tape.head_in = x
    logits = x @ model.weights[-1] + model.biases[-1]
    tape.probs = softmax(logits)
    return tape


def forward(model: ModelState, inputs: np.ndarray, mode: ForwardMode) -> np.ndarray:
    """Class-probability matrix for a batch. Rows sum to one."""
    return forward_tape(model, inputs, mode).probs


def backward_tape(tape: Tape, dprobs: np.ndarray) -> GradientVector:
    """Backpropagate a gradient w.r.t. the output probabilities through one tape."""
    model = tape.model
    probs = tape.probs
    grad = GradientVector.zeros_like(model)

    # Softmax backward: dz = p * (dp - sum(dp * p)).
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    dlogits = probs * (dprobs - inner)

    grad.weights[-1][...] = tape.head_in.T @ dlogits
    grad.biases[-1][...] = dlogits.sum(axis=0)
    dx = dlogits @ model.weights[-1].T

    for i in reversed(range(model.arch.n_hidden)):
        cache = tape.layers[i]
        if cache["mask"] is not None:
            dx = dx * cache["mask"]
        dh = dx * _leaky_grad(cache["h"])
        xhat = cache["xhat"]
        grad.bn_gamma[i][...] = (dh * xhat).sum(axis=0)
        grad.bn_beta[i][...] = dh.sum(axis=0)
        dxhat = dh * model.bn_gamma[i]
        inv_std = cache["inv_std"]
        if cache["batch_mode"]:
            m = xhat.shape[0]
            dz = (inv_std / m) * (
                m * dxhat
                - dxhat.sum(axis=0)
                - xhat * (dxhat * xhat).sum(axis=0)
            )
        else:
            dz = dxhat * inv_std
        grad.weights[i][...] = cache["x_in"].T @ dz
        grad.biases[i][...] = dz.sum(axis=0)
        dx = dz @ model.weights[i].T
    return grad


def grad(model, inputs, mode, loss_fn) -> tuple[float, GradientVector]:
    """Value and parameter gradient of a scalar loss on the output probabilities.

    ``loss_fn(probs) -> (value, dvalue_dprobs)`` supplies its own output
    gradient; the chain through the network is analytic.
    """
    tape = forward_tape(model, inputs, mode)
    value, dprobs = loss_fn(tape.probs)
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"loss is non-finite: {value}")
    dprobs = np.asarray(dprobs, dtype=np.float64)
    if dprobs.shape != tape.probs.shape:
        raise ValueError("loss gradient shape does not match probabilities")
    return value, backward_tape(tape, dprobs)


def update_bn_stats(model: ModelState, batch: np.ndarray, momentum: float) -> ModelState:
    """Blend running batch-norm statistics toward the batch's and freeze them.

    Statistics are collected with a train-style chained pass: each BN
    site normalizes with its own batch statistics before feeding the
    next block. After this call every forward pass uses the running
    statistics regardless of the mode it requests.
    """
    if not (0.0 <= momentum <= 1.0):
        raise ValueError(f"momentum must lie in [0, 1]: {momentum}")
    batch = _validate_inputs(model, batch)
    if batch.shape[0] < 2:
        raise ValueError("batch statistics require a batch of at least 2 samples")
    x = batch
    for i in range(model.arch.n_hidden):
        z = x @ model.weights[i] + model.biases[i]
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        model.bn_mean[i][...] = (1.0 - momentum) * model.bn_mean[i] + momentum * mu
        blended = (1.0 - momentum) * model.bn_var[i] + momentum * var
        model.bn_var[i][...] = np.maximum(blended, VAR_FLOOR)
        xhat = (z - mu) / np.sqrt(var + BN_EPS)
        x = leaky_relu(model.bn_gamma[i] * xhat + model.bn_beta[i])
    model.bn_frozen = True
    return model


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """``-log p[label]`` with the probability clipped to [eps, 1 - eps]."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError("cross_entropy expects a single probability vector")
    if not (0 <= label < probs.shape[0]):
        raise ValueError(f"label {label} out of range for {probs.shape[0]} classes")
    return float(-np.log(np.clip(probs[label], CLIP_EPS, 1.0 - CLIP_EPS)))


def complementary_cross_entropy(probs: np.ndarray, label: int) -> float:
    """``-log(1 - p[label])``: pushes mass away from a known-wrong class."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError("complementary_cross_entropy expects a single probability vector")
    if not (0 <= label < probs.shape[0]):
        raise ValueError(f"label {label} out of range for {probs.shape[0]} classes")
    return float(-np.log(np.clip(1.0 - probs[label], CLIP_EPS, 1.0 - CLIP_EPS)))


def sgd_step(model: ModelState, gradient: GradientVector, lr: float,
             weight_decay: float = 0.0) -> ModelState:
    """``theta <- theta - lr * (grad + weight_decay * theta)``. BN stats untouched."""
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive: {lr}")
    if weight_decay < 0.0:
        raise ValueError(f"weight decay must be non-negative: {weight_decay}")
    if not gradient.is_finite():
        raise ValueError("gradient contains non-finite entries")
    for param, g in zip(model.param_tensors(), gradient.tensors()):
        if param.shape != g.shape:
            raise ValueError("gradient shape does not match parameters")
        param -= lr * (g + weight_decay * param)
    return model


# --- checkpoint serialization ------------------------------------------------

def _model_payload(model: ModelState) -> tuple[dict, dict]:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "arch": {
            "in_dim": model.arch.in_dim,
            "hidden": list(model.arch.hidden),
            "n_classes": model.arch.n_classes,
        },
        "dropout_rates": list(model.dropout_rates),
        "bn_frozen": bool(model.bn_frozen),
    }
    arrays = {}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    for i in range(model.arch.n_hidden):
        arrays[f"g{i}"] = model.bn_gamma[i]
        arrays[f"be{i}"] = model.bn_beta[i]
        arrays[f"m{i}"] = model.bn_mean[i]
        arrays[f"v{i}"] = model.bn_var[i]
    return meta, arrays


def save_model(model: ModelState, path) -> None:
    meta, arrays = _model_payload(model)
    with open(path, "wb") as fh:
        np.savez(fh, meta=json.dumps(meta, sort_keys=True), **arrays)


def model_bytes(model: ModelState) -> bytes:
    """Canonical byte serialization, used by bit-identity checks."""
    meta, arrays = _model_payload(model)
    buf = io.BytesIO()
    for key in sorted(arrays):
        buf.write(key.encode())
        buf.write(np.ascontiguousarray(arrays[key], dtype=np.float64).tobytes())
    buf.write(json.dumps(meta, sort_keys=True).encode())
    return buf.getvalue()


def load_model(path) -> ModelState:
    with np.load(path) as data:
        meta = json.loads(str(data["meta"]))
        if meta["format"] != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format: {meta['format']}")
        arch = Architecture(
            in_dim=meta["arch"]["in_dim"],
            hidden=tuple(meta["arch"]["hidden"]),
            n_classes=meta["arch"]["n_classes"],
        )
        n_dense = arch.n_hidden + 1
        return ModelState(
            arch=arch,
            weights=[data[f"w{i}"] for i in range(n_dense)],
            biases=[data[f"b{i}"] for i in range(n_dense)],
            bn_gamma=[data[f"g{i}"] for i in range(arch.n_hidden)],
            bn_beta=[data[f"be{i}"] for i in range(arch.n_hidden)],
            bn_mean=[data[f"m{i}"] for i in range(arch.n_hidden)],
            bn_var=[data[f"v{i}"] for i in range(arch.n_hidden)],
            dropout_rates=[float(r) for r in meta["dropout_rates"]],
            bn_frozen=bool(meta["bn_frozen"]),
        )
