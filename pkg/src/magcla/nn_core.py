"""Small feed-forward networks with hand-written backpropagation and Adam.

Everything here is a pure function over explicit parameter/optimizer state and
runs in float64, so gradients can be checked against central differences.
Weights are stored ``(out, in)``; batched inputs are ``(batch, in)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

FORMAT_VERSION = 1


class Activation(str, Enum):
    TANH = "tanh"
    IDENTITY = "identity"


@dataclass
class MlpParams:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        self.output_activation = Activation(self.output_activation)
        _check_dims(self.layer_dims)
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("need one weight matrix and bias vector per layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[l + 1], self.layer_dims[l]):
                raise ValueError(f"weights[{l}] has shape {w.shape}, expected "
                                 f"{(self.layer_dims[l + 1], self.layer_dims[l])}")
            if b.shape != (self.layer_dims[l + 1],):
                raise ValueError(f"biases[{l}] has shape {b.shape}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: w0, b0, w1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.layer_dims), [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.output_activation)

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "layer_dims": list(self.layer_dims),
            "output_activation": self.output_activation.value,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported network checkpoint version {version!r}")
        return cls(
            layer_dims=[int(n) for n in d["layer_dims"]],
            weights=[np.asarray(w, dtype=np.float64).reshape(len(w), -1) for w in d["weights"]],
            biases=[np.asarray(b, dtype=np.float64) for b in d["biases"]],
            output_activation=Activation(d["output_activation"]),
        )


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_gradient: Optional[np.ndarray] = None

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))

    def scaled(self, factor: float) -> "Gradients":
        return Gradients([w * factor for w in self.weights], [b * factor for b in self.biases],
                         None if self.input_gradient is None else self.input_gradient * factor)

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients([a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)])


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, learning_rate: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        zeros = [np.zeros_like(a) for a in params.arrays()]
        return cls([z.copy() for z in zeros], zeros, 0, learning_rate, beta1, beta2, epsilon)

    def copy(self) -> "AdamState":
        return AdamState([m.copy() for m in self.first_moment], [v.copy() for v in self.second_moment],
                         self.step_count, self.learning_rate, self.beta1, self.beta2, self.epsilon)

    def to_dict(self) -> dict:
        return {
            "step_count": self.step_count, "learning_rate": self.learning_rate,
            "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon,
            "first_moment": [m.tolist() for m in self.first_moment],
            "second_moment": [v.tolist() for v in self.second_moment],
        }

    @classmethod
    def from_dict(cls, d: dict, like: MlpParams) -> "AdamState":
        shapes = [a.shape for a in like.arrays()]
        m = [np.asarray(x, dtype=np.float64).reshape(s) for x, s in zip(d["first_moment"], shapes)]
        v = [np.asarray(x, dtype=np.float64).reshape(s) for x, s in zip(d["second_moment"], shapes)]
        return cls(m, v, int(d["step_count"]), float(d["learning_rate"]), float(d["beta1"]),
                   float(d["beta2"]), float(d["epsilon"]))


@dataclass
class ForwardCache:
    inputs: np.ndarray
    preactivations: list[np.ndarray] = field(default_factory=list)
    activations: list[np.ndarray] = field(default_factory=list)
    squeezed: bool = False


def _check_dims(layer_dims: Sequence[int]) -> None:
    if len(layer_dims) < 2:
        raise ValueError("layer_dims needs at least an input and an output size")
    if any(int(n) < 1 for n in layer_dims):
        raise ValueError(f"layer sizes must be positive, got {list(layer_dims)}")


def mlp_init(layer_dims: Sequence[int], output_activation=Activation.IDENTITY,
             rng_seed=0) -> MlpParams:
    """Fan-in uniform init: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    _check_dims(layer_dims)
    dims = [int(n) for n in layer_dims]
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(dims, weights, biases, Activation(output_activation))


def mlp_forward(params: MlpParams, inputs) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass; ReLU hidden layers, output layer per ``output_activation``.

    Accepts a single input vector or a ``(batch, in)`` matrix and returns an
    output of the matching rank.
    """
    x = np.asarray(inputs, dtype=np.float64)
    squeezed = x.ndim == 1
    if squeezed:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"input has shape {np.shape(inputs)}, network expects {params.input_dim} features")
    cache = ForwardCache(inputs=x, squeezed=squeezed)
    h = x
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        if l < last:
            h = np.maximum(z, 0.0)
        elif params.output_activation is Activation.TANH:
            h = np.tanh(z)
        else:
            h = z
        cache.preactivations.append(z)
        cache.activations.append(h)
    return (h[0] if squeezed else h), cache


def mlp_backward(params: MlpParams, cache: ForwardCache, upstream_gradient,
                 want_input_gradient: bool = False) -> Gradients:
    """Gradients of ``sum(upstream_gradient * output)`` w.r.t. parameters (and input)."""
    g = np.asarray(upstream_gradient, dtype=np.float64)
    if cache.squeezed and g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.activations[-1].shape:
        raise ValueError(f"upstream gradient shape {g.shape} does not match output "
                         f"{cache.activations[-1].shape}")
    last = params.n_layers - 1
    if params.output_activation is Activation.TANH:
        y = cache.activations[-1]
        g = g * (1.0 - y * y)
    dws: list[np.ndarray] = [None] * params.n_layers  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * params.n_layers  # type: ignore[list-item]
    for l in range(last, -1, -1):
        h_in = cache.inputs if l == 0 else cache.activations[l - 1]
        dws[l] = g.T @ h_in
        dbs[l] = g.sum(axis=0)
        if l > 0 or want_input_gradient:
            g = g @ params.weights[l]
            if l > 0:
                g = g * (cache.preactivations[l - 1] > 0.0)
    input_gradient = None
    if want_input_gradient:
        input_gradient = g[0] if cache.squeezed else g
    return Gradients(dws, dbs, input_gradient)


def clip_gradients(grads: Gradients, max_norm: Optional[float]) -> Gradients:
    """Rescale so the global L2 norm is at most ``max_norm`` (None disables)."""
    if max_norm is None:
        return grads
    norm = grads.global_norm()
    if norm > max_norm:
        return grads.scaled(max_norm / norm)
    return grads


def adam_step(params: MlpParams, grads: Gradients, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam step. Returns new params and state; inputs untouched."""
    garrs = grads.arrays()
    if not all(np.all(np.isfinite(g)) for g in garrs):
        raise FloatingPointError("non-finite gradient passed to adam_step")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params.arrays(), garrs, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        step = state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        new_p.append(p - step)
        new_m.append(m)
        new_v.append(v)
    out = MlpParams(list(params.layer_dims), new_p[0::2], new_p[1::2], params.output_activation)
    new_state = AdamState(new_m, new_v, t, state.learning_rate, b1, b2, state.epsilon)
    return out, new_state


@dataclass
class FiniteDifferenceReport:
    max_relative_error: float
    max_abs_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance


def finite_difference_check(params: MlpParams,
                            loss_fn: Callable[[MlpParams], tuple[float, Gradients]],
                            tolerance: float = 1e-4, step: float = 1e-5,
                            max_coords: int = 2000, rng_seed=0,
                            abs_floor: float = 1e-7) -> FiniteDifferenceReport:
    """Compare analytic gradients with central differences.

    ``loss_fn(params)`` returns ``(loss, Gradients)``; only the loss is used for
    the numerical side. Networks larger than ``max_coords`` parameters are
    checked on a random subset of coordinates. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    _, analytic = loss_fn(params)
    p_arrays = params.arrays()
    g_arrays = analytic.arrays()
    coords = [(k, idx) for k, a in enumerate(p_arrays) for idx in np.ndindex(a.shape)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(rng_seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst_rel = 0.0
    worst_abs = 0.0
    probe = params.copy()
    probe_arrays = probe.arrays()
    for k, idx in coords:
        target = probe_arrays[k]
        orig = target[idx]
        target[idx] = orig + step
        plus, _ = loss_fn(probe)
        target[idx] = orig - step
        minus, _ = loss_fn(probe)
        target[idx] = orig
        numeric = (plus - minus) / (2.0 * step)
        a = float(g_arrays[k][idx])
        err = abs(a - numeric)
        worst_abs = max(worst_abs, err)
        worst_rel = max(worst_rel, err / max(abs(a), abs(numeric), abs_floor))
    return FiniteDifferenceReport(worst_rel, worst_abs, len(coords), tolerance)


def save_params(params: MlpParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(params.to_dict(), fh)


def load_params(path) -> MlpParams:
    with open(path) as fh:
        return MlpParams.from_dict(json.load(fh))
