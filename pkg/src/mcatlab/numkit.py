"""Dense numeric core: seeded RNG streams, MLPs with hand-written backprop,
Adam, finite-difference gradient checking, and raw-blob checkpoint IO.

All arrays are 64-bit floats. Networks cache their last forward pass so a
subsequent backward call can produce exact analytic gradients for both the
parameters and the input batch; there is no global state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, InputError, NumericError, StateError

Array = np.ndarray

ACTIVATIONS = ("relu", "swish", "tanh", "identity")


def seeded_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Deterministic generator for (seed, stream). Same pair -> same draws,
    different streams from one seed are statistically independent."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))))


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _act(name: str, z: Array) -> Array:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "swish":
        return z * _sigmoid(z)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z: Array, h: Array) -> Array:
    """Derivative of the activation at pre-activation z (h = act(z))."""
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "swish":
        s = _sigmoid(z)
        return s + z * s * (1.0 - s)
    if name == "tanh":
        return 1.0 - h * h
    if name == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


class Mlp:
    """Fully connected network on float64 with cached forward pass.

    Parameters are exposed as a flat list [W0, b0, W1, b1, ...]; weights are
    initialized uniformly in +-1/sqrt(fan_in) and biases at zero.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        hidden_activation: str = "relu",
        output_activation: str = "identity",
        rng: np.random.Generator | None = None,
    ):
        if len(layer_sizes) < 2:
            raise DimensionError("an Mlp needs at least an input and an output size")
        if any(int(s) <= 0 for s in layer_sizes):
            raise DimensionError(f"layer sizes must be positive, got {layer_sizes}")
        if hidden_activation not in ACTIVATIONS or output_activation not in ACTIVATIONS:
            raise ValueError(f"activations must be one of {ACTIVATIONS}")
        rng = rng if rng is not None else seeded_rng(0)
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.weights: list[Array] = []
        self.biases: list[Array] = []
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            bound = 1.0 / np.sqrt(n_in)
            self.weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
            self.biases.append(np.zeros(n_out))
        self._cache_x: Array | None = None
        self._cache_z: list[Array] = []
        self._cache_h: list[Array] = []

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[Array]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def param_names(self) -> list[str]:
        out = []
        for layer in range(len(self.weights)):
            out.append(f"w{layer}")
            out.append(f"b{layer}")
        return out

    def set_params(self, arrays: Sequence[Array]) -> None:
        current = self.params()
        if len(arrays) != len(current):
            raise DimensionError(f"expected {len(current)} parameter arrays, got {len(arrays)}")
        for dst, src in zip(current, arrays):
            src = np.asarray(src, dtype=np.float64)
            if src.shape != dst.shape:
                raise DimensionError(f"parameter shape {src.shape} != {dst.shape}")
            dst[...] = src

    def clone(self) -> "Mlp":
        twin = Mlp(self.layer_sizes, self.hidden_activation, self.output_activation)
        twin.set_params(self.params())
        return twin

    def _activation_at(self, layer: int) -> str:
        return self.output_activation if layer == len(self.weights) - 1 else self.hidden_activation

    def forward(self, x: Array) -> Array:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"expected input of shape [B, {self.in_dim}], got {x.shape}")
        self._cache_x = x
        self._cache_z = []
        self._cache_h = []
        h = x
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = _act(self._activation_at(layer), z)
            self._cache_z.append(z)
            self._cache_h.append(h)
        if not np.isfinite(h).all():
            raise NumericError("Mlp.forward produced non-finite output")
        return h

    def backward(self, grad_output: Array) -> tuple[list[Array], Array]:
        """Backprop a gradient w.r.t. the forward output through the cached batch.

        Returns (parameter gradients aligned with params(), gradient w.r.t. input).
        """
        if self._cache_x is None:
            raise StateError("backward called before forward")
        grad_output = np.asarray(grad_output, dtype=np.float64)
        if grad_output.shape != self._cache_h[-1].shape:
            raise DimensionError(
                f"grad_output shape {grad_output.shape} != forward output shape {self._cache_h[-1].shape}"
            )
        grads: list[Array] = [np.empty(0)] * (2 * len(self.weights))
        upstream = grad_output
        for layer in range(len(self.weights) - 1, -1, -1):
            z = self._cache_z[layer]
            h = self._cache_h[layer]
            dz = upstream * _act_grad(self._activation_at(layer), z, h)
            h_prev = self._cache_x if layer == 0 else self._cache_h[layer - 1]
            grads[2 * layer] = h_prev.T @ dz
            grads[2 * layer + 1] = dz.sum(axis=0)
            upstream = dz @ self.weights[layer].T
        return grads, upstream


@dataclass
class AdamState:
    """Adam moment estimates for a list of parameter arrays."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)


def adam_init(params: Sequence[Array], learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        learning_rate=float(learning_rate),
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
        step_count=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(params: Sequence[Array], grads: Sequence[Array], state: AdamState) -> tuple[Sequence[Array], AdamState]:
    """Standard Adam update, in place on params. Returns (params, state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and Adam moments must have equal length")
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        if not np.isfinite(p).all():
            raise NumericError("adam_step produced non-finite parameters")
    return params, state


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_flagged: int
    worst: tuple[int, tuple[int, ...]]
    passed: bool


def gradient_check(
    loss_fn: Callable[[Sequence[Array]], tuple[float, Sequence[Array]]],
    params: Sequence[Array],
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare loss_fn's analytic gradients against central finite differences.

    loss_fn must be pure and deterministic, returning (loss, grads) where grads
    aligns with params. Entries whose relative error exceeds the tolerance are
    flagged. The error scale is max(|analytic|, |numeric|, 1e-2): below that
    floor the comparison is effectively absolute, because central differences
    of an O(1) loss carry ~1e-10 rounding noise and a structurally zero
    gradient entry would otherwise be flagged spuriously.
    """
    params = [np.asarray(p, dtype=np.float64).copy() for p in params]
    loss0, analytic = loss_fn(params)
    if not np.isfinite(loss0):
        raise NumericError("loss_fn returned a non-finite loss")
    analytic = [np.asarray(g, dtype=np.float64) for g in analytic]
    max_rel = 0.0
    n_checked = 0
    n_flagged = 0
    worst = (0, ())
    for k, p in enumerate(params):
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + step
            lo_plus, _ = loss_fn(params)
            p[idx] = orig - step
            lo_minus, _ = loss_fn(params)
            p[idx] = orig
            if not (np.isfinite(lo_plus) and np.isfinite(lo_minus)):
                raise NumericError("loss_fn returned a non-finite loss during finite differences")
            numeric = (lo_plus - lo_minus) / (2.0 * step)
            a = analytic[k][idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-2)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (k, idx)
            if rel > tolerance:
                n_flagged += 1
            it.iternext()
    return GradCheckReport(max_rel_error=max_rel, n_checked=n_checked, n_flagged=n_flagged, worst=worst, passed=n_flagged == 0)


# --- checkpoint IO: JSON manifest plus one raw little-endian f64 blob per array ---

MANIFEST_NAME = "manifest.json"


def save_checkpoint(directory: str | Path, arrays: dict[str, Array], extra: dict | None = None) -> None:
    """Write named arrays as raw little-endian float64 blobs plus a manifest.

    `extra` is an arbitrary JSON-serializable dict stored alongside the array
    table (counters, rng states); round-trips exactly.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = {}
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        fname = name.replace("/", "__") + ".bin"
        (directory / fname).write_bytes(arr.tobytes())
        table[name] = {"shape": list(arr.shape), "file": fname}
    manifest = {
        "dtype": "f64",
        "byte_order": "little-endian",
        "arrays": table,
        "extra": extra if extra is not None else {},
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")


def load_checkpoint(directory: str | Path) -> tuple[dict[str, Array], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text(encoding="utf-8"))
    if manifest.get("dtype") != "f64" or manifest.get("byte_order") != "little-endian":
        raise InputError(f"unsupported checkpoint header: {manifest.get('dtype')}/{manifest.get('byte_order')}")
    arrays = {}
    for name, meta in manifest["arrays"].items():
        raw = (directory / meta["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(meta["shape"])
        arrays[name] = arr
    return arrays, manifest.get("extra", {})
