"""Float64 dense-network substrate.

Provides a named parameter store with Adam state, a small MLP with explicit
reverse-mode gradients for both parameters and inputs, and nothing else: no
computation graph, no convolutions, no mixed precision. Everything is 64-bit
and deterministic given (parameters, input).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import NumericsError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_ACTIVATIONS = ("leaky_relu", "tanh", "identity")


@dataclass(frozen=True)
class MlpSpec:
    """Shape and activation plan for a dense multi-layer perceptron.

    ``activation`` applies after every hidden layer, ``final_activation``
    after the output layer. Leaky ReLU uses slope 0.2 on the negative side
    and takes the positive branch (derivative 1) at exactly zero.
    """

    input_dim: int
    hidden_dims: tuple
    output_dim: int
    activation: str = "leaky_relu"
    final_activation: str = "identity"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"all layer dims must be positive, got {dims}")
        for name in (self.activation, self.final_activation):
            if name not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))

    def layer_dims(self):
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_affine(self):
        return len(self.hidden_dims) + 1


def _activate(name, pre):
    if name == "identity":
        return pre
    if name == "leaky_relu":
        return kernels.leaky_relu(pre)
    return np.tanh(pre)


def _activate_backprop(name, pre, post, grad):
    if name == "identity":
        return grad
    if name == "leaky_relu":
        return kernels.leaky_relu_grad(pre, grad)
    return kernels.tanh_grad(post, grad)


class ParamStore:
    """Named float64 parameter tensors plus gradient and Adam accumulators.

    Every parameter gets a same-shaped gradient slot, zeroed after each
    optimizer step. Iteration order is insertion order, which fixes the
    checkpoint layout.
    """

    def __init__(self):
        self._params = {}
        self._grads = {}
        self._m = {}
        self._v = {}
        self.step = 0

    def add(self, name, value):
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64, order="C")
        self._params[name] = arr
        self._grads[name] = np.zeros_like(arr)
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)

    def names(self):
        return list(self._params)

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def value(self, name):
        return self._params[name]

    def set_value(self, name, value):
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._params[name].shape:
            raise ValueError(
                f"shape mismatch for {name!r}: {arr.shape} vs {self._params[name].shape}"
            )
        self._params[name][...] = arr

    def grad(self, name):
        return self._grads[name]

    def moments(self, name):
        return self._m[name], self._v[name]

    def accumulate_grad(self, name, g):
        self._grads[name] += g

    def zero_grads(self):
        for g in self._grads.values():
            g.fill(0.0)

    def adam_step(self, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        """Apply one Adam update from the accumulated gradients, then zero them."""
        self.step += 1
        for name, p in self._params.items():
            kernels.adam_update(
                p, self._grads[name], self._m[name], self._v[name],
                self.step, lr, beta1, beta2, eps,
            )
            if not np.all(np.isfinite(p)):
                raise NumericsError(
                    f"non-finite parameter {name!r} after optimizer step {self.step}"
                )
        self.zero_grads()

    def n_scalars(self):
        return sum(p.size for p in self._params.values())

    def copy(self):
        dup = ParamStore()
        for name, p in self._params.items():
            dup.add(name, p)
            dup._grads[name][...] = self._grads[name]
            dup._m[name][...] = self._m[name]
            dup._v[name][...] = self._v[name]
        dup.step = self.step
        return dup


def _ensure_rows(x, dim, what="input"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise NumericsError(f"{what} has length {x.shape[0]}, expected {dim}")
        return x[None, :], True
    if x.ndim != 2 or x.shape[1] != dim:
        raise NumericsError(f"{what} has shape {x.shape}, expected (*, {dim})")
    return x, False


class Mlp:
    """A dense MLP whose parameters live in a shared ParamStore.

    Weights are registered as ``<prefix>W<i>`` / ``<prefix>b<i>``. When an
    rng is given, weights initialize uniform in +-1/sqrt(fan_in) and biases
    zero; without an rng everything starts at zero.
    """

    def __init__(self, spec: MlpSpec, store: ParamStore, prefix: str, rng=None):
        self.spec = spec
        self.store = store
        self.prefix = prefix
        dims = spec.layer_dims()
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            store.add(f"{prefix}W{i}", w)
            store.add(f"{prefix}b{i}", np.zeros(fan_out))

    def param_names(self):
        out = []
        for i in range(self.spec.n_affine):
            out.append(f"{self.prefix}W{i}")
            out.append(f"{self.prefix}b{i}")
        return out

    def weight(self, i):
        return self.store.value(f"{self.prefix}W{i}")

    def bias(self, i):
        return self.store.value(f"{self.prefix}b{i}")

    def _act_name(self, i):
        last = self.spec.n_affine - 1
        return self.spec.activation if i < last else self.spec.final_activation

    def forward_cached(self, x):
        """Batched forward pass; returns (output, cache) with 2-D arrays."""
        a = x
        cache = []
        for i in range(self.spec.n_affine):
            pre = a @ self.weight(i) + self.bias(i)
            post = _activate(self._act_name(i), pre)
            cache.append((a, pre, post))
            a = post
        if not np.all(np.isfinite(a)):
            raise NumericsError(f"non-finite output from mlp {self.prefix!r}")
        return a, cache

    def forward(self, x):
        x2, single = _ensure_rows(x, self.spec.input_dim)
        y, _ = self.forward_cached(x2)
        return y[0] if single else y

    def backward_from_cache(self, cache, upstream):
        """Reverse pass from a forward cache.

        ``upstream`` holds d(loss)/d(output) rows. Returns parameter
        gradients summed over the batch (keyed by full store name) and the
        gradient with respect to the input rows.
        """
        grads = {}
        delta = upstream
        for i in reversed(range(self.spec.n_affine)):
            a, pre, post = cache[i]
            delta = _activate_backprop(self._act_name(i), pre, post, delta)
            grads[f"{self.prefix}W{i}"] = a.T @ delta
            grads[f"{self.prefix}b{i}"] = delta.sum(axis=0)
            delta = delta @ self.weight(i).T
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient for {name!r}")
        if not np.all(np.isfinite(delta)):
            raise NumericsError(f"non-finite input gradient from mlp {self.prefix!r}")
        return grads, delta

    def backward(self, x, upstream):
        """Gradients of the scalar loss implied by ``upstream`` w.r.t. the
        parameters and the input. Recomputes the forward pass internally."""
        x2, single = _ensure_rows(x, self.spec.input_dim)
        up2, _ = _ensure_rows(upstream, self.spec.output_dim, what="upstream grad")
        _, cache = self.forward_cached(x2)
        grads, dx = self.backward_from_cache(cache, up2)
        return grads, (dx[0] if single else dx)

    def add_grads(self, grads, scale=1.0):
        for name, g in grads.items():
            self.store.accumulate_grad(name, g if scale == 1.0 else scale * g)
