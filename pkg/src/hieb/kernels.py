"""Hot numeric kernels: numba-compiled loops with a pure-numpy fallback.

The backend is fixed once at import time from the HIEB_NUMBA environment
variable: unset or "1" compiles the numba kernels when numba is importable,
"0" forces the numpy path. Both paths apply the same elementwise operations
in the same order, so they produce bit-identical results;
``benchmarks/bench_kernels.py`` times one against the other.
"""

import logging
import os

import numpy as np

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2


# ------------------------------------------------------------- numpy path

def _np_leaky_relu(x):
    return np.where(x >= 0.0, x, LEAKY_SLOPE * x)


def _np_leaky_relu_grad(pre, grad):
    return np.where(pre >= 0.0, grad, LEAKY_SLOPE * grad)


def _np_tanh_grad(post, grad):
    return grad * (1.0 - post * post)


def _np_adam_update(param, grad, m, v, lr, c1, c2, beta1, beta2, eps):
    mi = beta1 * m + (1.0 - beta1) * grad
    vi = beta2 * v + (1.0 - beta2) * (grad * grad)
    m[:] = mi
    v[:] = vi
    param[:] = param - lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


def _np_langevin_step(z, drift, noise, s, free):
    a = 0.5 * s * s
    stepped = z + a * drift + s * noise
    return np.where(free, stepped, z)


_NUMPY_IMPL = {
    "leaky_relu": _np_leaky_relu,
    "leaky_relu_grad": _np_leaky_relu_grad,
    "tanh_grad": _np_tanh_grad,
    "adam_update": _np_adam_update,
    "langevin_step": _np_langevin_step,
}


# ------------------------------------------------------------- numba path

def _build_numba_impl():
    from numba import njit

    jit = njit(cache=True)

    @jit
    def leaky_relu(x):
        out = np.empty_like(x)
        for i in range(x.size):
            val = x[i]
            out[i] = val if val >= 0.0 else LEAKY_SLOPE * val
        return out

    @jit
    def leaky_relu_grad(pre, grad):
        out = np.empty_like(grad)
        for i in range(pre.size):
            g = grad[i]
            out[i] = g if pre[i] >= 0.0 else LEAKY_SLOPE * g
        return out

    @jit
    def tanh_grad(post, grad):
        out = np.empty_like(grad)
        for i in range(post.size):
            p = post[i]
            out[i] = grad[i] * (1.0 - p * p)
        return out

    @jit
    def adam_update(param, grad, m, v, lr, c1, c2, beta1, beta2, eps):
        for i in range(param.size):
            g = grad[i]
            mi = beta1 * m[i] + (1.0 - beta1) * g
            vi = beta2 * v[i] + (1.0 - beta2) * (g * g)
            m[i] = mi
            v[i] = vi
            param[i] = param[i] - lr * (mi / c1) / (np.sqrt(vi / c2) + eps)

    @jit
    def langevin_step(z, drift, noise, s, free):
        out = np.empty_like(z)
        a = 0.5 * s * s
        for i in range(z.size):
            if free[i]:
                out[i] = z[i] + a * drift[i] + s * noise[i]
            else:
                out[i] = z[i]
        return out

    return {
        "leaky_relu": leaky_relu,
        "leaky_relu_grad": leaky_relu_grad,
        "tanh_grad": tanh_grad,
        "adam_update": adam_update,
        "langevin_step": langevin_step,
    }


IMPLEMENTATIONS = {"numpy": _NUMPY_IMPL}

_flag = os.environ.get("HIEB_NUMBA", "1").strip().lower()
if _flag not in ("0", "false", "off"):
    try:
        IMPLEMENTATIONS["numba"] = _build_numba_impl()
        BACKEND = "numba"
    except ImportError:
        log.info("numba not importable, falling back to numpy kernels")
        BACKEND = "numpy"
else:
    BACKEND = "numpy"

_active = IMPLEMENTATIONS[BACKEND]


def _flat(a):
    return np.ascontiguousarray(a, dtype=np.float64).ravel()


# ------------------------------------------------------------- public API

def leaky_relu(x):
    x = np.asarray(x, dtype=np.float64)
    return _active["leaky_relu"](_flat(x)).reshape(x.shape)


def leaky_relu_grad(pre, grad):
    pre = np.asarray(pre, dtype=np.float64)
    return _active["leaky_relu_grad"](_flat(pre), _flat(grad)).reshape(pre.shape)


def tanh_grad(post, grad):
    post = np.asarray(post, dtype=np.float64)
    return _active["tanh_grad"](_flat(post), _flat(grad)).reshape(post.shape)


def adam_update(param, grad, m, v, step, lr, beta1, beta2, eps):
    """In-place Adam update of ``param`` (and moments) for 1-based ``step``."""
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    _active["adam_update"](
        param.ravel(), _flat(grad), m.ravel(), v.ravel(),
        float(lr), c1, c2, float(beta1), float(beta2), float(eps),
    )


def langevin_step(z, drift, noise, s, free):
    """One update z + (s^2/2) * drift + s * noise on coordinates where
    ``free`` is True; frozen coordinates are copied through bit-exactly."""
    z = np.asarray(z, dtype=np.float64)
    free_flat = np.ascontiguousarray(np.broadcast_to(free, z.shape)).ravel()
    out = _active["langevin_step"](
        _flat(z), _flat(drift), _flat(noise), float(s), free_flat
    )
    return out.reshape(z.shape)
