"""Joint tilted-Gaussian prior over a layered latent code.

A scalar network f over the concatenated code tilts a unit-Gaussian base
density: log density = f(z) - ||z||^2 / 2 up to constants. Sampling uses
noise-initialized short-run Langevin chains; learning uses the contrastive
difference of parameter gradients between inference samples (positives) and
chain samples (negatives).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .diffcore import Mlp, MlpSpec, ParamStore, _ensure_rows
from .errors import NumericsError, SamplerDivergence

# Chain state buffers are chunked to roughly this many bytes of noise.
_CHUNK_BUDGET = 64 << 20


@dataclass(frozen=True)
class LatentLayout:
    """Per-layer dimensionalities of the latent code, bottom to top."""

    dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) < 1 or any(d < 1 for d in dims):
            raise ValueError(f"need at least one positive layer dim, got {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def n_layers(self):
        return len(self.dims)

    @property
    def total(self):
        return sum(self.dims)

    def layer_slice(self, i):
        start = sum(self.dims[:i])
        return slice(start, start + self.dims[i])

    def split(self, z):
        return [z[..., self.layer_slice(i)] for i in range(self.n_layers)]

    @staticmethod
    def concat(parts):
        return np.concatenate(parts, axis=-1)

    def free_mask(self, free_layers):
        """Coordinate mask from per-layer free/fixed flags."""
        if len(free_layers) != self.n_layers:
            raise ValueError("one flag per layer required")
        mask = np.zeros(self.total, dtype=bool)
        for i, free in enumerate(free_layers):
            if free:
                mask[self.layer_slice(i)] = True
        return mask


@dataclass(frozen=True)
class LangevinConfig:
    """Short-run chain settings: K steps of size s across independent chains.

    steps=0 returns the initial states untouched (used by reconstruction
    style degenerate sweeps and pure base-density draws).
    """

    steps: int
    step_size: float
    chains: int
    seed: object = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")

    def seed_key(self):
        if isinstance(self.seed, (tuple, list)):
            return tuple(int(s) for s in self.seed)
        return (int(self.seed),)


class ReferencePrior:
    """The unit-Gaussian base density over the concatenated code."""

    def __init__(self, dim):
        self.dim = int(dim)

    def sample(self, n, rng):
        return rng.standard_normal((n, self.dim))

    def log_unnorm(self, z):
        z2, single = _ensure_rows(z, self.dim, what="latent")
        out = -0.5 * np.sum(z2 * z2, axis=1)
        return out[0] if single else out


class EnergyNet:
    """Scalar tilt f over the concatenated latent code.

    ``nef`` is the hidden width of the two-hidden-layer perceptron. nef=0
    degenerates to the frozen zero tilt (pure Gaussian prior) with no
    trainable state.
    """

    def __init__(self, layout: LatentLayout, nef, store=None, rng=None,
                 hidden_layers=2):
        self.layout = layout
        self.nef = int(nef)
        self.store = store if store is not None else ParamStore()
        if self.nef > 0:
            spec = MlpSpec(layout.total, (self.nef,) * hidden_layers, 1,
                           activation="leaky_relu", final_activation="identity")
            self.mlp = Mlp(spec, self.store, "energy.", rng)
        else:
            self.mlp = None

    @property
    def trainable(self):
        return self.mlp is not None

    def _rows(self, z):
        return _ensure_rows(z, self.layout.total, what="latent")

    def energy(self, z):
        z2, single = self._rows(z)
        if self.mlp is None:
            out = np.zeros(z2.shape[0])
        else:
            out = self.mlp.forward(z2)[:, 0]
        return float(out[0]) if single else out

    def energy_and_zgrad(self, z):
        """f(z) rows and df/dz rows in one pass."""
        z2, single = self._rows(z)
        if self.mlp is None:
            f = np.zeros(z2.shape[0])
            dz = np.zeros_like(z2)
        else:
            y, cache = self.mlp.forward_cached(z2)
            ones = np.ones((z2.shape[0], 1))
            _, dz = self.mlp.backward_from_cache(cache, ones)
            f = y[:, 0]
        if single:
            return float(f[0]), dz[0]
        return f, dz

    def param_grad_sum(self, z):
        """Gradients of sum_rows f(z) with respect to the tilt parameters."""
        z2, _ = self._rows(z)
        if self.mlp is None:
            return {}
        _, cache = self.mlp.forward_cached(z2)
        ones = np.ones((z2.shape[0], 1))
        grads, _ = self.mlp.backward_from_cache(cache, ones)
        return grads


def log_unnorm_prior(model, z):
    """f(z) - ||z||^2 / 2, dropping the partition function and the Gaussian
    normalizer (both constant in z)."""
    f = model.energy(z)
    zz = np.asarray(z, dtype=np.float64)
    quad = 0.5 * np.sum(zz * zz, axis=-1)
    return f - quad


def score(model, z):
    """Gradient of the unnormalized log density: df/dz - z."""
    _, dz = model.energy_and_zgrad(z)
    out = dz - np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericsError("non-finite score")
    return out


def prior_grad(model, z_pos, z_neg):
    """Contrastive parameter gradient: mean over positives of df/dparams
    minus the same mean over negatives. This is the ascent direction for the
    tilt; the trainer negates it for descent."""
    z_pos = np.atleast_2d(np.asarray(z_pos, dtype=np.float64))
    z_neg = np.atleast_2d(np.asarray(z_neg, dtype=np.float64))
    if z_pos.shape[0] == 0 or z_neg.shape[0] == 0:
        raise ValueError("empty batch")
    gp = model.param_grad_sum(z_pos)
    gn = model.param_grad_sum(z_neg)
    n_pos = float(z_pos.shape[0])
    n_neg = float(z_neg.shape[0])
    return {name: gp[name] / n_pos - gn[name] / n_neg for name in gp}


def _chunk_size(chains, steps, dim):
    per_chain = max(1, steps) * dim * 8
    chunk = _CHUNK_BUDGET // per_chain
    return int(max(1, min(chains, max(64, chunk))))


def _run_chains(model, layout, free, z_init, cfg, refresh_free, observer=None):
    """Shared chain driver.

    Each chain owns two rng streams derived from (seed key, chain index):
    one for its initial state, one for its per-step noise. Results are
    therefore independent of chunking and of the total chain count.
    """
    d = layout.total
    if not free.any():
        raise ValueError("all layers fixed; nothing to sample")
    key = cfg.seed_key()
    steps, s = cfg.steps, cfg.step_size
    out = np.empty((cfg.chains, d))
    chunk = _chunk_size(cfg.chains, steps, d)
    for start in range(0, cfg.chains, chunk):
        end = min(cfg.chains, start + chunk)
        n = end - start
        z = np.empty((n, d))
        noise = np.empty((n, steps, d)) if steps > 0 else None
        for j, chain in enumerate(range(start, end)):
            if refresh_free:
                z0 = np.random.default_rng((*key, chain, 0)).standard_normal(d)
            if z_init is None:
                z[j] = z0
            else:
                z[j] = z_init[chain]
                if refresh_free:
                    z[j][free] = z0[free]
            if steps > 0:
                rng = np.random.default_rng((*key, chain, 1))
                noise[j] = rng.standard_normal((steps, d))
        free_rows = np.ascontiguousarray(np.broadcast_to(free, (n, d)))
        if observer is not None:
            observer(0, start, end, z)
        for t in range(steps):
            _, dz = model.energy_and_zgrad(z)
            drift = dz - z
            z = kernels.langevin_step(z, drift, noise[:, t, :], s, free_rows)
            if not np.all(np.isfinite(z)):
                bad = np.flatnonzero(~np.isfinite(z).all(axis=1))[:4] + start
                raise SamplerDivergence(t + 1, f"chains {bad.tolist()}")
            if observer is not None:
                observer(t + 1, start, end, z)
        out[start:end] = z
    return out


def langevin_sample(model, layout, cfg, observer=None):
    """Noise-initialized short-run chains targeting the tilted prior.

    Every chain starts from the unit-Gaussian base density and runs
    cfg.steps updates z <- z + (s^2/2) * (df/dz - z) + s * noise.
    """
    free = np.ones(layout.total, dtype=bool)
    return _run_chains(model, layout, free, None, cfg, refresh_free=True,
                       observer=observer)


def conditional_langevin(model, layout, free_layers, z_init, cfg,
                         init="noise"):
    """Chains that update only the layers flagged free, holding the rest
    bit-exactly at their ``z_init`` values.

    ``init="noise"`` redraws the free layers from the base density before
    stepping; ``init="keep"`` continues from the given values. The joint
    score is evaluated on the full code and masked per coordinate.
    """
    if init not in ("noise", "keep"):
        raise ValueError(f"unknown init mode {init!r}")
    free = layout.free_mask(free_layers)
    z_init = np.asarray(z_init, dtype=np.float64)
    if z_init.ndim == 1:
        z_init = np.broadcast_to(z_init, (cfg.chains, layout.total)).copy()
    if z_init.shape != (cfg.chains, layout.total):
        raise ValueError(
            f"z_init shape {z_init.shape} incompatible with "
            f"{(cfg.chains, layout.total)}"
        )
    return _run_chains(model, layout, free, z_init, cfg,
                       refresh_free=(init == "noise"))
