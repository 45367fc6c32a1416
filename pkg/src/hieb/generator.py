"""Top-down layered generation model with a Gaussian observation density.

The top latent layer decodes to a feature vector, each lower layer refines
it together with its own latent code, and the bottom feature is the
observation mean. Observations score as an isotropic Gaussian around that
mean with fixed noise scale sigma.
"""

from __future__ import annotations

import numpy as np

from .diffcore import Mlp, MlpSpec, ParamStore, _ensure_rows
from .ebm import LatentLayout
from .errors import NumericsError

LOG_2PI = float(np.log(2.0 * np.pi))


class GeneratorNet:
    """Stack of per-layer decoder MLPs plus the observation noise scale.

    ``feature_dims`` lists the widths of the intermediate features produced
    above the bottom layer (length n_layers - 1, bottom to top). Every
    per-layer net has two hidden layers of width ``hidden``; the bottom net
    ends in ``out_activation`` (tanh keeps means inside [-1, 1]), all others
    end in identity.
    """

    def __init__(self, layout: LatentLayout, obs_dim, feature_dims,
                 hidden=(32, 32), sigma=0.3, out_activation="tanh",
                 store=None, rng=None):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        feature_dims = tuple(int(f) for f in feature_dims)
        if len(feature_dims) != layout.n_layers - 1:
            raise ValueError(
                f"need {layout.n_layers - 1} feature dims, got {len(feature_dims)}"
            )
        self.layout = layout
        self.obs_dim = int(obs_dim)
        self.sigma = float(sigma)
        self.store = store if store is not None else ParamStore()
        hidden = tuple(int(h) for h in hidden)
        # feats[i] is the output width of the net at level i (0 = bottom).
        feats = (self.obs_dim, *feature_dims)
        self._feats = feats
        self.nets = []
        top = layout.n_layers - 1
        for i in range(layout.n_layers):
            in_dim = layout.dims[i] + (feats[i + 1] if i < top else 0)
            final = out_activation if i == 0 else "identity"
            spec = MlpSpec(in_dim, hidden, feats[i],
                           activation="leaky_relu", final_activation=final)
            self.nets.append(Mlp(spec, self.store, f"gen{i}.", rng))

    def _rows(self, z):
        return _ensure_rows(z, self.layout.total, what="latent")

    def decode_cached(self, z2d):
        """Forward pass keeping per-net caches for the reverse pass."""
        parts = self.layout.split(z2d)
        top = self.layout.n_layers - 1
        h, cache = self.nets[top].forward_cached(parts[top])
        caches = [None] * self.layout.n_layers
        caches[top] = cache
        for i in range(top - 1, -1, -1):
            inp = np.concatenate([parts[i], h], axis=1)
            h, caches[i] = self.nets[i].forward_cached(inp)
        return h, caches

    def decode(self, z):
        """Observation mean for a latent code (no noise)."""
        z2, single = self._rows(z)
        xhat, _ = self.decode_cached(z2)
        return xhat[0] if single else xhat

    def decode_features(self, z):
        """All intermediate features bottom-up: [h_1, ..., h_top]."""
        z2, single = self._rows(z)
        parts = self.layout.split(z2)
        top = self.layout.n_layers - 1
        feats = [None] * self.layout.n_layers
        h = self.nets[top].forward(parts[top])
        feats[top] = h
        for i in range(top - 1, -1, -1):
            h = self.nets[i].forward(np.concatenate([parts[i], h], axis=1))
            feats[i] = h
        if single:
            return [f[0] for f in feats]
        return feats

    def backward_from_obs(self, caches, upstream):
        """Reverse pass from d(loss)/d(observation mean) rows.

        Returns parameter gradients (summed over the batch) and the gradient
        with respect to the full latent code.
        """
        grads = {}
        top = self.layout.n_layers - 1
        dz_parts = [None] * self.layout.n_layers
        delta = upstream
        for i in range(self.layout.n_layers):
            g, din = self.nets[i].backward_from_cache(caches[i], delta)
            grads.update(g)
            if i < top:
                d_i = self.layout.dims[i]
                dz_parts[i] = din[:, :d_i]
                delta = din[:, d_i:]
            else:
                dz_parts[i] = din
        return grads, np.concatenate(dz_parts, axis=1)

    def _check_obs(self, x, n_rows):
        x2, _ = _ensure_rows(x, self.obs_dim, what="observation")
        if x2.shape[0] != n_rows:
            raise NumericsError(
                f"observation batch {x2.shape[0]} != latent batch {n_rows}"
            )
        return x2

    def log_likelihood(self, x, z):
        """Exact Gaussian log density of x around decode(z)."""
        z2, single = self._rows(z)
        x2 = self._check_obs(x, z2.shape[0])
        xhat, _ = self.decode_cached(z2)
        resid = x2 - xhat
        ll = (-np.sum(resid * resid, axis=1) / (2.0 * self.sigma ** 2)
              - 0.5 * self.obs_dim * np.log(2.0 * np.pi * self.sigma ** 2))
        return float(ll[0]) if single else ll

    def grad_wrt_latent(self, x, z):
        """d log_likelihood / d z, exact through the decode chain."""
        z2, single = self._rows(z)
        x2 = self._check_obs(x, z2.shape[0])
        xhat, caches = self.decode_cached(z2)
        upstream = (x2 - xhat) / self.sigma ** 2
        _, dz = self.backward_from_obs(caches, upstream)
        return dz[0] if single else dz

    def gen_grad(self, x, z):
        """Mean over the batch of the parameter gradient of log_likelihood."""
        z2, _ = self._rows(z)
        if z2.shape[0] == 0:
            raise ValueError("empty batch")
        x2 = self._check_obs(x, z2.shape[0])
        xhat, caches = self.decode_cached(z2)
        upstream = (x2 - xhat) / (self.sigma ** 2 * z2.shape[0])
        grads, _ = self.backward_from_obs(caches, upstream)
        return grads

    def sample_observation(self, z, rng):
        """decode(z) plus seeded Gaussian observation noise."""
        mean = self.decode(z)
        return mean + self.sigma * rng.standard_normal(mean.shape)
