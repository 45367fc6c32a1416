"""Bottom-up amortized inference with per-layer diagonal-Gaussian heads.

A deterministic feature ladder climbs from the observation; each rung feeds
an affine head that emits a mean and a log-variance for that latent layer.
Sampling is reparameterized (mean + exp(logvar/2) * noise), the log density
and the KL against the unit-Gaussian base are closed form, and the training
gradient is fully pathwise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .diffcore import Mlp, MlpSpec, ParamStore, _ensure_rows
from .ebm import LatentLayout
from .errors import NumericsError

log = logging.getLogger(__name__)

LOGVAR_LIMIT = 10.0
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class PosteriorParams:
    """Per-layer Gaussian parameters: lists of (N, d_i) means/log-variances."""

    means: list
    logvars: list

    @property
    def n(self):
        return self.means[0].shape[0]

    def concat_mean(self):
        return np.concatenate(self.means, axis=-1)

    def concat_logvar(self):
        return np.concatenate(self.logvars, axis=-1)


class InferenceNet:
    """Feature ladder plus per-layer affine Gaussian heads.

    ``feature_dims`` gives the ladder widths bottom to top (length
    n_layers). Each ladder net has one hidden layer of width ``hidden``
    (0 means a plain affine map) and a leaky-ReLU output nonlinearity; heads
    are affine maps onto 2 * d_i values (mean then raw log-variance).
    Log-variances clamp to +-LOGVAR_LIMIT; clamp events are counted and
    logged, never silent.
    """

    def __init__(self, obs_dim, layout: LatentLayout, feature_dims,
                 hidden=32, store=None, rng=None):
        feature_dims = tuple(int(f) for f in feature_dims)
        if len(feature_dims) != layout.n_layers:
            raise ValueError(
                f"need {layout.n_layers} ladder widths, got {len(feature_dims)}"
            )
        self.obs_dim = int(obs_dim)
        self.layout = layout
        self.feature_dims = feature_dims
        self.store = store if store is not None else ParamStore()
        hidden_dims = (int(hidden),) if int(hidden) > 0 else ()
        self.ladder = []
        self.heads = []
        prev = self.obs_dim
        for i, width in enumerate(feature_dims):
            spec = MlpSpec(prev, hidden_dims, width,
                           activation="leaky_relu", final_activation="leaky_relu")
            self.ladder.append(Mlp(spec, self.store, f"inf{i}.", rng))
            head_spec = MlpSpec(width, (), 2 * layout.dims[i])
            self.heads.append(Mlp(head_spec, self.store, f"head{i}.", rng))
            prev = width
        self.clamp_events = 0

    def infer_cached(self, x):
        """Ladder + heads with caches kept for the reverse pass."""
        x2, _ = _ensure_rows(x, self.obs_dim, what="observation")
        r = x2
        ladder_caches = []
        head_caches = []
        means, logvars, masks = [], [], []
        for i in range(self.layout.n_layers):
            r, cache = self.ladder[i].forward_cached(r)
            ladder_caches.append(cache)
            out, hcache = self.heads[i].forward_cached(r)
            head_caches.append(hcache)
            d_i = self.layout.dims[i]
            mu = out[:, :d_i]
            raw = out[:, d_i:]
            inside = np.abs(raw) <= LOGVAR_LIMIT
            n_clamped = int(raw.size - np.count_nonzero(inside))
            if n_clamped:
                self.clamp_events += n_clamped
                log.warning("log-variance clamp active on %d values (layer %d)",
                            n_clamped, i)
            means.append(mu)
            logvars.append(np.clip(raw, -LOGVAR_LIMIT, LOGVAR_LIMIT))
            masks.append(inside)
        pp = PosteriorParams(means, logvars)
        for arr in (pp.concat_mean(), pp.concat_logvar()):
            if not np.all(np.isfinite(arr)):
                raise NumericsError("non-finite posterior head output")
        return pp, (ladder_caches, head_caches, masks)

    def infer(self, x):
        x2, single = _ensure_rows(x, self.obs_dim, what="observation")
        pp, _ = self.infer_cached(x2)
        if single:
            return PosteriorParams([m[0:1] for m in pp.means],
                                   [l[0:1] for l in pp.logvars])
        return pp

    def backward_heads(self, caches, d_means, d_logvars):
        """Reverse pass from per-layer gradients on (mean, logvar) rows back
        to the ladder parameters. Clamped log-variance coordinates pass no
        gradient."""
        ladder_caches, head_caches, masks = caches
        grads = {}
        dr_next = None
        for i in reversed(range(self.layout.n_layers)):
            up = np.concatenate([d_means[i], d_logvars[i] * masks[i]], axis=1)
            hgrads, dr = self.heads[i].backward_from_cache(head_caches[i], up)
            grads.update(hgrads)
            if dr_next is not None:
                dr = dr + dr_next
            lgrads, dprev = self.ladder[i].backward_from_cache(ladder_caches[i], dr)
            grads.update(lgrads)
            dr_next = dprev
        return grads


def reparam_sample(pp: PosteriorParams, eps):
    """z = mean + exp(logvar / 2) * eps over the concatenated code."""
    mu = pp.concat_mean()
    logvar = pp.concat_logvar()
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mu.shape:
        raise NumericsError(f"noise shape {eps.shape} != {mu.shape}")
    return mu + np.exp(0.5 * logvar) * eps


def log_q_rows(pp: PosteriorParams, z):
    """Exact diagonal-Gaussian log density, summed over all layers."""
    mu = pp.concat_mean()
    logvar = pp.concat_logvar()
    z = np.asarray(z, dtype=np.float64)
    if z.shape != mu.shape:
        raise NumericsError(f"latent shape {z.shape} != {mu.shape}")
    resid = z - mu
    return -0.5 * np.sum(logvar + resid * resid / np.exp(logvar) + _LOG_2PI,
                         axis=-1)


def kl_to_reference_rows(pp: PosteriorParams):
    """Closed-form KL(N(mu, diag exp(logvar)) || N(0, I)) per row."""
    mu = pp.concat_mean()
    logvar = pp.concat_logvar()
    return 0.5 * np.sum(np.exp(logvar) + mu * mu - 1.0 - logvar, axis=-1)


def inference_loss(inference: InferenceNet, energy_model, generator, x, eps):
    """Scalar objective whose parameter gradient inf_grad computes:
    mean over the batch of [-log_likelihood + KL(q||base) - f(z)] with z
    drawn through the fixed noise ``eps``."""
    pp, _ = inference.infer_cached(x)
    z = reparam_sample(pp, eps)
    ll = generator.log_likelihood(x, z)
    kl = kl_to_reference_rows(pp)
    f = energy_model.energy(z)
    return float(np.mean(-ll + kl - f))


def inf_grad(inference: InferenceNet, energy_model, generator, x, eps):
    """Pathwise gradient of ``inference_loss`` w.r.t. the ladder and head
    parameters, using one reparameterized sample per row.

    The KL against the tilted prior enters as the analytic KL to the base
    density minus the expected tilt; the tilt's partition function is
    constant in these parameters and drops.
    """
    x2, _ = _ensure_rows(x, inference.obs_dim, what="observation")
    n = x2.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    pp, caches = inference.infer_cached(x2)
    z = reparam_sample(pp, eps)

    # d(loss)/dz: reconstruction pull plus the tilt's score, both scaled for
    # the batch mean.
    xhat, gcaches = generator.decode_cached(z)
    up_obs = -(x2 - xhat) / (generator.sigma ** 2 * n)
    _, dz = generator.backward_from_obs(gcaches, up_obs)
    _, df = energy_model.energy_and_zgrad(z)
    dz = dz - df / n

    d_means, d_logvars = [], []
    dz_parts = inference.layout.split(dz)
    eps_parts = inference.layout.split(np.asarray(eps, dtype=np.float64))
    for i in range(inference.layout.n_layers):
        mu = pp.means[i]
        logvar = pp.logvars[i]
        sigma_eps = np.exp(0.5 * logvar) * eps_parts[i]
        # pathwise chain through z = mu + exp(logvar/2) eps, plus analytic KL.
        d_means.append(dz_parts[i] + mu / n)
        d_logvars.append(dz_parts[i] * (0.5 * sigma_eps)
                         + 0.5 * (np.exp(logvar) - 1.0) / n)
    grads = inference.backward_heads(caches, d_means, d_logvars)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite inference gradient for {name!r}")
    return grads
