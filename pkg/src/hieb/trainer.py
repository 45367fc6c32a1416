"""The joint training loop.

Each iteration, in order: draw negatives from the tilted prior with a
short-run chain, draw positives through the inference net with fresh
reparameterization noise, then update the tilt (contrastive gradient), the
generator (reconstruction gradient), and the inference net (pathwise
gradient), each with its own Adam learning rate.

All randomness is derived from (seed, stream id, iteration), so a resumed
run reproduces the uninterrupted trajectory bit-exactly and every metric is
a pure function of (state, batch, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .ebm import LangevinConfig, langevin_sample, prior_grad
from .errors import NumericsError
from .inference import (inf_grad, kl_to_reference_rows, log_q_rows,
                        reparam_sample)
from .model import HierEbmModel

# rng stream ids
_S_NEGATIVE = 10
_S_POSITIVE = 11
_S_REPORT_EPS = 12
_S_REPORT_NEG = 13


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    batch_size: int
    lr_energy: float = 5e-5
    lr_generator: float = 1e-4
    lr_inference: float = 1e-4
    langevin_steps: int = 40
    langevin_step_size: float = 0.1
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 1000
    elbo_samples: int = 1

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        for lr in (self.lr_energy, self.lr_generator, self.lr_inference):
            if lr < 0:
                raise ValueError("learning rates must be >= 0")


@dataclass
class StepMetrics:
    iteration: int
    recon_nll: float
    kl_ref: float
    energy_pos: float
    energy_neg: float
    elbo_unnorm: float
    wall_ms: float = 0.0

    COLUMNS = ("iter", "recon_nll", "kl_ref", "e_pos", "e_neg",
               "elbo_unnorm", "wall_ms")

    def row(self):
        return (self.iteration, self.recon_nll, self.kl_ref, self.energy_pos,
                self.energy_neg, self.elbo_unnorm, self.wall_ms)


@dataclass
class TrainState:
    model: HierEbmModel
    config: TrainConfig
    t: int = 0


def _finite_or_raise(value, label, t):
    if not np.all(np.isfinite(value)):
        raise NumericsError(f"non-finite {label} at iteration {t}")
    return value


def train_step(state: TrainState, x, trace=None):
    """One full update on a minibatch; returns the step's metrics.

    Metrics are evaluated at the parameter values that produced the
    gradients (before this step's updates land).
    """
    cfg = state.config
    model = state.model
    t = state.t
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0]
    d = model.layout.total

    neg_cfg = LangevinConfig(cfg.langevin_steps, cfg.langevin_step_size,
                             chains=m, seed=(cfg.seed, _S_NEGATIVE, t))
    z_neg = langevin_sample(model.energy, model.layout, neg_cfg)
    if trace is not None:
        trace.append("prior_sample")

    eps = np.random.default_rng((cfg.seed, _S_POSITIVE, t)).standard_normal((m, d))
    pp = model.inference.infer(x)
    z_pos = reparam_sample(pp, eps)
    if trace is not None:
        trace.append("inference_sample")

    f_pos = model.energy.energy(z_pos)
    f_neg = model.energy.energy(z_neg)
    ll = model.generator.log_likelihood(x, z_pos)
    kl = kl_to_reference_rows(pp)
    metrics = StepMetrics(
        iteration=t + 1,
        recon_nll=_finite_or_raise(float(-np.mean(ll)), "recon_nll", t),
        kl_ref=_finite_or_raise(float(np.mean(kl)), "kl_ref", t),
        energy_pos=_finite_or_raise(float(np.mean(f_pos)), "e_pos", t),
        energy_neg=_finite_or_raise(float(np.mean(f_neg)), "e_neg", t),
        elbo_unnorm=0.0,
    )
    metrics.elbo_unnorm = _finite_or_raise(
        float(np.mean(ll) - np.mean(kl) + np.mean(f_pos)), "elbo_unnorm", t)

    if model.energy.trainable:
        ascent = prior_grad(model.energy, z_pos, z_neg)
        for name, g in ascent.items():
            model.energy.store.accumulate_grad(name, -g)
    model.energy.store.adam_step(cfg.lr_energy)
    if trace is not None:
        trace.append("update_energy")

    gen_ascent = model.generator.gen_grad(x, z_pos)
    for name, g in gen_ascent.items():
        model.generator.store.accumulate_grad(name, -g)
    model.generator.store.adam_step(cfg.lr_generator)
    if trace is not None:
        trace.append("update_generator")

    phi_grads = inf_grad(model.inference, model.energy, model.generator, x, eps)
    for name, g in phi_grads.items():
        model.inference.store.accumulate_grad(name, g)
    model.inference.store.adam_step(cfg.lr_inference)
    if trace is not None:
        trace.append("update_inference")

    state.t = t + 1
    return metrics


def elbo_estimate(model: HierEbmModel, x, n_samples=1, seed=0, kl="analytic"):
    """Monte-Carlo evidence bound, up to the tilt's log partition constant.

    ``kl="analytic"`` uses the closed-form KL to the base density plus the
    sampled tilt; ``kl="mc"`` replaces the base/posterior terms by sampled
    log densities. Samples derive from (seed, 0) so that callers can share
    draws with loss_report.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    d = model.layout.total
    rng = np.random.default_rng((int(seed), 0))
    eps_all = rng.standard_normal((n_samples, n, d))
    pp = model.inference.infer(x)
    total = 0.0
    for k in range(n_samples):
        z = reparam_sample(pp, eps_all[k])
        ll = model.generator.log_likelihood(x, z)
        f = model.energy.energy(z)
        if kl == "analytic":
            kl_rows = kl_to_reference_rows(pp)
            total += float(np.mean(ll) - np.mean(kl_rows) + np.mean(f))
        elif kl == "mc":
            log_base = -0.5 * np.sum(z * z, axis=1) - 0.5 * d * np.log(2 * np.pi)
            total += float(np.mean(ll) + np.mean(f)
                           + np.mean(log_base) - np.mean(log_q_rows(pp, z)))
        else:
            raise ValueError(f"unknown kl mode {kl!r}")
    return total / n_samples


def loss_report(model: HierEbmModel, x, seed=0, langevin_steps=40,
                langevin_step_size=0.1):
    """StepMetrics for a batch without touching any parameters.

    Positive-sample noise comes from (seed, 0) — the same stream
    elbo_estimate uses — and negatives from (seed, REPORT_NEG).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    d = model.layout.total
    eps = np.random.default_rng((int(seed), 0)).standard_normal((1, n, d))[0]
    pp = model.inference.infer(x)
    z_pos = reparam_sample(pp, eps)
    ll = model.generator.log_likelihood(x, z_pos)
    kl = kl_to_reference_rows(pp)
    f_pos = model.energy.energy(z_pos)
    neg_cfg = LangevinConfig(langevin_steps, langevin_step_size, chains=n,
                             seed=(int(seed), _S_REPORT_NEG))
    z_neg = langevin_sample(model.energy, model.layout, neg_cfg)
    f_neg = model.energy.energy(z_neg)
    recon_nll = float(-np.mean(ll))
    kl_ref = float(np.mean(kl))
    e_pos = float(np.mean(f_pos))
    return StepMetrics(
        iteration=0,
        recon_nll=recon_nll,
        kl_ref=kl_ref,
        energy_pos=e_pos,
        energy_neg=float(np.mean(f_neg)),
        elbo_unnorm=-recon_nll - kl_ref + e_pos,
    )
