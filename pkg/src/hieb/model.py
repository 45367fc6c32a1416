"""Bundle of the three networks that make up one trained model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ebm import EnergyNet, LatentLayout
from .generator import GeneratorNet
from .inference import InferenceNet


@dataclass
class HierEbmModel:
    layout: LatentLayout
    energy: EnergyNet
    generator: GeneratorNet
    inference: InferenceNet

    @property
    def sigma(self):
        return self.generator.sigma

    def stores(self):
        """The three parameter stores in checkpoint order."""
        return (("energy", self.energy.store),
                ("generator", self.generator.store),
                ("inference", self.inference.store))

    @classmethod
    def build(cls, latent_dims, obs_dim, *, nef=32, feature_dims=None,
              gen_hidden=(32, 32), sigma=0.3, out_activation="tanh",
              inf_features=None, inf_hidden=32, seed=0):
        """Construct and initialize all networks from one seed.

        Construction order (energy, generator, inference) is fixed so that a
        given seed always produces the same parameters.
        """
        layout = LatentLayout(tuple(latent_dims))
        if feature_dims is None:
            feature_dims = tuple(max(8, obs_dim // (2 ** i))
                                 for i in range(1, layout.n_layers))
        if inf_features is None:
            inf_features = tuple(max(8, 2 * obs_dim // (2 ** i))
                                 for i in range(layout.n_layers))
        rng = np.random.default_rng((int(seed), 5))
        energy = EnergyNet(layout, nef, rng=rng)
        generator = GeneratorNet(layout, obs_dim, feature_dims,
                                 hidden=gen_hidden, sigma=sigma,
                                 out_activation=out_activation, rng=rng)
        inference = InferenceNet(obs_dim, layout, inf_features,
                                 hidden=inf_hidden, rng=rng)
        return cls(layout, energy, generator, inference)
