"""Shared test utilities."""

import numpy as np

from arrul.armodel import ARModel, ModelConfig
from arrul.numcore import gradient_check


def model_gradcheck(seed: int, k: int = 5, points: int = 64, channel_scale: float = 0.1,
                    batch: int = 3, max_entries: int | None = 40):
    """Finite-difference check of every parameter of an assembled model.

    Dropout uses a freshly seeded generator per call so the mask is fixed.
    """
    rng = np.random.default_rng(seed)
    model = ARModel(ModelConfig(k=k, points=points, channel_scale=channel_scale), rng)
    x = rng.standard_normal((batch, 2 * k, points))
    x2 = rng.uniform(0, 1, (batch, k))
    c = rng.standard_normal(batch)

    def loss():
        return float(np.sum(model.forward(x, x2, training=True, rng=np.random.default_rng(seed)) * c))

    loss()
    analytic = {name: g.copy() for name, g in model.backward(c).items()}
    return gradient_check(loss, model.parameters(), analytic, 1e-3,
                          max_entries=max_entries, rng=np.random.default_rng(seed + 1))
