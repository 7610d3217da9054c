import numpy as np

from gtmancer.attention import dykstra_project


def random_symmetric_stochastic(rng, M):
    """Symmetric matrix with unit row sums (entries may be negative)."""
    P, _ = dykstra_project(rng.uniform(0.0, 2.0, size=(M, M)))
    return P
