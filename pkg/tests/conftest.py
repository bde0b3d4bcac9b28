"""Shared synthetic imagery helpers for the test suite."""

import numpy as np
from scipy.ndimage import gaussian_filter


def coat_texture(h, w, seed=0, sigma_across=2.0, sigma_along=9.0, gain=6.0):
    """High-contrast striped coat pattern: oriented band-pass noise pushed
    through a soft threshold. Stripe ends and bifurcations give a
    determinant-of-Hessian detector plenty to respond to."""
    rng = np.random.default_rng(seed)
    field = gaussian_filter(rng.standard_normal((h, w)), (sigma_across, sigma_along))
    field /= field.std()
    return (0.5 + 0.5 * np.tanh(gain * field)).astype(np.float32)
