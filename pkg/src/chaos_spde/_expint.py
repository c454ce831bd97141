"""phi-functions for exponential integrators with linear interpolation."""

import numpy as np

_SMALL = 1e-3


def phi12(z):
    """Return ``(phi1(z), phi2(z))`` elementwise.

    ``phi1(z) = (e^z - 1)/z`` and ``phi2(z) = (e^z - 1 - z)/z^2``, with Taylor
    series near the origin where the closed forms cancel.
    """
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < _SMALL
    zs = np.where(small, 1.0, z)
    em1 = np.expm1(zs)
    p1 = np.where(small, 1 + z / 2 + z**2 / 6 + z**3 / 24 + z**4 / 120, em1 / zs)
    p2 = np.where(
        small, 0.5 + z / 6 + z**2 / 24 + z**3 / 120 + z**4 / 720, (em1 - zs) / zs**2
    )
    return p1, p2


def linear_step_weights(a, h: float):
    """Weights of one exponential-trapezoid step of length ``h``.

    For ``y' = a y + f`` with ``f`` linear on the step,
    ``y1 = E y0 + w0 f0 + w1 f1`` exactly. ``a`` may be an array of rates.
    """
    a = np.asarray(a, dtype=float)
    p1, p2 = phi12(a * h)
    return np.exp(a * h), h * (p1 - p2), h * p2
