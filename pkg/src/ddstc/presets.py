"""Plants used in the numerical experiments."""
from __future__ import annotations

import numpy as np

from .model import LtiSystem, discretize_zoh

FOUR_TANK_A = np.array([[0.927, 0, 0.041, 0],
                        [0, 0.918, 0, 0.033],
                        [0, 0, 0.924, 0],
                        [0, 0, 0, 0.937]])
FOUR_TANK_B = np.array([[0.017, 0.001],
                        [0.001, 0.023],
                        [0, 0.061],
                        [0.072, 0]])
FOUR_TANK_C = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])


def four_tank() -> LtiSystem:
    """Linearized four-tank plant with two level measurements."""
    return LtiSystem(FOUR_TANK_A, FOUR_TANK_B, FOUR_TANK_C, np.zeros((2, 2)))


def double_integrator_ct() -> tuple[np.ndarray, np.ndarray]:
    return np.array([[0.0, 1.0], [0.0, -0.1]]), np.array([[0.0], [0.1]])


def double_integrator(dt: float = 0.1) -> LtiSystem:
    """Damped double integrator sampled with zero-order hold, full state output."""
    A, B = discretize_zoh(*double_integrator_ct(), dt)
    return LtiSystem.state_feedback(A, B)


def inverted_pendulum_ct(m1: float = 1.0, m2: float = 10.0, ell: float = 3.0,
                         g: float = 10.0) -> tuple[np.ndarray, np.ndarray]:
    Ac = np.array([[0, 1, 0, 0],
                   [0, 0, -m1 * g / m2, 0],
                   [0, 0, 0, 1],
                   [0, 0, g / ell, 0]], dtype=float)
    Bc = np.array([[0.0], [1.0 / m2], [0.0], [-1.0 / (m2 * ell)]])
    return Ac, Bc


def inverted_pendulum(dt: float = 0.1, **params) -> LtiSystem:
    """Linearized cart pendulum sampled with zero-order hold, full state output."""
    A, B = discretize_zoh(*inverted_pendulum_ct(**params), dt)
    return LtiSystem.state_feedback(A, B)


PRESETS = {
    "four-tank": four_tank,
    "double-integrator": double_integrator,
    "inverted-pendulum": inverted_pendulum,
}


def preset(name: str, dt: float | None = None) -> LtiSystem:
    """Look up a plant by name; ``dt`` only applies to sampled plants."""
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown plant preset {name!r}; "
                         f"choose from {sorted(PRESETS)}") from None
    if name == "four-tank" or dt is None:
        return factory()
    return factory(dt=dt)
