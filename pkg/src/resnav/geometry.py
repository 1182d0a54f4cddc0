"""Planar geometry helpers shared across the package."""

from __future__ import annotations

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Wrap angle(s) to the half-open interval (-pi, pi].

    Works elementwise on arrays. The boundary convention matters for the
    bearing channels: -pi maps to +pi so a wrapped value never compares
    less-or-equal against -pi.
    """
    w = a - TWO_PI * np.floor((a + np.pi) / TWO_PI)
    # floor() puts the result in [-pi, pi); fold the open edge onto +pi
    return np.where(w <= -np.pi, w + TWO_PI, w) if np.ndim(w) else (
        w + TWO_PI if w <= -np.pi else w
    )


def angle_diff(a, b):
    """Shortest signed difference a - b, wrapped to (-pi, pi]."""
    return wrap_angle(np.asarray(a) - np.asarray(b))


def rot2(theta: float) -> np.ndarray:
    """2x2 rotation matrix mapping body-frame vectors into the world frame."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def unwrap_near(target, anchor):
    """Shift ``target`` by multiples of 2*pi so it lies within pi of ``anchor``.

    Used when a wrapped heading has to enter a box constraint or a quadratic
    cost: the constraint is written on the unwrapped representative.
    """
    return anchor + angle_diff(target, anchor)
