"""Vehicle motion model and measurement models with analytic Jacobians.

State ordering is [px, py, vx, vy, heading]: position in the world frame,
velocity in the body frame, heading as the body-to-world rotation angle.
Inputs are [ax, ay, yaw_rate] with accelerations in the body frame.
"""

from __future__ import annotations

import numpy as np

from .geometry import rot2, wrap_angle

NX = 5  # state dimension
NU = 3  # input dimension

IDX_POS = slice(0, 2)
IDX_VEL = slice(2, 4)
IDX_HEADING = 4

# pose extraction q = [px, py, heading]
POSE_SELECTOR = np.zeros((3, NX))
POSE_SELECTOR[0, 0] = POSE_SELECTOR[1, 1] = 1.0
POSE_SELECTOR[2, IDX_HEADING] = 1.0


class MotionModel:
    """Discrete kinematic model x+ = x + dt * [R(th) v; a; yaw_rate]."""

    def __init__(self, dt: float):
        if dt <= 0:
            raise ValueError("sampling period must be positive")
        self.dt = float(dt)
        g = np.zeros((NX, NU))
        g[2, 0] = g[3, 1] = g[4, 2] = dt
        self._jac_u = g

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        dt = self.dt
        th = x[IDX_HEADING]
        out = x.copy()
        out[IDX_POS] = x[IDX_POS] + dt * (rot2(th) @ x[IDX_VEL])
        out[IDX_VEL] = x[IDX_VEL] + dt * u[:2]
        out[IDX_HEADING] = wrap_angle(th + dt * u[2])
        return out

    def jac_x(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        dt = self.dt
        vx, vy = x[IDX_VEL]
        c, s = np.cos(x[IDX_HEADING]), np.sin(x[IDX_HEADING])
        f = np.eye(NX)
        f[0, 2] = dt * c
        f[0, 3] = -dt * s
        f[0, 4] = dt * (-s * vx - c * vy)
        f[1, 2] = dt * s
        f[1, 3] = dt * c
        f[1, 4] = dt * (c * vx - s * vy)
        return f

    def jac_u(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self._jac_u


def pose_of(x: np.ndarray) -> np.ndarray:
    return POSE_SELECTOR @ x


def pose_rates(x: np.ndarray, yaw_rate: float = 0.0) -> np.ndarray:
    """Time derivative of the pose given the state (heading rate is an input)."""
    world_v = rot2(x[IDX_HEADING]) @ x[IDX_VEL]
    return np.array([world_v[0], world_v[1], yaw_rate])


class MeasurementModel:
    """Base: h(x), Jacobian, additive noise covariance, wrap mask."""

    tag: str
    kind: str
    wrap_mask: np.ndarray  # True on angular channels

    def __init__(self, tag: str, noise_cov: np.ndarray):
        noise_cov = np.atleast_2d(np.asarray(noise_cov, dtype=float))
        # SPD check: the filter inverts this
        if not np.allclose(noise_cov, noise_cov.T) or np.any(
            np.linalg.eigvalsh(noise_cov) <= 0
        ):
            raise ValueError(f"noise covariance for {tag} must be SPD")
        self.tag = tag
        self.noise_cov = noise_cov

    @property
    def dim(self) -> int:
        return self.noise_cov.shape[0]

    def predict(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jac(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def residual(self, z: np.ndarray, z_hat: np.ndarray) -> np.ndarray:
        r = z - z_hat
        if self.wrap_mask.any():
            r = np.where(self.wrap_mask, wrap_angle(r), r)
        return r


class GnssModel(MeasurementModel):
    """Direct position fix z = p + noise."""

    kind = "gnss"

    def __init__(self, tag: str, sigma: float):
        super().__init__(tag, np.eye(2) * sigma**2)
        self.wrap_mask = np.zeros(2, dtype=bool)
        self._jac = np.zeros((2, NX))
        self._jac[0, 0] = self._jac[1, 1] = 1.0

    def predict(self, x: np.ndarray) -> np.ndarray:
        return x[IDX_POS].copy()

    def jac(self, x: np.ndarray) -> np.ndarray:
        return self._jac


class RangeBearingModel(MeasurementModel):
    """Anchor-relative range / arrival angle / departure angle.

    z = [ ||d||, pi + atan2(d_y, d_x) - heading, atan2(d_y, d_x) - heading ]
    with d = anchor - position; both angles wrapped to (-pi, pi].
    """

    kind = "rf"

    def __init__(self, tag: str, anchor, sigma_range: float, sigma_angle: float):
        super().__init__(
            tag, np.diag([sigma_range**2, sigma_angle**2, sigma_angle**2])
        )
        self.anchor = np.asarray(anchor, dtype=float)
        self.wrap_mask = np.array([False, True, True])

    def predict(self, x: np.ndarray, shift=None) -> np.ndarray:
        d = self.anchor - x[IDX_POS]
        if shift is not None:
            d = d + shift
        rng = np.hypot(d[0], d[1])
        az = np.arctan2(d[1], d[0])
        th = x[IDX_HEADING]
        return np.array(
            [rng, wrap_angle(np.pi + az - th), wrap_angle(az - th)]
        )

    def jac(self, x: np.ndarray) -> np.ndarray:
        d = self.anchor - x[IDX_POS]
        r2 = float(d @ d)
        rng = np.sqrt(max(r2, 1e-18))  # guard the colocated singularity
        h = np.zeros((3, NX))
        h[0, 0] = -d[0] / rng
        h[0, 1] = -d[1] / rng
        # d(atan2)/d(position) carries a minus sign through d = anchor - p
        h[1, 0] = h[2, 0] = d[1] / max(r2, 1e-18)
        h[1, 1] = h[2, 1] = -d[0] / max(r2, 1e-18)
        h[1, 4] = h[2, 4] = -1.0
        return h


class CameraPoseModel(MeasurementModel):
    """Full pose fix delivered by viewpoint infrastructure."""

    kind = "camera"

    def __init__(self, tag: str, sigma_pos: float, sigma_heading: float):
        super().__init__(
            tag, np.diag([sigma_pos**2, sigma_pos**2, sigma_heading**2])
        )
        self.wrap_mask = np.array([False, False, True])

    def predict(self, x: np.ndarray) -> np.ndarray:
        return pose_of(x)

    def jac(self, x: np.ndarray) -> np.ndarray:
        return POSE_SELECTOR.copy()
