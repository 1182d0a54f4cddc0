"""Ground-truth simulation: dynamics, sensors, natural outliers, attacks.

The plant integrates the true input; the estimator only ever sees the
IMU-corrupted copy. Measurement biases (the attacker's epsilon and the
non-nominal mixture modes) enter the models exactly where the sensor
geometry puts them: inside the relative-position vector for RF, in
measurement space for GNSS.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import wrap_angle
from .models import (
    NX,
    CameraPoseModel,
    GnssModel,
    MotionModel,
    RangeBearingModel,
    pose_of,
)
from .world import GNSS_TAG, Scenario, viewpoint_contains


@dataclass
class Measurement:
    tag: str
    kind: str          # 'gnss' | 'rf' | 'camera'
    z: np.ndarray


def build_sensors(scenario: Scenario) -> dict:
    """Measurement models keyed by tag (camera under each viewpoint tag)."""
    n = scenario.noise
    sensors = {}
    if scenario.use_gnss:
        sensors[GNSS_TAG] = GnssModel(GNSS_TAG, n.gnss_sigma)
    for a in scenario.rf_anchors:
        sensors[a.tag] = RangeBearingModel(
            a.tag, a.position, n.rf_sigma_range, n.rf_sigma_angle
        )
    for v in scenario.viewpoints:
        sensors[v.tag] = CameraPoseModel(
            v.tag, n.camera_sigma_pos, n.camera_sigma_heading
        )
    return sensors


def step_dynamics(x, u, motion: MotionModel, process_cov=None, rng=None):
    """One true-state step; optionally draws additive process noise."""
    out = motion.step(np.asarray(x, dtype=float), np.asarray(u, dtype=float))
    if rng is not None and process_cov is not None:
        out = out + rng.multivariate_normal(np.zeros(NX), process_cov)
    return out


def measure_gnss(model: GnssModel, x_true, eps=None, rng=None):
    z = model.predict(np.asarray(x_true, dtype=float))
    if eps is not None:
        z = z + np.asarray(eps, dtype=float)
    if rng is not None:
        z = z + rng.normal(0.0, np.sqrt(np.diag(model.noise_cov)))
    return z


def measure_rf(model: RangeBearingModel, x_true, eps=None, rng=None):
    z = model.predict(np.asarray(x_true, dtype=float), shift=eps)
    if rng is not None:
        z = z + rng.normal(0.0, np.sqrt(np.diag(model.noise_cov)))
        z[1] = wrap_angle(z[1])
        z[2] = wrap_angle(z[2])
    return z


def measure_camera(model: CameraPoseModel, x_true, viewpoint, rng=None):
    """Pose fix, emitted only while the true pose sits inside the box."""
    if not viewpoint_contains(viewpoint, pose_of(np.asarray(x_true, float))):
        return None
    z = model.predict(np.asarray(x_true, dtype=float))
    if rng is not None:
        z = z + rng.normal(0.0, np.sqrt(np.diag(model.noise_cov)))
    return z


class Plant:
    """Stateful truth simulator bound to one scenario and one RNG stream."""

    def __init__(self, scenario: Scenario, rng: np.random.Generator):
        self.scenario = scenario
        self.rng = rng
        self.motion = MotionModel(scenario.dt)
        self.sensors = build_sensors(scenario)
        self.process_cov = (scenario.noise.process_cov(scenario.dt)
                            * scenario.noise.plant_process_scale)
        self._mode_cum = np.cumsum(scenario.detector.outlier_mode_probs)
        self._shifts = [np.asarray(sh, dtype=float)
                        for sh in scenario.detector.outlier_shift]
        self._attacks_by_tag: dict[str, list] = {}
        for atk in scenario.attacks:
            for tag in atk.targets:
                self._attacks_by_tag.setdefault(tag, []).append(atk)

        traj = scenario.trajectory
        p0, p1 = traj.poses[0], traj.poses[1]
        speed = float(np.hypot(*(p1[:2] - p0[:2]))) / scenario.dt
        self.state = np.array([p0[0], p0[1], speed, 0.0, p0[2]])
        self.step_index = 0

    # -- noise plumbing ----------------------------------------------------

    def _noise_rng(self):
        return self.rng if self.scenario.noise.draws_enabled else None

    def _draw_mode_shift(self) -> np.ndarray | None:
        """Mixture mode for one measurement; None means the nominal mode."""
        if len(self._mode_cum) == 1:
            return None
        if not self.scenario.noise.draws_enabled:
            return None
        mode = int(np.searchsorted(self._mode_cum, self.rng.random(),
                                   side="right"))
        mode = min(mode, len(self._mode_cum) - 1)
        return None if mode == 0 else self._shifts[mode - 1]

    def _attack_offset(self, tag: str) -> np.ndarray | None:
        total = None
        for atk in self._attacks_by_tag.get(tag, ()):
            if atk.active(self.step_index):
                total = atk.offset if total is None else total + atk.offset
        return total

    # -- simulation --------------------------------------------------------

    def advance(self, u_true) -> np.ndarray:
        """Integrate the true input; returns the new true state."""
        self.state = step_dynamics(
            self.state, u_true, self.motion, self.process_cov,
            self._noise_rng(),
        )
        self.step_index += 1
        return self.state

    def measure_imu(self, u_true) -> np.ndarray:
        u = np.asarray(u_true, dtype=float)
        if not self.scenario.noise.draws_enabled:
            return u.copy()
        n = self.scenario.noise
        return u + self.rng.normal(
            0.0, [n.imu_sigma_accel, n.imu_sigma_accel, n.imu_sigma_gyro]
        )

    def collect_measurements(self) -> list[Measurement]:
        """All navigation + camera measurements at the current true state.

        Deterministic emission order: GNSS, anchors sorted by tag, then
        viewpoint cameras sorted by tag.
        """
        out = []
        rng = self._noise_rng()
        pos = self.state[:2]
        if self.scenario.use_gnss:
            model = self.sensors[GNSS_TAG]
            eps = self._attack_offset(GNSS_TAG)
            shift = self._draw_mode_shift()
            if shift is not None:
                eps = shift if eps is None else eps + shift
            out.append(Measurement(GNSS_TAG, "gnss",
                                   measure_gnss(model, self.state, eps, rng)))
        for anchor in sorted(self.scenario.rf_anchors, key=lambda a: a.tag):
            if np.hypot(*(anchor.position - pos)) > self.scenario.comm_range:
                continue
            model = self.sensors[anchor.tag]
            eps = self._attack_offset(anchor.tag)
            shift = self._draw_mode_shift()
            if shift is not None:
                eps = shift if eps is None else eps + shift
            out.append(Measurement(anchor.tag, "rf",
                                   measure_rf(model, self.state, eps, rng)))
        for vp in sorted(self.scenario.viewpoints, key=lambda v: v.tag):
            z = measure_camera(self.sensors[vp.tag], self.state, vp, rng)
            if z is not None:
                out.append(Measurement(vp.tag, "camera", z))
        return out
