"""Scenario definition: mission geometry, sensor layout, tunables, YAML I/O.

A Scenario is a plain data container; everything the closed loop needs is
derived from it. Angle-valued fields are radians throughout (the shipped
YAML files carry the degree values in comments where that helps).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .geometry import angle_diff

GNSS_TAG = "GNSS"


# ---------------------------------------------------------------------------
# parameter blocks


@dataclass
class NoiseParams:
    """Noise intensities. Process sigmas are continuous-time intensities;
    the discrete per-step covariance is diag(sigma^2) * dt."""

    sigma_pos: float = 0.71          # m
    sigma_vel: float = 0.01          # m/s
    sigma_heading: float = 0.0415    # rad (2.38 deg)
    imu_sigma_accel: float = 3.16e-2  # m/s^2, per sample
    imu_sigma_gyro: float = 4.47e-3   # rad/s, per sample
    gnss_sigma: float = 1.0          # m
    rf_sigma_range: float = 1.0      # m
    rf_sigma_angle: float = 0.008727  # rad (0.5 deg)
    camera_sigma_pos: float = 0.1    # m
    camera_sigma_heading: float = 0.017453  # rad (1 deg)
    init_sigma: tuple = (0.5, 0.5, 0.1, 0.1, 0.0873)
    draws_enabled: bool = True       # False: zero noise draws, model covs kept
    # Fraction of the filter's process covariance injected into the true
    # dynamics. The estimator's Q absorbs linearization and discretization
    # error on top of the real disturbance; injecting all of it would put
    # the tracking floor above what bounded inputs can recover (a 0.22 m
    # per-step position kick cannot be held to 0.5 m RMS at |a| <= 2).
    # Consistency checks that assume a correct model should set 1.0.
    plant_process_scale: float = 1.0

    def process_cov(self, dt: float) -> np.ndarray:
        s = np.array(
            [self.sigma_pos, self.sigma_pos, self.sigma_vel, self.sigma_vel,
             self.sigma_heading]
        )
        return np.diag(s**2) * dt

    def imu_cov(self) -> np.ndarray:
        return np.diag(
            [self.imu_sigma_accel**2, self.imu_sigma_accel**2,
             self.imu_sigma_gyro**2]
        )

    def init_cov(self) -> np.ndarray:
        return np.diag(np.square(np.asarray(self.init_sigma, dtype=float)))


@dataclass
class DetectorParams:
    window: int = 50                 # indicator window length W
    merge_window: int = 5            # proximity votes needed to pool, W_p
    alpha_chi: float = 0.9545        # gate / region confidence
    beta: float = 0.999              # count-quantile confidence
    alpha_merge: float = 0.0995      # pooling proximity confidence
    spawn_cov_scale: float = 100.0   # child covariance inflation; must admit
                                     # a subset-consistent re-centering
                                     # through the gate in one or two steps
    outlier_mode_probs: tuple = (0.9, 0.1)
    outlier_shift: tuple = ((5.0, 0.0),)  # position shift per non-nominal mode
    alarm_mode: str = "any"          # 'any' or literal 'all' channel quantifier
    posterior_inflation: float = 1.0  # counters indicator autocorrelation
    membership_samples: int = 100    # sigma samples for viewpoint membership
    membership_frac: float = 0.95


@dataclass
class PlannerParams:
    horizon_track: int = 20          # NMPC horizon M_c
    handoff_steps: int = 5           # replan handoff / cadence M_s
    horizon_replan: int = 80         # replanner horizon M_rp (divisible by 4)
    w_track: tuple = (1.0, 1.0, 0.1)
    w_final: tuple = (5.0, 5.0, 0.5)
    w_viewpoint: tuple = (1.0, 1.0, 0.25)
    u_max: tuple = (2.0, 2.0, 1.5)   # |ax|, |ay|, |yaw rate|
    accel_max: tuple = (2.5, 2.5, 3.0)  # pose-space accel bound for replans
    loss_gain_dist: float = 1.73e-2  # per metre outside the mission disc
    loss_gain_time: float = 3.35e-3  # per step of accumulated violation
    sqp_iters: int = 5


@dataclass
class ViewPoint:
    tag: str
    pose: np.ndarray                 # (3,) x, y, heading
    half_extents: np.ndarray         # (3,) box half-widths, heading in rad
    residency_steps: int = 10

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float)
        self.half_extents = np.asarray(self.half_extents, dtype=float)


@dataclass
class Anchor:
    tag: str
    position: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)


@dataclass
class AttackSpec:
    """Constant measurement bias, active from ``onset`` onwards (never ends)."""

    targets: tuple
    onset: int
    offset: np.ndarray               # (2,) bias entering the measurement model

    def __post_init__(self):
        self.targets = tuple(self.targets)
        self.offset = np.asarray(self.offset, dtype=float)

    def active(self, step: int) -> bool:
        return step >= self.onset


@dataclass
class NominalTrajectory:
    """Sampled reference poses; treated as a closed loop (index wraps)."""

    poses: np.ndarray                # (K, 3)
    radius: float                    # mission disc radius around each pose

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=float)

    def pose(self, k: int) -> np.ndarray:
        return self.poses[k % len(self.poses)]

    def window(self, k: int, n: int) -> np.ndarray:
        idx = (k + np.arange(n)) % len(self.poses)
        return self.poses[idx]


@dataclass
class Scenario:
    name: str
    dt: float
    comm_range: float
    trajectory: NominalTrajectory
    use_gnss: bool = True
    rf_anchors: list = field(default_factory=list)
    viewpoints: list = field(default_factory=list)
    detector: DetectorParams = field(default_factory=DetectorParams)
    planner: PlannerParams = field(default_factory=PlannerParams)
    noise: NoiseParams = field(default_factory=NoiseParams)
    attacks: list = field(default_factory=list)

    def source_tags(self) -> list:
        tags = [GNSS_TAG] if self.use_gnss else []
        return tags + [a.tag for a in self.rf_anchors]

    def attacked_tags(self) -> set:
        out = set()
        for a in self.attacks:
            out.update(a.targets)
        return out


# ---------------------------------------------------------------------------
# validation


def validate_scenario(s: Scenario) -> None:
    """Raise ValueError on the first structural problem found."""

    def need(cond, msg):
        if not cond:
            raise ValueError(f"scenario {s.name!r}: {msg}")

    need(bool(s.name), "name must be non-empty")
    need(s.dt > 0, "sampling period must be positive")
    need(s.comm_range > 0, "communication range must be positive")

    tags = s.source_tags()
    need(len(tags) == len(set(tags)), "source tags must be unique")
    need(GNSS_TAG not in [a.tag for a in s.rf_anchors],
         "anchor tag collides with the GNSS tag")
    for a in s.rf_anchors:
        need(a.position.shape == (2,), f"anchor {a.tag}: position must be 2d")

    d = s.detector
    need(d.window >= 2, "detector window must be at least 2")
    need(1 <= d.merge_window <= d.window,
         "merge window must lie in [1, window]")
    for nm in ("alpha_chi", "beta", "alpha_merge", "membership_frac"):
        need(0.0 < getattr(d, nm) < 1.0, f"{nm} must be in (0, 1)")
    need(d.spawn_cov_scale > 1.0, "spawn covariance scale must exceed 1")
    probs = np.asarray(d.outlier_mode_probs, dtype=float)
    need(probs.size >= 1 and np.all(probs >= 0),
         "mixture mode probabilities must be non-negative")
    need(abs(probs.sum() - 1.0) < 1e-9,
         "mixture mode probabilities must sum to 1")
    need(probs[0] > 0, "nominal mixture mode must have positive mass")
    need(len(d.outlier_shift) == probs.size - 1,
         "need one outlier shift per non-nominal mixture mode")
    need(d.alarm_mode in ("any", "all"), "alarm mode must be 'any' or 'all'")
    need(d.posterior_inflation >= 1.0, "posterior inflation must be >= 1")
    need(d.membership_samples >= 20, "membership needs at least 20 samples")

    p = s.planner
    need(p.horizon_track >= 2, "tracking horizon must be at least 2")
    need(1 <= p.handoff_steps <= p.horizon_track,
         "handoff must lie within the tracking horizon")
    need(p.horizon_replan >= 8 and p.horizon_replan % 4 == 0,
         "replan horizon must be >= 8 and divisible by 4")
    need(np.all(np.asarray(p.u_max) > 0), "input limits must be positive")
    need(np.all(np.asarray(p.accel_max) > 0), "accel limits must be positive")
    need(np.all(np.asarray(p.w_track) >= 0) and np.any(np.asarray(p.w_track) > 0),
         "tracking weights must be non-negative with at least one positive")
    need(p.sqp_iters >= 1, "need at least one SQP iteration")

    n = s.noise
    for nm in ("gnss_sigma", "rf_sigma_range", "rf_sigma_angle",
               "camera_sigma_pos", "camera_sigma_heading"):
        need(getattr(n, nm) > 0, f"{nm} must be positive (covariances are SPD)")
    need(np.all(np.asarray(n.init_sigma) >= 0) and len(n.init_sigma) == 5,
         "init sigma must be 5 non-negative values")

    t = s.trajectory
    need(t.poses.ndim == 2 and t.poses.shape[1] == 3 and len(t.poses) >= 2,
         "trajectory needs at least two (x, y, heading) poses")
    need(t.radius > 0, "mission disc radius must be positive")

    vtags = [v.tag for v in s.viewpoints]
    need(len(vtags) == len(set(vtags)), "viewpoint tags must be unique")
    for v in s.viewpoints:
        need(v.pose.shape == (3,) and v.half_extents.shape == (3,),
             f"viewpoint {v.tag}: pose and half extents must be 3d")
        need(np.all(v.half_extents > 0),
             f"viewpoint {v.tag}: half extents must be positive")
        need(v.residency_steps >= 1,
             f"viewpoint {v.tag}: residency must be at least one step")

    known = set(tags)
    for a in s.attacks:
        need(a.onset >= 0, "attack onset must be non-negative")
        need(len(a.targets) > 0, "attack must name at least one target")
        for tg in a.targets:
            need(tg in known, f"attack target {tg!r} is not a source tag")
        need(a.offset.shape == (2,) and np.all(np.isfinite(a.offset)),
             "attack offset must be a finite 2-vector")


# ---------------------------------------------------------------------------
# viewpoint region


def viewpoint_contains(vp: ViewPoint, pose) -> bool:
    """Closed axis-aligned box membership; heading compared on the circle."""
    pose = np.asarray(pose, dtype=float)
    dx = np.abs(pose[:2] - vp.pose[:2])
    if np.any(dx > vp.half_extents[:2]):
        return False
    return bool(abs(angle_diff(pose[2], vp.pose[2])) <= vp.half_extents[2])


# ---------------------------------------------------------------------------
# nominal trajectory generators


def circle_trajectory(center, radius, speed, dt, steps,
                      mission_radius=5.0) -> NominalTrajectory:
    """Counter-clockwise circle sampled at the vehicle speed."""
    if radius <= 0 or speed <= 0 or steps < 2:
        raise ValueError("circle needs positive radius, speed and >= 2 steps")
    center = np.asarray(center, dtype=float)
    omega = speed / radius
    t = np.arange(steps) * dt
    ang = omega * t
    poses = np.empty((steps, 3))
    poses[:, 0] = center[0] + radius * np.cos(ang)
    poses[:, 1] = center[1] + radius * np.sin(ang)
    poses[:, 2] = np.mod(ang + np.pi / 2 + np.pi, 2 * np.pi) - np.pi
    return NominalTrajectory(poses=poses, radius=mission_radius)


def polyline_trajectory(vertices, speed, dt, steps,
                        mission_radius=5.0) -> NominalTrajectory:
    """Closed polygonal patrol loop resampled at the vehicle speed."""
    verts = np.asarray(vertices, dtype=float)
    if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
        raise ValueError("polyline loop needs at least three 2d vertices")
    loop = np.vstack([verts, verts[:1]])
    seg = np.diff(loop, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    if np.any(seg_len <= 0):
        raise ValueError("polyline has a zero-length segment")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    arc = np.mod(np.arange(steps) * speed * dt, total)
    idx = np.searchsorted(cum, arc, side="right") - 1
    idx = np.clip(idx, 0, len(seg_len) - 1)
    frac = (arc - cum[idx]) / seg_len[idx]
    poses = np.empty((steps, 3))
    poses[:, :2] = loop[idx] + seg[idx] * frac[:, None]
    poses[:, 2] = np.arctan2(seg[idx, 1], seg[idx, 0])
    return NominalTrajectory(poses=poses, radius=mission_radius)


# ---------------------------------------------------------------------------
# YAML serialization


def _traj_from_dict(d: dict, dt: float) -> NominalTrajectory:
    kind = d.get("kind", "explicit")
    mission_radius = float(d.get("mission_radius", 5.0))
    if kind == "circle":
        return circle_trajectory(
            d["center"], float(d["radius"]), float(d["speed"]), dt,
            int(d["steps"]), mission_radius,
        )
    if kind == "polyline":
        return polyline_trajectory(
            d["vertices"], float(d["speed"]), dt, int(d["steps"]),
            mission_radius,
        )
    if kind == "explicit":
        return NominalTrajectory(
            poses=np.asarray(d["poses"], dtype=float), radius=mission_radius
        )
    raise ValueError(f"unknown trajectory kind {kind!r}")


def _params_from_dict(cls, d: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(d) - known
    if extra:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    kwargs = dict(d)
    for key, val in kwargs.items():
        if isinstance(val, list):
            kwargs[key] = tuple(
                tuple(v) if isinstance(v, list) else v for v in val
            )
    return cls(**kwargs)


def scenario_from_dict(raw: dict) -> Scenario:
    dt = float(raw["dt"])
    s = Scenario(
        name=str(raw["name"]),
        dt=dt,
        comm_range=float(raw["comm_range"]),
        trajectory=_traj_from_dict(raw["trajectory"], dt),
        use_gnss=bool(raw.get("gnss", True)),
        rf_anchors=[
            Anchor(tag=str(a["tag"]), position=a["position"])
            for a in raw.get("rf_anchors", [])
        ],
        viewpoints=[
            ViewPoint(
                tag=str(v["tag"]),
                pose=v["pose"],
                half_extents=v["half_extents"],
                residency_steps=int(v.get("residency_steps", 10)),
            )
            for v in raw.get("viewpoints", [])
        ],
        detector=_params_from_dict(DetectorParams, raw.get("detector", {})),
        planner=_params_from_dict(PlannerParams, raw.get("planner", {})),
        noise=_params_from_dict(NoiseParams, raw.get("noise", {})),
        attacks=[
            AttackSpec(
                targets=[str(t) for t in a["targets"]],
                onset=int(a["onset"]),
                offset=a["offset"],
            )
            for a in raw.get("attacks", [])
        ],
    )
    validate_scenario(s)
    return s


def load_scenario(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: scenario file must hold a mapping")
    return scenario_from_dict(raw)


def scenario_to_dict(s: Scenario) -> dict:
    def plain(x):
        if isinstance(x, np.ndarray):
            return x.tolist()
        if isinstance(x, tuple):
            return [plain(v) for v in x]
        return x

    def block(params) -> dict:
        return {f.name: plain(getattr(params, f.name))
                for f in dataclasses.fields(params)}

    return {
        "name": s.name,
        "dt": s.dt,
        "comm_range": s.comm_range,
        "gnss": s.use_gnss,
        "rf_anchors": [
            {"tag": a.tag, "position": a.position.tolist()}
            for a in s.rf_anchors
        ],
        "viewpoints": [
            {
                "tag": v.tag,
                "pose": v.pose.tolist(),
                "half_extents": v.half_extents.tolist(),
                "residency_steps": v.residency_steps,
            }
            for v in s.viewpoints
        ],
        "trajectory": {
            "kind": "explicit",
            "poses": s.trajectory.poses.tolist(),
            "mission_radius": s.trajectory.radius,
        },
        "detector": block(s.detector),
        "planner": block(s.planner),
        "noise": block(s.noise),
        "attacks": [
            {
                "targets": list(a.targets),
                "onset": a.onset,
                "offset": a.offset.tolist(),
            }
            for a in s.attacks
        ],
    }


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(
        yaml.safe_dump(scenario_to_dict(s), sort_keys=False), encoding="utf-8"
    )


def scenarios_equal(a: Scenario, b: Scenario) -> bool:
    """Structural equality (numpy-aware); used by round-trip checks."""
    return scenario_to_dict(a) == scenario_to_dict(b)
