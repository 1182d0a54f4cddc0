"""Built-in scenarios.

Two missions cover the behaviors worth exercising end to end:

* ``circle-sweep``: a wide circular transect with four RF anchors and a
  coordinated GNSS+RF bias. Used for detector operating-point sweeps, so its
  attack offsets are unit directions meant to be scaled per sweep cell.
* ``patrol-loop``: a stadium-shaped patrol with a larger RF constellation
  (five anchors permanently out of range), three camera viewpoints, and a
  fixed 3 m coordinated bias. Exercises the full isolate-and-recover path.

The attacker shifts GNSS by +delta in world coordinates and the captured RF
anchors by -delta inside the relative-position vector, so every corrupted
source tells the same consistent lie about the vehicle position.
"""

from __future__ import annotations

import numpy as np

from .world import (Anchor, AttackSpec, DetectorParams, NoiseParams,
                    NominalTrajectory, PlannerParams, Scenario, ViewPoint,
                    circle_trajectory, validate_scenario)


def stadium_trajectory(half_length: float, radius: float, speed: float,
                       dt: float, mission_radius: float) -> NominalTrajectory:
    """Closed stadium loop (two straights, two semicircles), CCW.

    Sampled at uniform arc length with exact closure; the realized speed is
    the closest value to ``speed`` that divides the perimeter evenly.
    """
    if half_length <= 0 or radius <= 0 or speed <= 0:
        raise ValueError("stadium needs positive dimensions and speed")
    straight = 2.0 * half_length
    perimeter = 2.0 * straight + 2.0 * np.pi * radius
    n = int(round(perimeter / (speed * dt)))
    s = np.arange(n) * perimeter / n

    poses = np.empty((n, 3))
    for i, arc in enumerate(s):
        if arc < straight:
            poses[i] = (-half_length + arc, -radius, 0.0)
        elif arc < straight + np.pi * radius:
            phi = (arc - straight) / radius - np.pi / 2
            poses[i] = (half_length + radius * np.cos(phi),
                        radius * np.sin(phi), phi + np.pi / 2)
        elif arc < 2 * straight + np.pi * radius:
            d = arc - straight - np.pi * radius
            poses[i] = (half_length - d, radius, np.pi)
        else:
            phi = (arc - 2 * straight - np.pi * radius) / radius + np.pi / 2
            poses[i] = (-half_length + radius * np.cos(phi),
                        radius * np.sin(phi), phi + np.pi / 2)
    poses[:, 2] = np.mod(poses[:, 2] + np.pi, 2 * np.pi) - np.pi
    return NominalTrajectory(poses=poses, radius=mission_radius)


def circle_sweep(bias: float = 1.0) -> Scenario:
    """Circular transect for operating-point sweeps (unit-direction attack)."""
    trajectory = circle_trajectory(
        center=(0.0, 0.0), radius=20.0, speed=1.5, dt=0.1, steps=838,
        mission_radius=2.0,
    )
    anchors = [
        Anchor("RF0", (45.0, 0.0)),
        Anchor("RF1", (0.0, 45.0)),
        Anchor("RF2", (-45.0, 0.0)),
        Anchor("RF3", (0.0, -45.0)),
    ]
    viewpoints = [
        ViewPoint("VP1", (0.0, 18.5, np.pi), (2.0, 2.0, 0.7)),
        ViewPoint("VP2", (0.0, -18.5, 0.0), (2.0, 2.0, 0.7)),
    ]
    attacks = [
        AttackSpec(("GNSS",), onset=20, offset=(bias, 0.0)),
        AttackSpec(("RF0", "RF1"), onset=20, offset=(-bias, 0.0)),
    ]
    scenario = Scenario(
        name="circle-sweep", dt=0.1, comm_range=70.0, trajectory=trajectory,
        rf_anchors=anchors, viewpoints=viewpoints,
        # the filter's process covariance budgets for linearization and
        # discretization error on top of the physical disturbance; the
        # plant injects only the physical share (a full 0.22 m per-step
        # position kick cannot be tracked to 0.5 m RMS at |a| <= 2)
        noise=NoiseParams(plant_process_scale=0.1),
        detector=DetectorParams(), planner=PlannerParams(), attacks=attacks,
    )
    validate_scenario(scenario)
    return scenario


def patrol_loop(bias: float = 3.0) -> Scenario:
    """Stadium patrol with out-of-range anchors and three viewpoints."""
    trajectory = stadium_trajectory(
        half_length=7.5, radius=6.0, speed=1.5, dt=0.1, mission_radius=2.0,
    )
    anchors = [
        Anchor("RF0", (20.0, 20.0)),
        Anchor("RF1", (-20.0, 20.0)),
        Anchor("RF2", (0.0, -25.0)),
        # beyond communication range for the whole loop
        Anchor("RF3", (150.0, 0.0)),
        Anchor("RF4", (105.0, 105.0)),
        Anchor("RF5", (0.0, 150.0)),
        Anchor("RF6", (-105.0, 105.0)),
        Anchor("RF7", (-150.0, 0.0)),
    ]
    viewpoints = [
        ViewPoint("VP1", (0.0, -4.5, 0.0), (2.0, 2.0, 0.7)),
        ViewPoint("VP2", (11.5, 0.0, np.pi / 2), (2.0, 2.0, 0.7)),
        ViewPoint("VP3", (0.0, 4.5, np.pi), (2.0, 2.0, 0.7)),
    ]
    attacks = [
        AttackSpec(("GNSS",), onset=20, offset=(bias, 0.0)),
        AttackSpec(("RF1", "RF3", "RF4", "RF5", "RF6", "RF7"),
                   onset=20, offset=(-bias, 0.0)),
    ]
    scenario = Scenario(
        name="patrol-loop", dt=0.1, comm_range=60.0, trajectory=trajectory,
        rf_anchors=anchors, viewpoints=viewpoints,
        # same physical-share process injection as the sweep scenario
        noise=NoiseParams(plant_process_scale=0.1),
        detector=DetectorParams(),
        planner=PlannerParams(handoff_steps=10),
        attacks=attacks,
    )
    validate_scenario(scenario)
    return scenario


BUILDERS = {
    "circle-sweep": circle_sweep,
    "patrol-loop": patrol_loop,
}


def build(name: str, **kwargs) -> Scenario:
    try:
        builder = BUILDERS[name]
    except KeyError:
        raise ValueError(
            f"unknown scenario {name!r}; choose from {sorted(BUILDERS)}"
        ) from None
    return builder(**kwargs)
