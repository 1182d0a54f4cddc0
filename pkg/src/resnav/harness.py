"""Closed-loop simulation runner, Monte-Carlo sweeps, and CSV emission.

One `run_scenario` call wires the full loop: controller, truth plant,
measurement collection, filter bank, detection, supervisor, and (in
mitigation) viewpoint re-planning. Sweeps fan realizations over a parameter
grid with per-realization seeding that is independent of scheduling order,
so results are reproducible at any parallelism degree.
"""

from __future__ import annotations

import csv
import dataclasses
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .control import propagate_hypotheses, solve_nmpc
from .estimation import GaussianBelief, HypothesisBank, nees
from .mitigation import (NoPlanError, PerformanceTracker, ReplanCandidate,
                         ReplanChoice, select_replan)
from .models import CameraPoseModel, pose_rates
from .plant import Plant
from .supervisor import Mode, Supervisor
from .world import GNSS_TAG, Scenario, validate_scenario


@dataclass
class RunConfig:
    steps: int = 350
    stop_after: str | None = None    # 'diagnosis' | 'mitigation' | None


@dataclass(eq=False)
class ActivePlan:
    choice: ReplanChoice
    handoff: int                     # absolute step of the first grid point

    def expired(self, step: int) -> bool:
        return step > self.handoff + self.choice.plan.trajectory.horizon


@dataclass(eq=False)
class RunRecord:
    scenario: str
    seed: object
    attack_present: bool
    attacked: set
    steps_run: int = 0
    seen_tags: set = field(default_factory=set)
    modes: list = field(default_factory=list)
    member_counts: list = field(default_factory=list)
    alarm_counts: list = field(default_factory=list)
    true_poses: list = field(default_factory=list)
    est_poses: list = field(default_factory=list)
    nees_values: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    mode_changes: list = field(default_factory=list)
    verdicts: list = field(default_factory=list)
    plans: list = field(default_factory=list)
    blacklist: set = field(default_factory=set)
    partition_at_mitigation: list | None = None
    mission_holds: int = 0
    failed: str | None = None

    @property
    def entered_diagnosis(self) -> bool:
        return any(c.target is Mode.DIAGNOSIS for c in self.mode_changes)

    @property
    def entered_mitigation(self) -> bool:
        return any(c.target is Mode.MITIGATION for c in self.mode_changes)

    @property
    def recovered_operation(self) -> bool:
        return any(c.trigger == "trans4" for c in self.mode_changes)

    @property
    def false_positive(self) -> bool:
        return (not self.attack_present) and self.entered_diagnosis

    @property
    def true_positive(self) -> bool:
        """Attack present, mitigation reached, attacked/clean kept apart."""
        if not (self.attack_present and self.entered_mitigation):
            return False
        return partition_separates(self.partition_at_mitigation or [],
                                   self.attacked)

    def rms_position_error(self) -> float:
        t = np.asarray(self.true_poses)
        e = np.asarray(self.est_poses)
        return float(np.sqrt(np.mean(
            np.sum((t[:, :2] - e[:, :2]) ** 2, axis=1)
        )))


def partition_separates(supports, attacked: set) -> bool:
    """No support mixes attacked and clean tags (and both sides appear)."""
    if not supports:
        return False
    pure = all(
        set(s) <= attacked or not (set(s) & attacked) for s in supports
    )
    sides = {bool(set(s) & attacked) for s in supports}
    return pure and len(sides) == 2


def run_scenario(scenario: Scenario, seed,
                 config: RunConfig | None = None) -> RunRecord:
    """Simulate one realization; deterministic in (scenario, seed)."""
    validate_scenario(scenario)
    config = config or RunConfig()
    record = RunRecord(
        scenario=scenario.name, seed=seed,
        attack_present=any(np.any(a.offset != 0.0) for a in scenario.attacks),
        attacked=scenario.attacked_tags(),
    )
    plant_ss, init_ss, member_ss = np.random.SeedSequence(seed).spawn(3)
    plant = Plant(scenario, np.random.default_rng(plant_ss))
    motion = plant.motion
    nav_tags = set(scenario.source_tags())
    nav_models = {t: m for t, m in plant.sensors.items() if t in nav_tags}
    cam_models = {t: m for t, m in plant.sensors.items()
                  if isinstance(m, CameraPoseModel)}

    init_cov = scenario.noise.init_cov()
    est0 = plant.state.copy()
    if scenario.noise.draws_enabled:
        rng0 = np.random.default_rng(init_ss)
        est0 = est0 + np.linalg.cholesky(init_cov) @ rng0.standard_normal(5)
    present = _visible_tags(scenario, plant.state[:2])
    bank = HypothesisBank(
        GaussianBelief(est0, init_cov), present,
        motion=motion, sensors=nav_models, params=scenario.detector,
        process_cov=scenario.noise.process_cov(scenario.dt),
        imu_cov=scenario.noise.imu_cov(),
    )
    sup = Supervisor(scenario.detector, cam_models,
                     np.random.default_rng(member_ss))

    planner = scenario.planner
    horizon = planner.horizon_track
    trackers: dict[int, PerformanceTracker] = {}
    active: ActivePlan | None = None
    last_event = 0
    warm = None
    _log_step(record, sup, bank, plant.state, trackers)

    try:
        for k in range(config.steps):
            if sup.mode is Mode.MITIGATION and active is not None:
                planned = bank.get(active.choice.hid)
                x_init = (planned.belief.mean if planned is not None
                          else bank.operational.belief.mean)
            else:
                x_init = bank.operational.belief.mean
            refs = _reference_window(scenario, active, k, horizon + 1)
            sol = solve_nmpc(x_init, refs, motion, planner, warm)
            warm = sol.shifted()
            u = sol.inputs[0]

            plant.advance(u)
            step = plant.step_index
            u_imu = plant.measure_imu(u)
            nav, cams = {}, {}
            for m in plant.collect_measurements():
                (cams if m.kind == "camera" else nav)[m.tag] = m.z
            record.seen_tags |= nav.keys()

            bank.sync_sources(set(nav), sup.allow_growth, step)
            bank.step(u_imu, nav, step, sup.allow_spawn)

            nominal = scenario.trajectory.pose(step)
            _update_trackers(trackers, bank, nominal, scenario)

            if sup.mode is Mode.MITIGATION:
                verdict = sup.adjudicate(bank, cams, step)
                if verdict is not None:
                    active = None
                    last_event = step
                if active is not None and active.expired(step) \
                        and sup.adjudication is not None \
                        and sup.adjudication.opened_at is None:
                    # plan ran out before the box was ever reached
                    sup.adjudication = None
                    active = None
                    last_event = step
            change = sup.evaluate_transitions(bank, set(nav), step)
            if change is not None:
                last_event = step
                if change.target is Mode.MITIGATION:
                    record.partition_at_mitigation = bank.supports()
                else:
                    active = None
                if change.trigger == "trans1" \
                        and config.stop_after == "diagnosis":
                    break
                if change.trigger == "trans2" \
                        and config.stop_after == "mitigation":
                    break
            if (sup.mode is Mode.MITIGATION and active is None
                    and sup.adjudication is None
                    and step - last_event >= planner.handoff_steps):
                active = _replan(scenario, bank, sup, sol, motion,
                                 trackers, step, record)
                if active is None:
                    last_event = step

            _log_step(record, sup, bank, plant.state, trackers)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        record.failed = f"{type(exc).__name__}: {exc}"

    record.blacklist = set(bank.blacklist)
    record.steps_run = len(record.modes) - 1
    record.mode_changes = sup.mode_log
    record.verdicts = sup.verdicts
    return record


def _visible_tags(scenario: Scenario, position) -> set:
    tags = {a.tag for a in scenario.rf_anchors
            if np.hypot(*(a.position - position)) <= scenario.comm_range}
    if scenario.use_gnss:
        tags.add(GNSS_TAG)
    return tags


def _reference_window(scenario: Scenario, active: ActivePlan | None,
                      k: int, n: int) -> np.ndarray:
    refs = scenario.trajectory.window(k, n)
    if active is None:
        return refs
    refs = refs.copy()
    traj = active.choice.plan.trajectory
    idx = k + np.arange(n)
    inside = (idx >= active.handoff) & (idx <= active.handoff + traj.horizon)
    if np.any(inside):
        refs[inside] = traj.poses[idx[inside] - active.handoff]
    return refs


def _update_trackers(trackers, bank, nominal, scenario) -> None:
    radius = scenario.trajectory.radius
    live = {0: bank.operational}
    live.update({h.hid: h for h in bank.members})
    for hid in list(trackers):
        if hid not in live:
            del trackers[hid]
    for hid, h in live.items():
        tracker = trackers.setdefault(hid, PerformanceTracker())
        tracker.update(h.belief.mean[:2], nominal[:2], radius,
                       scenario.planner)


def _replan(scenario, bank, sup, sol, motion, trackers, step,
            record) -> ActivePlan | None:
    planner = scenario.planner
    lead = planner.handoff_steps
    inputs = sol.inputs[:lead]
    states = propagate_hypotheses(
        [h.belief.mean for h in bank.members], inputs, motion
    )[:, -1, :]
    yaw_rate = float(inputs[-1][2]) if len(inputs) else 0.0
    candidates = [
        ReplanCandidate(
            hid=h.hid, order_key=tuple(sorted(h.support)),
            pose=states[i][[0, 1, 4]],
            velocity=pose_rates(states[i], yaw_rate),
            violation_time=trackers.get(
                h.hid, PerformanceTracker()).violation_time,
        )
        for i, h in enumerate(bank.members)
    ]
    handoff = step + lead
    nominal = scenario.trajectory.window(handoff,
                                         planner.horizon_replan + 1)
    try:
        choice = select_replan(candidates, scenario.viewpoints, nominal,
                               planner, scenario.dt,
                               scenario.trajectory.radius)
    except NoPlanError:
        record.mission_holds += 1
        return None
    record.plans.append(choice)
    sup.begin_adjudication(choice.hid, choice.viewpoint)
    return ActivePlan(choice, handoff)


def _log_step(record: RunRecord, sup: Supervisor,
              bank: HypothesisBank, true_state, trackers) -> None:
    record.modes.append(sup.mode.value)
    record.member_counts.append(len(bank.members))
    record.alarm_counts.append(sum(h.alarm for h in bank.members))
    record.true_poses.append(true_state[[0, 1, 4]].copy())
    record.est_poses.append(bank.operational.belief.mean[[0, 1, 4]].copy())
    record.nees_values.append(nees(bank.operational.belief, true_state))
    op = trackers.get(0)
    record.losses.append(op.loss if op is not None else 0.0)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepSpec:
    scenario: Scenario               # attacks hold unit offsets, scaled below
    alpha_chi_grid: tuple
    beta_grid: tuple
    alpha_merge_grid: tuple
    bias_grid: tuple                 # metres; 0 rows measure FPR
    realizations: int = 30
    master_seed: int = 0
    steps: int = 350
    jobs: int = 1

    def __post_init__(self):
        for name in ("alpha_chi_grid", "beta_grid", "alpha_merge_grid",
                     "bias_grid"):
            if not len(getattr(self, name)):
                raise ValueError(f"{name} must be non-empty")
        if self.realizations < 1:
            raise ValueError("realizations must be at least 1")


def scale_attacks(scenario: Scenario, bias: float) -> Scenario:
    """Scenario copy whose attack offsets are unit directions times ``bias``."""
    attacks = [] if bias == 0.0 else [
        dataclasses.replace(a, offset=a.offset * bias)
        for a in scenario.attacks
    ]
    return dataclasses.replace(scenario, attacks=attacks)


def sweep_cells(spec: SweepSpec) -> list:
    """Deterministic cell enumeration: detector grid x bias grid."""
    cells = []
    for alpha_chi in spec.alpha_chi_grid:
        for beta in spec.beta_grid:
            for alpha_merge in spec.alpha_merge_grid:
                for bias in spec.bias_grid:
                    cells.append((alpha_chi, beta, alpha_merge, float(bias)))
    return cells


def _cell_scenario(spec: SweepSpec, cell) -> Scenario:
    alpha_chi, beta, alpha_merge, bias = cell
    scen = scale_attacks(spec.scenario, bias)
    detector = dataclasses.replace(
        scen.detector, alpha_chi=alpha_chi, beta=beta,
        alpha_merge=alpha_merge,
    )
    return dataclasses.replace(scen, detector=detector)


def _run_cell_realization(args) -> tuple:
    spec, cell_index, realization = args
    cell = sweep_cells(spec)[cell_index]
    scenario = _cell_scenario(spec, cell)
    stop = "diagnosis" if cell[3] == 0.0 else "mitigation"
    rec = run_scenario(
        scenario, (spec.master_seed, cell_index, realization),
        RunConfig(steps=spec.steps, stop_after=stop),
    )
    if rec.failed is not None:
        return cell_index, None
    hit = rec.false_positive if cell[3] == 0.0 else rec.true_positive
    return cell_index, bool(hit)


def run_sweep(spec: SweepSpec) -> list[dict]:
    """FPR/TPR table over the grid; row order and content are seed-stable."""
    cells = sweep_cells(spec)
    tasks = [(spec, ci, r) for ci in range(len(cells))
             for r in range(spec.realizations)]
    if spec.jobs > 1:
        with multiprocessing.Pool(spec.jobs) as pool:
            outcomes = pool.map(_run_cell_realization, tasks,
                                chunksize=max(1, len(tasks) // spec.jobs))
    else:
        outcomes = [_run_cell_realization(t) for t in tasks]

    hits = {ci: 0 for ci in range(len(cells))}
    done = {ci: 0 for ci in range(len(cells))}
    failures = {ci: 0 for ci in range(len(cells))}
    for ci, hit in outcomes:
        if hit is None:
            failures[ci] += 1
            continue
        done[ci] += 1
        hits[ci] += int(hit)
    rows = []
    for ci, cell in enumerate(cells):
        alpha_chi, beta, alpha_merge, bias = cell
        n = done[ci]
        rate = hits[ci] / n if n else float("nan")
        rows.append({
            "alpha_chi": alpha_chi, "beta": beta,
            "alpha_merge": alpha_merge, "bias_m": bias,
            "realizations": n, "failures": failures[ci],
            "false_positives": hits[ci] if bias == 0.0 else "",
            "true_positives": hits[ci] if bias > 0.0 else "",
            "fpr": rate if bias == 0.0 else "",
            "tpr": rate if bias > 0.0 else "",
        })
    return rows


# ---------------------------------------------------------------------------
# CSV emission


SWEEP_COLUMNS = ["alpha_chi", "beta", "alpha_merge", "bias_m",
                 "realizations", "failures", "false_positives",
                 "true_positives", "fpr", "tpr"]


def write_sweep_csv(rows: list[dict], path) -> None:
    if not rows:
        raise ValueError("refusing to write an empty sweep table")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def write_run_csvs(record: RunRecord, out_dir) -> dict:
    """Run log, mode changes, verdicts, and plan samples; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"run_log": out / "run_log.csv",
             "mode_changes": out / "mode_changes.csv",
             "verdicts": out / "verdicts.csv",
             "plans": out / "plan_samples.csv"}

    with open(paths["run_log"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mode", "members", "alarms", "true_x", "true_y",
                    "true_heading", "est_x", "est_y", "est_heading", "nees",
                    "loss"])
        for i in range(len(record.modes)):
            t = record.true_poses[i]
            e = record.est_poses[i]
            w.writerow(
                [i, record.modes[i], record.member_counts[i],
                 record.alarm_counts[i], f"{t[0]:.6f}", f"{t[1]:.6f}",
                 f"{t[2]:.6f}", f"{e[0]:.6f}", f"{e[1]:.6f}", f"{e[2]:.6f}",
                 f"{record.nees_values[i]:.6f}", f"{record.losses[i]:.6f}"]
            )

    with open(paths["mode_changes"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "source", "target", "trigger", "live"])
        for c in record.mode_changes:
            w.writerow([c.step, c.source.value, c.target.value, c.trigger,
                        c.live])

    with open(paths["verdicts"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "hypothesis", "viewpoint", "accepted", "reason"])
        for v in record.verdicts:
            w.writerow([v.step, v.hid, v.viewpoint, int(v.accepted),
                        v.reason])

    with open(paths["plans"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["plan", "kind", "kappa", "x", "y", "heading"])
        for pi, choice in enumerate(record.plans):
            for kind, traj in (("visit", choice.plan.trajectory),
                               ("alternative",
                                choice.alternative.trajectory)):
                for j, pose in enumerate(traj.poses):
                    w.writerow([pi, kind, traj.start + j, f"{pose[0]:.6f}",
                                f"{pose[1]:.6f}", f"{pose[2]:.6f}"])
    return paths
