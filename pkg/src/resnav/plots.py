"""Static figures rendered from the CSV artifacts.

Every plot reads the exact tables the harness writes, so a figure can always
be regenerated from shipped results. Empty inputs raise before any file is
created rather than producing blank axes.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from matplotlib.patches import Rectangle

from .world import Scenario


def _read_csv(path) -> list[dict]:
    with open(path, "r", newline="") as fh:
        return list(csv.DictReader(fh))


def plot_sweep(csv_path, out_path) -> Path:
    """False/true positive rates against the gate confidence, per quantile."""
    rows = _read_csv(csv_path)
    if not rows:
        raise ValueError(f"{csv_path}: sweep table is empty")

    fpr, tpr = {}, {}
    for r in rows:
        key_a = float(r["alpha_chi"])
        if r["fpr"] != "":
            fpr.setdefault(float(r["beta"]), {})[key_a] = float(r["fpr"])
        if r["tpr"] != "":
            tpr.setdefault((float(r["beta"]), float(r["bias_m"])),
                           {})[key_a] = float(r["tpr"])

    fig, (ax_f, ax_t) = plt.subplots(1, 2, figsize=(10, 4))
    for beta, series in sorted(fpr.items()):
        alphas = sorted(series)
        ax_f.plot(alphas, [series[a] for a in alphas], marker="o",
                  label=f"beta={beta:g}")
    ax_f.set_xlabel("gate confidence alpha_chi")
    ax_f.set_ylabel("false positive rate")
    ax_f.set_title("attack-free runs")
    if fpr:
        ax_f.legend(fontsize=8)

    for (beta, bias), series in sorted(tpr.items()):
        alphas = sorted(series)
        ax_t.plot(alphas, [series[a] for a in alphas], marker="o",
                  label=f"beta={beta:g}, {bias:g} m")
    ax_t.set_xlabel("gate confidence alpha_chi")
    ax_t.set_ylabel("true positive rate")
    ax_t.set_title("attacked runs")
    if tpr:
        ax_t.legend(fontsize=8)

    for ax in (ax_f, ax_t):
        ax.set_ylim(-0.05, 1.05)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_run(run_dir, out_dir, scenario: Scenario | None = None) -> list:
    """Trajectory overlay and loss/mode timeline for one logged run."""
    run_dir = Path(run_dir)
    log = _read_csv(run_dir / "run_log.csv")
    if not log:
        raise ValueError(f"{run_dir}: run log is empty")
    changes_path = run_dir / "mode_changes.csv"
    changes = _read_csv(changes_path) if changes_path.exists() else []
    plans_path = run_dir / "plan_samples.csv"
    plans = _read_csv(plans_path) if plans_path.exists() else []

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(6, 6))
    true_x = [float(r["true_x"]) for r in log]
    true_y = [float(r["true_y"]) for r in log]
    est_x = [float(r["est_x"]) for r in log]
    est_y = [float(r["est_y"]) for r in log]
    if scenario is not None:
        nom = scenario.trajectory.poses
        ax.plot(nom[:, 0], nom[:, 1], color="0.8", lw=4, label="nominal")
        for vp in scenario.viewpoints:
            lo = vp.pose[:2] - vp.half_extents[:2]
            ax.add_patch(Rectangle(lo, 2 * vp.half_extents[0],
                                   2 * vp.half_extents[1], fill=False,
                                   edgecolor="tab:green"))
            ax.annotate(vp.tag, vp.pose[:2], fontsize=8, ha="center")
        for a in scenario.rf_anchors:
            ax.plot(*a.position, marker="^", color="tab:purple", ms=6)
    ax.plot(true_x, true_y, color="tab:blue", lw=1.2, label="true")
    ax.plot(est_x, est_y, color="tab:orange", lw=1.0, ls="--",
            label="estimate")
    for kind, color in (("visit", "tab:red"), ("alternative", "tab:gray")):
        pts = [(float(r["x"]), float(r["y"])) for r in plans
               if r["kind"] == kind]
        if pts:
            ax.scatter(*zip(*pts), s=2, color=color, label=f"{kind} plan")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(fontsize=8, loc="best")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = out_dir / "trajectory.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    fig, (ax_l, ax_n) = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    steps = [int(r["step"]) for r in log]
    ax_l.plot(steps, [float(r["loss"]) for r in log], color="tab:blue")
    ax_l.set_ylabel("performance loss")
    ax_n.plot(steps, [float(r["nees"]) for r in log], color="tab:orange",
              lw=0.8)
    ax_n.set_ylabel("NEES")
    ax_n.set_xlabel("step")
    for c in changes:
        for ax in (ax_l, ax_n):
            ax.axvline(int(c["step"]), color="0.6", ls=":", lw=0.8)
        ax_l.annotate(c["target"], (int(c["step"]), ax_l.get_ylim()[1]),
                      fontsize=7, rotation=90, va="top")
    for ax in (ax_l, ax_n):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    path = out_dir / "timeline.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)
    return written
