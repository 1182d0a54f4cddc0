"""Multi-hypothesis ego-state estimation.

Every hypothesis is an EKF over the same vehicle state, fused only with the
measurement sources in its support set. The operational hypothesis (id 0)
fuses everything visible minus the blacklist and never raises alarms; it is
what the controller tracks outside Mitigation. Bank maintenance implements
the alarm-triggered support splitting, proximity-vote pooling and source
bookkeeping that let the supervisor isolate a consistent sensor subset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import detection
from .geometry import angle_diff, wrap_angle
from .models import IDX_HEADING, NX, MotionModel
from .world import DetectorParams, ViewPoint

POSE_IDX = np.array([0, 1, 4])  # pose marginal rows of the state


@dataclass(eq=False)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def copy(self) -> "GaussianBelief":
        return GaussianBelief(self.mean.copy(), self.cov.copy())


def _symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


# ---------------------------------------------------------------------------
# EKF primitives


def predict(belief: GaussianBelief, u, motion: MotionModel, process_cov,
            imu_cov):
    """Time update. Returns (prior belief, noise-free propagated covariance).

    The second return value F P F^T is what the detector uses as the
    predicted-measurement spread; it deliberately excludes the additive
    noise terms.
    """
    u = np.asarray(u, dtype=float)
    f = motion.jac_x(belief.mean, u)
    g = motion.jac_u(belief.mean, u)
    noiseless = _symmetrize(f @ belief.cov @ f.T)
    cov = _symmetrize(noiseless + process_cov + g @ imu_cov @ g.T)
    return GaussianBelief(motion.step(belief.mean, u), cov), noiseless


def predicted_measurement(prior_mean, noiseless_cov, model):
    """Predicted measurement and its noise-free covariance H F P F^T H^T."""
    h = model.jac(prior_mean)
    return model.predict(prior_mean), _symmetrize(h @ noiseless_cov @ h.T)


def gated_update(belief: GaussianBelief, z, model, gamma: float):
    """Chi-square gated EKF measurement update (Joseph-form covariance).

    Returns (belief, accepted, mahalanobis_sq). The input belief is not
    mutated; rejected measurements leave it untouched.
    """
    h = model.jac(belief.mean)
    z_hat = model.predict(belief.mean)
    inn = model.residual(np.asarray(z, dtype=float), z_hat)
    s = _symmetrize(h @ belief.cov @ h.T + model.noise_cov)
    sol = np.linalg.solve(s, inn)
    md2 = float(inn @ sol)
    if md2 > gamma:
        return belief, False, md2
    k = belief.cov @ h.T @ np.linalg.inv(s)
    mean = belief.mean + k @ inn
    mean[IDX_HEADING] = wrap_angle(mean[IDX_HEADING])
    ikh = np.eye(NX) - k @ h
    cov = _symmetrize(ikh @ belief.cov @ ikh.T + k @ model.noise_cov @ k.T)
    return GaussianBelief(mean, cov), True, md2


def nees(belief: GaussianBelief, x_true) -> float:
    """Normalized estimation error squared against the true state."""
    e = np.asarray(x_true, dtype=float) - belief.mean
    e[IDX_HEADING] = wrap_angle(e[IDX_HEADING])
    return float(e @ np.linalg.solve(belief.cov, e))


def pose_marginal(belief: GaussianBelief):
    return belief.mean[POSE_IDX], belief.cov[np.ix_(POSE_IDX, POSE_IDX)]


def viewpoint_membership(belief: GaussianBelief, vp: ViewPoint,
                         rng: np.random.Generator, n_samples: int = 100,
                         frac: float = 0.95) -> bool:
    """Monte-Carlo box membership of the pose marginal.

    True when at least ``frac`` of ``n_samples`` draws from the marginal lie
    inside the (closed) viewpoint box, headings compared on the circle.
    """
    mean, cov = pose_marginal(belief)
    try:
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(3))
    except np.linalg.LinAlgError:
        return False
    pts = mean + rng.standard_normal((n_samples, 3)) @ chol.T
    ok = np.all(
        np.abs(pts[:, :2] - vp.pose[:2]) <= vp.half_extents[:2], axis=1
    )
    ok &= np.abs(angle_diff(pts[:, 2], vp.pose[2])) <= vp.half_extents[2]
    return bool(ok.mean() >= frac)


# ---------------------------------------------------------------------------
# hypotheses


@dataclass(eq=False)
class Hypothesis:
    hid: int
    belief: GaussianBelief
    support: set
    birth_step: int
    windows: dict = field(default_factory=dict)  # tag -> SourceWindow
    age: int = 0
    alarm: bool = False
    flagged: bool = False  # alarmed but support cannot split further

    def support_key(self):
        return tuple(sorted(self.support))


class _VoteWindow:
    """Sliding sum of binary proximity votes for one hypothesis pair."""

    __slots__ = ("buf", "head", "fill", "total")

    def __init__(self, window: int):
        self.buf = np.zeros(window, dtype=np.int8)
        self.head = 0
        self.fill = 0
        self.total = 0

    def push(self, vote: int) -> None:
        self.total += vote - self.buf[self.head]
        self.buf[self.head] = vote
        self.head = (self.head + 1) % self.buf.size
        if self.fill < self.buf.size:
            self.fill += 1


@dataclass
class BankStepReport:
    step: int
    alarmed: list = field(default_factory=list)      # hids alarmed this step
    spawned: list = field(default_factory=list)      # new child hids
    removed_parents: list = field(default_factory=list)
    merged: list = field(default_factory=list)       # (hid_a, hid_b, new_hid)
    flagged: list = field(default_factory=list)      # alarm with no split left
    gate_rejects: int = 0


class HypothesisBank:
    """Operational EKF plus the bank of support-subset hypotheses."""

    def __init__(self, init_belief: GaussianBelief, support, *,
                 motion: MotionModel, sensors: dict, params: DetectorParams,
                 process_cov, imu_cov, start_step: int = 0):
        self.motion = motion
        self.sensors = sensors
        self.params = params
        self.process_cov = np.asarray(process_cov, dtype=float)
        self.imu_cov = np.asarray(imu_cov, dtype=float)
        self.blacklist: set = set()
        self.visited_rejected: set = set()
        self.source_age: dict = {}
        self.last_report: BankStepReport | None = None
        self._votes: dict = {}
        self._next_hid = 1
        self.operational = Hypothesis(
            0, init_belief.copy(), set(support), start_step
        )
        self.members: list[Hypothesis] = [
            self._new_hypothesis(init_belief.copy(), set(support), start_step)
        ]
        self._halfwidth = detection.region_halfwidth_scale(params.alpha_chi)
        self._merge_gate = detection.chi2_quantile(params.alpha_merge, 3)

    # -- helpers -----------------------------------------------------------

    def _new_hypothesis(self, belief, support, step) -> Hypothesis:
        h = Hypothesis(self._next_hid, belief, set(support), step)
        self._next_hid += 1
        for tag in sorted(h.support):
            h.windows[tag] = detection.SourceWindow(
                self.sensors[tag].dim, self.params.window
            )
        return h

    def get(self, hid: int) -> Hypothesis | None:
        if hid == 0:
            return self.operational
        for h in self.members:
            if h.hid == hid:
                return h
        return None

    def _gate(self, dim: int) -> float:
        return detection.chi2_quantile(self.params.alpha_chi, dim)

    # -- source bookkeeping (runs before prediction each step) --------------

    def sync_sources(self, present, allow_growth: bool, step: int) -> None:
        """Reconcile supports with the currently visible tag set.

        Members only ever lose tags; the operational hypothesis (and, while
        growth is allowed, the members) pick up new ones. Members whose
        support empties are dropped.
        """
        present = set(present)
        for tag in list(self.source_age):
            if tag not in present:
                del self.source_age[tag]
        for tag in present:
            self.source_age[tag] = self.source_age.get(tag, 0) + 1

        self.operational.support = present - self.blacklist

        kept = []
        for h in self.members:
            gone = h.support - present
            for tag in gone:
                h.support.discard(tag)
                h.windows.pop(tag, None)
            if h.support:
                kept.append(h)
            else:
                self._drop_votes(h.hid)
        self.members = kept

        if allow_growth:
            for h in self.members:
                for tag in sorted(present - self.blacklist - h.support):
                    h.support.add(tag)
                    h.windows[tag] = detection.SourceWindow(
                        self.sensors[tag].dim, self.params.window
                    )

        if not self.members and present - self.blacklist:
            # never run without at least one trackable hypothesis
            self.members = [
                self._new_hypothesis(
                    self.operational.belief.copy(),
                    present - self.blacklist, step,
                )
            ]

    # -- the per-step filter/detect cycle -----------------------------------

    def step(self, u_imu, measurements: dict, step: int,
             allow_spawn: bool) -> BankStepReport:
        """Predict, window the indicators, update, alarm, spawn, merge.

        ``measurements`` maps navigation source tags to raw measurement
        vectors; camera fixes are handled out of band by the supervisor.
        """
        report = BankStepReport(step=step)
        params = self.params
        for h in [self.operational] + self.members:
            h.age = step - h.birth_step
            prior, noiseless = predict(
                h.belief, u_imu, self.motion, self.process_cov, self.imu_cov
            )
            if h.hid != 0:
                self._push_indicators(h, prior, noiseless, measurements)
            belief = prior
            for tag in sorted(h.support):
                z = measurements.get(tag)
                if z is None:
                    continue
                model = self.sensors[tag]
                belief, ok, _ = gated_update(
                    belief, z, model, self._gate(model.dim)
                )
                if not ok:
                    report.gate_rejects += 1
            if params.posterior_inflation != 1.0:
                belief.cov = _symmetrize(
                    belief.cov * params.posterior_inflation
                )
            h.belief = belief

        self._evaluate_alarms(report)
        if allow_spawn and report.alarmed:
            self.spawn_hypotheses(step, report)
        self.merge_step(step, report)
        self.last_report = report
        return report

    def _push_indicators(self, h: Hypothesis, prior: GaussianBelief,
                         noiseless_cov, measurements: dict) -> None:
        mode_probs = self.params.outlier_mode_probs
        for tag in sorted(h.support):
            z = measurements.get(tag)
            if z is None:
                continue
            model = self.sensors[tag]
            z_hat, cov_z = predicted_measurement(
                prior.mean, noiseless_cov, model
            )
            resid = model.residual(np.asarray(z, dtype=float), z_hat)
            meas_std = np.sqrt(np.diag(model.noise_cov))
            pred_std = np.sqrt(np.clip(np.diag(cov_z), 0.0, None))
            flags = detection.outlier_flags(resid, meas_std, self._halfwidth)
            p_in = detection.mean_inlier_prob(
                self._halfwidth, meas_std, pred_std
            )
            p_out = detection.outlier_prob(mode_probs, p_in)
            h.windows[tag].push(flags, p_out)

    def _evaluate_alarms(self, report: BankStepReport) -> None:
        params = self.params
        batch = detection.QuantileBatch(params.beta)
        eligible: dict[int, list] = {}
        for h in self.members:
            h.alarm = False
            if h.age < params.window:
                continue
            rows = []
            for tag in sorted(h.windows):
                win = h.windows[tag]
                if win.full:
                    batch.add((h.hid, tag), win)
                    rows.append((tag, win))
            if rows:
                eligible[h.hid] = rows
        thresholds = batch.solve()
        for h in self.members:
            rows = eligible.get(h.hid)
            if not rows:
                continue
            exceeded = []
            for tag, win in rows:
                exceeded.extend(win.counts() > thresholds[(h.hid, tag)])
            alarm = (any(exceeded) if params.alarm_mode == "any"
                     else all(exceeded))
            if alarm:
                h.alarm = True
                report.alarmed.append(h.hid)

    # -- spawning ------------------------------------------------------------

    def spawn_hypotheses(self, step: int, report: BankStepReport) -> None:
        """Replace alarmed hypotheses by their one-source-smaller children.

        Candidate supports already present in the bank, equal to or contained
        in an accepted sibling, or previously rejected by adjudication are
        skipped. An alarmed single-source hypothesis cannot split; it is kept
        with its evidence reset and flagged. If spawning would leave the bank
        empty, the alarmed parents are retained the same way.
        """
        params = self.params
        existing = {frozenset(h.support) for h in self.members}
        alarmed = sorted(
            (h for h in self.members if h.alarm), key=Hypothesis.support_key
        )
        children: list[Hypothesis] = []
        kept_parents: list[Hypothesis] = []
        for parent in alarmed:
            if len(parent.support) == 1:
                self._reset_evidence(parent, step)
                parent.flagged = True
                kept_parents.append(parent)
                report.flagged.append(parent.hid)
                continue
            for tag in sorted(parent.support):
                cand = frozenset(parent.support - {tag})
                if cand in existing or cand in self.visited_rejected:
                    continue
                if any(cand <= frozenset(c.support) for c in children):
                    continue
                child = self._new_hypothesis(
                    GaussianBelief(
                        parent.belief.mean.copy(),
                        _symmetrize(parent.belief.cov
                                    * params.spawn_cov_scale),
                    ),
                    set(cand), step,
                )
                children.append(child)
                report.spawned.append(child.hid)

        survivors = [h for h in self.members if not h.alarm or h.flagged]
        if not survivors and not children:
            # refuse to empty the bank: keep parents, reset their evidence
            for parent in alarmed:
                self._reset_evidence(parent, step)
                parent.flagged = True
                report.flagged.append(parent.hid)
            return
        removed = [h for h in self.members
                   if h.alarm and not h.flagged]
        for h in removed:
            self._drop_votes(h.hid)
            report.removed_parents.append(h.hid)
        self.members = [h for h in self.members if h not in removed]
        self.members.extend(children)

    def _reset_evidence(self, h: Hypothesis, step: int) -> None:
        h.alarm = False
        h.birth_step = step
        h.age = 0
        for tag in list(h.windows):
            h.windows[tag] = detection.SourceWindow(
                self.sensors[tag].dim, self.params.window
            )

    # -- merging -------------------------------------------------------------

    def _drop_votes(self, hid: int) -> None:
        for key in [k for k in self._votes if hid in k]:
            del self._votes[key]

    def _proximity_vote(self, a: Hypothesis, b: Hypothesis) -> int:
        ma, pa = pose_marginal(a.belief)
        mb, pb = pose_marginal(b.belief)
        d = ma - mb
        d[2] = angle_diff(ma[2], mb[2])
        try:
            md2 = float(d @ np.linalg.solve(pa + pb, d))
        except np.linalg.LinAlgError:
            return 0
        return int(md2 <= self._merge_gate)

    def merge_step(self, step: int, report: BankStepReport) -> None:
        """Accumulate proximity votes; pool pairs that won the vote.

        Pooling requires the windowed vote sum to reach the merge quota and
        either a support inclusion or both hypotheses at full window age.
        One pass per step; pooled hypotheses re-enter voting as new ids.
        """
        params = self.params
        members = self.members
        live = {h.hid for h in members}
        for key in [k for k in self._votes
                    if k[0] not in live or k[1] not in live]:
            del self._votes[key]

        by_hid = {h.hid: h for h in members}
        pairs = []
        hids = sorted(by_hid)
        for i, ha in enumerate(hids):
            for hb in hids[i + 1:]:
                key = (ha, hb)
                win = self._votes.get(key)
                if win is None:
                    win = self._votes[key] = _VoteWindow(params.window)
                win.push(self._proximity_vote(by_hid[ha], by_hid[hb]))
                pairs.append(key)

        merged_away: set[int] = set()
        pooled_new: list[Hypothesis] = []
        for ha, hb in pairs:
            if ha in merged_away or hb in merged_away:
                continue
            if self._votes[(ha, hb)].total < params.merge_window:
                continue
            a, b = by_hid[ha], by_hid[hb]
            inclusion = a.support <= b.support or b.support <= a.support
            both_old = a.age >= params.window and b.age >= params.window
            if not (inclusion or both_old):
                continue
            pooled = self._pool(a, b, step)
            merged_away.update((ha, hb))
            self._drop_votes(ha)
            self._drop_votes(hb)
            pooled_new.append(pooled)
            report.merged.append((ha, hb, pooled.hid))
        if merged_away:
            self.members = [
                h for h in self.members if h.hid not in merged_away
            ] + pooled_new

    def _pool(self, a: Hypothesis, b: Hypothesis, step: int) -> Hypothesis:
        """Equal-weight moment-matched pool of two hypotheses."""
        ma, mb = a.belief.mean, b.belief.mean
        mean = 0.5 * (ma + mb)
        # average headings on the circle, then spread terms use wrapped errors
        mean[IDX_HEADING] = wrap_angle(
            ma[IDX_HEADING] + 0.5 * angle_diff(mb[IDX_HEADING],
                                               ma[IDX_HEADING])
        )
        da = ma - mean
        db = mb - mean
        da[IDX_HEADING] = angle_diff(ma[IDX_HEADING], mean[IDX_HEADING])
        db[IDX_HEADING] = angle_diff(mb[IDX_HEADING], mean[IDX_HEADING])
        cov = _symmetrize(
            0.5 * (a.belief.cov + b.belief.cov)
            + 0.5 * (np.outer(da, da) + np.outer(db, db))
        )
        # windows survive from the parent that already tracked each source,
        # preferring the one with the larger support (ties: the elder)
        donor, other = (a, b)
        if (len(b.support), b.age) > (len(a.support), a.age):
            donor, other = (b, a)
        pooled = Hypothesis(
            self._next_hid, GaussianBelief(mean, cov),
            set(a.support | b.support),
            birth_step=step - max(a.age, b.age),
        )
        self._next_hid += 1
        pooled.age = max(a.age, b.age)
        for tag in sorted(pooled.support):
            src = donor if tag in donor.windows else other
            if tag in src.windows:
                pooled.windows[tag] = src.windows[tag].copy()
            else:
                pooled.windows[tag] = detection.SourceWindow(
                    self.sensors[tag].dim, self.params.window
                )
        return pooled

    # -- supervisor hooks ------------------------------------------------------

    def supports(self) -> list:
        return [frozenset(h.support) for h in self.members]

    def remove_member(self, hid: int) -> None:
        self.members = [h for h in self.members if h.hid != hid]
        self._drop_votes(hid)

    def keep_only(self, hid: int) -> None:
        for h in self.members:
            if h.hid != hid:
                self._drop_votes(h.hid)
        self.members = [h for h in self.members if h.hid == hid]

    def collapse_to_primary(self, step: int, survivor: Hypothesis | None,
                            present: set) -> None:
        """Return to single-hypothesis tracking.

        With an adjudicated survivor the bank keeps it (evidence intact) and
        re-seeds the operational estimate from it; otherwise a fresh primary
        is cloned from the operational hypothesis.
        """
        self._votes.clear()
        usable = set(present) - self.blacklist
        if survivor is not None:
            self.members = [survivor]
            self.operational.belief = survivor.belief.copy()
            self.operational.support = usable
        elif len(self.members) != 1:
            self.members = [
                self._new_hypothesis(
                    self.operational.belief.copy(), usable, step
                )
            ]
