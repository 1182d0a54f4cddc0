"""Mode logic: operation, diagnosis, mitigation, and the four transitions.

The supervisor is the single writer of the blacklist and of viewpoint
accept/reject verdicts. It consumes the hypothesis bank after each filter
step and decides mode changes; during mitigation it runs the residency-gated
adjudication of the selected hypothesis against trusted camera fixes.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import detection
from .estimation import HypothesisBank, Hypothesis, gated_update, \
    viewpoint_membership
from .world import DetectorParams, ViewPoint


class Mode(Enum):
    OPERATION = "operation"
    DIAGNOSIS = "diagnosis"
    MITIGATION = "mitigation"


@dataclass
class ModeChange:
    step: int
    source: Mode
    target: Mode
    trigger: str     # 'trans1' .. 'trans4'
    live: int        # member count after the change


@dataclass
class Verdict:
    step: int
    hid: int
    viewpoint: str
    accepted: bool
    reason: str


@dataclass
class Adjudication:
    """Evidence window for one (hypothesis, viewpoint) visit."""

    hid: int
    viewpoint: ViewPoint
    camera_tag: str
    opened_at: int | None = None
    streak: int = 0
    sightings: int = 0


class Supervisor:
    """Three-state machine owning blacklist updates and verdicts."""

    def __init__(self, params: DetectorParams, camera_models: dict,
                 rng: np.random.Generator | None = None):
        self.params = params
        self.cameras = camera_models          # viewpoint tag -> model
        self.rng = rng if rng is not None else np.random.default_rng()
        self.mode = Mode.OPERATION
        self.entered_at = 0
        self.adjudication: Adjudication | None = None
        self.mode_log: list[ModeChange] = []
        self.verdicts: list[Verdict] = []
        self._gate3 = detection.chi2_quantile(params.alpha_chi, 3)

    # harness queries, evaluated before each bank step
    @property
    def allow_growth(self) -> bool:
        return self.mode is Mode.OPERATION

    @property
    def allow_spawn(self) -> bool:
        # during mitigation only source removal may change the bank
        return self.mode is not Mode.MITIGATION

    def _change(self, step: int, target: Mode, trigger: str,
                live: int) -> ModeChange:
        change = ModeChange(step, self.mode, target, trigger, live)
        self.mode = target
        self.entered_at = step
        self.mode_log.append(change)
        return change

    # -- transitions ---------------------------------------------------------

    def evaluate_transitions(self, bank: HypothesisBank, present: set,
                             step: int) -> ModeChange | None:
        """Apply the first transition whose guard holds, if any."""
        members = bank.members
        if self.mode is Mode.OPERATION:
            # spawning may already have replaced the alarmed hypothesis
            # within the bank step, so consult the step report as well
            report = bank.last_report
            alarmed = any(h.alarm for h in members) or (
                report is not None and report.step == step and report.alarmed
            )
            if alarmed:
                return self._change(step, Mode.DIAGNOSIS, "trans1",
                                    len(members))
            return None

        if self.mode is Mode.DIAGNOSIS:
            window = self.params.window
            tags = set(present) - bank.blacklist
            ages_ok = (
                members
                and all(h.age >= window for h in members)
                and all(bank.source_age.get(t, 0) >= window // 2
                        for t in tags)
            )
            if not ages_ok:
                return None
            union: set = set()
            total = 0
            for h in members:
                union |= h.support
                total += len(h.support)
            partitioned = (
                len(members) >= 2
                and total == len(union)      # pairwise disjoint
                and union == tags
            )
            if partitioned:
                return self._change(step, Mode.MITIGATION, "trans2",
                                    len(members))
            if len(members) == 1:
                # merging collapsed the split into one survivor: the
                # alarm is deemed false and tracking hands back
                bank.collapse_to_primary(step, None, present)
                return self._change(step, Mode.OPERATION, "trans3",
                                    len(bank.members))
            # overlapping aged supports: the diagnosis is still running,
            # waiting on further alarms or pooling
            return None

        # mitigation: leave once a single credible hypothesis remains
        live = [h for h in members if not h.support <= bank.blacklist]
        if len(live) == 1:
            bank.collapse_to_primary(step, live[0], present)
            self.adjudication = None
            return self._change(step, Mode.OPERATION, "trans4",
                                len(bank.members))
        return None

    # -- viewpoint adjudication -----------------------------------------------

    def begin_adjudication(self, hid: int, viewpoint: ViewPoint) -> None:
        self.adjudication = Adjudication(hid, viewpoint, viewpoint.tag)

    def adjudicate(self, bank: HypothesisBank, camera_meas: dict,
                   step: int) -> Verdict | None:
        """Advance the evidence window; returns a verdict when one is due.

        The window opens when the selected hypothesis believes it resides at
        the viewpoint. From then on a gated camera outlier rejects at once,
        ``residency_steps`` consecutive inliers accept, a sighting-free
        residency window rejects, and twice the residency bounds the wait.
        """
        adj = self.adjudication
        if adj is None or self.mode is not Mode.MITIGATION:
            return None
        hyp = bank.get(adj.hid)
        if hyp is None or hyp.hid == 0:
            return self._reject(bank, None, adj, step, "hypothesis lost")

        if adj.opened_at is None:
            if viewpoint_membership(
                hyp.belief, adj.viewpoint, self.rng,
                self.params.membership_samples, self.params.membership_frac,
            ):
                adj.opened_at = step
            else:
                return None

        tau = adj.viewpoint.residency_steps
        z = camera_meas.get(adj.camera_tag)
        if z is not None:
            adj.sightings += 1
            belief, ok, _ = gated_update(
                hyp.belief, z, self.cameras[adj.camera_tag], self._gate3
            )
            if not ok:
                return self._reject(bank, hyp, adj, step, "camera outlier")
            hyp.belief = belief
            adj.streak += 1
            if adj.streak >= tau:
                return self._accept(bank, hyp, adj, step)
        else:
            adj.streak = 0

        elapsed = step - adj.opened_at + 1
        if adj.sightings == 0 and elapsed >= tau:
            return self._reject(bank, hyp, adj, step, "no landmark seen")
        if elapsed >= 2 * tau:
            return self._reject(bank, hyp, adj, step, "residency expired")
        return None

    def _accept(self, bank: HypothesisBank, hyp: Hypothesis,
                adj: Adjudication, step: int) -> Verdict:
        for other in bank.members:
            if other.hid != hyp.hid:
                bank.blacklist |= other.support - hyp.support
        bank.keep_only(hyp.hid)
        self.adjudication = None
        verdict = Verdict(step, hyp.hid, adj.viewpoint.tag, True, "confirmed")
        self.verdicts.append(verdict)
        return verdict

    def _reject(self, bank: HypothesisBank, hyp: Hypothesis | None,
                adj: Adjudication, step: int, reason: str) -> Verdict:
        hid = adj.hid
        if hyp is not None:
            bank.visited_rejected.add(frozenset(hyp.support))
            bank.blacklist |= set(hyp.support)
            bank.remove_member(hyp.hid)
        self.adjudication = None
        verdict = Verdict(step, hid, adj.viewpoint.tag, False, reason)
        self.verdicts.append(verdict)
        return verdict
