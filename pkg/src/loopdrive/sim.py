"""Differentiable log-replay simulator.

A rollout works on a frozen world: the field-of-view query runs once at the
start frame, selecting the element set and caching its world-frame geometry.
Each step advances the SDV pose by the kinematic model, replays logged
dynamic agents in the world frame, and re-expresses everything relative to
the new SDV pose. Because world poses are preserved and only the reference
frame moves, the scene stays rigidly consistent no matter what the policy
does.

The differentiable state of a rollout is the SDV pose-history stack, a
(4, 3) array holding the current pose and the three previous ones. The
observation is rebuilt from that stack and the frozen world anchors on every
step, so gradients flow from observation features back into poses and
actions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine, se2
from .engine import Tape, Var
from .scene import (FEAT_KIND, FEAT_TIME, FEAT_TL, HISTORY_POINTS, KIND_AGENT,
                    KIND_CROSSWALK, KIND_LANE_LEFT, KIND_LANE_MID,
                    KIND_LANE_RIGHT, KIND_SDV, LANE_POINTS, MAX_POINTS,
                    N_FEATURES, Observation, PackedObs, ScenarioLog, Selection,
                    SLOT_AGENT0, SLOT_CROSSWALK0, SLOT_LANE_LEFT0,
                    SLOT_LANE_MID0, SLOT_LANE_RIGHT0, SLOT_SDV, TL_STATES,
                    select_elements, slot_kinds)

KINEMATICS_MODELS = ("unconstrained", "unicycle")


def kinematics_step(p, a, model: str = "unconstrained", tape: Tape | None = None):
    """Advance a pose by an action expressed in the current SDV frame.

    The unconstrained model composes the raw pose increment; the unicycle
    variant suppresses the lateral component of the action.
    """
    if model == "unconstrained":
        return engine.compose_pose(tape, p, a)
    if model == "unicycle":
        gated = engine.mul(tape, a, np.array([1.0, 0.0, 1.0]))
        return engine.compose_pose(tape, p, gated)
    raise ValueError(f"unknown kinematics model {model!r}")


def expert_action(log: ScenarioLog, t: int) -> np.ndarray:
    """The increment that reproduces the logged motion from frame t to t+1."""
    return se2.relative(log.frames[t].sdv_pose, log.frames[t + 1].sdv_pose)


@dataclass
class SimState:
    """Rollout state: absolute frame index, differentiable pose stack and the
    packed observation derived from it."""

    t: int
    stack: Var | np.ndarray  # (4, 3); row 0 is the current pose
    obs: PackedObs

    @property
    def sdv_pose(self) -> np.ndarray:
        return engine.value_of(self.stack)[0]


class Sim:
    """Frozen-world rollout service for one scenario window.

    ``init_rollout``/``step`` offer the stateful view; ``observe``/``advance``
    are the stateless pieces the trainer uses to place each step on its own
    tape during the backward recursion.
    """

    def __init__(self, log: ScenarioLog, t0: int, horizon: int,
                 kinematics: str = "unconstrained",
                 selection: Selection | None = None):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        if t0 + horizon > len(log.frames) - 1:
            raise ValueError(
                f"rollout t0={t0} horizon={horizon} overflows log of {len(log.frames)} frames")
        if kinematics not in KINEMATICS_MODELS:
            raise ValueError(f"unknown kinematics model {kinematics!r}")
        self.log = log
        self.t0 = t0
        self.horizon = horizon
        self.kinematics = kinematics
        expert_pose = log.frames[t0].sdv_pose
        self.selection = selection or select_elements(log, t0, expert_pose)
        self._build_registry()

    # -- registry -----------------------------------------------------------

    def _build_registry(self) -> None:
        sel = self.selection
        log = self.log
        self.agent_ids = list(sel.agent_ids)
        self.n_agents = len(self.agent_ids)
        kinds = [KIND_SDV] + [KIND_AGENT] * self.n_agents
        counts = [HISTORY_POINTS] * (1 + self.n_agents)
        slots = [SLOT_SDV] + [SLOT_AGENT0 + i for i in range(self.n_agents)]

        static_pts = []
        self._lane_mid_rows: list[tuple[int, int, str]] = []  # packed row span + lane id
        row = sum(counts)
        for family, slot0, kind in ((sel.lane_mid, SLOT_LANE_MID0, KIND_LANE_MID),
                                    (sel.lane_left, SLOT_LANE_LEFT0, KIND_LANE_LEFT),
                                    (sel.lane_right, SLOT_LANE_RIGHT0, KIND_LANE_RIGHT)):
            for s, (lane_idx, pts) in enumerate(family):
                kinds.append(kind)
                counts.append(pts.shape[0])
                slots.append(slot0 + s)
                p3 = np.zeros((pts.shape[0], 3))
                p3[:, :2] = pts
                static_pts.append(p3)
                if kind == KIND_LANE_MID:
                    self._lane_mid_rows.append((row, row + pts.shape[0],
                                                log.lanes[lane_idx].lane_id))
                row += pts.shape[0]
        for s, (_, pts) in enumerate(sel.crosswalks):
            kinds.append(KIND_CROSSWALK)
            counts.append(pts.shape[0])
            slots.append(SLOT_CROSSWALK0 + s)
            p3 = np.zeros((pts.shape[0], 3))
            p3[:, :2] = pts
            static_pts.append(p3)
            row += pts.shape[0]

        self.kinds = np.asarray(kinds, dtype=np.int64)
        self.slots = np.asarray(slots, dtype=np.int64)
        self.starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.n_points = int(self.starts[-1])
        self.static_world = (np.concatenate(static_pts, axis=0)
                             if static_pts else np.zeros((0, 3)))
        self.n_track_points = HISTORY_POINTS * (1 + self.n_agents)
        self.point_order = np.concatenate(
            [np.arange(c, dtype=np.int64) for c in counts])

        # constant feature columns (time offset, kind one-hot); traffic light
        # columns are stamped per frame
        base = np.zeros((self.n_points, N_FEATURES - 3))
        for e in range(len(counts)):
            lo, hi = self.starts[e], self.starts[e + 1]
            base[lo:hi, FEAT_KIND - 3 + self.kinds[e]] = 1.0
            if self.kinds[e] in (KIND_SDV, KIND_AGENT):
                base[lo:hi, FEAT_TIME - 3] = -np.arange(hi - lo) * self.log.dt
        self._base_const = base

        # per-agent extent/kind at selection time
        self.agent_extent = {}
        self.agent_kind = {}
        f0 = log.frames[self.t0]
        for aid in self.agent_ids:
            a = f0.agent(aid)
            self.agent_extent[aid] = a.extent
            self.agent_kind[aid] = a.kind

    # -- per-step constant blocks --------------------------------------------

    def _agent_world_points(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Logged world poses for each selected agent's 4-point track at
        frame t; missing frames are masked and hold the nearest known pose."""
        pts = np.zeros((self.n_agents * HISTORY_POINTS, 3))
        mask = np.zeros(self.n_agents * HISTORY_POINTS)
        for i, aid in enumerate(self.agent_ids):
            last = None
            for j in range(HISTORY_POINTS):
                f = t - j
                state = self.log.frames[f].agent(aid) if f >= 0 else None
                row = i * HISTORY_POINTS + j
                if state is not None:
                    pts[row] = state.pose
                    mask[row] = 1.0
                    if last is None:
                        last = state.pose
                elif last is not None:
                    pts[row] = last
        return pts, mask

    def _const_block(self, t: int) -> np.ndarray:
        block = self._base_const.copy()
        tl = self.log.frames[t].traffic_lights
        for lo, hi, lane_id in self._lane_mid_rows:
            if lane_id in tl:
                block[lo:hi, FEAT_TL - 3 + TL_STATES.index(tl[lane_id])] = 1.0
        return block

    def _masks(self, t: int, agent_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        point_mask = np.ones(self.n_points)
        for j in range(HISTORY_POINTS):
            if t - j < 0:
                point_mask[j] = 0.0
        point_mask[HISTORY_POINTS:self.n_track_points] = agent_mask
        elem_mask = np.ones(self.kinds.shape[0])
        for i in range(self.n_agents):
            elem_mask[1 + i] = agent_mask[i * HISTORY_POINTS]
        return point_mask, elem_mask

    # -- stateless differentiable pieces -------------------------------------

    def initial_stack(self) -> np.ndarray:
        """Expert pose at t0 plus its logged history (nearest pose repeated
        where the log starts too late; those rows are masked)."""
        stack = np.empty((4, 3))
        for j in range(HISTORY_POINTS):
            f = max(self.t0 - j, 0)
            stack[j] = self.log.frames[f].sdv_pose
        return stack

    def observe(self, tape: Tape | None, stack, t: int) -> PackedObs:
        pose = engine.take_row(tape, stack, 0)
        hist_rel = engine.history_points(tape, stack)
        agent_world, agent_mask = self._agent_world_points(t)
        parts = [hist_rel]
        if self.n_agents:
            parts.append(engine.frame_points(tape, pose, agent_world, True))
        if self.static_world.shape[0]:
            parts.append(engine.frame_points(tape, pose, self.static_world, False))
        coords = engine.concat0(tape, parts) if len(parts) > 1 else parts[0]
        feats = engine.concat1(tape, [coords, self._const_block(t)])
        point_mask, elem_mask = self._masks(t, agent_mask)
        return PackedObs(feats=feats, starts=self.starts, kinds=self.kinds,
                         elem_mask=elem_mask, point_mask=point_mask,
                         point_order=self.point_order, slots=self.slots)

    def advance(self, tape: Tape | None, stack, action):
        """One kinematic step of the pose-history stack."""
        if self.kinematics == "unicycle":
            action = engine.mul(tape, action, np.array([1.0, 0.0, 1.0]))
        return engine.sim_advance(tape, stack, action)

    # -- stateful spec-level API ----------------------------------------------

    def init_rollout(self, tape: Tape | None) -> SimState:
        stack = engine.leaf(tape, self.initial_stack())
        return SimState(t=self.t0, stack=stack, obs=self.observe(tape, stack, self.t0))

    def step(self, state: SimState, action, tape: Tape | None = None) -> SimState:
        if state.t + 1 > self.t0 + self.horizon:
            raise ValueError(f"step at t={state.t} overflows rollout horizon")
        tape = tape if tape is not None else (state.stack.tape if isinstance(state.stack, Var) else None)
        new_stack = self.advance(tape, state.stack, action)
        t = state.t + 1
        return SimState(t=t, stack=new_stack, obs=self.observe(tape, new_stack, t))

    # -- dynamic world queries -------------------------------------------------

    def vehicle_states(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Poses (m,3) and extents (m,2) of registry vehicles present at
        frame t (collision-loss world)."""
        poses, extents = [], []
        frame = self.log.frames[t]
        for aid in self.agent_ids:
            if self.agent_kind[aid] != "vehicle":
                continue
            state = frame.agent(aid)
            if state is not None:
                poses.append(state.pose)
                extents.append(state.extent)
        if not poses:
            return np.zeros((0, 3)), np.zeros((0, 2))
        return np.asarray(poses), np.asarray(extents)

    # -- padded materialization -------------------------------------------------

    def observation_padded(self, state: SimState) -> Observation:
        """The spec-shaped fixed-slot Observation for the current state;
        masked slots and points are zeroed."""
        feats = engine.value_of(state.obs.feats)
        points = np.zeros((len(slot_kinds()), MAX_POINTS, N_FEATURES))
        point_mask = np.zeros((points.shape[0], MAX_POINTS))
        elem_mask = np.zeros(points.shape[0])
        for e, slot in enumerate(self.slots):
            lo, hi = self.starts[e], self.starts[e + 1]
            if state.obs.elem_mask[e] <= 0.0:
                continue
            elem_mask[slot] = 1.0
            n = hi - lo
            pm = state.obs.point_mask[lo:hi]
            points[slot, :n] = feats[lo:hi] * pm[:, None]
            point_mask[slot, :n] = pm
        return Observation(kinds=slot_kinds(), elem_mask=elem_mask,
                           points=points, point_mask=point_mask)
