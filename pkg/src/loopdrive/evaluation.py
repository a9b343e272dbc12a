"""Closed-loop evaluation with intervention resets.

Each held-out scenario is unrolled from its start: the policy produces a
pose increment per frame, and the resulting trajectory is scored against
the logged expert. Safety failures (oriented-box collisions, lateral
deviation beyond a threshold) trigger a reset that snaps the SDV back onto
the expert pose at the current frame, after which the unroll continues.
Comfort statistics are computed per contiguous segment between resets so a
reset jump is never billed as acceleration.

Counts are reported raw and normalized per 1000 miles of expert reference
driving; collisions plus off-road events make the headline interventions
rate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import se2
from .kernels import overlap_centroid, polyline_min_distance, rect_vertices, sat_intersect
from .policy import PolicyConfig, forward, first_action
from .scene import ScenarioLog, vectorize
from .sim import kinematics_step

METERS_PER_MILE = 1609.344

REPORT_SCHEMA = "v1"


@dataclass
class EvalConfig:
    offroad_threshold: float = 2.0
    comfort_acc: float = 3.0        # m/s^2
    jerk_threshold: float = 2.0     # m/s^3 (longitudinal)
    lat_acc_threshold: float = 3.0  # m/s^2
    start_frame: int = 3
    kinematics: str = "unconstrained"
    seed: int = 0
    record_events: bool = False


@dataclass
class MetricsReport:
    n_scenarios: int = 0
    miles: float = 0.0
    l2_mean: float = 0.0
    counts: dict[str, int] = field(default_factory=lambda: {
        "front": 0, "side": 0, "rear": 0, "off_road": 0,
        "comfort_acc": 0, "jerk": 0, "lat_acc": 0,
    })
    events: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def collisions_total(self) -> int:
        return self.counts["front"] + self.counts["side"] + self.counts["rear"]

    @property
    def interventions(self) -> int:
        return self.collisions_total + self.counts["off_road"]

    def per_1000_miles(self, count: int) -> float:
        return normalize_per_1000_miles(count, self.miles)

    @property
    def i1k(self) -> float:
        return self.per_1000_miles(self.interventions)

    def to_json_dict(self) -> dict:
        normalized = {k: self.per_1000_miles(v) for k, v in self.counts.items()}
        return {
            "schema": REPORT_SCHEMA,
            "n_scenarios": self.n_scenarios,
            "miles": self.miles,
            "l2_mean": self.l2_mean,
            "counts": dict(self.counts),
            "normalized_per_1000_miles": normalized,
            "collisions_total": self.collisions_total,
            "i1k": self.i1k,
            "config": self.config,
        }

    def to_table(self) -> str:
        rows = [
            ("scenarios", f"{self.n_scenarios}"),
            ("miles driven (reference)", f"{self.miles:.3f}"),
            ("L2 mean [m]", f"{self.l2_mean:.4f}"),
        ]
        for key in ("front", "side", "rear", "off_road",
                    "comfort_acc", "jerk", "lat_acc"):
            rows.append((f"{key} count", f"{self.counts[key]}"))
            rows.append((f"{key} /1000mi", f"{self.per_1000_miles(self.counts[key]):.1f}"))
        rows.append(("I1K", f"{self.i1k:.1f}"))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)

    def save(self, json_path, table_path=None) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        if table_path:
            with open(table_path, "w") as fh:
                fh.write(self.to_table() + "\n")


def normalize_per_1000_miles(count: float, miles: float) -> float:
    if miles <= 0.0:
        raise ValueError("miles driven must be positive")
    return count * 1000.0 / miles


def lateral_deviation(sdv_pose, reference_xy: np.ndarray) -> float:
    """Distance from the pose position to the nearest reference segment."""
    if reference_xy.shape[0] < 2:
        raise ValueError("reference polyline needs at least 2 points")
    return float(polyline_min_distance(float(sdv_pose[0]), float(sdv_pose[1]),
                                       np.ascontiguousarray(reference_xy)))


def collision_check(sdv_pose, sdv_extent, agents) -> dict | None:
    """First colliding agent (lowest id) with its sector, or None.

    The sector comes from the bearing of the penetration centroid in the SDV
    body frame: |bearing| <= 45 deg is front, >= 135 deg is rear, else side.
    """
    ego_box = rect_vertices(sdv_pose[0], sdv_pose[1], sdv_pose[2],
                            sdv_extent[0], sdv_extent[1])
    hits = []
    for agent in agents:
        box = rect_vertices(agent.pose[0], agent.pose[1], agent.pose[2],
                            agent.extent[0], agent.extent[1])
        if not sat_intersect(ego_box, box):
            continue
        contact = overlap_centroid(box, ego_box)
        if contact is None:
            contact = np.array([agent.pose[0], agent.pose[1]])
        rel = se2.relative(np.asarray(sdv_pose, dtype=np.float64),
                           np.array([contact[0], contact[1], 0.0]))
        bearing = abs(math.atan2(rel[1], rel[0]))
        if bearing <= math.pi / 4.0:
            sector = "front"
        elif bearing >= 3.0 * math.pi / 4.0:
            sector = "rear"
        else:
            sector = "side"
        hits.append((agent.agent_id, sector))
    if not hits:
        return None
    hits.sort()
    return {"agent_id": hits[0][0], "sector": hits[0][1]}


def comfort_check(poses: np.ndarray, dt: float,
                  acc_threshold: float = 3.0,
                  jerk_threshold: float = 2.0,
                  lat_threshold: float = 3.0) -> dict[str, int]:
    """Finite-difference comfort failures over one contiguous pose sequence.

    Acceleration is the norm of the planar second difference; longitudinal
    jerk differentiates scalar speed twice; lateral acceleration is speed
    times yaw rate.
    """
    poses = np.asarray(poses, dtype=np.float64)
    counts = {"comfort_acc": 0, "jerk": 0, "lat_acc": 0}
    n = poses.shape[0]
    if n < 3:
        return counts
    xy = poses[:, :2]
    acc_vec = (xy[2:] - 2.0 * xy[1:-1] + xy[:-2]) / (dt * dt)
    acc_mag = np.sqrt(np.sum(acc_vec ** 2, axis=1))
    counts["comfort_acc"] = int(np.sum(acc_mag > acc_threshold))

    speed = np.sqrt(np.sum(np.diff(xy, axis=0) ** 2, axis=1)) / dt
    if speed.shape[0] >= 3:
        long_acc = np.diff(speed) / dt
        jerk = np.diff(long_acc) / dt
        counts["jerk"] = int(np.sum(np.abs(jerk) > jerk_threshold))
    dyaw = se2.wrap_angles(np.diff(poses[:, 2]))
    lat = speed * dyaw / dt
    counts["lat_acc"] = int(np.sum(np.abs(lat) > lat_threshold))
    return counts


# ---------------------------------------------------------------------------
# policies under evaluation
# ---------------------------------------------------------------------------


class ExpertOraclePolicy:
    """Replays the logged expert increments; the zero-failure baseline."""

    def act(self, log: ScenarioLog, t: int, pose, history) -> np.ndarray:
        return se2.relative(log.frames[t].sdv_pose, log.frames[t + 1].sdv_pose)


class NetworkPolicy:
    """Wraps trained parameters; builds a fresh observation around the
    simulated pose (with the policy's own pose history) each frame."""

    def __init__(self, params, cfg: PolicyConfig):
        self.params = params
        self.cfg = cfg

    def act(self, log: ScenarioLog, t: int, pose, history) -> np.ndarray:
        obs = vectorize(log, t, pose, sdv_history=history)
        traj = forward(None, self.params, self.cfg, obs)
        return first_action(None, traj)


def evaluate(policy_obj, logs: list[ScenarioLog], cfg: EvalConfig) -> MetricsReport:
    """Closed-loop metric suite over held-out scenarios."""
    report = MetricsReport()
    report.config = {
        "offroad_threshold": cfg.offroad_threshold,
        "comfort_acc": cfg.comfort_acc,
        "jerk_threshold": cfg.jerk_threshold,
        "lat_acc_threshold": cfg.lat_acc_threshold,
        "start_frame": cfg.start_frame,
        "kinematics": cfg.kinematics,
        "seed": cfg.seed,
    }
    l2_per_scenario = []
    for log in logs:
        result = _evaluate_scenario(policy_obj, log, cfg)
        for key in report.counts:
            report.counts[key] += result["counts"][key]
        report.miles += result["miles"]
        l2_per_scenario.append(result["l2_mean"])
        if cfg.record_events:
            report.events.extend(result["events"])
        report.n_scenarios += 1
    report.l2_mean = float(np.mean(l2_per_scenario)) if l2_per_scenario else 0.0
    return report


def _evaluate_scenario(policy_obj, log: ScenarioLog, cfg: EvalConfig) -> dict:
    n = len(log.frames)
    start = min(cfg.start_frame, n - 2)
    expert = log.sdv_poses()
    reference = np.ascontiguousarray(expert[:, :2])

    pose = expert[start].copy()
    history = np.stack([expert[max(start - j, 0)] for j in (1, 2, 3)])
    counts = {k: 0 for k in ("front", "side", "rear", "off_road",
                             "comfort_acc", "jerk", "lat_acc")}
    events = []
    l2 = []
    segment = [pose.copy()]
    segments = []

    for t in range(start, n - 1):
        action = policy_obj.act(log, t, pose, history)
        new_pose = kinematics_step(pose, np.asarray(action, dtype=np.float64),
                                   model=cfg.kinematics)
        history = np.stack([pose, history[0], history[1]])
        pose = new_pose
        l2.append(float(np.hypot(pose[0] - expert[t + 1][0],
                                 pose[1] - expert[t + 1][1])))
        segment.append(pose.copy())

        failure = None
        hit = collision_check(pose, log.sdv_extent, log.frames[t + 1].agents)
        if hit is not None:
            counts[hit["sector"]] += 1
            failure = {"type": "collision", **hit}
        else:
            dev = lateral_deviation(pose, reference)
            if dev > cfg.offroad_threshold:
                counts["off_road"] += 1
                failure = {"type": "off_road", "deviation": dev}
        if failure is not None:
            failure.update({"scenario": log.scenario_id, "frame": t + 1,
                            "pose_before": [float(v) for v in pose]})
            pose = expert[t + 1].copy()
            history = np.stack([expert[max(t + 1 - j, 0)] for j in (1, 2, 3)])
            failure["pose_after"] = [float(v) for v in pose]
            events.append(failure)
            segments.append(np.asarray(segment))
            segment = [pose.copy()]

    segments.append(np.asarray(segment))
    for seg in segments:
        c = comfort_check(seg, log.dt, cfg.comfort_acc, cfg.jerk_threshold,
                          cfg.lat_acc_threshold)
        for k, v in c.items():
            counts[k] += v

    arc = np.sum(np.sqrt(np.sum(np.diff(expert[start:, :2], axis=0) ** 2, axis=1)))
    return {
        "counts": counts,
        "miles": float(arc) / METERS_PER_MILE,
        "l2_mean": float(np.mean(l2)) if l2 else 0.0,
        "events": events,
    }
