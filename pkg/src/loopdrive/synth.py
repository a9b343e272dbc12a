"""Procedural desk-scale driving scenarios.

Each scenario is built from a road layout (straight, curve, or a signaled
intersection with an optional turn), scripted vehicles that follow lane
centerlines under an IDM-style car-following rule, optional pedestrians on
crosswalks, and an expert SDV driven by a pure-pursuit tracker with the same
longitudinal rule. The expert obeys traffic-light phases and keeps gaps to
lead vehicles, so its trajectory is collision-free by construction (a
rectangle-intersection self-check drops any scripted agent that would
contradict that).

All randomness flows through a counter-based Philox generator keyed on
(seed, scenario index): regenerating with the same config is byte-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import se2
from .rng import stream
from .kernels import rect_vertices, sat_intersect
from .scene import AgentState, Crosswalk, Frame, Lane, ScenarioLog

LANE_WIDTH = 3.5
SEGMENT_LEN = 25.0  # lane elements are chunks of roughly this arc length
VEHICLE_EXTENT = (4.5, 1.9)
PEDESTRIAN_EXTENT = (0.6, 0.6)


@dataclass
class GenConfig:
    seed: int = 0
    n_scenarios: int = 8
    frames_per_scenario: int = 250
    dt: float = 0.1
    layout_weights: dict[str, float] = field(
        default_factory=lambda: {"straight": 1.0, "curve": 1.0, "intersection": 1.0})
    mean_vehicles: float = 5.0
    pedestrian_prob: float = 0.5
    green_s: float = 9.0
    yellow_s: float = 2.0
    red_s: float = 9.0
    speed_range: tuple[float, float] = (7.0, 11.0)

    def validate(self) -> None:
        if self.n_scenarios <= 0 or self.frames_per_scenario <= 0:
            raise ValueError("scenario and frame counts must be positive")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        w = self.layout_weights
        if any(v < 0.0 for v in w.values()) or sum(w.values()) <= 0.0:
            raise ValueError("layout weights must be non-negative, not all zero")
        if min(self.green_s, self.yellow_s, self.red_s) <= 0.0:
            raise ValueError("traffic light phases must be positive")


# ---------------------------------------------------------------------------
# path geometry
# ---------------------------------------------------------------------------


class Path:
    """Dense arc-length parameterized centerline."""

    def __init__(self, pts: np.ndarray):
        self.pts = np.asarray(pts, dtype=np.float64)
        d = np.sqrt(np.sum(np.diff(self.pts, axis=0) ** 2, axis=1))
        self.cum = np.concatenate([[0.0], np.cumsum(d)])
        self.length = float(self.cum[-1])

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = int(np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.cum) - 2))
        span = self.cum[i + 1] - self.cum[i]
        f = (s - self.cum[i]) / span if span > 0 else 0.0
        return self.pts[i] + f * (self.pts[i + 1] - self.pts[i])

    def heading_at(self, s: float) -> float:
        s = min(max(s, 0.0), self.length)
        i = int(np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.cum) - 2))
        d = self.pts[i + 1] - self.pts[i]
        return math.atan2(d[1], d[0])

    def pose_at(self, s: float) -> np.ndarray:
        p = self.point_at(s)
        return np.array([p[0], p[1], self.heading_at(s)])

    def nearest_s(self, x: float, y: float) -> float:
        d2 = (self.pts[:, 0] - x) ** 2 + (self.pts[:, 1] - y) ** 2
        i = int(np.argmin(d2))
        return float(self.cum[i])

    def offset(self, lateral: float) -> np.ndarray:
        """Parallel polyline displaced to the left by ``lateral`` meters."""
        out = np.empty_like(self.pts)
        n = self.pts.shape[0]
        for i in range(n):
            j0, j1 = max(i - 1, 0), min(i + 1, n - 1)
            d = self.pts[j1] - self.pts[j0]
            h = math.atan2(d[1], d[0])
            out[i, 0] = self.pts[i, 0] - lateral * math.sin(h)
            out[i, 1] = self.pts[i, 1] + lateral * math.cos(h)
        return out


def _line(origin: np.ndarray, heading: float, length: float, step: float = 1.0) -> np.ndarray:
    n = max(int(round(length / step)), 1)
    s = np.linspace(0.0, length, n + 1)
    return np.stack([origin[0] + s * math.cos(heading),
                     origin[1] + s * math.sin(heading)], axis=1)


def _arc(origin: np.ndarray, heading: float, radius: float, angle: float,
         step: float = 1.0) -> np.ndarray:
    """Arc starting at origin with given tangent heading; positive angle
    turns left."""
    n = max(int(round(abs(angle) * radius / step)), 2)
    t = np.linspace(0.0, angle, n + 1)
    sign = 1.0 if angle >= 0 else -1.0
    cx = origin[0] - sign * radius * math.sin(heading)
    cy = origin[1] + sign * radius * math.cos(heading)
    a0 = heading - sign * math.pi / 2.0
    return np.stack([cx + radius * np.cos(a0 + t),
                     cy + radius * np.sin(a0 + t)], axis=1)


def _chunk_lanes(prefix: str, mid_pts: np.ndarray, tl: bool = False) -> list[Lane]:
    """Split a full-road centerline into lane elements of ~SEGMENT_LEN."""
    path = Path(mid_pts)
    n_seg = max(int(math.ceil(path.length / SEGMENT_LEN)), 1)
    left_pts = path.offset(+LANE_WIDTH / 2.0)
    right_pts = path.offset(-LANE_WIDTH / 2.0)
    bounds = np.linspace(0.0, path.length, n_seg + 1)
    lanes = []
    for k in range(n_seg):
        lo = int(np.searchsorted(path.cum, bounds[k], side="left"))
        hi = int(np.searchsorted(path.cum, bounds[k + 1], side="right"))
        hi = min(max(hi, lo + 2), mid_pts.shape[0])
        lanes.append(Lane(
            lane_id=f"{prefix}_{k:02d}",
            mid=mid_pts[lo:hi].copy(),
            left=left_pts[lo:hi].copy(),
            right=right_pts[lo:hi].copy(),
            traffic_light=tl,
        ))
    return lanes


# ---------------------------------------------------------------------------
# longitudinal rule
# ---------------------------------------------------------------------------


@dataclass
class IdmParams:
    v0: float = 9.0
    a_max: float = 2.0
    b: float = 3.0
    s0: float = 2.5
    headway: float = 1.4


def idm_accel(v: float, gap: float | None, lead_v: float, p: IdmParams) -> float:
    free = p.a_max * (1.0 - (v / p.v0) ** 4)
    if gap is None:
        return free
    gap = max(gap, 0.1)
    s_star = p.s0 + v * p.headway + v * (v - lead_v) / (2.0 * math.sqrt(p.a_max * p.b))
    return p.a_max * (1.0 - (v / p.v0) ** 4 - (max(s_star, 0.0) / gap) ** 2)


# ---------------------------------------------------------------------------
# scenario assembly
# ---------------------------------------------------------------------------


@dataclass
class _Mover:
    """A vehicle tracking a path with pure pursuit + IDM."""

    path: Path
    s: float
    v: float
    idm: IdmParams
    pose: np.ndarray = None  # set on first tick
    lookahead: float = 5.0

    def __post_init__(self):
        if self.pose is None:
            self.pose = self.path.pose_at(self.s)

    def tick(self, dt: float, gap: float | None, lead_v: float) -> None:
        a = idm_accel(self.v, gap, lead_v, self.idm)
        self.v = max(0.0, self.v + a * dt)
        target = self.path.point_at(self.s + self.lookahead)
        rel = se2.relative(self.pose, np.array([target[0], target[1], 0.0]))
        dist = math.hypot(rel[0], rel[1])
        if dist > 1e-6 and self.v > 1e-9:
            curvature = 2.0 * rel[1] / (dist * dist)
            self.pose = se2.compose(self.pose, np.array([
                self.v * dt, 0.0, self.v * dt * curvature]))
        self.s += self.v * dt


class _LightSchedule:
    """Two-phase signal; the cross road gets the complementary phase with an
    all-red clearance second on each side."""

    def __init__(self, cfg: GenConfig, offset: float):
        self.g, self.y, self.r = cfg.green_s, cfg.yellow_s, cfg.red_s
        self.cycle = self.g + self.y + self.r
        self.offset = offset

    def main_state(self, t: float) -> str:
        u = (t + self.offset) % self.cycle
        if u < self.g:
            return "green"
        if u < self.g + self.y:
            return "yellow"
        return "red"

    def cross_state(self, t: float) -> str:
        u = (t + self.offset) % self.cycle
        if u < self.g + self.y + 1.0:
            return "red"
        if u < self.cycle - 1.0:
            return "green"
        return "red"


def _weighted_choice(rng: np.random.Generator, weights: dict[str, float]) -> str:
    names = sorted(weights)
    w = np.array([weights[n] for n in names], dtype=np.float64)
    return names[int(rng.choice(len(names), p=w / w.sum()))]


def _build_world(rng: np.random.Generator, cfg: GenConfig):
    """Returns lanes, crosswalks, SDV route, agent route specs, light info."""
    layout = _weighted_choice(rng, cfg.layout_weights)
    base = np.array([rng.uniform(-200.0, 200.0), rng.uniform(-200.0, 200.0)])
    heading = rng.uniform(-math.pi, math.pi)

    lanes: list[Lane] = []
    crosswalks: list[Crosswalk] = []
    routes: dict[str, Path] = {}
    light = None
    stop_s = None  # arc position of the stop line on the SDV route

    if layout in ("straight", "curve"):
        length = 420.0
        if layout == "straight":
            mid = _line(base, heading, length)
        else:
            radius = rng.uniform(45.0, 130.0)
            angle = (length / radius) * (1.0 if rng.random() < 0.5 else -1.0)
            mid = _arc(base, heading, radius, angle)
        ego_path = Path(mid)
        adj = Path(ego_path.offset(LANE_WIDTH))
        opp = Path(ego_path.offset(-LANE_WIDTH)[::-1].copy())
        lanes += _chunk_lanes("ego", ego_path.pts)
        lanes += _chunk_lanes("adj", adj.pts)
        lanes += _chunk_lanes("opp", opp.pts)
        routes = {"ego": ego_path, "adj": adj, "opp": opp}
        # a mid-block crosswalk
        if rng.random() < 0.7:
            s_cw = rng.uniform(0.35, 0.65) * ego_path.length
            pose = ego_path.pose_at(s_cw)
            c, s = math.cos(pose[2]), math.sin(pose[2])
            half_w, half_l = 2.0, LANE_WIDTH * 1.6
            corners = [(-half_w, -half_l), (half_w, -half_l), (half_w, half_l),
                       (-half_w, half_l), (-half_w, -half_l)]
            poly = np.array([[pose[0] + c * u - s * w, pose[1] + s * u + c * w]
                             for u, w in corners])
            crosswalks.append(Crosswalk("cw0", poly))
    else:
        half = 180.0
        junction = base
        turn = rng.choice(np.array([0, 1, 2]), p=np.array([0.5, 0.25, 0.25]))
        approach = _line(junction - half * np.array([math.cos(heading), math.sin(heading)]),
                         heading, half - 8.0)
        exit_straight = _line(junction + 8.0 * np.array([math.cos(heading), math.sin(heading)]),
                              heading, half - 8.0)
        cross_h = se2.wrap_angle(heading + math.pi / 2.0)
        cross_full = _line(junction - half * np.array([math.cos(cross_h), math.sin(cross_h)]),
                           cross_h, 2 * half)
        opp_full = _line(junction + half * np.array([math.cos(heading), math.sin(heading)]),
                         se2.wrap_angle(heading + math.pi), 2 * half)

        lanes += _chunk_lanes("app", approach, tl=True)
        lanes += _chunk_lanes("exit", exit_straight)
        lanes += _chunk_lanes("cross", cross_full, tl=True)
        lanes += _chunk_lanes("opp", Path(Path(opp_full).offset(-LANE_WIDTH)).pts)

        if turn == 0:
            gap = _line(approach[-1], heading, 16.0)
            ego_pts = np.concatenate([approach, gap[1:], exit_straight[1:]])
        else:
            sign = 1.0 if turn == 1 else -1.0
            radius = 12.0
            arc = _arc(approach[-1], heading, radius, sign * math.pi / 2.0)
            out_h = se2.wrap_angle(heading + sign * math.pi / 2.0)
            out = _line(arc[-1], out_h, half - 20.0)
            ego_pts = np.concatenate([approach, arc[1:], out[1:]])
            lanes += _chunk_lanes("turn", np.concatenate([arc, out[1:12]]))
        ego_path = Path(ego_pts)
        routes = {"ego": ego_path,
                  "cross": Path(cross_full),
                  "opp": Path(Path(opp_full).offset(-LANE_WIDTH).copy())}
        light = _LightSchedule(cfg, offset=rng.uniform(0.0, cfg.green_s + cfg.yellow_s + cfg.red_s))
        stop_s = Path(approach).length  # approach ends 8 m before the junction center
        # crosswalk across the exit arm
        pose = Path(exit_straight).pose_at(6.0)
        c, s = math.cos(pose[2]), math.sin(pose[2])
        half_w, half_l = 2.0, LANE_WIDTH * 2.2
        corners = [(-half_w, -half_l), (half_w, -half_l), (half_w, half_l),
                   (-half_w, half_l), (-half_w, -half_l)]
        poly = np.array([[pose[0] + c * u - s * w, pose[1] + s * u + c * w]
                         for u, w in corners])
        crosswalks.append(Crosswalk("cw0", poly))

    return layout, lanes, crosswalks, routes, light, stop_s


def _spawn_vehicles(rng, cfg, routes, layout) -> list[tuple[str, _Mover, str]]:
    """Returns (agent_id, mover, route_name); the ego route gets a leader and
    a follower so the expert interacts with traffic."""
    out = []
    n_extra = int(rng.poisson(cfg.mean_vehicles))
    ego = routes["ego"]

    def mk(route_name: str, s: float, v_scale: float = 1.0) -> _Mover:
        v0 = rng.uniform(*cfg.speed_range) * v_scale
        return _Mover(path=routes[route_name], s=s, v=v0 * rng.uniform(0.7, 1.0),
                      idm=IdmParams(v0=v0))

    ego_s0 = 25.0
    if rng.random() < 0.8:
        out.append(("a_lead", mk("ego", ego_s0 + rng.uniform(30.0, 55.0), 0.9), "ego"))
    if rng.random() < 0.6:
        out.append(("a_tail", mk("ego", max(ego_s0 - rng.uniform(18.0, 30.0), 2.0)), "ego"))
    other = [r for r in sorted(routes) if r != "ego"]
    for i in range(n_extra):
        rname = other[int(rng.integers(len(other)))] if other else "ego"
        margin = routes[rname].length * 0.85
        out.append((f"a{i:02d}", mk(rname, rng.uniform(5.0, max(margin, 10.0))), rname))

    # enforce a minimum initial gap within each route so nobody spawns on
    # top of a neighbour
    by_route: dict[str, list[int]] = {}
    for j, (_, mv, rname) in enumerate(out):
        by_route.setdefault(rname, []).append(j)
    for rname, idxs in by_route.items():
        idxs.sort(key=lambda j: out[j][1].s)
        for a, b in zip(idxs, idxs[1:]):
            lo = out[a][1].s + 15.0
            if out[b][1].s < lo:
                out[b][1].s = lo
                out[b][1].pose = out[b][1].path.pose_at(lo)
    return out


def _spawn_pedestrian(rng, cfg, crosswalks) -> tuple[str, np.ndarray, np.ndarray, float] | None:
    if not crosswalks or rng.random() > cfg.pedestrian_prob:
        return None
    poly = crosswalks[0].polygon
    a = 0.5 * (poly[0] + poly[1])
    b = 0.5 * (poly[2] + poly[3])
    if rng.random() < 0.5:
        a, b = b, a
    speed = rng.uniform(1.0, 1.6)
    start_t = rng.uniform(0.0, cfg.frames_per_scenario * cfg.dt * 0.6)
    return ("ped0", a, b, speed), start_t


def generate_scenario(cfg: GenConfig, index: int) -> ScenarioLog:
    rng = stream(cfg.seed, index)
    layout, lanes, crosswalks, routes, light, stop_s = _build_world(rng, cfg)
    n = cfg.frames_per_scenario
    dt = cfg.dt

    expert = _Mover(path=routes["ego"], s=25.0,
                    v=rng.uniform(*cfg.speed_range) * 0.8,
                    idm=IdmParams(v0=rng.uniform(*cfg.speed_range)))
    vehicles = _spawn_vehicles(rng, cfg, routes, layout)
    ped_spec = _spawn_pedestrian(rng, cfg, crosswalks)

    # per-route follower ordering, front-most first; the expert participates
    # in the ego route ordering
    frames: list[Frame] = []
    expert_states = []
    movers = {aid: mv for aid, mv, _ in vehicles}
    route_of = {aid: rn for aid, _, rn in vehicles}

    def light_states(t: float) -> dict[str, str]:
        if light is None:
            return {}
        states = {}
        for lane in lanes:
            if not lane.traffic_light:
                continue
            states[lane.lane_id] = (light.main_state(t) if lane.lane_id.startswith("app")
                                    else light.cross_state(t))
        return states

    def stop_gap(mv_s: float, mv_route: str, t: float) -> float | None:
        if light is None:
            return None
        if mv_route == "ego":
            state = light.main_state(t)
            line = stop_s
        elif mv_route == "cross":
            state = light.cross_state(t)
            line = routes["cross"].length / 2.0 - 8.0
        else:
            return None
        if state == "green":
            return None
        gap = line - mv_s - VEHICLE_EXTENT[0] / 2.0
        if gap < -2.0:  # already past the line; keep going
            return None
        return gap

    for k in range(n):
        t = k * dt
        # order all ego-route participants by arc position, leaders first
        ego_group = [("__sdv__", expert)] + [
            (aid, movers[aid]) for aid in sorted(movers) if route_of[aid] == "ego"]
        ego_group.sort(key=lambda kv: -kv[1].s)
        prev: _Mover | None = None
        ticked = set()
        for aid, mv in ego_group:
            gap = None
            lead_v = 0.0
            if prev is not None:
                gap = prev.s - mv.s - VEHICLE_EXTENT[0]
                lead_v = prev.v
            sgap = stop_gap(mv.s, "ego", t)
            if sgap is not None and (gap is None or sgap < gap):
                gap, lead_v = sgap, 0.0
            mv.tick(dt, gap, lead_v)
            ticked.add(aid)
            prev = mv
        for rname in ("adj", "opp", "cross"):
            group = [(aid, movers[aid]) for aid in sorted(movers)
                     if route_of[aid] == rname and aid not in ticked]
            group.sort(key=lambda kv: -kv[1].s)
            prev = None
            for aid, mv in group:
                gap = None
                lead_v = 0.0
                if prev is not None:
                    gap = prev.s - mv.s - VEHICLE_EXTENT[0]
                    lead_v = prev.v
                sgap = stop_gap(mv.s, rname, t)
                if sgap is not None and (gap is None or sgap < gap):
                    gap, lead_v = sgap, 0.0
                mv.tick(dt, gap, lead_v)
                prev = mv

        agents = []
        for aid in sorted(movers):
            mv = movers[aid]
            if mv.s < mv.path.length - 1.0:
                agents.append(AgentState(aid, mv.pose.copy(), VEHICLE_EXTENT, "vehicle"))
        if ped_spec is not None:
            (pid, pa, pb, pspeed), start_t = ped_spec
            seg = pb - pa
            seg_len = math.hypot(seg[0], seg[1])
            u = (t - start_t) * pspeed
            if 0.0 <= u <= seg_len:
                p = pa + seg * (u / seg_len)
                yaw = math.atan2(seg[1], seg[0])
                agents.append(AgentState(pid, np.array([p[0], p[1], yaw]),
                                         PEDESTRIAN_EXTENT, "pedestrian"))

        frames.append(Frame(sdv_pose=expert.pose.copy(), agents=agents,
                            traffic_lights=light_states(t)))
        expert_states.append((expert.pose.copy(), expert.v))

    # drop any scripted agent whose box ever touches the expert's box
    bad: set[str] = set()
    sdv_l, sdv_w = VEHICLE_EXTENT
    for k, frame in enumerate(frames):
        ego_box = rect_vertices(frame.sdv_pose[0], frame.sdv_pose[1], frame.sdv_pose[2],
                                sdv_l, sdv_w)
        for a in frame.agents:
            if a.agent_id in bad:
                continue
            box = rect_vertices(a.pose[0], a.pose[1], a.pose[2], a.extent[0], a.extent[1])
            if sat_intersect(ego_box, box):
                bad.add(a.agent_id)
    if bad:
        for frame in frames:
            frame.agents = [a for a in frame.agents if a.agent_id not in bad]

    return ScenarioLog(
        scenario_id=f"syn-{cfg.seed}-{index:04d}",
        dt=dt,
        lanes=lanes,
        crosswalks=crosswalks,
        frames=frames,
        sdv_extent=VEHICLE_EXTENT,
    )


def generate(cfg: GenConfig) -> list[ScenarioLog]:
    """Deterministic scenario batch; scenario i depends only on (seed, i)."""
    cfg.validate()
    return [generate_scenario(cfg, i) for i in range(cfg.n_scenarios)]
