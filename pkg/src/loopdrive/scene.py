"""World-frame scenario logs and their vectorized observation.

A scenario is serialized as line-delimited JSON: one header object carrying
the map and scenario metadata, then one object per frame. The format is
versioned via a ``schema`` field (currently ``"v1"``) and round-trips
exactly (floats are written with shortest-repr precision).

``vectorize`` turns a log plus a query pose into the fixed-slot Observation
consumed by the policy: elements inside a circular field of view are chosen
nearest-first up to per-kind slot budgets, lane polylines are resampled to a
fixed point count by arc length, and all coordinates are expressed relative
to the query pose.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, se2

SCHEMA_VERSION = "v1"

FOV_RADIUS = 35.0

# slot budgets per element kind
N_AGENT_SLOTS = 30
N_LANE_SLOTS = 30
N_CROSSWALK_SLOTS = 20
N_SLOTS = 1 + N_AGENT_SLOTS + 3 * N_LANE_SLOTS + N_CROSSWALK_SLOTS  # 141
MAX_POINTS = 20
LANE_POINTS = 20
HISTORY_POINTS = 4  # current pose plus three recent past poses

KIND_SDV = 0
KIND_AGENT = 1
KIND_LANE_MID = 2
KIND_LANE_LEFT = 3
KIND_LANE_RIGHT = 4
KIND_CROSSWALK = 5
N_KINDS = 6

# per-point feature layout
N_FEATURES = 16
FEAT_X, FEAT_Y, FEAT_YAW, FEAT_TIME = 0, 1, 2, 3
FEAT_TL = 4  # four traffic-light slots: red, yellow, green, unknown
FEAT_KIND = 8  # six one-hot kind slots; remaining two columns are padding

TL_STATES = ("red", "yellow", "green", "unknown")
AGENT_KINDS = ("vehicle", "pedestrian", "cyclist")

SLOT_SDV = 0
SLOT_AGENT0 = 1
SLOT_LANE_MID0 = SLOT_AGENT0 + N_AGENT_SLOTS
SLOT_LANE_LEFT0 = SLOT_LANE_MID0 + N_LANE_SLOTS
SLOT_LANE_RIGHT0 = SLOT_LANE_LEFT0 + N_LANE_SLOTS
SLOT_CROSSWALK0 = SLOT_LANE_RIGHT0 + N_LANE_SLOTS


class ScenarioFormatError(ValueError):
    """Raised when a scenario file violates the schema or an invariant."""


@dataclass
class Lane:
    lane_id: str
    mid: np.ndarray  # (n, 2) world xy
    left: np.ndarray
    right: np.ndarray
    traffic_light: bool = False

    def __eq__(self, other):
        return (isinstance(other, Lane)
                and self.lane_id == other.lane_id
                and self.traffic_light == other.traffic_light
                and np.array_equal(self.mid, other.mid)
                and np.array_equal(self.left, other.left)
                and np.array_equal(self.right, other.right))


@dataclass
class Crosswalk:
    crosswalk_id: str
    polygon: np.ndarray  # (n, 2) closed: first row equals last row

    def __eq__(self, other):
        return (isinstance(other, Crosswalk)
                and self.crosswalk_id == other.crosswalk_id
                and np.array_equal(self.polygon, other.polygon))


@dataclass
class AgentState:
    agent_id: str
    pose: np.ndarray  # (3,)
    extent: tuple[float, float]  # length, width in meters
    kind: str = "vehicle"

    def __eq__(self, other):
        return (isinstance(other, AgentState)
                and self.agent_id == other.agent_id
                and self.extent == other.extent
                and self.kind == other.kind
                and np.array_equal(self.pose, other.pose))


@dataclass
class Frame:
    sdv_pose: np.ndarray  # (3,)
    agents: list[AgentState] = field(default_factory=list)
    traffic_lights: dict[str, str] = field(default_factory=dict)

    def agent(self, agent_id: str) -> AgentState | None:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        return None

    def __eq__(self, other):
        return (isinstance(other, Frame)
                and np.array_equal(self.sdv_pose, other.sdv_pose)
                and self.agents == other.agents
                and self.traffic_lights == other.traffic_lights)


@dataclass
class ScenarioLog:
    scenario_id: str
    dt: float
    lanes: list[Lane]
    crosswalks: list[Crosswalk]
    frames: list[Frame]
    sdv_extent: tuple[float, float] = (4.8, 1.9)

    def __post_init__(self):
        validate_log(self)

    def __len__(self):
        return len(self.frames)

    def sdv_poses(self) -> np.ndarray:
        return np.array([f.sdv_pose for f in self.frames])

    def __eq__(self, other):
        return (isinstance(other, ScenarioLog)
                and self.scenario_id == other.scenario_id
                and self.dt == other.dt
                and self.sdv_extent == other.sdv_extent
                and self.lanes == other.lanes
                and self.crosswalks == other.crosswalks
                and self.frames == other.frames)


def validate_log(log: ScenarioLog, where: str = "scenario") -> None:
    if not log.dt > 0.0:
        raise ScenarioFormatError(f"{where}: dt must be positive, got {log.dt}")
    if len(log.frames) < 2:
        raise ScenarioFormatError(f"{where}: needs at least 2 frames, got {len(log.frames)}")
    if log.sdv_extent[0] <= 0.0 or log.sdv_extent[1] <= 0.0:
        raise ScenarioFormatError(f"{where}: sdv_extent must be positive")
    for lane in log.lanes:
        for name in ("mid", "left", "right"):
            pts = getattr(lane, name)
            if pts.shape[0] < 2 or pts.shape[1] != 2:
                raise ScenarioFormatError(
                    f"{where}: lane {lane.lane_id} {name}: polyline needs >= 2 xy points")
    for cw in log.crosswalks:
        if cw.polygon.shape[0] < 4:
            raise ScenarioFormatError(
                f"{where}: crosswalk {cw.crosswalk_id}: closed polygon needs >= 4 points")
        if not np.array_equal(cw.polygon[0], cw.polygon[-1]):
            raise ScenarioFormatError(
                f"{where}: crosswalk {cw.crosswalk_id}: polygon is not closed")
    for i, frame in enumerate(log.frames):
        seen = set()
        for a in frame.agents:
            if a.agent_id in seen:
                raise ScenarioFormatError(
                    f"{where}: frame {i}: duplicate agent id {a.agent_id!r}")
            seen.add(a.agent_id)
            if a.extent[0] <= 0.0 or a.extent[1] <= 0.0:
                raise ScenarioFormatError(
                    f"{where}: frame {i}: agent {a.agent_id}: extent must be positive, "
                    f"got {a.extent}")
            if a.kind not in AGENT_KINDS:
                raise ScenarioFormatError(
                    f"{where}: frame {i}: agent {a.agent_id}: unknown kind {a.kind!r}")
        for lane_id, state in frame.traffic_lights.items():
            if state not in TL_STATES:
                raise ScenarioFormatError(
                    f"{where}: frame {i}: traffic_lights[{lane_id}]: bad state {state!r}")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _xy_list(a: np.ndarray) -> list:
    return [[float(x), float(y)] for x, y in a]


def save_scenario(log: ScenarioLog, destination) -> None:
    """Write a scenario as line-delimited JSON. ``destination`` is a path or
    a text file object."""
    header = {
        "schema": SCHEMA_VERSION,
        "kind": "scenario",
        "scenario_id": log.scenario_id,
        "dt": log.dt,
        "sdv_extent": [log.sdv_extent[0], log.sdv_extent[1]],
        "lanes": [
            {
                "id": ln.lane_id,
                "mid": _xy_list(ln.mid),
                "left": _xy_list(ln.left),
                "right": _xy_list(ln.right),
                "traffic_light": ln.traffic_light,
            }
            for ln in log.lanes
        ],
        "crosswalks": [
            {"id": cw.crosswalk_id, "polygon": _xy_list(cw.polygon)}
            for cw in log.crosswalks
        ],
    }
    lines = [json.dumps(header)]
    for i, f in enumerate(log.frames):
        lines.append(json.dumps({
            "frame": i,
            "sdv": [float(v) for v in f.sdv_pose],
            "agents": [
                {
                    "id": a.agent_id,
                    "pose": [float(v) for v in a.pose],
                    "extent": [a.extent[0], a.extent[1]],
                    "kind": a.kind,
                }
                for a in f.agents
            ],
            "tl": dict(f.traffic_lights),
        }))
    text = "\n".join(lines) + "\n"
    if hasattr(destination, "write"):
        destination.write(text)
    else:
        with open(destination, "w") as fh:
            fh.write(text)


def _need(obj: dict, key: str, line: int):
    if key not in obj:
        raise ScenarioFormatError(f"line {line}: missing field {key!r}")
    return obj[key]


def load_scenario(source) -> ScenarioLog:
    """Parse a scenario file; errors name the offending line and field."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source) as fh:
            text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ScenarioFormatError("line 1: empty scenario file")

    def parse(line_no: int) -> dict:
        try:
            return json.loads(lines[line_no - 1])
        except json.JSONDecodeError as e:
            raise ScenarioFormatError(f"line {line_no}: invalid JSON: {e}") from e

    header = parse(1)
    if header.get("schema") != SCHEMA_VERSION:
        raise ScenarioFormatError(
            f"line 1: schema: expected {SCHEMA_VERSION!r}, got {header.get('schema')!r}")
    lanes = []
    for j, ln in enumerate(_need(header, "lanes", 1)):
        try:
            lanes.append(Lane(
                lane_id=str(ln["id"]),
                mid=np.asarray(ln["mid"], dtype=np.float64),
                left=np.asarray(ln["left"], dtype=np.float64),
                right=np.asarray(ln["right"], dtype=np.float64),
                traffic_light=bool(ln.get("traffic_light", False)),
            ))
        except (KeyError, ValueError) as e:
            raise ScenarioFormatError(f"line 1: lanes[{j}]: {e}") from e
    crosswalks = []
    for j, cw in enumerate(header.get("crosswalks", [])):
        try:
            crosswalks.append(Crosswalk(
                crosswalk_id=str(cw["id"]),
                polygon=np.asarray(cw["polygon"], dtype=np.float64),
            ))
        except (KeyError, ValueError) as e:
            raise ScenarioFormatError(f"line 1: crosswalks[{j}]: {e}") from e

    frames = []
    for line_no in range(2, len(lines) + 1):
        obj = parse(line_no)
        idx = _need(obj, "frame", line_no)
        if idx != len(frames):
            raise ScenarioFormatError(
                f"line {line_no}: frame: expected index {len(frames)}, got {idx}")
        agents = []
        for j, a in enumerate(_need(obj, "agents", line_no)):
            try:
                agents.append(AgentState(
                    agent_id=str(a["id"]),
                    pose=np.asarray(a["pose"], dtype=np.float64),
                    extent=(float(a["extent"][0]), float(a["extent"][1])),
                    kind=str(a.get("kind", "vehicle")),
                ))
            except (KeyError, ValueError, IndexError) as e:
                raise ScenarioFormatError(f"line {line_no}: agents[{j}]: {e}") from e
        frames.append(Frame(
            sdv_pose=np.asarray(_need(obj, "sdv", line_no), dtype=np.float64),
            agents=agents,
            traffic_lights={str(k): str(v) for k, v in obj.get("tl", {}).items()},
        ))

    extent = header.get("sdv_extent", [4.8, 1.9])
    try:
        return ScenarioLog(
            scenario_id=str(_need(header, "scenario_id", 1)),
            dt=float(_need(header, "dt", 1)),
            lanes=lanes,
            crosswalks=crosswalks,
            frames=frames,
            sdv_extent=(float(extent[0]), float(extent[1])),
        )
    except ScenarioFormatError:
        raise
    except (TypeError, ValueError) as e:
        raise ScenarioFormatError(f"line 1: header: {e}") from e


# ---------------------------------------------------------------------------
# observation
# ---------------------------------------------------------------------------


@dataclass
class Observation:
    """Fixed-slot padded scene state relative to the query pose.

    Slot order: SDV, 30 agents, 30 lane mids, 30 lane lefts, 30 lane rights,
    20 crosswalks. Masked slots and points are zero-filled.
    """

    kinds: np.ndarray       # (141,) int64
    elem_mask: np.ndarray   # (141,) float64 0/1
    points: np.ndarray      # (141, 20, 16) float64
    point_mask: np.ndarray  # (141, 20) float64 0/1


def slot_kinds() -> np.ndarray:
    kinds = np.empty(N_SLOTS, dtype=np.int64)
    kinds[SLOT_SDV] = KIND_SDV
    kinds[SLOT_AGENT0:SLOT_LANE_MID0] = KIND_AGENT
    kinds[SLOT_LANE_MID0:SLOT_LANE_LEFT0] = KIND_LANE_MID
    kinds[SLOT_LANE_LEFT0:SLOT_LANE_RIGHT0] = KIND_LANE_LEFT
    kinds[SLOT_LANE_RIGHT0:SLOT_CROSSWALK0] = KIND_LANE_RIGHT
    kinds[SLOT_CROSSWALK0:] = KIND_CROSSWALK
    return kinds


@dataclass
class PackedObs:
    """Observation with masked-out slots dropped and points flattened into
    contiguous per-element segments; what the policy actually consumes.

    ``feats`` may be a plain array (open-loop use) or a tape Var whose
    coordinate columns differentiate back to the SDV pose stack.
    """

    feats: object            # (N, 16) ndarray or engine.Var
    starts: np.ndarray       # (E+1,) int64 segment boundaries
    kinds: np.ndarray        # (E,) int64
    elem_mask: np.ndarray    # (E,) float64
    point_mask: np.ndarray   # (N,) float64
    point_order: np.ndarray  # (N,) int64 point index within its element
    slots: np.ndarray        # (E,) int64 padded slot of each packed element


def pack_observation(obs: Observation) -> PackedObs:
    """Pack the available slots of a padded Observation (element order is
    preserved, so the SDV is always packed element 0)."""
    track_rows = {KIND_SDV: HISTORY_POINTS, KIND_AGENT: HISTORY_POINTS}
    slots = np.nonzero(obs.elem_mask > 0.0)[0]
    feats, masks, orders, counts, kinds = [], [], [], [], []
    for slot in slots:
        kind = int(obs.kinds[slot])
        rows = track_rows.get(kind, MAX_POINTS)
        feats.append(obs.points[slot, :rows])
        masks.append(obs.point_mask[slot, :rows])
        orders.append(np.arange(rows, dtype=np.int64))
        counts.append(rows)
        kinds.append(kind)
    return PackedObs(
        feats=np.concatenate(feats, axis=0),
        starts=np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
        kinds=np.asarray(kinds, dtype=np.int64),
        elem_mask=np.ones(len(kinds)),
        point_mask=np.concatenate(masks),
        point_order=np.concatenate(orders),
        slots=slots.astype(np.int64),
    )


@dataclass
class Selection:
    """One-time field-of-view query result: which elements are in play and
    their world-frame geometry (lanes already resampled)."""

    lane_mid: list[tuple[int, np.ndarray]]    # (lane index, (20,2) world pts)
    lane_left: list[tuple[int, np.ndarray]]
    lane_right: list[tuple[int, np.ndarray]]
    crosswalks: list[tuple[int, np.ndarray]]  # (crosswalk index, (k,2) pts)
    agent_ids: list[str]


def _closed_polygon_points(poly: np.ndarray) -> np.ndarray:
    pts = poly[:-1]  # drop the duplicate closure vertex
    if pts.shape[0] > MAX_POINTS:
        pts = kernels.resample_polyline(np.ascontiguousarray(poly), MAX_POINTS)
    return pts


def select_elements(log: ScenarioLog, t0: int, center: np.ndarray) -> Selection:
    """Nearest-first element selection inside the field of view.

    Lane mid/left/right families are selected independently, each by the
    distance from the query position to the nearest point of its own
    polyline. Ties break on element id, then agents on id as well.
    """
    px, py = float(center[0]), float(center[1])

    def pick_lanes(attr: str) -> list[tuple[int, np.ndarray]]:
        ranked = []
        for i, lane in enumerate(log.lanes):
            poly = np.ascontiguousarray(getattr(lane, attr))
            d = kernels.polyline_min_distance(px, py, poly)
            if d <= FOV_RADIUS:
                ranked.append((d, lane.lane_id, i))
        ranked.sort(key=lambda r: (r[0], r[1]))
        out = []
        for _, _, i in ranked[:N_LANE_SLOTS]:
            poly = np.ascontiguousarray(getattr(log.lanes[i], attr))
            out.append((i, kernels.resample_polyline(poly, LANE_POINTS)))
        return out

    lane_mid = pick_lanes("mid")
    lane_left = pick_lanes("left")
    lane_right = pick_lanes("right")

    ranked_cw = []
    for i, cw in enumerate(log.crosswalks):
        d = kernels.polyline_min_distance(px, py, np.ascontiguousarray(cw.polygon))
        if d <= FOV_RADIUS:
            ranked_cw.append((d, cw.crosswalk_id, i))
    ranked_cw.sort(key=lambda r: (r[0], r[1]))
    crosswalks = [(i, _closed_polygon_points(log.crosswalks[i].polygon))
                  for _, _, i in ranked_cw[:N_CROSSWALK_SLOTS]]

    ranked_ag = []
    for a in log.frames[t0].agents:
        d = math.hypot(a.pose[0] - px, a.pose[1] - py)
        if d <= FOV_RADIUS:
            ranked_ag.append((d, a.agent_id))
    ranked_ag.sort()
    agent_ids = [aid for _, aid in ranked_ag[:N_AGENT_SLOTS]]

    return Selection(lane_mid, lane_left, lane_right, crosswalks, agent_ids)


def _tl_onehot(state: str | None) -> np.ndarray:
    v = np.zeros(4)
    if state is not None:
        v[TL_STATES.index(state)] = 1.0
    return v


def vectorize(log: ScenarioLog, t0: int, sdv_pose: np.ndarray,
              sdv_history: np.ndarray | None = None,
              selection: Selection | None = None) -> Observation:
    """Build the padded Observation around ``sdv_pose`` at frame ``t0``.

    ``sdv_history`` optionally overrides the three past SDV poses (rows for
    t0-1, t0-2, t0-3 in world frame); by default they come from the log.
    Missing history (t0 < 3) is zero-masked.
    """
    if not 0 <= t0 < len(log.frames):
        raise IndexError(f"t0={t0} outside log of {len(log.frames)} frames")
    sel = selection or select_elements(log, t0, sdv_pose)
    kinds = slot_kinds()
    points = np.zeros((N_SLOTS, MAX_POINTS, N_FEATURES))
    point_mask = np.zeros((N_SLOTS, MAX_POINTS))
    elem_mask = np.zeros(N_SLOTS)

    def kind_feat(kind: int) -> np.ndarray:
        v = np.zeros(N_FEATURES - FEAT_KIND)
        v[kind] = 1.0
        return v

    def fill_track(slot: int, kind: int, poses: list[np.ndarray | None]):
        elem_mask[slot] = 1.0
        for j, world in enumerate(poses):
            if world is None:
                continue
            rel = se2.relative(sdv_pose, world)
            points[slot, j, FEAT_X:FEAT_YAW + 1] = rel
            points[slot, j, FEAT_TIME] = -j * log.dt
            points[slot, j, FEAT_KIND:] = kind_feat(kind)
            point_mask[slot, j] = 1.0

    # SDV track
    sdv_world: list[np.ndarray | None] = [np.asarray(sdv_pose, dtype=np.float64)]
    for j in range(1, HISTORY_POINTS):
        if sdv_history is not None:
            sdv_world.append(np.asarray(sdv_history[j - 1], dtype=np.float64))
        elif t0 - j >= 0:
            sdv_world.append(log.frames[t0 - j].sdv_pose)
        else:
            sdv_world.append(None)
    fill_track(SLOT_SDV, KIND_SDV, sdv_world)

    # agent tracks
    for s, aid in enumerate(sel.agent_ids):
        track: list[np.ndarray | None] = []
        for j in range(HISTORY_POINTS):
            t = t0 - j
            state = log.frames[t].agent(aid) if t >= 0 else None
            track.append(state.pose if state is not None else None)
        fill_track(SLOT_AGENT0 + s, KIND_AGENT, track)

    # lanes
    tl_now = log.frames[t0].traffic_lights
    for family, slot0, kind in (
        (sel.lane_mid, SLOT_LANE_MID0, KIND_LANE_MID),
        (sel.lane_left, SLOT_LANE_LEFT0, KIND_LANE_LEFT),
        (sel.lane_right, SLOT_LANE_RIGHT0, KIND_LANE_RIGHT),
    ):
        for s, (lane_idx, world_pts) in enumerate(family):
            slot = slot0 + s
            elem_mask[slot] = 1.0
            pts3 = np.zeros((world_pts.shape[0], 3))
            pts3[:, :2] = world_pts
            rel = kernels.world_to_frame(sdv_pose[0], sdv_pose[1], sdv_pose[2],
                                         np.ascontiguousarray(pts3), False)
            n = rel.shape[0]
            points[slot, :n, FEAT_X:FEAT_YAW + 1] = rel
            points[slot, :n, FEAT_KIND:] = kind_feat(kind)
            point_mask[slot, :n] = 1.0
            if kind == KIND_LANE_MID:
                lane = log.lanes[lane_idx]
                if lane.lane_id in tl_now:
                    points[slot, :n, FEAT_TL:FEAT_TL + 4] = _tl_onehot(tl_now[lane.lane_id])

    # crosswalks
    for s, (_, world_pts) in enumerate(sel.crosswalks):
        slot = SLOT_CROSSWALK0 + s
        elem_mask[slot] = 1.0
        pts3 = np.zeros((world_pts.shape[0], 3))
        pts3[:, :2] = world_pts
        rel = kernels.world_to_frame(sdv_pose[0], sdv_pose[1], sdv_pose[2],
                                     np.ascontiguousarray(pts3), False)
        n = rel.shape[0]
        points[slot, :n, FEAT_X:FEAT_YAW + 1] = rel
        points[slot, :n, FEAT_KIND:] = kind_feat(KIND_CROSSWALK)
        point_mask[slot, :n] = 1.0

    return Observation(kinds=kinds, elem_mask=elem_mask, points=points,
                       point_mask=point_mask)
