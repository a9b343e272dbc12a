"""Static SVG rendering of scenario frames.

The SDV is drawn in red, other agents in blue, crosswalks in yellow;
traffic-light colors are painted onto the affected lane centerlines. With a
trajectory overlay the expert path is dashed black and the policy path solid
red. Output is hand-built SVG, so files are deterministic byte-for-byte.
"""

from __future__ import annotations

import math

import numpy as np

from .kernels import rect_vertices
from .scene import ScenarioLog

VIEW_HALF = 50.0  # meters around the SDV
TL_COLORS = {"red": "#d62728", "yellow": "#e6b800", "green": "#2ca02c",
             "unknown": "#9467bd"}


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _polyline(points: np.ndarray, color: str, width: float,
              dash: str | None = None, opacity: float = 1.0) -> str:
    pts = " ".join(f"{_fmt(x)},{_fmt(-y)}" for x, y in points)
    dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="{width}" opacity="{opacity}"{dash_attr}/>')


def _polygon(points: np.ndarray, fill: str, opacity: float = 1.0,
             stroke: str = "none") -> str:
    pts = " ".join(f"{_fmt(x)},{_fmt(-y)}" for x, y in points)
    return (f'<polygon points="{pts}" fill="{fill}" opacity="{opacity}" '
            f'stroke="{stroke}"/>')


def render_frame(log: ScenarioLog, t: int,
                 policy_track: np.ndarray | None = None) -> str:
    """One frame as an SVG string, viewport centred on the SDV."""
    if not 0 <= t < len(log.frames):
        raise IndexError(f"frame {t} outside log of {len(log.frames)} frames")
    frame = log.frames[t]
    cx, cy = frame.sdv_pose[0], frame.sdv_pose[1]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="800" height="800" '
        f'viewBox="{_fmt(cx - VIEW_HALF)} {_fmt(-cy - VIEW_HALF)} '
        f'{_fmt(2 * VIEW_HALF)} {_fmt(2 * VIEW_HALF)}">',
        f'<rect x="{_fmt(cx - VIEW_HALF)}" y="{_fmt(-cy - VIEW_HALF)}" '
        f'width="{_fmt(2 * VIEW_HALF)}" height="{_fmt(2 * VIEW_HALF)}" fill="#f5f5f2"/>',
    ]
    for cw in log.crosswalks:
        parts.append(_polygon(cw.polygon[:-1], "#e6c95c", opacity=0.8))
    tl = frame.traffic_lights
    for lane in log.lanes:
        parts.append(_polyline(lane.left, "#b0b0b0", 0.15))
        parts.append(_polyline(lane.right, "#b0b0b0", 0.15))
        mid_color = "#d8d8d8"
        width = 0.25
        if lane.lane_id in tl:
            mid_color = TL_COLORS[tl[lane.lane_id]]
            width = 0.5
        parts.append(_polyline(lane.mid, mid_color, width, dash="1,1"))
    expert_xy = log.sdv_poses()[:, :2]
    parts.append(_polyline(expert_xy, "#222222", 0.2, dash="0.8,0.8", opacity=0.7))
    if policy_track is not None and len(policy_track):
        parts.append(_polyline(np.asarray(policy_track)[:, :2], "#d62728", 0.3))
    for a in frame.agents:
        box = rect_vertices(a.pose[0], a.pose[1], a.pose[2], a.extent[0], a.extent[1])
        parts.append(_polygon(box, "#1f77b4", opacity=0.9))
    ego = rect_vertices(frame.sdv_pose[0], frame.sdv_pose[1], frame.sdv_pose[2],
                        log.sdv_extent[0], log.sdv_extent[1])
    parts.append(_polygon(ego, "#d62728"))
    heading = np.array([
        [frame.sdv_pose[0], frame.sdv_pose[1]],
        [frame.sdv_pose[0] + 3.0 * math.cos(frame.sdv_pose[2]),
         frame.sdv_pose[1] + 3.0 * math.sin(frame.sdv_pose[2])],
    ])
    parts.append(_polyline(heading, "#7f0000", 0.25))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_frames(log: ScenarioLog, frames: range, out_dir,
                  policy_track: np.ndarray | None = None) -> list[str]:
    """Write one SVG per frame; returns the written paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    written = []
    for t in frames:
        svg = render_frame(log, t, policy_track=policy_track)
        path = os.path.join(out_dir, f"{log.scenario_id}_f{t:04d}.svg")
        with open(path, "w") as fh:
            fh.write(svg)
        written.append(path)
    return written
