"""Minimal reverse-mode differentiation engine.

A ``Tape`` records primitive applications in execution order; ``backward``
replays the record once, in reverse, accumulating vector-Jacobian products
into every leaf. Values are float64 numpy arrays (scalars are 0-d arrays).

Every op is a free function ``op(tape, *args)``. Inputs may be ``Var``
handles (differentiable, recorded as parents) or plain ndarrays (constants).
Passing ``tape=None`` runs the same arithmetic without recording, which is
the fast path for evaluation-only rollouts.

There is no implicit broadcasting beyond the bias add inside ``affine``;
mismatched shapes raise ``EngineError`` instead of silently broadcasting.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import kernels, se2


class EngineError(ValueError):
    pass


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape: "Tape", idx: int, value: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape


class _Node:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents: tuple[int, ...], vjp: Callable | None):
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def _emit(self, value, parents: Sequence[Var], vjp) -> Var:
        for p in parents:
            if p.tape is not self:
                raise EngineError("input Var belongs to a different tape")
        node = _Node(tuple(p.idx for p in parents), vjp)
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1, value)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def leaf(tape: Tape | None, value):
    arr = np.asarray(value, dtype=np.float64)
    if tape is None:
        return arr
    return tape._emit(arr, (), None)


def _emit_op(tape, out, operands: tuple, pos_vjp):
    """Record an op whose ``pos_vjp(seed)`` returns one grad per operand
    position; non-Var operands are dropped from the record."""
    if tape is None:
        return out
    var_pos = [i for i, v in enumerate(operands) if isinstance(v, Var)]
    if not var_pos:
        return out
    parents = [operands[i] for i in var_pos]

    def vjp(g):
        full = pos_vjp(g)
        return [full[i] for i in var_pos]

    return tape._emit(out, parents, vjp)


def backward(tape: Tape, seeds: dict[Var, np.ndarray] | list[tuple[Var, np.ndarray]]):
    """Accumulate d(sum of seeded outputs)/d(node) for every tape node.

    Returns a list aligned with node indices; entries are None where no
    gradient flowed. Traversal order is fixed by node index, so repeated
    calls produce identical floating-point results.
    """
    if not tape.nodes:
        raise EngineError("backward on an empty tape")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    items = seeds.items() if isinstance(seeds, dict) else seeds
    seeded = False
    for var, g in items:
        if not isinstance(var, Var) or var.tape is not tape:
            raise EngineError("seed does not belong to this tape")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != var.value.shape:
            raise EngineError(f"seed shape {g.shape} != value shape {var.value.shape}")
        if grads[var.idx] is None:
            grads[var.idx] = g.copy()
        else:
            grads[var.idx] = grads[var.idx] + g
        seeded = True
    if not seeded:
        raise EngineError("backward requires at least one seed")
    for idx in range(len(tape.nodes) - 1, -1, -1):
        g = grads[idx]
        node = tape.nodes[idx]
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for pidx, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if grads[pidx] is None:
                grads[pidx] = np.asarray(pg, dtype=np.float64).copy()
            else:
                grads[pidx] = grads[pidx] + pg
    return grads


def grad_of(grads, var: Var) -> np.ndarray:
    g = grads[var.idx]
    if g is None:
        return np.zeros_like(var.value)
    return g


class ParamStore:
    """Named dense arrays of learnable values plus optimizer state slots."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}
        self.opt_state: dict[str, dict[str, np.ndarray]] = {}

    def create(self, name: str, value: np.ndarray) -> None:
        if name in self._arrays:
            raise EngineError(f"parameter {name!r} already exists")
        self._arrays[name] = np.asarray(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if name in self._arrays and value.shape != self._arrays[name].shape:
            raise EngineError(f"shape of {name!r} is immutable: "
                              f"{self._arrays[name].shape} != {value.shape}")
        self._arrays[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def names(self) -> list[str]:
        return sorted(self._arrays)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self._arrays.items():
            out._arrays[k] = v.copy()
        return out

    def leaves(self, tape: Tape | None) -> dict:
        return {name: leaf(tape, self._arrays[name]) for name in self.names()}


# ---------------------------------------------------------------------------
# elementwise and dense ops
# ---------------------------------------------------------------------------


def add(tape, a, b):
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise EngineError(f"add shape mismatch: {av.shape} vs {bv.shape}")
    return _emit_op(tape, av + bv, (a, b), lambda g: [g, g])


def sub(tape, a, b):
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise EngineError(f"sub shape mismatch: {av.shape} vs {bv.shape}")
    return _emit_op(tape, av - bv, (a, b), lambda g: [g, -g])


def mul(tape, a, b):
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise EngineError(f"mul shape mismatch: {av.shape} vs {bv.shape}")
    return _emit_op(tape, av * bv, (a, b), lambda g: [g * bv, g * av])


def scale(tape, x, c: float):
    xv = value_of(x)
    return _emit_op(tape, xv * c, (x,), lambda g: [g * c])


def relu(tape, x):
    xv = value_of(x)
    gate = xv > 0.0
    return _emit_op(tape, np.where(gate, xv, 0.0), (x,), lambda g: [g * gate])


def tanh(tape, x):
    out = np.tanh(value_of(x))
    return _emit_op(tape, out, (x,), lambda g: [g * (1.0 - out * out)])


def sin(tape, x):
    xv = value_of(x)
    return _emit_op(tape, np.sin(xv), (x,), lambda g: [g * np.cos(xv)])


def cos(tape, x):
    xv = value_of(x)
    return _emit_op(tape, np.cos(xv), (x,), lambda g: [-g * np.sin(xv)])


def sqrt(tape, x):
    xv = value_of(x)
    if np.any(xv < 0.0):
        raise EngineError("sqrt of negative value")
    out = np.sqrt(xv)
    return _emit_op(tape, out, (x,), lambda g: [g * 0.5 / np.maximum(out, 1e-300)])


def sum_all(tape, x):
    xv = value_of(x)
    shape = xv.shape
    return _emit_op(tape, np.asarray(np.sum(xv)), (x,),
                    lambda g: [np.full(shape, float(g))])


def mean_all(tape, x):
    xv = value_of(x)
    shape, n = xv.shape, xv.size
    return _emit_op(tape, np.asarray(np.mean(xv)), (x,),
                    lambda g: [np.full(shape, float(g) / n)])


def affine(tape, x, w, b):
    """x @ w + b for x of shape (n, din) or (din,)."""
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    if xv.shape[-1] != wv.shape[0] or wv.shape[1] != bv.shape[0]:
        raise EngineError(f"affine shapes incompatible: x{xv.shape} w{wv.shape} b{bv.shape}")
    out = xv @ wv + bv

    def pos_vjp(g):
        gx = g @ wv.T
        gw = np.outer(xv, g) if xv.ndim == 1 else xv.T @ g
        gb = g if g.ndim == 1 else np.sum(g, axis=0)
        return [gx, gw, gb]

    return _emit_op(tape, out, (x, w, b), pos_vjp)


def concat0(tape, parts: Sequence):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=0)
    offsets = np.cumsum([0] + [v.shape[0] for v in vals])

    def pos_vjp(g):
        return [g[offsets[i]:offsets[i + 1]] for i in range(len(parts))]

    return _emit_op(tape, out, tuple(parts), pos_vjp)


def concat1(tape, parts: Sequence):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=1)
    offsets = np.cumsum([0] + [v.shape[1] for v in vals])

    def pos_vjp(g):
        return [g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts))]

    return _emit_op(tape, out, tuple(parts), pos_vjp)


def reshape(tape, x, shape):
    xv = value_of(x)
    orig = xv.shape
    return _emit_op(tape, xv.reshape(shape), (x,), lambda g: [g.reshape(orig)])


def take_row(tape, x, i: int):
    xv = value_of(x)
    if xv.ndim != 2:
        raise EngineError("take_row expects a 2-D input")
    shape = xv.shape

    def pos_vjp(g):
        full = np.zeros(shape)
        full[i] = g
        return [full]

    return _emit_op(tape, xv[i].copy(), (x,), pos_vjp)


def gather_rows(tape, m, idx: np.ndarray):
    mv = value_of(m)
    idx = np.asarray(idx, dtype=np.int64)
    shape = mv.shape

    def pos_vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return [full]

    return _emit_op(tape, mv[idx], (m,), pos_vjp)


# ---------------------------------------------------------------------------
# set / attention ops
# ---------------------------------------------------------------------------


def segment_max(tape, x, starts: np.ndarray, point_mask: np.ndarray):
    """Per-segment masked max over contiguous rows; ties go to the lowest row.

    Fully masked segments yield zero rows and pass no gradient.
    """
    xv = np.ascontiguousarray(value_of(x))
    out, arg = kernels.segment_max(xv, starts, point_mask)
    shape = xv.shape

    def pos_vjp(g):
        full = np.zeros(shape)
        valid = arg >= 0
        rows = arg[valid]
        cols = np.nonzero(valid)[1]
        np.add.at(full, (rows, cols), g[valid])
        return [full]

    return _emit_op(tape, out, (x,), pos_vjp)


def segment_broadcast(tape, p, starts: np.ndarray):
    """Repeat each segment's row once per point of that segment."""
    pv = value_of(p)
    reps = np.diff(starts)
    out = np.repeat(pv, reps, axis=0)

    def pos_vjp(g):
        return [kernels.segment_sum(np.ascontiguousarray(g), starts)]

    return _emit_op(tape, out, (p,), pos_vjp)


def masked_softmax(tape, scores, mask: np.ndarray):
    sv = value_of(scores)
    if sv.shape != mask.shape:
        raise EngineError("masked_softmax mask shape mismatch")
    active = mask > 0.0
    if not np.any(active):
        raise EngineError("masked_softmax with no active entries")
    shifted = np.where(active, sv - np.max(sv[active]), -np.inf)
    e = np.exp(shifted)
    out = e / np.sum(e)

    def pos_vjp(g):
        dot = np.sum(g * out)
        return [out * (g - dot)]

    return _emit_op(tape, out, (scores,), pos_vjp)


def dot_scores(tape, keys, q, scl: float):
    """Scaled dot product: keys @ q * scl for keys (n, d), q (d,)."""
    kv, qv = value_of(keys), value_of(q)
    if kv.ndim != 2 or qv.ndim != 1 or kv.shape[1] != qv.shape[0]:
        raise EngineError(f"dot_scores shapes incompatible: {kv.shape} vs {qv.shape}")
    out = kv @ qv * scl

    def pos_vjp(g):
        return [np.outer(g, qv) * scl, (kv.T @ g) * scl]

    return _emit_op(tape, out, (keys, q), pos_vjp)


def weighted_sum(tape, w, v):
    """w (n,) against rows of v (n, d): returns v.T @ w."""
    wv, vv = value_of(w), value_of(v)
    if wv.ndim != 1 or vv.ndim != 2 or wv.shape[0] != vv.shape[0]:
        raise EngineError(f"weighted_sum shapes incompatible: {wv.shape} vs {vv.shape}")
    out = vv.T @ wv

    def pos_vjp(g):
        return [vv @ g, np.outer(wv, g)]

    return _emit_op(tape, out, (w, v), pos_vjp)


# ---------------------------------------------------------------------------
# pose ops
# ---------------------------------------------------------------------------


def l1_wrapped(tape, a, b):
    """L1 pose distance with the shortest signed yaw difference.

    Subgradient zero at kinks (sign(0) == 0).
    """
    av, bv = value_of(a), value_of(b)
    if av.shape != (3,) or bv.shape != (3,):
        raise EngineError("l1_wrapped expects two pose 3-vectors")
    d = np.array([av[0] - bv[0], av[1] - bv[1], se2.wrap_angle(av[2] - bv[2])])
    sgn = np.sign(d)
    return _emit_op(tape, np.asarray(np.sum(np.abs(d))), (a, b),
                    lambda g: [float(g) * sgn, -float(g) * sgn])


def compose_pose(tape, a, b):
    av, bv = value_of(a), value_of(b)
    out = se2.compose(av, bv)
    if tape is not None:
        ja, jb = se2.compose_jacobians(av, bv)
        return _emit_op(tape, out, (a, b), lambda g: [g @ ja, g @ jb])
    return out


def relative_pose(tape, a, b):
    av, bv = value_of(a), value_of(b)
    out = se2.relative(av, bv)
    if tape is not None:
        ja, jb = se2.relative_jacobians(av, bv)
        return _emit_op(tape, out, (a, b), lambda g: [g @ ja, g @ jb])
    return out


def sim_advance(tape, x, a):
    """Advance a 4-pose history stack: row 0 becomes compose(row0, action),
    previous rows shift down by one."""
    xv, av = value_of(x), value_of(a)
    if xv.shape != (4, 3) or av.shape != (3,):
        raise EngineError("sim_advance expects a (4,3) stack and (3,) action")
    out = np.empty((4, 3))
    out[0] = se2.compose(xv[0], av)
    out[1:] = xv[:3]
    if tape is None:
        return out
    jp, ja = se2.compose_jacobians(xv[0], av)

    def pos_vjp(g):
        gx = np.zeros((4, 3))
        gx[0] = g[0] @ jp
        gx[:3] += g[1:]
        return [gx, g[0] @ ja]

    return _emit_op(tape, out, (x, a), pos_vjp)


def history_points(tape, x):
    """Rows of the pose stack expressed in the current (row 0) frame."""
    xv = value_of(x)
    if xv.shape != (4, 3):
        raise EngineError("history_points expects a (4,3) stack")
    out = np.empty((4, 3))
    out[0] = 0.0
    for j in range(1, 4):
        out[j] = se2.relative(xv[0], xv[j])
    if tape is None or not isinstance(x, Var):
        return out
    jacs = [se2.relative_jacobians(xv[0], xv[j]) for j in range(1, 4)]

    def pos_vjp(g):
        gx = np.zeros((4, 3))
        for j in range(1, 4):
            ja, jb = jacs[j - 1]
            gx[0] += g[j] @ ja
            gx[j] += g[j] @ jb
        return [gx]

    return _emit_op(tape, out, (x,), pos_vjp)


def frame_points(tape, pse, world_pts: np.ndarray, oriented: bool):
    """World points (n,3) expressed relative to a pose; the yaw column is
    zeroed when the points carry no orientation."""
    pv = value_of(pse)
    if pv.shape != (3,):
        raise EngineError("frame_points expects a pose 3-vector")
    world_pts = np.ascontiguousarray(world_pts, dtype=np.float64)
    out = kernels.world_to_frame(pv[0], pv[1], pv[2], world_pts, oriented)

    def pos_vjp(g):
        return [kernels.world_to_frame_vjp(pv[2], out, np.ascontiguousarray(g), oriented)]

    return _emit_op(tape, out, (pse,), pos_vjp)


def body_to_world(tape, pse, offsets: np.ndarray):
    """Body-frame 2-D offsets mapped into the world frame."""
    pv = value_of(pse)
    c, s = math.cos(pv[2]), math.sin(pv[2])
    out = np.empty((offsets.shape[0], 2))
    out[:, 0] = pv[0] + c * offsets[:, 0] - s * offsets[:, 1]
    out[:, 1] = pv[1] + s * offsets[:, 0] + c * offsets[:, 1]

    def pos_vjp(g):
        gp = np.zeros(3)
        gp[0] = np.sum(g[:, 0])
        gp[1] = np.sum(g[:, 1])
        gp[2] = np.sum((-s * offsets[:, 0] - c * offsets[:, 1]) * g[:, 0]
                       + (c * offsets[:, 0] - s * offsets[:, 1]) * g[:, 1])
        return [gp]

    return _emit_op(tape, out, (pse,), pos_vjp)


def circle_overlap_cost(tape, sdv_centers, agent_centers: np.ndarray, rsum: np.ndarray):
    """Per-agent max circle overlap, 1 - d/(r1 + r2) clamped at zero.

    ``sdv_centers`` (3,2) may be a Var; agent circle centers (m,3,2) and the
    radius sums (m,3,3) are constants of the step. Ties and the contact point
    d == r1+r2 take the zero subgradient.
    """
    sv = np.ascontiguousarray(value_of(sdv_centers))
    agent_centers = np.ascontiguousarray(agent_centers, dtype=np.float64)
    rsum = np.ascontiguousarray(rsum, dtype=np.float64)
    vals, argj, argk = kernels.overlap_max(sv, agent_centers, rsum)

    def pos_vjp(g):
        return [kernels.overlap_max_vjp(sv, agent_centers, rsum, argj, argk,
                                        np.ascontiguousarray(g))]

    return _emit_op(tape, vals, (sdv_centers,), pos_vjp)
