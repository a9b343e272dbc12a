"""Vectorized driving policy.

Every point of every scene element passes through a shared embedding, gets a
sinusoidal order code added, and flows through three PointNet-style set
layers (per-point affine + relu, masked max pool, pooled vector concatenated
back onto each point). The third pool is the per-element descriptor. A single
scaled dot-product attention layer then aggregates: the SDV descriptor is the
query, descriptors plus a learned per-kind type embedding are the keys, raw
descriptors the values. A final two-layer MLP projects the attended feature
to a sequence of pose increments, of which closed-loop control consumes only
the first.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import engine
from .engine import ParamStore, Tape
from .scene import (HISTORY_POINTS, MAX_POINTS, N_FEATURES, N_KINDS,
                    Observation, PackedObs, pack_observation)

CHECKPOINT_MAGIC = b"LDCK1\n"


@dataclass
class PolicyConfig:
    embed_dim: int = 64
    n_set_layers: int = 3
    n_attention_layers: int = 1
    output_steps: int = 12
    use_sdv_history: bool = True
    history_dropout_prob: float = 0.0

    def validate(self) -> None:
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if self.output_steps < 1:
            raise ValueError("output_steps must be >= 1")
        if self.n_set_layers < 1 or self.n_attention_layers != 1:
            raise ValueError("expected >=1 set layers and exactly 1 attention layer")
        if not 0.0 <= self.history_dropout_prob <= 1.0:
            raise ValueError("history_dropout_prob must be a probability")


def sinusoid_table(n_positions: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos order encoding."""
    table = np.zeros((n_positions, dim))
    pos = np.arange(n_positions)[:, None].astype(np.float64)
    i = np.arange(0, dim, 2).astype(np.float64)
    freq = np.exp(-math.log(10000.0) * i / dim)
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: table[:, 1::2].shape[1]])
    return table


def init_params(cfg: PolicyConfig, rng: np.random.Generator) -> ParamStore:
    cfg.validate()
    d = cfg.embed_dim
    store = ParamStore()

    def dense(name: str, din: int, dout: int, out_scale: float = 1.0):
        store.create(f"{name}_w", rng.normal(0.0, 1.0, (din, dout)) / math.sqrt(din) * out_scale)
        store.create(f"{name}_b", np.zeros(dout))

    dense("embed", N_FEATURES, d)
    for i in range(cfg.n_set_layers):
        dense(f"pn{i}", d if i == 0 else 2 * d, d)
    store.create("type_embed", rng.normal(0.0, 0.1, (N_KINDS, d)))
    dense("head0", d, d)
    dense("head1", d, cfg.output_steps * 3, out_scale=0.01)
    return store


def forward_packed(tape: Tape | None, leaves: dict, cfg: PolicyConfig,
                   packed: PackedObs, drop_history: bool = False):
    """Trajectory head on a packed observation.

    ``leaves`` maps parameter names to tape handles (or raw arrays when
    running without a tape); create them once per tape via
    ``params.leaves(tape)``. ``drop_history`` masks the SDV's three past
    poses for this call (training-time history dropout).
    """
    d = cfg.embed_dim
    point_mask = packed.point_mask
    if drop_history or not cfg.use_sdv_history:
        point_mask = point_mask.copy()
        point_mask[1:HISTORY_POINTS] = 0.0

    pe = sinusoid_table(MAX_POINTS, d)[packed.point_order]
    h = engine.affine(tape, packed.feats, leaves["embed_w"], leaves["embed_b"])
    h = engine.add(tape, h, pe)
    pooled = None
    for i in range(cfg.n_set_layers):
        z = engine.relu(tape, engine.affine(tape, h, leaves[f"pn{i}_w"], leaves[f"pn{i}_b"]))
        pooled = engine.segment_max(tape, z, packed.starts, point_mask)
        if i + 1 < cfg.n_set_layers:
            h = engine.concat1(tape, [z, engine.segment_broadcast(tape, pooled, packed.starts)])

    desc = pooled  # (E, d) element descriptors
    keys = engine.add(tape, desc, engine.gather_rows(tape, leaves["type_embed"], packed.kinds))
    query = engine.take_row(tape, desc, 0)
    scores = engine.dot_scores(tape, keys, query, 1.0 / math.sqrt(d))
    attn = engine.masked_softmax(tape, scores, packed.elem_mask)
    ctx = engine.weighted_sum(tape, attn, desc)
    hidden = engine.relu(tape, engine.affine(tape, ctx, leaves["head0_w"], leaves["head0_b"]))
    out = engine.affine(tape, hidden, leaves["head1_w"], leaves["head1_b"])
    return engine.reshape(tape, out, (cfg.output_steps, 3))


def forward(tape: Tape | None, params: ParamStore, cfg: PolicyConfig,
            obs: Observation, drop_history: bool = False):
    """Spec-level entry point on a padded Observation."""
    return forward_packed(tape, params.leaves(tape), cfg, pack_observation(obs),
                          drop_history=drop_history)


def first_action(tape: Tape | None, trajectory):
    """Step 0 of the predicted increment sequence: the closed-loop action."""
    return engine.take_row(tape, trajectory, 0)


# ---------------------------------------------------------------------------
# checkpoint format: magic, one JSON header line, raw little-endian float64
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ParamStore, cfg: PolicyConfig,
                    extra: dict | None = None) -> None:
    names = params.names()
    arrays = [{"name": n, "shape": list(params[n].shape)} for n in names]
    opt_names = sorted(params.opt_state)
    for n in opt_names:
        for slot in sorted(params.opt_state[n]):
            arrays.append({"name": f"opt:{slot}:{n}",
                           "shape": list(params.opt_state[n][slot].shape)})
    header = {
        "schema": "v1",
        "config": asdict(cfg),
        "arrays": arrays,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())
        for n in opt_names:
            for slot in sorted(params.opt_state[n]):
                fh.write(np.ascontiguousarray(params.opt_state[n][slot],
                                              dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamStore, PolicyConfig, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("schema") != "v1":
            raise ValueError(f"{path}: unsupported checkpoint schema")
        store = ParamStore()
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()
            name = spec["name"]
            if name.startswith("opt:"):
                _, slot, pname = name.split(":", 2)
                store.opt_state.setdefault(pname, {})[slot] = arr
            else:
                store.create(name, arr)
    return store, PolicyConfig(**header["config"]), header.get("extra", {})
