"""Closed-loop training loop, gradient recursions, and baselines.

The main method unrolls the policy through the differentiable simulator for
T steps, discards the first K steps from the objective, and backpropagates
through time. The backward pass is implemented as the textbook pair of
adjoint recursions: every step lives on its own tape, the state adjoint
flows from step t+1 into step t, and parameter gradients accumulate along
the way. This is numerically identical to one reverse sweep over a single
whole-rollout tape (the test suite checks both paths agree), but makes the
baselines one-liners:

- multi-step prediction: keep the per-step tapes, drop the state adjoint
  chain, so every step's state input is a constant (gradients detached
  between steps);
- behavioral cloning: no simulator at all, one open-loop forward from the
  expert state regressing the next pose increments;
- cloning with perturbations: same, but the start pose is randomly offset
  and the target is a smooth recovery path that rejoins the expert by the
  horizon end.

All sampling randomness is derived from counter-based streams keyed on
(seed, epoch, scenario), so runs are reproducible for any worker count and
resume does not need RNG state.
"""

from __future__ import annotations

import json
import math
import multiprocessing as mp
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import engine, losses, policy, se2
from .rng import stream
from .engine import ParamStore, Tape
from .losses import CostWeights
from .policy import PolicyConfig
from .scene import ScenarioLog, pack_observation, vectorize
from .sim import Sim, expert_action

METHODS = ("ours", "bc", "bc_perturb", "ms_prediction")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "ours"
    T: int = 32
    K: int = 20
    gamma: float = 0.8
    epochs: int = 61
    lr: float = 1e-4
    lr_drop_to: float = 1e-5
    lr_drop_num: int = 54   # learning rate drops at epoch round(epochs * 54/61)
    lr_drop_den: int = 61
    batch_size: int = 16
    seed: int = 0
    workers: int = 1
    alpha: float = 0.0
    beta: float = 0.0
    perturb_prob: float = 0.5
    perturb_lateral: float = 1.0
    perturb_yaw: float = 0.2
    kinematics: str = "unconstrained"
    checkpoint_every: int = 1

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0 <= self.K < self.T:
            raise ValueError(f"need 0 <= K < T, got K={self.K} T={self.T}")
        if self.lr <= 0.0 or self.lr_drop_to <= 0.0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.workers < 1:
            raise ValueError("epochs, batch_size and workers must be >= 1")
        CostWeights(self.alpha, self.beta, self.gamma).validate()

    def weights(self) -> CostWeights:
        return CostWeights(alpha=self.alpha, beta=self.beta, gamma=self.gamma)

    def lr_at(self, epoch: int) -> float:
        drop_epoch = int(round(self.epochs * self.lr_drop_num / self.lr_drop_den))
        return self.lr if epoch < drop_epoch else self.lr_drop_to


@dataclass
class StepRecord:
    k: int
    tape: Tape
    leaves: dict
    stack_in: engine.Var
    action: engine.Var
    stack_out: engine.Var
    cost: engine.Var | None
    parts: dict | None


@dataclass
class Rollout:
    t0: int
    steps: list[StepRecord]
    objective: float            # sum of gamma^k * cost_k over k >= K
    parts: dict[str, float]     # undiscounted component sums over k >= K


def _rollout_rng(cfg: TrainConfig, epoch: int, scenario_idx: int) -> np.random.Generator:
    return stream(cfg.seed, 11, epoch, scenario_idx)


def sample_rollout(sim: Sim, params: ParamStore, pcfg: PolicyConfig,
                   tcfg: TrainConfig, drop_history: bool = False,
                   forced_actions: list[np.ndarray] | None = None) -> Rollout:
    """Closed-loop unroll of T steps on per-step tapes.

    Steps below K get no cost but stay on the unroll path, so their
    transitions still carry gradient to later losses through the state
    adjoint chain.
    """
    log = sim.log
    weights = tcfg.weights()
    stack_val = sim.initial_stack()
    steps: list[StepRecord] = []
    objective = 0.0
    part_sums = {"imitation": 0.0, "accel": 0.0, "collision": 0.0, "total": 0.0}
    for k in range(tcfg.T):
        t = sim.t0 + k
        tape = Tape()
        leaves = params.leaves(tape)
        stack = engine.leaf(tape, stack_val)
        if forced_actions is not None:
            action = engine.leaf(tape, forced_actions[k])
        else:
            packed = sim.observe(tape, stack, t)
            traj = policy.forward_packed(tape, leaves, pcfg, packed,
                                         drop_history=drop_history)
            action = policy.first_action(tape, traj)
        stack_out = sim.advance(tape, stack, action)
        cost = parts = None
        if k >= tcfg.K:
            expert_next = log.frames[t + 1].sdv_pose
            vposes, vextents = sim.vehicle_states(t + 1)
            cost, parts = losses.step_cost(
                tape, expert_next,
                engine.take_row(tape, stack, 1),
                engine.take_row(tape, stack, 0),
                engine.take_row(tape, stack_out, 0),
                log.sdv_extent, vposes, vextents, weights, log.dt)
            objective += (tcfg.gamma ** k) * float(engine.value_of(cost))
            for key in part_sums:
                part_sums[key] += parts[key]
        steps.append(StepRecord(k, tape, leaves, stack, action, stack_out, cost, parts))
        stack_val = engine.value_of(stack_out)
    return Rollout(t0=sim.t0, steps=steps, objective=objective, parts=part_sums)


def _zero_grads(params: ParamStore) -> dict[str, np.ndarray]:
    return {n: np.zeros_like(params[n]) for n in params.names()}


def bptt_gradient(rollout: Rollout, tcfg: TrainConfig) -> dict[str, np.ndarray]:
    """Backward adjoint recursion from t = T-1 down to 0.

    Per step the state adjoint picks up the local cost terms plus the
    discounted downstream adjoint pushed through the transition and policy;
    parameter gradients accumulate the action path. Equivalent to one
    reverse pass over the whole unrolled computation.
    """
    grads: dict[str, np.ndarray] | None = None
    lam = np.zeros((4, 3))
    for rec in reversed(rollout.steps):
        if rec.cost is None and not lam.any():
            continue
        seeds: list = [(rec.stack_out, lam)]
        if rec.cost is not None:
            seeds.append((rec.cost, np.asarray(tcfg.gamma ** rec.k)))
        glist = engine.backward(rec.tape, seeds)
        if grads is None:
            grads = {n: np.zeros_like(engine.value_of(v)) for n, v in rec.leaves.items()}
        for name, lf in rec.leaves.items():
            grads[name] += engine.grad_of(glist, lf)
        lam = engine.grad_of(glist, rec.stack_in)
    return grads if grads is not None else {}


def ms_prediction_gradient(rollout: Rollout, tcfg: TrainConfig) -> dict[str, np.ndarray]:
    """Detached variant: per-step cost gradients only, no state adjoint, so
    each step's state input is a constant with respect to the parameters."""
    grads: dict[str, np.ndarray] | None = None
    for rec in rollout.steps:
        if rec.cost is None:
            continue
        glist = engine.backward(rec.tape, [(rec.cost, np.asarray(tcfg.gamma ** rec.k))])
        if grads is None:
            grads = {n: np.zeros_like(engine.value_of(v)) for n, v in rec.leaves.items()}
        for name, lf in rec.leaves.items():
            grads[name] += engine.grad_of(glist, lf)
    return grads if grads is not None else {}


def whole_tape_gradient(sim: Sim, params: ParamStore, pcfg: PolicyConfig,
                        tcfg: TrainConfig, drop_history: bool = False,
                        forced_actions: list[np.ndarray] | None = None,
                        ) -> tuple[dict[str, np.ndarray], float]:
    """Oracle path: the identical rollout on one tape, one reverse sweep."""
    log = sim.log
    weights = tcfg.weights()
    tape = Tape()
    leaves = params.leaves(tape)
    state = sim.init_rollout(tape)
    total = None
    for k in range(tcfg.T):
        t = sim.t0 + k
        if forced_actions is not None:
            action = engine.leaf(tape, forced_actions[k])
        else:
            traj = policy.forward_packed(tape, leaves, pcfg, state.obs,
                                         drop_history=drop_history)
            action = policy.first_action(tape, traj)
        new_state = sim.step(state, action, tape)
        if k >= tcfg.K:
            cost, _ = losses.step_cost(
                tape, log.frames[t + 1].sdv_pose,
                engine.take_row(tape, state.stack, 1),
                engine.take_row(tape, state.stack, 0),
                engine.take_row(tape, new_state.stack, 0),
                log.sdv_extent, *sim.vehicle_states(t + 1), weights, log.dt)
            term = engine.scale(tape, cost, tcfg.gamma ** k)
            total = term if total is None else engine.add(tape, total, term)
        state = new_state
    glist = engine.backward(tape, [(total, np.asarray(1.0))])
    grads = {n: engine.grad_of(glist, lf) for n, lf in leaves.items()}
    return grads, float(engine.value_of(total))


# ---------------------------------------------------------------------------
# open-loop baselines
# ---------------------------------------------------------------------------


def smoothstep(u: float) -> float:
    u = min(max(u, 0.0), 1.0)
    return u * u * (3.0 - 2.0 * u)


def recovery_targets(log: ScenarioLog, t0: int, start_pose: np.ndarray,
                     n_steps: int) -> list[np.ndarray]:
    """Per-step increments of a smooth path from a perturbed start back onto
    the expert trajectory, meeting it exactly at the horizon end."""
    offset0 = se2.relative(log.frames[t0].sdv_pose, start_pose)
    prev = np.asarray(start_pose, dtype=np.float64)
    targets = []
    for k in range(1, n_steps + 1):
        decay = 1.0 - smoothstep(k / n_steps)
        r_k = se2.compose(log.frames[t0 + k].sdv_pose, offset0 * decay)
        targets.append(se2.relative(prev, r_k))
        prev = r_k
    return targets


def bc_targets(log: ScenarioLog, t0: int, n_steps: int) -> list[np.ndarray]:
    return [expert_action(log, t0 + k) for k in range(n_steps)]


def bc_sample_gradient(log: ScenarioLog, t0: int, params: ParamStore,
                       pcfg: PolicyConfig, tcfg: TrainConfig,
                       rng: np.random.Generator | None,
                       ) -> tuple[dict[str, np.ndarray], float]:
    """One supervised sample for bc / bc_perturb; no simulator on the tape.

    Returns (parameter gradients, mean L1 loss over predicted steps).
    """
    n_out = pcfg.output_steps
    start_pose = log.frames[t0].sdv_pose
    drop_history = False
    if tcfg.method == "bc_perturb" and rng is not None:
        if rng.random() < tcfg.perturb_prob:
            dy = rng.uniform(-tcfg.perturb_lateral, tcfg.perturb_lateral)
            dyaw = rng.uniform(-tcfg.perturb_yaw, tcfg.perturb_yaw)
            start_pose = se2.compose(start_pose, np.array([0.0, dy, dyaw]))
            targets = recovery_targets(log, t0, start_pose, n_out)
        else:
            targets = bc_targets(log, t0, n_out)
        if pcfg.use_sdv_history and pcfg.history_dropout_prob > 0.0:
            drop_history = rng.random() < pcfg.history_dropout_prob
    else:
        targets = bc_targets(log, t0, n_out)

    obs = vectorize(log, t0, start_pose)
    tape = Tape()
    leaves = params.leaves(tape)
    traj = policy.forward_packed(tape, leaves, pcfg, pack_observation(obs),
                                 drop_history=drop_history)
    total = None
    for k in range(n_out):
        term = engine.l1_wrapped(tape, engine.take_row(tape, traj, k), targets[k])
        total = term if total is None else engine.add(tape, total, term)
    loss = engine.scale(tape, total, 1.0 / n_out)
    glist = engine.backward(tape, [(loss, np.asarray(1.0))])
    grads = {n: engine.grad_of(glist, lf) for n, lf in leaves.items()}
    return grads, float(engine.value_of(loss))


# ---------------------------------------------------------------------------
# the optimizer loop
# ---------------------------------------------------------------------------

ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], lr: float,
              t: int) -> None:
    for name in params.names():
        slot = params.opt_state.setdefault(name, {
            "m": np.zeros_like(params[name]),
            "v": np.zeros_like(params[name]),
        })
        g = grads[name]
        slot["m"] = ADAM_B1 * slot["m"] + (1.0 - ADAM_B1) * g
        slot["v"] = ADAM_B2 * slot["v"] + (1.0 - ADAM_B2) * g * g
        m_hat = slot["m"] / (1.0 - ADAM_B1 ** t)
        v_hat = slot["v"] / (1.0 - ADAM_B2 ** t)
        params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def _one_sample(log: ScenarioLog, epoch: int, scenario_idx: int,
                params: ParamStore, pcfg: PolicyConfig, tcfg: TrainConfig,
                ) -> tuple[dict[str, np.ndarray], float]:
    rng = _rollout_rng(tcfg, epoch, scenario_idx)
    n = len(log.frames)
    if tcfg.method in ("bc", "bc_perturb"):
        hi = n - 1 - pcfg.output_steps
        t0 = int(rng.integers(3, hi + 1))
        return bc_sample_gradient(log, t0, params, pcfg, tcfg, rng)
    hi = n - 1 - tcfg.T
    t0 = int(rng.integers(3, hi + 1))
    drop_history = (pcfg.use_sdv_history and pcfg.history_dropout_prob > 0.0
                    and rng.random() < pcfg.history_dropout_prob)
    sim = Sim(log, t0, tcfg.T, kinematics=tcfg.kinematics)
    rollout = sample_rollout(sim, params, pcfg, tcfg, drop_history=drop_history)
    if tcfg.method == "ms_prediction":
        return ms_prediction_gradient(rollout, tcfg), rollout.objective
    return bptt_gradient(rollout, tcfg), rollout.objective


_POOL_CTX: dict = {}


def _pool_init(logs, pcfg, tcfg):
    _POOL_CTX["logs"] = logs
    _POOL_CTX["pcfg"] = pcfg
    _POOL_CTX["tcfg"] = tcfg


def _pool_task(args):
    arrays, epoch, scenario_idx = args
    params = ParamStore()
    for name, arr in arrays.items():
        params.create(name, arr)
    grads, loss = _one_sample(_POOL_CTX["logs"][scenario_idx], epoch, scenario_idx,
                              params, _POOL_CTX["pcfg"], _POOL_CTX["tcfg"])
    return grads, loss


def _dump_divergence(out_dir: str, epoch: int, idx: int, loss: float) -> None:
    path = os.path.join(out_dir, "divergence.json")
    with open(path, "w") as fh:
        json.dump({"epoch": epoch, "scenario_idx": idx, "loss": loss}, fh)


def checkpoint_path(out_dir: str, epoch: int) -> str:
    return os.path.join(out_dir, f"checkpoint_{epoch:04d}.ldck")


def latest_checkpoint(out_dir: str) -> str | None:
    if not os.path.isdir(out_dir):
        return None
    names = sorted(n for n in os.listdir(out_dir)
                   if n.startswith("checkpoint_") and n.endswith(".ldck"))
    return os.path.join(out_dir, names[-1]) if names else None


def train(dataset: list[ScenarioLog], pcfg: PolicyConfig, tcfg: TrainConfig,
          out_dir: str | None = None, resume: bool = False,
          ) -> tuple[ParamStore, list[dict]]:
    """Train one method over the dataset; returns params and the loss curve.

    With a fixed seed and any fixed worker count the run is bit-reproducible:
    sampling streams are counter-derived and gradient reduction is a fixed
    ordered sum.
    """
    if not dataset:
        raise ValueError("dataset must not be empty")
    tcfg.validate()
    pcfg.validate()
    if tcfg.method == "bc" and pcfg.use_sdv_history:
        raise ValueError("bc excludes the SDV history input")

    start_epoch = 0
    adam_t = 0
    curve: list[dict] = []
    params = None
    if resume and out_dir:
        last = latest_checkpoint(out_dir)
        if last:
            params, loaded_pcfg, extra = policy.load_checkpoint(last)
            if asdict(loaded_pcfg) != asdict(pcfg):
                raise ValueError("checkpoint policy config differs from requested config")
            start_epoch = int(extra["epoch"]) + 1
            adam_t = int(extra["adam_t"])
    if params is None:
        rng = stream(tcfg.seed, 12345)
        params = policy.init_params(pcfg, rng)

    pool = None
    if tcfg.workers > 1:
        pool = mp.get_context("fork").Pool(processes=tcfg.workers,
                                           initializer=_pool_init,
                                           args=(dataset, pcfg, tcfg))
    log_lines: list[str] = []
    try:
        n = len(dataset)
        global_step = start_epoch * math.ceil(n / tcfg.batch_size)
        for epoch in range(start_epoch, tcfg.epochs):
            lr = tcfg.lr_at(epoch)
            order = stream(tcfg.seed, 7, epoch).permutation(n)
            for lo in range(0, n, tcfg.batch_size):
                batch = [int(i) for i in order[lo:lo + tcfg.batch_size]]
                if pool is not None:
                    arrays = {name: params[name] for name in params.names()}
                    results = pool.map(_pool_task,
                                       [(arrays, epoch, i) for i in batch])
                else:
                    results = [_one_sample(dataset[i], epoch, i, params, pcfg, tcfg)
                               for i in batch]
                grad = _zero_grads(params)
                loss_sum = 0.0
                for grads_i, loss_i in results:
                    if not math.isfinite(loss_i):
                        if out_dir:
                            _dump_divergence(out_dir, epoch, -1, loss_i)
                        raise TrainingDiverged(
                            f"non-finite loss {loss_i} at epoch {epoch}")
                    for name in grad:
                        grad[name] += grads_i[name]
                    loss_sum += loss_i
                inv = 1.0 / len(batch)
                for name in grad:
                    grad[name] *= inv
                adam_t += 1
                adam_step(params, grad, lr, adam_t)
                global_step += 1
                row = {"step": global_step, "epoch": epoch, "lr": lr,
                       "loss": loss_sum * inv}
                curve.append(row)
                log_lines.append(f"{row['step']}\t{row['epoch']}\t{row['lr']:.10e}"
                                 f"\t{row['loss']:.10e}")
            if out_dir and (epoch % tcfg.checkpoint_every == 0
                            or epoch == tcfg.epochs - 1):
                policy.save_checkpoint(checkpoint_path(out_dir, epoch), params, pcfg,
                                       extra={"epoch": epoch, "adam_t": adam_t,
                                              "method": tcfg.method})
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    if out_dir:
        mode = "a" if resume and start_epoch > 0 else "w"
        with open(os.path.join(out_dir, "train_log.tsv"), mode) as fh:
            if mode == "w":
                fh.write("step\tepoch\tlr\tloss\n")
            for line in log_lines:
                fh.write(line + "\n")
    return params, curve
