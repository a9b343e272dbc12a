"""Operator entry point: one executable, six subcommands.

    loopdrive gen-data  --out runs/data [--n-scenarios 32 --seed 0]
    loopdrive train     --data runs/data --out runs/ours --method ours
    loopdrive eval      --data runs/data --checkpoint runs/ours/checkpoint_*.ldck --out runs/eval
    loopdrive eval      --data runs/data --policy expert-oracle --out runs/eval
    loopdrive sweep     --axis alpha --values 0,0.03,0.1 ...
    loopdrive render    --scenario runs/data/scenarios/x.jsonl --out runs/frames

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import multiprocessing as mp
import os
import sys

import numpy as np

from . import evaluation, render, synth, training
from .config import ConfigError, RunConfig, load_config, save_config, set_option
from .evaluation import EvalConfig, ExpertOraclePolicy, MetricsReport, NetworkPolicy, evaluate
from .policy import load_checkpoint
from .scene import ScenarioFormatError, load_scenario, save_scenario
from .sim import kinematics_step


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_run_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            set_option(cfg, key, value)
        except ConfigError as e:
            raise UsageError(str(e))
    return cfg


def _echo(cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.yaml"))


def _write_manifest(out_dir: str, payload: dict) -> None:
    payload = {"schema": "v1", **payload}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_split(data_dir: str, split: str) -> list:
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no manifest.json under {data_dir}; run gen-data first")
    with open(path) as fh:
        manifest = json.load(fh)
    logs = []
    for entry in manifest[split]:
        logs.append(load_scenario(os.path.join(data_dir, entry["file"])))
    return logs


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    if args.n_scenarios is not None:
        cfg.gen.n_scenarios = args.n_scenarios
    if args.seed is not None:
        cfg.gen.seed = args.seed
    out = args.out
    scen_dir = os.path.join(out, "scenarios")
    os.makedirs(scen_dir, exist_ok=True)
    _echo(cfg, out)
    logs = synth.generate(cfg.gen)
    entries = []
    for log in logs:
        rel = os.path.join("scenarios", f"{log.scenario_id}.jsonl")
        path = os.path.join(out, rel)
        save_scenario(log, path)
        entries.append({"file": rel, "sha256": _sha256(path),
                        "frames": len(log.frames)})
    n_test = max(int(round(cfg.test_fraction * len(entries))), 1) \
        if len(entries) > 1 else 0
    manifest = {
        "kind": "dataset",
        "seed": cfg.gen.seed,
        "n_scenarios": len(entries),
        "dt": cfg.gen.dt,
        "train": entries[: len(entries) - n_test],
        "test": entries[len(entries) - n_test:],
    }
    _write_manifest(out, manifest)
    print(f"wrote {len(entries)} scenarios to {out} "
          f"({len(manifest['train'])} train / {len(manifest['test'])} test)")
    return 0


_BOOL = {"true": True, "false": False}


def _method_defaults(cfg: RunConfig, args) -> None:
    method = cfg.train.method
    if args.use_sdv_history is not None:
        want = _BOOL[args.use_sdv_history]
        if method == "bc" and want:
            raise UsageError("--method bc excludes the SDV history input")
        cfg.policy.use_sdv_history = want
    elif method == "bc":
        cfg.policy.use_sdv_history = False
    if args.history_dropout is not None:
        cfg.policy.history_dropout_prob = args.history_dropout
    elif method == "bc_perturb" and cfg.policy.use_sdv_history:
        cfg.policy.history_dropout_prob = 0.5


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    for name in ("method", "T", "K", "gamma", "seed", "epochs", "workers",
                 "alpha", "beta", "batch_size"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg.train, name, value)
    if cfg.train.method not in training.METHODS:
        raise UsageError(f"unknown method {cfg.train.method!r}; "
                         f"choose from {', '.join(training.METHODS)}")
    _method_defaults(cfg, args)
    cfg.train.validate()
    cfg.policy.validate()
    logs = _load_split(args.data, "train")
    os.makedirs(args.out, exist_ok=True)
    _echo(cfg, args.out)
    params, curve = training.train(logs, cfg.policy, cfg.train, out_dir=args.out,
                                   resume=args.resume)
    last = training.latest_checkpoint(args.out)
    _write_manifest(args.out, {
        "kind": "training",
        "method": cfg.train.method,
        "epochs": cfg.train.epochs,
        "final_loss": curve[-1]["loss"] if curve else None,
        "checkpoint": os.path.basename(last) if last else None,
        "train_log": "train_log.tsv",
    })
    print(f"trained {cfg.train.method} for {cfg.train.epochs} epochs; "
          f"final loss {curve[-1]['loss']:.5f}" if curve else "no steps run")
    return 0


def _make_policy(args, cfg: RunConfig):
    if args.checkpoint:
        params, pcfg, _ = load_checkpoint(args.checkpoint)
        return NetworkPolicy(params, pcfg), os.path.basename(args.checkpoint)
    if args.policy == "expert-oracle":
        return ExpertOraclePolicy(), "expert-oracle"
    raise UsageError("eval needs --checkpoint PATH or --policy expert-oracle")


_EVAL_CTX: dict = {}


def _eval_init(policy_obj, ecfg):
    _EVAL_CTX["policy"] = policy_obj
    _EVAL_CTX["ecfg"] = ecfg


def _eval_task(log):
    return evaluate(_EVAL_CTX["policy"], [log], _EVAL_CTX["ecfg"])


def run_parallel_eval(policy_obj, logs, ecfg: EvalConfig, workers: int) -> MetricsReport:
    if workers <= 1 or len(logs) <= 1:
        return evaluate(policy_obj, logs, ecfg)
    with mp.get_context("fork").Pool(processes=workers, initializer=_eval_init,
                                     args=(policy_obj, ecfg)) as pool:
        partials = pool.map(_eval_task, logs)
    merged = MetricsReport()
    merged.config = partials[0].config
    l2 = []
    for part in partials:  # deterministic ordered merge
        for key in merged.counts:
            merged.counts[key] += part.counts[key]
        merged.miles += part.miles
        merged.n_scenarios += part.n_scenarios
        merged.events.extend(part.events)
        l2.append(part.l2_mean)
    merged.l2_mean = float(np.mean(l2)) if l2 else 0.0
    return merged


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    if args.offroad_threshold is not None:
        cfg.eval.offroad_threshold = args.offroad_threshold
    policy_obj, policy_name = _make_policy(args, cfg)
    logs = _load_split(args.data, args.split)
    os.makedirs(args.out, exist_ok=True)
    _echo(cfg, args.out)
    report = run_parallel_eval(policy_obj, logs, cfg.eval, args.workers or 1)
    report.save(os.path.join(args.out, "report.json"),
                os.path.join(args.out, "report.txt"))
    _write_manifest(args.out, {
        "kind": "evaluation",
        "policy": policy_name,
        "split": args.split,
        "report": "report.json",
        "i1k": report.i1k,
    })
    print(report.to_table())
    return 0


SWEEP_AXES = ("alpha", "beta", "K", "data-fraction")


def cmd_sweep(args) -> int:
    cfg = _load_run_config(args)
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"--axis must be one of {SWEEP_AXES}")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {args.values!r}")
    if not values:
        raise UsageError("--values is empty")
    os.makedirs(args.out, exist_ok=True)
    _echo(cfg, args.out)
    train_logs = _load_split(args.data, "train")
    test_logs = _load_split(args.data, "test")
    rows = []
    for value in values:
        run_cfg = _load_run_config(args)  # fresh copy per value
        label = f"{args.axis}_{value:g}"
        if args.axis == "alpha":
            run_cfg.train.alpha = value
        elif args.axis == "beta":
            run_cfg.train.beta = value
        elif args.axis == "K":
            run_cfg.train.K = int(value)
        subset = train_logs
        if args.axis == "data-fraction":
            if not 0.0 < value <= 1.0:
                raise UsageError("data-fraction values must be in (0, 1]")
            subset = train_logs[: max(int(round(value * len(train_logs))), 1)]
        run_dir = os.path.join(args.out, label)
        os.makedirs(run_dir, exist_ok=True)
        save_config(run_cfg, os.path.join(run_dir, "config.yaml"))
        params, _ = training.train(subset, run_cfg.policy, run_cfg.train,
                                   out_dir=run_dir)
        report = run_parallel_eval(NetworkPolicy(params, run_cfg.policy),
                                   test_logs, run_cfg.eval, run_cfg.train.workers)
        report.save(os.path.join(run_dir, "report.json"),
                    os.path.join(run_dir, "report.txt"))
        rows.append({
            "value": value,
            "i1k": report.i1k,
            "collisions": report.collisions_total,
            "off_road": report.counts["off_road"],
            "comfort_acc": report.counts["comfort_acc"],
            "l2_mean": report.l2_mean,
            "run": label,
        })
    with open(os.path.join(args.out, "summary.tsv"), "w") as fh:
        fh.write("value\ti1k\tcollisions\toff_road\tcomfort_acc\tl2_mean\n")
        for r in rows:
            fh.write(f"{r['value']:g}\t{r['i1k']:.2f}\t{r['collisions']}"
                     f"\t{r['off_road']}\t{r['comfort_acc']}\t{r['l2_mean']:.4f}\n")
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump({"schema": "v1", "axis": args.axis, "rows": rows}, fh,
                  indent=1, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.out, {"kind": "sweep", "axis": args.axis,
                               "values": values, "summary": "summary.tsv"})
    for r in rows:
        print(f"{args.axis}={r['value']:g}: I1K {r['i1k']:.1f} "
              f"collisions {r['collisions']} comfort {r['comfort_acc']}")
    return 0


def _policy_track(log, checkpoint: str, start: int) -> np.ndarray:
    params, pcfg, _ = load_checkpoint(checkpoint)
    policy_obj = NetworkPolicy(params, pcfg)
    expert = log.sdv_poses()
    pose = expert[start].copy()
    history = np.stack([expert[max(start - j, 0)] for j in (1, 2, 3)])
    track = [pose.copy()]
    for t in range(start, len(log.frames) - 1):
        action = policy_obj.act(log, t, pose, history)
        history = np.stack([pose, history[0], history[1]])
        pose = kinematics_step(pose, np.asarray(action, dtype=np.float64))
        track.append(pose.copy())
    return np.asarray(track)


def cmd_render(args) -> int:
    log = load_scenario(args.scenario)
    if args.frames:
        try:
            a, b = (int(v) for v in args.frames.split(":"))
        except ValueError:
            raise UsageError(f"--frames expects A:B, got {args.frames!r}")
    else:
        a, b = 0, min(len(log.frames), 10)
    if not (0 <= a < b <= len(log.frames)):
        raise UsageError(f"frame range {a}:{b} outside log of {len(log.frames)} frames")
    track = None
    if args.checkpoint:
        track = _policy_track(log, args.checkpoint, start=min(3, len(log.frames) - 2))
    written = render.render_frames(log, range(a, b), args.out, policy_track=track)
    print(f"wrote {len(written)} frames to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="loopdrive",
                     description="closed-loop imitation learning on log-replay simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="config override, repeatable")

    p = sub.add_parser("gen-data", help="generate synthetic scenarios")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenarios", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a policy")
    common(p)
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=training.METHODS)
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--K", type=int, dest="K")
    p.add_argument("--gamma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--use-sdv-history", choices=("true", "false"))
    p.add_argument("--history-dropout", type=float)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--policy", choices=("expert-oracle",))
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--offroad-threshold", type=float)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/eval across one hyperparameter axis")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("render", help="render scenario frames to SVG")
    common(p)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--frames", help="frame range A:B")
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ScenarioFormatError, ConfigError, FileNotFoundError,
            ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
