"""Command-line entrypoint: train / eval / analyze / serve / export.

Every subcommand except ``serve`` runs fully headless. Config files are flat
``key = value`` text; ``--set key=value`` overrides them (dotted keys allowed).
Failures print one machine-readable JSON error line to stderr and exit
nonzero. ``E2_LOG`` controls log verbosity (debug/info/warning).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analyze as analyze_mod
from .config import TrainConfig, build_config, load_config_file
from .intervene import IntervenerConfig, expert_action
from .replay import export_jsonl
from .rng import substream
from .sim import make_task, observe, reset, step
from .trainer import Trainer, evaluate, load_agents
from .wire import TelemetryBus


def _config_help() -> str:
    lines = ["config keys (defaults):"]
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"  {f.name} = {f.default}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esrl", description="Entropy-selective human-in-the-loop RL")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser(
        "train",
        help="run a training session",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    train.add_argument("--config", help="flat key=value config file")
    train.add_argument("--out-dir", default="runs/latest", help="output directory (metrics, checkpoints, buffers)")
    train.add_argument("--seed", type=int, help="override config seed")
    train.add_argument("--mode", choices=["e2hil", "uniform"], help="override config mode")
    train.add_argument("--task", help="override config task")
    train.add_argument("--total-steps", type=int, help="override config total_steps")
    train.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override any config key (repeatable)")
    train.add_argument("--serve-port", type=int, help="serve live telemetry on this port while training")
    train.add_argument("--record", help="record outbound telemetry to this JSON-lines file")

    ev = sub.add_parser("eval", help="evaluate a checkpoint deterministically")
    ev.add_argument("--checkpoint", required=True, help="checkpoint directory")
    ev.add_argument("--episodes", type=int, default=20)
    ev.add_argument("--seed", type=int, default=0)

    an = sub.add_parser("analyze", help="influence report from a buffer export + checkpoint")
    an.add_argument("--buffer", required=True, help="JSON-lines transitions export")
    an.add_argument("--checkpoint", required=True)
    an.add_argument("--low-pct", type=float, default=5.0)
    an.add_argument("--high-pct", type=float, default=90.0)
    an.add_argument("--out", help="write the JSON report here")

    sv = sub.add_parser("serve", help="replay a recorded telemetry session for UI work")
    sv.add_argument("--fixture", required=True, help="recorded JSON-lines session")
    sv.add_argument("--port", type=int, default=8732)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--max-speed", action="store_true", help="ignore recorded cadence")
    sv.add_argument("--ui-dir", help="serve a dashboard build from this directory")

    ex = sub.add_parser("export", help="roll out transitions and export them as JSON-lines")
    ex.add_argument("--task", default="touch2")
    ex.add_argument("--steps", type=int, default=2000)
    ex.add_argument("--seed", type=int, default=0)
    ex.add_argument("--out", required=True)
    ex.add_argument("--checkpoint", help="roll out this policy (default: scripted expert + random mix)")
    return parser


def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def cmd_train(args) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = _parse_overrides(args.overrides)
    for key in ("seed", "mode", "task", "total_steps"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    cfg = build_config(file_values, overrides)

    bus = None
    server = None
    if args.serve_port or args.record:
        bus = TelemetryBus(record_path=args.record)
    if args.serve_port:
        from .service import BackgroundServer, create_app

        server = BackgroundServer(create_app(bus=bus, ui_dir=_default_ui_dir()), port=args.serve_port)
        server.start()
    try:
        summary = Trainer(cfg, args.out_dir, bus=bus).run()
    finally:
        if server is not None:
            server.stop()
        if bus is not None:
            bus.close()
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    policy, _, _, meta = load_agents(args.checkpoint)
    task = make_task(meta["task"])
    rate = evaluate(policy, task, args.episodes, substream(args.seed, "eval", 0))
    print(json.dumps({"task": task.name, "episodes": args.episodes, "success_rate": rate}))
    return 0


def cmd_analyze(args) -> int:
    report = analyze_mod.analyze(args.buffer, args.checkpoint, args.low_pct, args.high_pct)
    if args.out:
        analyze_mod.write_report(report, args.out)
    print(analyze_mod.render_text(report))
    return 0


def cmd_serve(args) -> int:
    from .service import create_app, run_server

    if not Path(args.fixture).exists():
        raise FileNotFoundError(f"fixture not found: {args.fixture}")
    app = create_app(fixture_path=args.fixture, max_speed=args.max_speed, ui_dir=args.ui_dir or _default_ui_dir())
    print(f"serving fixture {args.fixture} on ws://{args.host}:{args.port}/ws")
    run_server(app, host=args.host, port=args.port)
    return 0


def cmd_export(args) -> int:
    """Collect transitions with the expert (or a checkpointed policy) + noise."""
    from .replay import Transition

    task = make_task(args.task)
    rng = substream(args.seed, "export")
    policy = None
    if args.checkpoint:
        policy, _, _, _ = load_agents(args.checkpoint)
    icfg = IntervenerConfig()
    transitions = []
    state = reset(task, rng)
    next_id = 0
    for t in range(args.steps):
        use_expert = (t // task.horizon) % 2 == 0 if policy is None else False
        if policy is not None:
            action, _ = policy.sample(observe(task, state), rng)
            source = "exploration"
        elif use_expert:
            action = expert_action(state, task, icfg)
            source = "intervention"
        else:
            action = rng.uniform(-1, 1, size=task.action_dim)
            source = "exploration"
        nxt, reward, done = step(task, state, action)
        transitions.append(
            Transition(
                state=observe(task, state),
                action=np.asarray(action, dtype=np.float64),
                reward=reward,
                next_state=observe(task, nxt),
                done=reward > 0,
                source=source,
                id=next_id,
                step=t,
            )
        )
        next_id += 1
        state = reset(task, rng) if done else nxt
    export_jsonl(transitions, args.out)
    print(json.dumps({"task": task.name, "steps": len(transitions), "out": args.out}))
    return 0


def _default_ui_dir() -> str | None:
    candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    return str(candidate) if candidate.is_dir() else None


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "serve": cmd_serve,
    "export": cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("E2_LOG", "warning").upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, ValueError, KeyError) as err:
        print(json.dumps({"error": str(err), "command": args.command}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
