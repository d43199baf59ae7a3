"""Command-line front door for hosting, joining, training, and analysis.

Configuration resolves in precedence order: explicit flags beat environment
variables (SKYLITE_HOST, SKYLITE_TOKEN), which beat a --config JSON file,
which beats built-in defaults. Unknown config-file keys are rejected rather
than ignored, and the resolved configuration is echoed into the run log so a
persisted run is self-describing. All errors leave as single-line JSON on
stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import threading
import time
from dataclasses import dataclass

from . import SkyliteError
from .behavior import params_from_spec
from .controllers import (
    BehaviorController,
    HoldController,
    HumanOverrideController,
    build_controllers,
)
from .curriculum import (
    EmptyGrid,
    candidate_grid,
    default_engine,
    derive_insight,
    families_for,
    score_grid,
    without_scripted_agents,
    write_batch,
)
from .gateway import (
    GATEWAY_PORT_DEFAULT,
    EventKind,
    Gateway,
    RunWriter,
    human_actions_outside_windows,
    load_run,
    make_app,
    verify_run,
)
from .lockstep import (
    CONTROL_PORT_DEFAULT,
    DEADLINE_MS_DEFAULT,
    TELEMETRY_PORT_DEFAULT,
    HostSession,
    client_loop,
)
from .mentor import LearningConfig, make_guardian, make_pursuit_spec, save_policy, train
from .replay import export as export_log
from .replay import fidelity, ingest, replay, resample
from .scenario import load_scenario
from .world import AgentKind, episode_metrics

ENV_HOST = "SKYLITE_HOST"
ENV_TOKEN = "SKYLITE_TOKEN"


class ConfigError(SkyliteError):
    pass


@dataclass
class CliConfig:
    spec: str | None = None
    seed: int | None = None
    ticks: int | None = None
    episodes: int | None = None
    control_port: int = CONTROL_PORT_DEFAULT
    telemetry_port: int = TELEMETRY_PORT_DEFAULT
    gateway_port: int = GATEWAY_PORT_DEFAULT
    deadline_ms: float = DEADLINE_MS_DEFAULT
    role: str = "behavior"
    mentor: str = "guardian"
    out: str | None = None
    host: str = "127.0.0.1"
    token: str = ""
    name: str = ""
    pace: float = 0.0
    headless: bool = False
    wait_clients: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_CFG_FIELDS = {f.name for f in dataclasses.fields(CliConfig)}


def resolve_config(args: argparse.Namespace) -> CliConfig:
    """defaults < config file < environment < explicit flags."""
    cfg = CliConfig()
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in data.items():
            if key not in _CFG_FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
    if os.environ.get(ENV_HOST):
        cfg.host = os.environ[ENV_HOST]
    if ENV_TOKEN in os.environ:
        cfg.token = os.environ[ENV_TOKEN]
    for key in _CFG_FIELDS:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            setattr(cfg, key, value)
    return cfg


def _common_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--spec", help="scenario JSON file")
    sp.add_argument("--seed", type=int, help="override the scenario seed")
    sp.add_argument("--ticks", type=int, help="tick / commit budget")
    sp.add_argument("--config", help="JSON config file (lowest-precedence source)")
    sp.add_argument("--control-port", type=int, dest="control_port")
    sp.add_argument("--telemetry-port", type=int, dest="telemetry_port")
    sp.add_argument("--gateway-port", type=int, dest="gateway_port",
                    help="HTTP/WS gateway port; 0 disables the web server")
    sp.add_argument("--deadline-ms", type=float, dest="deadline_ms")
    sp.add_argument("--role", choices=("behavior", "hold"),
                    help="controller for the assigned agent when joining")
    sp.add_argument("--mentor",
                    help='mentor for training: "guardian", "guardian:<ttc>", "none"')
    sp.add_argument("--out", help="output path (run log, policy, directory)")
    sp.add_argument("--host", help=f"bind/connect address (env {ENV_HOST})")
    sp.add_argument("--token", help=f"shared command token (env {ENV_TOKEN})")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="skylite",
        description="deterministic multi-agent traffic simulation")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("host", help="serve a scenario over lockstep + gateway")
    _common_flags(sp)
    sp.add_argument("--pace", type=float,
                    help="seconds to sleep per tick (0 = free-running)")
    sp.add_argument("--headless", action="store_true",
                    help="skip the HTTP/WS server even if a port is set")
    sp.add_argument("--wait-clients", type=int, dest="wait_clients",
                    help="block until this many clients pair before tick 0")
    sp.set_defaults(fn=cmd_host)

    sp = sub.add_parser("join", help="connect to a host and drive one agent")
    _common_flags(sp)
    sp.add_argument("--name", help="client name (must be unique per host)")
    sp.set_defaults(fn=cmd_join)

    sp = sub.add_parser("train", help="mentor-gated policy training")
    _common_flags(sp)
    sp.add_argument("--episodes", type=int, help="training episodes")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("curriculum",
                        help="mine a failure and emit targeted scenarios")
    _common_flags(sp)
    sp.set_defaults(fn=cmd_curriculum)

    sp = sub.add_parser("replay", help="score a recorded trajectory log")
    _common_flags(sp)
    sp.add_argument("log", help="trajectory log (.csv or .json)")
    sp.set_defaults(fn=cmd_replay)

    sp = sub.add_parser("metrics", help="verify and summarize a run log")
    _common_flags(sp)
    sp.add_argument("run", help="persisted run log (.jsonl)")
    sp.set_defaults(fn=cmd_metrics)
    return p


def _load_spec(cfg: CliConfig, required: bool = True):
    if cfg.spec is None:
        if required:
            raise ConfigError("--spec is required for this command")
        return None
    spec = load_scenario(cfg.spec)
    if cfg.seed is not None:
        spec = dataclasses.replace(spec, seed=cfg.seed)
    return spec


def _emit(data: dict) -> None:
    print(json.dumps(data, sort_keys=True))


# --- subcommands ---------------------------------------------------------------


def cmd_host(cfg: CliConfig) -> int:
    spec = _load_spec(cfg)
    ticks = cfg.ticks if cfg.ticks is not None else spec.max_ticks
    out = cfg.out or os.path.join("runs", f"{spec.name}.jsonl")
    writer = RunWriter(out)
    from .gateway import EventBus  # sink wiring is host-specific
    bus = EventBus(sink=writer)
    gateway = Gateway(token=cfg.token, bus=bus, bounds=spec.bounds)

    controllers = build_controllers(spec)
    for seed_agent in spec.agents:
        if seed_agent.kind is AgentKind.human_controllable:
            override = HumanOverrideController(
                fallback=controllers[seed_agent.agent_id])
            controllers[seed_agent.agent_id] = override
            gateway.attach_agent(seed_agent.agent_id, override)

    session = HostSession(
        spec,
        host=cfg.host,
        control_port=cfg.control_port,
        telemetry_port=cfg.telemetry_port,
        deadline_ms=cfg.deadline_ms,
        controllers=controllers,
        gateway=gateway)
    session.start()
    # Run logs are served over unauthenticated GET /runs/{file}; never log the token.
    bus.publish(EventKind.metric, 0,
                {"name": "config", "config": {**cfg.to_dict(), "token": "***"}})
    if cfg.wait_clients > 0:
        # Bounded so a crashed client cannot wedge the host forever.
        paired = session.wait_for_clients(cfg.wait_clients, timeout=30.0)
        if paired < cfg.wait_clients:
            session.stop()
            bus.close()
            writer.close()
            raise ConfigError(
                f"only {paired} of {cfg.wait_clients} clients paired")

    server = None
    if cfg.gateway_port > 0 and not cfg.headless:
        import uvicorn

        app = make_app(gateway, runs_dir=os.path.dirname(out) or ".")
        server = uvicorn.Server(uvicorn.Config(
            app, host=cfg.host, port=cfg.gateway_port, log_level="warning"))
        threading.Thread(target=server.run, daemon=True).start()
        for _ in range(100):  # wait for the listener before ticking
            if server.started:
                break
            time.sleep(0.05)

    states = [session.world]
    try:
        for _ in range(ticks):
            states.append(session.advance())
            if cfg.pace > 0:
                time.sleep(cfg.pace)
        summary: dict = {
            "ticks": len(states) - 1,
            "out": out,
            "clients": len(session._clients),
            "final_digest": f"{session.digest_trace[-1][1]:016x}"
            if session.digest_trace else None,
        }
        ego = spec.ego_id()
        if ego is not None:
            report = episode_metrics(
                states, spec.graph, ego_id=ego,
                route_completion_s=spec.termination.route_completion_s,
                dt=spec.dt)
            summary["metrics"] = report.to_dict()
            bus.publish(EventKind.metric, states[-1].tick,
                        {"name": "episode", **report.to_dict()})
    finally:
        session.stop()
        if server is not None:
            server.should_exit = True
        bus.close()
        writer.close()
    _emit(summary)
    return 0


def cmd_join(cfg: CliConfig) -> int:
    controller = None
    if cfg.role == "hold":
        controller = HoldController()
    result = client_loop(
        cfg.host, cfg.control_port, cfg.telemetry_port,
        name=cfg.name or f"client-{os.getpid()}",
        controller=controller,
        max_commits=cfg.ticks)
    _emit({
        "client_id": result.client_id,
        "agent_ids": list(result.agent_ids),
        "commits": result.commits_applied,
        "desynced": result.desynced,
        "reason": result.reason,
        "final_digest": f"{result.digest_trace[-1][1]:016x}"
        if result.digest_trace else None,
    })
    if result.desynced:
        print(json.dumps({"error": "Desync",
                          "detail": f"diverged: {result.reason}"}),
              file=sys.stderr)
        return 2
    return 0


def _parse_mentor(text: str):
    if text == "none":
        return lambda world, graph, agent_id: None
    if text == "guardian":
        return make_guardian()
    if text.startswith("guardian:"):
        return make_guardian(ttc_threshold=float(text.split(":", 1)[1]))
    raise ConfigError(f"unknown mentor {text!r}")


def cmd_train(cfg: CliConfig) -> int:
    spec = _load_spec(cfg, required=False)
    if spec is None:
        spec = make_pursuit_spec(seed=cfg.seed or 0)
    learn = LearningConfig()
    if cfg.episodes is not None:
        learn = dataclasses.replace(learn, episodes=cfg.episodes)
    result = train(spec, _parse_mentor(cfg.mentor), learn)
    decile = max(1, len(result.log) // 10)
    first = sum(e["interventions"] for e in result.log[:decile])
    last = sum(e["interventions"] for e in result.log[-decile:])
    out = None
    if cfg.out:
        save_policy(cfg.out, result)
        out = cfg.out
    _emit({
        "episodes": len(result.log),
        "first_decile_interventions": first,
        "last_decile_interventions": last,
        "collisions_last_decile": sum(
            1 for e in result.log[-decile:] if e["collision"]),
        "preference_pairs": len(result.pairs),
        "policy": out,
    })
    return 0


def cmd_curriculum(cfg: CliConfig) -> int:
    spec = _load_spec(cfg)
    from .controllers import run_episode

    result = run_episode(spec, build_controllers(spec))
    ego = spec.ego_id()
    if ego is None:
        raise ConfigError("scenario has no ego agent to mine failures for")
    report = episode_metrics(
        result.states, spec.graph, ego_id=ego,
        route_completion_s=spec.termination.route_completion_s, dt=spec.dt)
    insight = derive_insight(result.states, report, spec.graph, ego)
    # candidates are scored as the sole disturbance on the nominal scene
    base = without_scripted_agents(spec)
    grid = candidate_grid(base, families=families_for(insight.kind))
    if not grid:
        raise EmptyGrid("no feasible candidates for this scenario")
    engine = default_engine()
    scores = score_grid(grid, insight, engine, base)
    winner_i = 0
    for i in range(1, len(grid)):
        if scores[i].total > scores[winner_i].total:
            winner_i = i
    out = cfg.out or "curriculum_out"
    manifest = write_batch(out, base, insight, grid, scores, winner_i)
    _emit({
        "insight": insight.kind.value,
        "candidates": len(grid),
        "winner_index": winner_i,
        "winner_total": scores[winner_i].total,
        "manifest": manifest,
    })
    return 0


def cmd_replay(cfg: CliConfig, log_path: str | None = None) -> int:
    spec = _load_spec(cfg)
    log = ingest(log_path)
    resampled = resample(log, spec.dt)
    result = replay(resampled, spec.graph, spec.dt)
    report = fidelity(result.states, resampled, spec.graph)
    if cfg.out:
        export_log(log, cfg.out)
    _emit({
        "agents": sorted(resampled),
        "ticks": result.ticks,
        "score": report.score,
        "per_agent": {str(i): dataclasses.asdict(a)
                      for i, a in report.per_agent.items()},
        "canonical_copy": cfg.out,
    })
    return 0


def cmd_metrics(cfg: CliConfig, run_path: str | None = None) -> int:
    events = load_run(run_path)
    verified = verify_run(events)
    outside = human_actions_outside_windows(events)
    summary: dict = {
        "events": len(events),
        "ticks_checked": verified.ticks_checked,
        "digest_mismatches": list(verified.mismatched_ticks),
        "human_actions_outside_takeover": outside,
    }
    ego = verified.spec.ego_id()
    if ego is not None and len(verified.states) > 1:
        report = episode_metrics(
            list(verified.states), verified.spec.graph, ego_id=ego,
            route_completion_s=verified.spec.termination.route_completion_s,
            dt=verified.spec.dt)
        summary["metrics"] = report.to_dict()
    _emit(summary)
    return 0


# --- entry point ------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.fn is cmd_replay:
            return cmd_replay(cfg, args.log)
        if args.fn is cmd_metrics:
            return cmd_metrics(cfg, args.run)
        return args.fn(cfg)
    except SkyliteError as exc:
        payload = {"error": type(exc).__name__, "detail": str(exc)}
        for attr in ("line", "agent_id"):
            if hasattr(exc, attr):
                payload[attr] = getattr(exc, attr)
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
