"""Live telemetry fan-out, human command ingress, and run persistence.

Events flow one way: the simulation publishes to an in-process bus; each
subscriber owns a bounded queue (10,000 events) and a slow consumer is
dropped and disconnected rather than ever blocking the publisher. Commands
flow the other way through one ordered queue the simulation drains at the
start of every tick, so a command's effect lands within one tick of dequeue.

Runs persist as append-only JSON lines, one event per line, sequence numbers
gapless from 1. A persisted run carries the scenario, every applied action,
and the post-step digest per tick — enough to re-simulate and verify the
digest sequence (`verify_run`).

No ``from __future__ import annotations`` here: the websocket endpoint's
parameter annotation must be a real class at runtime for the framework to
inject the connection rather than demand a query parameter.
"""

import json
import math
import os
import queue
import re
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from . import SkyliteError
from .controllers import HumanOverrideController
from .scenario import ScenarioSpec, scenario_from_json, scenario_json
from .wire import state_digest
from .world import (
    ActionCommand,
    ActionSource,
    LaneGraph,
    LaneIntent,
    UnknownAgent,
    WorldState,
    min_ttc,
    step,
)

SCHEMA_V = 1
BACKLOG_LIMIT = 10_000
GATEWAY_PORT_DEFAULT = 7702


class GatewayError(SkyliteError):
    pass


class BadToken(GatewayError):
    pass


class NotInTakeover(GatewayError):
    pass


class BacklogExceeded(GatewayError):
    pass


class CorruptLine(GatewayError):
    def __init__(self, line: int, events: list["TelemetryEvent"], why: str):
        super().__init__(f"line {line}: {why}")
        self.line = line
        self.events = events  # intact prefix before the corruption


class EventKind(str, Enum):
    agent_state = "agent_state"
    takeover_begin = "takeover_begin"
    takeover_end = "takeover_end"
    metric = "metric"
    scenario_loaded = "scenario_loaded"
    desync = "desync"


@dataclass(frozen=True, slots=True)
class TelemetryEvent:
    seq: int
    tick: int
    kind: EventKind
    payload: dict

    def to_json(self) -> str:
        return json.dumps({"v": SCHEMA_V, "seq": self.seq, "tick": self.tick,
                           "kind": self.kind.value, "payload": self.payload},
                          separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TelemetryEvent":
        data = json.loads(line)
        if data.get("v") != SCHEMA_V:
            raise ValueError(f"schema version {data.get('v')!r}")
        return cls(seq=int(data["seq"]), tick=int(data["tick"]),
                   kind=EventKind(data["kind"]), payload=data["payload"])


# --- pub/sub -----------------------------------------------------------------


class Subscription:
    def __init__(self, kinds: frozenset[EventKind] | None, backlog: int):
        self.kinds = kinds
        self._q: queue.Queue = queue.Queue(maxsize=backlog)
        self._dropped = False
        self._closed = False

    def _offer(self, event: TelemetryEvent) -> bool:
        if self._dropped or self._closed:
            return False
        if self.kinds is not None and event.kind not in self.kinds:
            return True
        try:
            self._q.put_nowait(event)
            return True
        except queue.Full:
            self._dropped = True  # drop-and-disconnect; publisher never waits
            return False

    def get(self, timeout: float | None = None) -> TelemetryEvent | None:
        """Next event; None on clean close or quiet timeout."""
        if self._dropped and self._q.empty():
            raise BacklogExceeded(f"subscriber fell {BACKLOG_LIMIT} events behind")
        try:
            item = self._q.get(timeout=timeout)
        except queue.Empty:
            if self._dropped:
                raise BacklogExceeded(
                    f"subscriber fell {BACKLOG_LIMIT} events behind") from None
            return None
        if item is None:
            self._closed = True
            return None
        return item

    def drain(self) -> list[TelemetryEvent]:
        out = []
        while True:
            try:
                item = self._q.get_nowait()
            except queue.Empty:
                return out
            if item is None:
                self._closed = True
                return out
            out.append(item)

    @property
    def live(self) -> bool:
        return not (self._dropped or self._closed)


class EventBus:
    """Ordered fan-out with per-subscriber bounded backlog."""

    def __init__(self, backlog: int = BACKLOG_LIMIT,
                 sink: Callable[[TelemetryEvent], None] | None = None):
        self._lock = threading.Lock()
        self._seq = 0
        self._subs: list[Subscription] = []
        self._backlog = backlog
        self._sink = sink

    def subscribe(self, kinds: Iterable[EventKind] | None = None) -> Subscription:
        sub = Subscription(frozenset(kinds) if kinds is not None else None,
                           self._backlog)
        with self._lock:
            self._subs.append(sub)
        return sub

    def publish(self, kind: EventKind, tick: int, payload: dict) -> TelemetryEvent:
        with self._lock:
            self._seq += 1
            event = TelemetryEvent(seq=self._seq, tick=tick, kind=kind,
                                   payload=payload)
            subs = list(self._subs)
        if self._sink is not None:
            self._sink(event)
        for sub in subs:
            if not sub._offer(event):
                with self._lock:
                    if sub in self._subs:
                        self._subs.remove(sub)
        return event

    def close(self) -> None:
        with self._lock:
            subs, self._subs = self._subs, []
        for sub in subs:
            try:
                sub._q.put_nowait(None)
            except queue.Full:
                pass


# --- telemetry payloads ---------------------------------------------------------


def agent_state_payload(world: WorldState, graph: LaneGraph,
                        actions: Iterable[ActionCommand]) -> dict:
    agents = []
    for ag in world.agents:
        x, y = graph.polyline(ag.lane_id).point_at(ag.s, ag.d)
        ttc = min_ttc(world, graph, ag.agent_id)
        agents.append({
            "id": ag.agent_id, "lane": ag.lane_id, "s": ag.s, "d": ag.d,
            "x": x, "y": y, "heading": ag.heading, "v": ag.v, "a": ag.a,
            "ttc": None if math.isinf(ttc) else ttc,
        })
    return {
        "agents": agents,
        "actions": [{"agent": a.agent_id, "accel": a.accel,
                     "intent": a.lane_intent.name, "source": a.source.name}
                    for a in actions],
        "digest": f"{state_digest(world):016x}",
        "collisions": [list(p) for p in world.collisions_this_tick],
    }


def scenario_payload(spec: ScenarioSpec) -> dict:
    return {"name": spec.name, "seed": spec.seed, "dt": spec.dt,
            "scenario": scenario_json(spec)}


# --- command ingress --------------------------------------------------------------


class CommandKind(str, Enum):
    takeover_start = "takeover_start"
    takeover_end = "takeover_end"
    control_input = "control_input"
    load_scenario = "load_scenario"
    pause = "pause"
    resume = "resume"


@dataclass(frozen=True, slots=True)
class CommandMessage:
    kind: CommandKind
    token: str
    agent_id: int | None = None
    accel_delta: float = 0.0
    lane_intent: LaneIntent = LaneIntent.keep
    scenario: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "CommandMessage":
        if data.get("v") != SCHEMA_V:
            raise ValueError(f"schema version {data.get('v')!r}")
        kind = CommandKind(data["kind"])
        intent = data.get("lane_intent", "keep")
        return cls(
            kind=kind,
            token=str(data.get("token", "")),
            agent_id=None if data.get("agent_id") is None else int(data["agent_id"]),
            accel_delta=float(data.get("accel_delta", 0.0)),
            lane_intent=LaneIntent[intent] if isinstance(intent, str)
            else LaneIntent(intent),
            scenario=data.get("scenario"),
        )


@dataclass
class Gateway:
    """Validates commands at ingress; applies their effects on the sim thread."""

    token: str
    bus: EventBus
    bounds: tuple[float, float] = (-8.0, 4.0)
    on_load_scenario: Callable[[str], bool] | None = None
    controllers: dict[int, HumanOverrideController] = field(default_factory=dict)
    paused: bool = False
    _pending: "queue.Queue[CommandMessage]" = field(default_factory=queue.Queue)
    _windows: dict[int, str] = field(default_factory=dict)  # agent -> token
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def attach_agent(self, agent_id: int,
                     controller: HumanOverrideController) -> None:
        self.controllers[agent_id] = controller

    def ingest_command(self, cmd: CommandMessage) -> dict:
        """Synchronous validation + queueing; effects land within one tick."""
        if cmd.token != self.token:
            raise BadToken("token mismatch")
        if cmd.kind in (CommandKind.takeover_start, CommandKind.takeover_end,
                        CommandKind.control_input):
            if cmd.agent_id is None or cmd.agent_id not in self.controllers:
                raise UnknownAgent(cmd.agent_id if cmd.agent_id is not None else -1)
        with self._lock:
            if cmd.kind is CommandKind.takeover_start:
                self._windows[cmd.agent_id] = cmd.token
            elif cmd.kind is CommandKind.takeover_end:
                if self._windows.get(cmd.agent_id) != cmd.token:
                    raise NotInTakeover(f"agent {cmd.agent_id} not taken over")
                del self._windows[cmd.agent_id]
            elif cmd.kind is CommandKind.control_input:
                if self._windows.get(cmd.agent_id) != cmd.token:
                    raise NotInTakeover(
                        f"control_input for agent {cmd.agent_id} outside takeover")
            elif cmd.kind is CommandKind.load_scenario:
                if self.on_load_scenario is None:
                    raise GatewayError("scenario switching not enabled on this host")
        self._pending.put(cmd)
        return {"v": SCHEMA_V, "ok": True, "kind": cmd.kind.value,
                "agent_id": cmd.agent_id}

    def handle_json(self, text: str) -> str:
        """WS text frame -> ack JSON; typed failures become error acks."""
        try:
            cmd = CommandMessage.from_dict(json.loads(text))
            ack = self.ingest_command(cmd)
        except (BadToken, NotInTakeover, UnknownAgent, GatewayError,
                ValueError, KeyError, json.JSONDecodeError) as exc:
            ack = {"v": SCHEMA_V, "ok": False,
                   "error": type(exc).__name__, "detail": str(exc)}
        return json.dumps(ack, separators=(",", ":"), sort_keys=True)

    def apply_pending(self, tick: int) -> None:
        """Drain queued commands on the simulation thread (call once per tick)."""
        while True:
            try:
                cmd = self._pending.get_nowait()
            except queue.Empty:
                return
            ctl = self.controllers.get(cmd.agent_id) if cmd.agent_id is not None else None
            if cmd.kind is CommandKind.takeover_start and ctl is not None:
                ctl.set_input(0.0, LaneIntent.keep)
                self.bus.publish(EventKind.takeover_begin, tick,
                                 {"agent": cmd.agent_id})
            elif cmd.kind is CommandKind.takeover_end and ctl is not None:
                ctl.release()
                self.bus.publish(EventKind.takeover_end, tick,
                                 {"agent": cmd.agent_id})
            elif cmd.kind is CommandKind.control_input and ctl is not None:
                lo, hi = self.bounds
                accel = min(max(ctl.accel + cmd.accel_delta, lo), hi)
                ctl.set_input(accel, cmd.lane_intent)
            elif cmd.kind is CommandKind.pause:
                self.paused = True
            elif cmd.kind is CommandKind.resume:
                self.paused = False
            elif cmd.kind is CommandKind.load_scenario and self.on_load_scenario:
                self.on_load_scenario(cmd.scenario or "")


# --- persistence -------------------------------------------------------------------


class RunWriter:
    """Append-only JSON-lines sink; flushes per event for crash tolerance."""

    def __init__(self, path: str):
        self.path = path
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        # One file per run: truncating keeps the seq stream gapless from 1.
        self._fh = open(path, "w", encoding="utf-8")
        self._lock = threading.Lock()

    def __call__(self, event: TelemetryEvent) -> None:
        with self._lock:
            self._fh.write(event.to_json() + "\n")
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            self._fh.close()


def load_run(path: str) -> list[TelemetryEvent]:
    """Parse a run file; malformed or seq-gapped lines raise with the prefix."""
    events: list[TelemetryEvent] = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not any(line.strip() for line in lines):
        raise CorruptLine(1, [], "empty run file")
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            event = TelemetryEvent.from_json(line)
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptLine(i, events, f"unparseable event: {exc}") from None
        if event.seq != len(events) + 1:
            raise CorruptLine(i, events,
                              f"seq {event.seq} breaks gapless order")
        events.append(event)
    return events


@dataclass(frozen=True, slots=True)
class VerifyResult:
    ticks_checked: int
    mismatched_ticks: tuple[int, ...]
    states: tuple[WorldState, ...]  # initial state + one per checked tick
    spec: ScenarioSpec

    @property
    def clean(self) -> bool:
        return not self.mismatched_ticks


def verify_run(events: list[TelemetryEvent]) -> VerifyResult:
    """Re-simulate a run's logged actions and recheck every digest.

    The scenario comes from the run's scenario_loaded event; each agent_state
    event's actions are replayed through the world step and the produced
    digest compared to the logged one.
    """
    spec: ScenarioSpec | None = None
    for ev in events:
        if ev.kind is EventKind.scenario_loaded:
            spec = scenario_from_json(ev.payload["scenario"])
            break
    if spec is None:
        raise GatewayError("run has no scenario_loaded event")
    from .scenario import initial_world  # local import: avoids cycle at module load

    world = initial_world(spec)
    states = [world]
    checked, mismatched = 0, []
    for ev in events:
        if ev.kind is not EventKind.agent_state:
            continue
        actions = [
            ActionCommand(agent_id=a["agent"], tick=world.tick,
                          accel=float(a["accel"]),
                          lane_intent=LaneIntent[a["intent"]],
                          source=ActionSource[a["source"]])
            for a in ev.payload["actions"]]
        world = step(world, actions, spec.graph, spec.dt,
                     scripts=spec.scripts or None, bounds=spec.bounds)
        states.append(world)
        checked += 1
        if f"{state_digest(world):016x}" != ev.payload["digest"]:
            mismatched.append(world.tick)
    return VerifyResult(ticks_checked=checked,
                        mismatched_ticks=tuple(mismatched),
                        states=tuple(states), spec=spec)


def human_actions_outside_windows(events: list[TelemetryEvent]) -> list[int]:
    """Ticks of source=human actions not covered by a takeover window."""
    active: dict[int, bool] = {}
    violations = []
    for ev in events:
        if ev.kind is EventKind.takeover_begin:
            active[ev.payload["agent"]] = True
        elif ev.kind is EventKind.takeover_end:
            active[ev.payload["agent"]] = False
        elif ev.kind is EventKind.agent_state:
            for a in ev.payload["actions"]:
                if a["source"] == "human" and not active.get(a["agent"], False):
                    violations.append(ev.tick)
    return violations


# --- web app -----------------------------------------------------------------------

_RUN_ID = re.compile(r"^[A-Za-z0-9._-]+$")


def make_app(gateway: Gateway, runs_dir: str):
    """FastAPI app exposing /ws for events+commands and /runs for history."""
    import asyncio

    from fastapi import FastAPI, WebSocket, WebSocketDisconnect
    from fastapi.responses import JSONResponse, PlainTextResponse

    app = FastAPI(title="skylite gateway")

    @app.get("/runs")
    def list_runs():
        names = sorted(f for f in os.listdir(runs_dir) if f.endswith(".jsonl")) \
            if os.path.isdir(runs_dir) else []
        return {"v": SCHEMA_V, "runs": names}

    @app.get("/runs/{run_id}")
    def get_run(run_id: str):
        if not _RUN_ID.match(run_id):
            return JSONResponse({"v": SCHEMA_V, "error": "bad run id"},
                                status_code=400)
        path = os.path.join(runs_dir, run_id)
        if not os.path.isfile(path):
            return JSONResponse({"v": SCHEMA_V, "error": "not found"},
                                status_code=404)
        with open(path, encoding="utf-8") as fh:
            return PlainTextResponse(fh.read())

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        kinds_q = ws.query_params.get("kinds")
        kinds = None
        if kinds_q:
            kinds = [EventKind(k) for k in kinds_q.split(",") if k]
        sub = gateway.bus.subscribe(kinds)
        send_lock = asyncio.Lock()
        loop = asyncio.get_running_loop()

        async def pump_events():
            while True:
                try:
                    event = await loop.run_in_executor(None, sub.get, 0.25)
                except BacklogExceeded:
                    async with send_lock:
                        await ws.send_text(json.dumps(
                            {"v": SCHEMA_V, "error": "BacklogExceeded"}))
                    await ws.close()
                    return
                if event is None:
                    if not sub.live:
                        await ws.close()
                        return
                    continue
                async with send_lock:
                    await ws.send_text(event.to_json())

        pump = asyncio.ensure_future(pump_events())
        try:
            while True:
                text = await ws.receive_text()
                ack = gateway.handle_json(text)
                async with send_lock:
                    await ws.send_text(ack)
        except WebSocketDisconnect:
            pass
        finally:
            pump.cancel()

    return app
