"""Input-synchronous simulation over dual TCP channels.

The host owns the authoritative world and is the sole mutator: every socket
reader thread only enqueues messages onto one ordered inbox that the
simulation thread drains. Each tick the host waits up to a deadline for one
input per connected client, substitutes a car-following fallback action
(``source=fallback``) for anything missing, steps the world once, and
broadcasts exactly one commit carrying the applied actions and the post-step
digest. Clients apply commits to their local copy and halt with a desync
report if their digest ever disagrees.

Channel layout per client: a control connection (handshake, input
submissions, heartbeat echoes, desync reports) and a telemetry connection
(commits, heartbeats, shutdown). Both start with a Hello carrying the same
client name, which is how the host pairs them — names must be unique among
concurrently joining clients.
"""

from __future__ import annotations

import dataclasses
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from . import SkyliteError
from .behavior import behavior_action, params_from_spec
from .controllers import BehaviorController, Controller, build_controllers
from .gateway import (
    EventKind,
    Gateway,
    agent_state_payload,
    scenario_payload,
)
from .scenario import ScenarioSpec, initial_world
from .wire import (
    PROTOCOL_VERSION,
    Bye,
    Channel,
    ChannelClosed,
    Desync,
    Heartbeat,
    Hello,
    InputSubmit,
    LoadScenario,
    Message,
    Snapshot,
    SnapshotRequest,
    TickCommit,
    Welcome,
    WireError,
    state_digest,
)
from .world import (
    ActionCommand,
    ActionSource,
    AgentKind,
    WorldState,
    step,
)

CONTROL_PORT_DEFAULT = 7700
TELEMETRY_PORT_DEFAULT = 7701
DEADLINE_MS_DEFAULT = 50.0
HEARTBEAT_EVERY_TICKS = 20
HEARTBEAT_MISS_LIMIT = 3


class LockstepError(SkyliteError):
    pass


class ProtocolViolation(LockstepError):
    pass


@dataclass
class _PendingJoin:
    control: Channel | None = None
    telemetry: Channel | None = None


@dataclass
class _Client:
    client_id: int
    name: str
    control: Channel
    telemetry: Channel
    agent_ids: tuple[int, ...]
    lost: bool = False
    desynced: bool = False
    missed_heartbeats: int = 0
    input_for_tick: dict[int, ActionCommand] = field(default_factory=dict)
    joined_at_tick: int = 0


@dataclass(frozen=True, slots=True)
class TickRecord:
    tick: int
    digest: int
    fallback_agents: tuple[int, ...]


class HostSession:
    """Authoritative lockstep host; drive with start() / run() / stop()."""

    def __init__(self, spec: ScenarioSpec, *,
                 host: str = "127.0.0.1",
                 control_port: int = CONTROL_PORT_DEFAULT,
                 telemetry_port: int = TELEMETRY_PORT_DEFAULT,
                 deadline_ms: float = DEADLINE_MS_DEFAULT,
                 heartbeat_every: int = HEARTBEAT_EVERY_TICKS,
                 heartbeat_miss_limit: int = HEARTBEAT_MISS_LIMIT,
                 controllers: dict[int, Controller] | None = None,
                 gateway: Gateway | None = None):
        self.spec = spec
        self.world = initial_world(spec)
        self.deadline_s = deadline_ms / 1000.0
        self.heartbeat_every = heartbeat_every
        self.heartbeat_miss_limit = heartbeat_miss_limit
        self.gateway = gateway
        self.controllers = controllers if controllers is not None \
            else build_controllers(spec)
        self._fallback_idm, self._fallback_mobil = params_from_spec(spec.behavior)
        # External agents are handed to clients in declaration order.
        self._assignable = [a.agent_id for a in spec.agents
                            if a.kind in (AgentKind.policy_driven,
                                          AgentKind.human_controllable)]
        self._assigned: dict[int, int] = {}  # agent_id -> client_id

        import queue as _queue
        self._inbox: "_queue.Queue[tuple]" = _queue.Queue()
        self._pending: dict[str, _PendingJoin] = {}
        self._clients: dict[int, _Client] = {}
        self._by_control: dict[int, _Client] = {}  # id(channel) -> client
        self._next_client_id = 1
        self._running = False
        self._lock = threading.Lock()
        self.digest_trace: list[tuple[int, int]] = []
        self.tick_records: list[TickRecord] = []
        self.fallback_count: dict[int, int] = {}
        self.desync_reports: list[Desync] = []

        self._control_sock = self._listen(host, control_port)
        self._telemetry_sock = self._listen(host, telemetry_port)
        self.control_port = self._control_sock.getsockname()[1]
        self.telemetry_port = self._telemetry_sock.getsockname()[1]
        self.host = host

    @staticmethod
    def _listen(host: str, port: int) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, port))
        sock.listen(16)
        return sock

    # -- socket side (never touches the world) --------------------------------

    def start(self) -> None:
        self._running = True
        for sock, kind in ((self._control_sock, "control"),
                           (self._telemetry_sock, "telemetry")):
            threading.Thread(target=self._accept_loop, args=(sock, kind),
                             daemon=True).start()
        if self.gateway is not None:
            self.gateway.bus.publish(EventKind.scenario_loaded, self.world.tick,
                                     scenario_payload(self.spec))

    def _accept_loop(self, sock: socket.socket, kind: str) -> None:
        while self._running:
            try:
                conn, _ = sock.accept()
            except OSError:
                return
            chan = Channel(conn)
            threading.Thread(target=self._reader, args=(chan, kind),
                             daemon=True).start()

    def _reader(self, chan: Channel, kind: str) -> None:
        try:
            first = chan.recv()
            if not isinstance(first, Hello):
                chan.close()
                return
            self._inbox.put(("hello", kind, chan, first))
            while True:
                msg = chan.recv()
                self._inbox.put(("msg", kind, chan, msg))
        except (WireError, OSError):
            self._inbox.put(("closed", kind, chan, None))

    # -- simulation side -------------------------------------------------------

    def _drain_inbox(self, timeout: float) -> None:
        """Process every queued message, waiting at most timeout for the first."""
        import queue as _queue
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            try:
                item = self._inbox.get(timeout=max(0.0, remaining)) \
                    if timeout > 0 else self._inbox.get_nowait()
            except _queue.Empty:
                return
            self._handle(item)
            timeout = 0.0  # after the first arrival, only sweep what's queued

    def _handle(self, item: tuple) -> None:
        what, kind, chan, msg = item
        if what == "hello":
            join = self._pending.setdefault(msg.client_name, _PendingJoin())
            if kind == "control":
                join.control = chan
            else:
                join.telemetry = chan
            self._try_pair(msg.client_name)
            return
        if what == "closed":
            client = self._by_control.get(id(chan))
            if client is None:
                for c in self._clients.values():
                    if c.telemetry is chan:
                        client = c
                        break
            if client is not None and not client.lost:
                self._mark_lost(client, "connection closed")
            return
        client = self._by_control.get(id(chan))
        if client is None:
            return
        if isinstance(msg, Desync):
            # Recorded even for lost clients: the report may race the
            # disconnect through the two reader threads.
            if not client.desynced:
                client.desynced = True
                self.desync_reports.append(msg)
                if self.gateway is not None:
                    self.gateway.bus.publish(EventKind.desync, msg.tick, {
                        "client": client.client_id, "tick": msg.tick,
                        "expected": f"{msg.expected_digest:016x}",
                        "got": f"{msg.got_digest:016x}",
                    })
            if not client.lost:
                self._mark_lost(client, "desynced")
            return
        if client.lost:
            return
        if isinstance(msg, InputSubmit):
            action = msg.action
            if action.agent_id in client.agent_ids and msg.tick >= self.world.tick:
                client.input_for_tick[msg.tick] = action
        elif isinstance(msg, Heartbeat):
            client.missed_heartbeats = 0
        elif isinstance(msg, SnapshotRequest):
            self._safe_send(client, client.control, Snapshot(world=self.world))
        elif isinstance(msg, Bye):
            self._mark_lost(client, f"bye: {msg.reason}")

    def _try_pair(self, name: str) -> None:
        join = self._pending.get(name)
        if join is None or join.control is None or join.telemetry is None:
            return
        del self._pending[name]
        client_id = self._next_client_id
        self._next_client_id += 1
        agent_ids: tuple[int, ...] = ()
        for agent_id in self._assignable:
            if agent_id not in self._assigned:
                self._assigned[agent_id] = client_id
                agent_ids = (agent_id,)
                break
        client = _Client(client_id=client_id, name=name, control=join.control,
                         telemetry=join.telemetry, agent_ids=agent_ids,
                         joined_at_tick=self.world.tick)
        self._clients[client_id] = client
        self._by_control[id(join.control)] = client
        try:
            client.control.send(Welcome(client_id=client_id,
                                        assigned_agent_ids=agent_ids))
            client.control.send(LoadScenario(scenario=self.spec))
            client.control.send(Snapshot(world=self.world))
        except (WireError, OSError):
            self._mark_lost(client, "handshake send failed")

    def _mark_lost(self, client: _Client, reason: str) -> None:
        """Permanent fallback: the host stops waiting for this client forever.

        Only the telemetry side closes here. The control channel stays open
        so anything already in flight (a desync report racing the disconnect)
        still drains through the inbox; stop() closes it for good.
        """
        client.lost = True
        try:
            client.telemetry.close()
        except OSError:
            pass

    def _safe_send(self, client: _Client, chan: Channel, msg: Message) -> None:
        try:
            chan.send(msg)
        except (WireError, OSError):
            if not client.lost:
                self._mark_lost(client, "send failed")

    def _live_clients(self) -> list[_Client]:
        return [c for c in self._clients.values() if not c.lost]

    def wait_for_clients(self, n: int, timeout: float | None = None) -> int:
        """Block until at least n clients have paired; returns the live count.

        Pairing only happens while the inbox drains, so a host that wants
        remote participants mirroring from tick zero calls this between
        start() and the first advance().
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        while len(self._live_clients()) < n:
            if deadline is not None and time.monotonic() >= deadline:
                break
            self._drain_inbox(0.05)
        return len(self._live_clients())

    def advance(self) -> WorldState:
        """Run exactly one tick: gather inputs, step, commit once."""
        tick = self.world.tick
        self._drain_inbox(0.0)
        if self.gateway is not None:
            while self.gateway.paused:
                self.gateway.apply_pending(tick)
                self._drain_inbox(0.01)
            self.gateway.apply_pending(tick)

        def missing() -> list[_Client]:
            return [c for c in self._live_clients()
                    if c.agent_ids and tick not in c.input_for_tick]

        deadline = time.monotonic() + self.deadline_s
        while missing():
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            self._drain_inbox(remaining)

        actions: list[ActionCommand] = []
        fallback_agents: list[int] = []
        for agent in self.world.agents:
            owner = self._assigned.get(agent.agent_id)
            client = self._clients.get(owner) if owner is not None else None
            if client is not None:
                submitted = client.input_for_tick.pop(tick, None)
                if submitted is not None and not client.lost:
                    actions.append(dataclasses.replace(submitted, tick=tick))
                    continue
                accel_cmd = behavior_action(
                    self.world, self.spec.graph, agent.agent_id,
                    self._fallback_idm, self._fallback_mobil,
                    source=ActionSource.fallback)
                actions.append(accel_cmd)
                fallback_agents.append(agent.agent_id)
                self.fallback_count[agent.agent_id] = \
                    self.fallback_count.get(agent.agent_id, 0) + 1
            else:
                ctl = self.controllers[agent.agent_id]
                actions.append(ctl.act(self.world, self.spec.graph,
                                       agent.agent_id, self.spec))

        new_world = step(self.world, actions, self.spec.graph, self.spec.dt,
                         scripts=self.spec.scripts or None,
                         bounds=self.spec.bounds)
        digest = state_digest(new_world)
        self.digest_trace.append((tick, digest))
        self.tick_records.append(TickRecord(tick=tick, digest=digest,
                                            fallback_agents=tuple(fallback_agents)))
        commit = TickCommit(
            tick=tick,
            actions=tuple(sorted(actions, key=lambda a: a.agent_id)),
            digest=digest)
        for client in self._live_clients():
            self._safe_send(client, client.telemetry, commit)
        self.world = new_world

        if self.heartbeat_every > 0 and tick > 0 and \
                tick % self.heartbeat_every == 0:
            beat = Heartbeat(tick=tick)
            for client in self._live_clients():
                client.missed_heartbeats += 1
                if client.missed_heartbeats > self.heartbeat_miss_limit:
                    self._mark_lost(client, "heartbeat lost")
                else:
                    self._safe_send(client, client.telemetry, beat)

        if self.gateway is not None:
            self.gateway.bus.publish(
                EventKind.agent_state, new_world.tick,
                agent_state_payload(new_world, self.spec.graph, actions))
        return new_world

    def run(self, ticks: int) -> WorldState:
        for _ in range(ticks):
            self.advance()
        return self.world

    def stop(self, reason: str = "shutdown") -> None:
        self._running = False
        bye = Bye(reason=reason)
        for client in self._live_clients():
            self._safe_send(client, client.telemetry, bye)
        for client in self._clients.values():
            for chan in (client.control, client.telemetry):
                try:
                    chan.close()
                except OSError:
                    pass
        for sock in (self._control_sock, self._telemetry_sock):
            try:
                sock.close()
            except OSError:
                pass


# --- client ----------------------------------------------------------------------


@dataclass
class ClientResult:
    client_id: int
    agent_ids: tuple[int, ...]
    digest_trace: list[tuple[int, int]]
    desynced: bool
    reason: str
    world: WorldState | None
    commits_applied: int


def _connect(host: str, port: int, timeout: float) -> Channel:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)  # timeout applies to connect only, not the session
    return Channel(sock)


def client_loop(host: str, control_port: int, telemetry_port: int, *,
                name: str,
                controller: Controller | None = None,
                max_commits: int | None = None,
                stall_after: int | None = None,
                tamper: Callable[[int, WorldState], WorldState | None] | None = None,
                connect_timeout: float = 5.0) -> ClientResult:
    """Join a host, keep a mirrored world, and submit one input per tick.

    stall_after stops submitting inputs after that many submissions (the host
    is expected to fall back). tamper may replace the post-step world at a
    given tick to force a digest mismatch.
    """
    control = _connect(host, control_port, connect_timeout)
    telemetry = _connect(host, telemetry_port, connect_timeout)
    trace: list[tuple[int, int]] = []
    world: WorldState | None = None
    desynced = False
    reason = "bye"
    commits = 0
    try:
        control.send(Hello(protocol_version=PROTOCOL_VERSION, client_name=name))
        telemetry.send(Hello(protocol_version=PROTOCOL_VERSION, client_name=name))

        welcome: Welcome | None = None
        spec: ScenarioSpec | None = None
        while spec is None or welcome is None or world is None:
            msg = control.recv()
            if isinstance(msg, Welcome):
                welcome = msg
            elif isinstance(msg, LoadScenario):
                spec = msg.scenario
            elif isinstance(msg, Snapshot):
                world = msg.world
            elif isinstance(msg, Bye):
                raise ProtocolViolation(f"refused: {msg.reason}")
            else:
                raise ProtocolViolation(f"unexpected {type(msg).__name__} "
                                        "during handshake")
        if controller is None:
            idm, mobil = params_from_spec(spec.behavior)
            controller = BehaviorController(idm=idm, mobil=mobil)

        submissions = 0

        def submit() -> None:
            nonlocal submissions
            if not welcome.assigned_agent_ids:
                return
            if stall_after is not None and submissions >= stall_after:
                return
            agent_id = welcome.assigned_agent_ids[0]
            action = controller.act(world, spec.graph, agent_id, spec)
            control.send(InputSubmit(tick=world.tick, action=action))
            submissions += 1

        submit()
        while True:
            try:
                msg = telemetry.recv()
            except ChannelClosed:
                reason = "host closed"
                break
            if isinstance(msg, Heartbeat):
                control.send(Heartbeat(tick=msg.tick))
                continue
            if isinstance(msg, Bye):
                reason = f"bye: {msg.reason}"
                break
            if not isinstance(msg, TickCommit):
                raise ProtocolViolation(
                    f"unexpected {type(msg).__name__} on telemetry channel")
            if msg.tick != world.tick:
                raise ProtocolViolation(
                    f"commit for tick {msg.tick}, local world at {world.tick}")
            stepped = step(world, list(msg.actions), spec.graph, spec.dt,
                           scripts=spec.scripts or None, bounds=spec.bounds)
            if tamper is not None:
                replacement = tamper(msg.tick, stepped)
                if replacement is not None:
                    stepped = replacement
            digest = state_digest(stepped)
            trace.append((msg.tick, digest))
            commits += 1
            if digest != msg.digest:
                control.send(Desync(tick=msg.tick, expected_digest=msg.digest,
                                    got_digest=digest))
                desynced = True
                reason = "desync"
                break  # halt: never advance past a divergent state
            world = stepped
            if max_commits is not None and commits >= max_commits:
                control.send(Bye(reason="done"))
                reason = "commit budget"
                break
            submit()
    finally:
        for chan in (control, telemetry):
            try:
                chan.close()
            except OSError:
                pass
    return ClientResult(
        client_id=welcome.client_id if welcome else -1,
        agent_ids=welcome.assigned_agent_ids if welcome else (),
        digest_trace=trace,
        desynced=desynced,
        reason=reason,
        world=world,
        commits_applied=commits,
    )
