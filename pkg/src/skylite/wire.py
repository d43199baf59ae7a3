"""Binary message codec, canonical state encoding, and state digests.

Frame layout (all integers little-endian):

    offset  size  field
    0       4     u32 frame length N (bytes after this field)
    4       1     u8 protocol version (currently 1)
    5       1     u8 message tag
    6       8     u64 per-sender sequence number
    14      N-10  message payload

Payload field order follows each message dataclass below. The canonical
WorldState encoding (encode_world) is shared by Snapshot frames and the
64-bit FNV-1a state digest, so two participants agree on the digest iff
they agree on every bit of the state.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass, field

from . import SkyliteError
from .scenario import ScenarioSpec, scenario_from_json, scenario_json
from .world import (
    ActionCommand,
    ActionSource,
    AgentKind,
    AgentState,
    LaneChange,
    LaneIntent,
    WorldState,
)

PROTOCOL_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64_MASK = 0xFFFFFFFFFFFFFFFF


class WireError(SkyliteError):
    pass


class TruncatedFrame(WireError):
    pass


class UnknownTag(WireError):
    pass


class VersionMismatch(WireError):
    pass


class SequenceError(WireError):
    """Duplicate or reordered frame on an ordered channel."""


class ChannelClosed(WireError):
    pass


# --- message types ---------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Hello:
    protocol_version: int
    client_name: str


@dataclass(frozen=True, slots=True)
class Welcome:
    client_id: int
    assigned_agent_ids: tuple[int, ...]


@dataclass(frozen=True, slots=True)
class LoadScenario:
    scenario: ScenarioSpec


@dataclass(frozen=True, slots=True)
class InputSubmit:
    tick: int
    action: ActionCommand


@dataclass(frozen=True, slots=True)
class TickCommit:
    tick: int
    actions: tuple[ActionCommand, ...]
    digest: int


@dataclass(frozen=True, slots=True)
class SnapshotRequest:
    tick: int


@dataclass(frozen=True, slots=True)
class Snapshot:
    world: WorldState


@dataclass(frozen=True, slots=True)
class Heartbeat:
    tick: int


@dataclass(frozen=True, slots=True)
class Desync:
    tick: int
    expected_digest: int
    got_digest: int


@dataclass(frozen=True, slots=True)
class Bye:
    reason: str


Message = (Hello | Welcome | LoadScenario | InputSubmit | TickCommit
           | SnapshotRequest | Snapshot | Heartbeat | Desync | Bye)

_TAGS: dict[type, int] = {
    Hello: 1, Welcome: 2, LoadScenario: 3, InputSubmit: 4, TickCommit: 5,
    SnapshotRequest: 6, Snapshot: 7, Heartbeat: 8, Desync: 9, Bye: 10,
}
_BY_TAG = {tag: cls for cls, tag in _TAGS.items()}


# --- primitive readers/writers --------------------------------------------


class _Writer:
    __slots__ = ("buf",)

    def __init__(self) -> None:
        self.buf = bytearray()

    def u8(self, x: int) -> None:
        self.buf += struct.pack("<B", x)

    def u16(self, x: int) -> None:
        self.buf += struct.pack("<H", x)

    def u32(self, x: int) -> None:
        self.buf += struct.pack("<I", x)

    def u64(self, x: int) -> None:
        self.buf += struct.pack("<Q", x)

    def f64(self, x: float) -> None:
        self.buf += struct.pack("<d", x)

    def s(self, x: str) -> None:
        raw = x.encode("utf-8")
        self.u32(len(raw))
        self.buf += raw


class _Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFrame(
                f"need {n} bytes at offset {self.pos}, have {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def s(self) -> str:
        n = self.u32()
        return self._take(n).decode("utf-8")

    def done(self) -> bool:
        return self.pos == len(self.data)


# --- composite encodings ----------------------------------------------------


def _write_action(w: _Writer, a: ActionCommand) -> None:
    w.u32(a.agent_id)
    w.u64(a.tick)
    w.f64(a.accel)
    w.u8(int(a.lane_intent))
    w.u8(int(a.source))


def _read_action(r: _Reader) -> ActionCommand:
    return ActionCommand(
        agent_id=r.u32(), tick=r.u64(), accel=r.f64(),
        lane_intent=LaneIntent(r.u8()), source=ActionSource(r.u8()))


def _write_agent(w: _Writer, a: AgentState) -> None:
    w.u32(a.agent_id)
    w.u8(int(a.kind))
    w.u32(a.lane_id)
    w.f64(a.s)
    w.f64(a.d)
    w.f64(a.v)
    w.f64(a.a)
    w.f64(a.heading)
    w.f64(a.length)
    w.f64(a.width)
    w.u8(int(a.lane_change))
    w.f64(a.lc_progress)


def _read_agent(r: _Reader) -> AgentState:
    return AgentState(
        agent_id=r.u32(), kind=AgentKind(r.u8()), lane_id=r.u32(),
        s=r.f64(), d=r.f64(), v=r.f64(), a=r.f64(), heading=r.f64(),
        length=r.f64(), width=r.f64(), lane_change=LaneChange(r.u8()),
        lc_progress=r.f64())


def encode_world(world: WorldState) -> bytes:
    """Canonical little-endian encoding; input to the state digest."""
    w = _Writer()
    w.u64(world.tick)
    w.f64(world.sim_time)
    w.u64(world.rng_counter)
    w.u32(len(world.agents))
    for agent in world.agents:  # already sorted by agent_id
        _write_agent(w, agent)
    w.u32(len(world.collisions_this_tick))
    for a, b in world.collisions_this_tick:
        w.u32(a)
        w.u32(b)
    return bytes(w.buf)


def _read_world(r: _Reader) -> WorldState:
    tick = r.u64()
    sim_time = r.f64()
    rng_counter = r.u64()
    agents = tuple(_read_agent(r) for _ in range(r.u32()))
    collisions = tuple((r.u32(), r.u32()) for _ in range(r.u32()))
    return WorldState(tick=tick, sim_time=sim_time, agents=agents,
                      rng_counter=rng_counter, collisions_this_tick=collisions)


def decode_world(data: bytes) -> WorldState:
    r = _Reader(data)
    world = _read_world(r)
    if not r.done():
        raise TruncatedFrame("trailing bytes after world encoding")
    return world


def state_digest(world: WorldState) -> int:
    """FNV-1a 64-bit over the canonical world encoding."""
    h = _FNV_OFFSET
    for byte in encode_world(world):
        h = ((h ^ byte) * _FNV_PRIME) & _U64_MASK
    return h


# --- message payloads -------------------------------------------------------


def _write_payload(w: _Writer, m: Message) -> None:
    if isinstance(m, Hello):
        w.u16(m.protocol_version)
        w.s(m.client_name)
    elif isinstance(m, Welcome):
        w.u32(m.client_id)
        w.u32(len(m.assigned_agent_ids))
        for aid in m.assigned_agent_ids:
            w.u32(aid)
    elif isinstance(m, LoadScenario):
        w.s(scenario_json(m.scenario))
    elif isinstance(m, InputSubmit):
        w.u64(m.tick)
        _write_action(w, m.action)
    elif isinstance(m, TickCommit):
        w.u64(m.tick)
        w.u32(len(m.actions))
        for a in m.actions:
            _write_action(w, a)
        w.u64(m.digest)
    elif isinstance(m, SnapshotRequest):
        w.u64(m.tick)
    elif isinstance(m, Snapshot):
        w.buf += encode_world(m.world)
    elif isinstance(m, Heartbeat):
        w.u64(m.tick)
    elif isinstance(m, Desync):
        w.u64(m.tick)
        w.u64(m.expected_digest)
        w.u64(m.got_digest)
    elif isinstance(m, Bye):
        w.s(m.reason)
    else:
        raise UnknownTag(f"not a wire message: {type(m).__name__}")


def _read_payload(tag: int, r: _Reader) -> Message:
    cls = _BY_TAG.get(tag)
    if cls is None:
        raise UnknownTag(f"tag {tag}")
    if cls is Hello:
        return Hello(protocol_version=r.u16(), client_name=r.s())
    if cls is Welcome:
        cid = r.u32()
        ids = tuple(r.u32() for _ in range(r.u32()))
        return Welcome(client_id=cid, assigned_agent_ids=ids)
    if cls is LoadScenario:
        return LoadScenario(scenario=scenario_from_json(r.s()))
    if cls is InputSubmit:
        return InputSubmit(tick=r.u64(), action=_read_action(r))
    if cls is TickCommit:
        tick = r.u64()
        actions = tuple(_read_action(r) for _ in range(r.u32()))
        return TickCommit(tick=tick, actions=actions, digest=r.u64())
    if cls is SnapshotRequest:
        return SnapshotRequest(tick=r.u64())
    if cls is Snapshot:
        return Snapshot(world=_read_world(r))
    if cls is Heartbeat:
        return Heartbeat(tick=r.u64())
    if cls is Desync:
        return Desync(tick=r.u64(), expected_digest=r.u64(), got_digest=r.u64())
    return Bye(reason=r.s())


def encode_message(m: Message, seq: int) -> bytes:
    w = _Writer()
    w.u8(PROTOCOL_VERSION)
    w.u8(_TAGS[type(m)])
    w.u64(seq)
    _write_payload(w, m)
    return struct.pack("<I", len(w.buf)) + bytes(w.buf)


def decode_message(frame: bytes) -> tuple[int, Message]:
    """Decode one full frame (including the length prefix) -> (seq, message)."""
    if len(frame) < 4:
        raise TruncatedFrame("missing length prefix")
    (n,) = struct.unpack("<I", frame[:4])
    if len(frame) - 4 != n:
        raise TruncatedFrame(f"frame advertises {n} bytes, carries {len(frame) - 4}")
    r = _Reader(frame[4:])
    version = r.u8()
    if version != PROTOCOL_VERSION:
        raise VersionMismatch(f"got {version}, want {PROTOCOL_VERSION}")
    tag = r.u8()
    seq = r.u64()
    msg = _read_payload(tag, r)
    if not r.done():
        raise TruncatedFrame("trailing bytes after payload")
    return seq, msg


# --- socket channel ---------------------------------------------------------


@dataclass
class Channel:
    """One ordered message stream over a connected socket.

    Sends are serialized by a lock and stamp an auto-incremented sequence
    number; receives enforce strictly increasing peer sequence numbers, so a
    duplicated or reordered frame raises SequenceError instead of being
    applied twice.
    """

    sock: socket.socket
    _send_seq: int = 0
    _recv_seq: int = -1
    _lock: threading.Lock = field(default_factory=threading.Lock)
    _closed: bool = False

    def send(self, m: Message) -> None:
        with self._lock:
            self._send_seq += 1
            data = encode_message(m, self._send_seq)
            try:
                self.sock.sendall(data)
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc

    def _recv_exact(self, n: int) -> bytes:
        chunks = bytearray()
        while len(chunks) < n:
            try:
                got = self.sock.recv(n - len(chunks))
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc
            if not got:
                if not chunks:
                    raise ChannelClosed("peer closed")
                raise TruncatedFrame(f"connection cut after {len(chunks)}/{n} bytes")
            chunks += got
        return bytes(chunks)

    def recv(self) -> Message:
        header = self._recv_exact(4)
        (n,) = struct.unpack("<I", header)
        body = self._recv_exact(n)
        seq, msg = decode_message(header + body)
        if seq <= self._recv_seq:
            raise SequenceError(f"seq {seq} after {self._recv_seq}")
        self._recv_seq = seq
        return msg

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()
