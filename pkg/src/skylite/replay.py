"""Trajectory log ingest, tick-grid resampling, scripted replay, and fidelity.

Logs are flat records of (t, agent_id, x, y, heading, speed) in CSV or JSON.
Replay projects each resampled point onto the nearest lane centerline and
drives a scripted agent through the projected (lane, s, v) states; fidelity
compares the replayed world positions back against the resampled source:

    score = mean over agents of exp(-mean_position_error / 1 m)

so identical traces score exactly 1 and the score decays smoothly with
systematic offset.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

from . import SkyliteError
from .controllers import EpisodeResult, run_episode
from .geometry import wrap_angle
from .scenario import AgentSeed, ScenarioSpec, Termination
from .world import AgentKind, LaneGraph, ScriptTrack, WorldState

OFF_MAP_M = 5.0  # projection residual beyond this is not on the map


class ReplayError(SkyliteError):
    pass


class ParseError(ReplayError):
    def __init__(self, line: int, why: str):
        super().__init__(f"line {line}: {why}")
        self.line = line


class NonMonotoneTime(ReplayError):
    def __init__(self, agent_id: int, t: float):
        super().__init__(f"agent {agent_id}: timestamp {t} does not increase")
        self.agent_id = agent_id


class OffMapPoint(ReplayError):
    pass


class NoPlausibleMap(ReplayError):
    pass


_FIELDS = ("t", "agent_id", "x", "y", "heading", "speed")


@dataclass(frozen=True, slots=True)
class TrajectoryRecord:
    t: float
    agent_id: int
    x: float
    y: float
    heading: float
    speed: float


@dataclass(slots=True)
class TrajectoryLog:
    records: list[TrajectoryRecord]
    source_meta: str = ""

    def __post_init__(self) -> None:
        last: dict[int, float] = {}
        for r in self.records:
            for name in ("t", "x", "y", "heading", "speed"):
                if not math.isfinite(getattr(r, name)):
                    raise ValueError(f"agent {r.agent_id}: non-finite {name}")
            prev = last.get(r.agent_id)
            if prev is not None and r.t <= prev:
                raise NonMonotoneTime(r.agent_id, r.t)
            last[r.agent_id] = r.t

    def agent_ids(self) -> list[int]:
        return sorted({r.agent_id for r in self.records})

    def by_agent(self, agent_id: int) -> list[TrajectoryRecord]:
        return [r for r in self.records if r.agent_id == agent_id]


# --- ingest / export -----------------------------------------------------------


def _parse_row(values: Sequence[str], line: int) -> TrajectoryRecord:
    if len(values) != len(_FIELDS):
        raise ParseError(line, f"expected {len(_FIELDS)} columns, got {len(values)}")
    try:
        t = float(values[0])
        agent_id = int(values[1])
        x, y, heading, speed = (float(v) for v in values[2:])
    except ValueError as exc:
        raise ParseError(line, str(exc)) from None
    for name, v in (("t", t), ("x", x), ("y", y), ("heading", heading),
                    ("speed", speed)):
        if not math.isfinite(v):
            raise ParseError(line, f"non-finite {name}={v!r}")
    return TrajectoryRecord(t=t, agent_id=agent_id, x=x, y=y,
                            heading=heading, speed=speed)


def ingest(path: str) -> TrajectoryLog:
    """Load a CSV (header t,agent_id,x,y,heading,speed) or JSON trajectory log."""
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        records = []
        for i, row in enumerate(data.get("records", []), start=1):
            try:
                values = [str(row[k]) for k in _FIELDS]
            except (KeyError, TypeError) as exc:
                raise ParseError(i, f"missing field: {exc}") from None
            records.append(_parse_row(values, i))
        return TrajectoryLog(records=records,
                             source_meta=str(data.get("source_meta", "")))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(1, "empty file") from None
        if [h.strip() for h in header] != list(_FIELDS):
            raise ParseError(1, f"bad header {header!r}")
        records = [_parse_row(row, i) for i, row in enumerate(reader, start=2)
                   if row]
    return TrajectoryLog(records=records)


def export(log: TrajectoryLog, path: str) -> None:
    """Write canonical form: repr floats, so a round trip is value-exact."""
    if path.endswith(".json"):
        payload = {
            "source_meta": log.source_meta,
            "records": [{"t": r.t, "agent_id": r.agent_id, "x": r.x, "y": r.y,
                         "heading": r.heading, "speed": r.speed}
                        for r in log.records],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_FIELDS)
        for r in log.records:
            writer.writerow([repr(r.t), r.agent_id, repr(r.x), repr(r.y),
                             repr(r.heading), repr(r.speed)])


# --- resampling ------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ResampledPoint:
    tick: int
    x: float
    y: float
    heading: float
    speed: float


def resample(log: TrajectoryLog, dt: float) -> dict[int, list[ResampledPoint]]:
    """Linear interpolation onto the tick grid; heading taken the short way."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    out: dict[int, list[ResampledPoint]] = {}
    for agent_id in log.agent_ids():
        rows = log.by_agent(agent_id)
        t0, t1 = rows[0].t, rows[-1].t
        if t1 - t0 < dt:
            raise ValueError(f"agent {agent_id}: span {t1 - t0} below dt")
        first = math.ceil(t0 / dt - 1e-9)
        last = math.floor(t1 / dt + 1e-9)
        points = []
        j = 0
        for k in range(first, last + 1):
            t = k * dt
            while j + 1 < len(rows) and rows[j + 1].t < t:
                j += 1
            a, b = rows[j], rows[min(j + 1, len(rows) - 1)]
            if b.t == a.t:
                frac = 0.0
            else:
                frac = (t - a.t) / (b.t - a.t)
                frac = min(max(frac, 0.0), 1.0)
            points.append(ResampledPoint(
                tick=k,
                x=a.x + frac * (b.x - a.x),
                y=a.y + frac * (b.y - a.y),
                heading=wrap_angle(a.heading + frac * wrap_angle(b.heading - a.heading)),
                speed=a.speed + frac * (b.speed - a.speed),
            ))
        out[agent_id] = points
    return out


# --- replay ----------------------------------------------------------------------


def _project(graph: LaneGraph, x: float, y: float) -> tuple[int, float, float]:
    """Nearest lane centerline: (lane_id, s, residual distance)."""
    best: tuple[int, float, float] | None = None
    for lid in sorted(graph.lanes):
        s, _, dist = graph.polyline(lid).project(x, y)
        if best is None or dist < best[2]:
            best = (lid, s, dist)
    assert best is not None
    return best


def build_replay_spec(resampled: dict[int, list[ResampledPoint]],
                      graph: LaneGraph, dt: float = 0.05,
                      name: str = "replay") -> ScenarioSpec:
    """Scenario whose agents are scripted through the projected source states.

    Tracks starting after tick 0 idle at their first state until their data
    begins. A projection residual above 5 m is an off-map point.
    """
    if not resampled:
        raise ReplayError("no agents to replay")
    agents, scripts = [], {}
    max_tick = 0
    for agent_id, points in sorted(resampled.items()):
        if not points:
            raise ReplayError(f"agent {agent_id}: empty resampled track")
        rows = []
        for p in points:
            lane, s, dist = _project(graph, p.x, p.y)
            if dist > OFF_MAP_M:
                raise OffMapPoint(
                    f"agent {agent_id} tick {p.tick}: {dist:.2f} m off lane {lane}")
            rows.append((lane, s, max(p.speed, 0.0)))
        start = points[0].tick
        padded = [rows[0]] * start + rows
        max_tick = max(max_tick, start + len(rows) - 1)
        scripts[agent_id] = ScriptTrack(padded)
        agents.append(AgentSeed(
            agent_id=agent_id, kind=AgentKind.scripted_replay,
            lane_id=rows[0][0], s=rows[0][1], v=max(rows[0][2], 0.0)))
    return ScenarioSpec(
        name=name, graph=graph, agents=agents, dt=dt,
        max_ticks=max(max_tick, 1), seed=0,
        termination=Termination(collision_ends_episode=False),
        scripts=scripts)


def replay(resampled: dict[int, list[ResampledPoint]], graph: LaneGraph,
           dt: float = 0.05) -> EpisodeResult:
    return run_episode(build_replay_spec(resampled, graph, dt))


# --- fidelity ----------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class AgentFidelity:
    mean_position_error: float
    max_position_error: float
    speed_rms_error: float


@dataclass(frozen=True, slots=True)
class FidelityReport:
    per_agent: dict[int, AgentFidelity] = field(default_factory=dict)
    score: float = 0.0

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "agents": {
                str(aid): {
                    "mean_position_error_m": f.mean_position_error,
                    "max_position_error_m": f.max_position_error,
                    "speed_rms_error_mps": f.speed_rms_error,
                } for aid, f in sorted(self.per_agent.items())
            },
        }


def fidelity(trace: Sequence[WorldState], resampled: dict[int, list[ResampledPoint]],
             graph: LaneGraph) -> FidelityReport:
    """Position/speed error of a replayed trace against its source points."""
    by_tick = {w.tick: w for w in trace}
    per_agent: dict[int, AgentFidelity] = {}
    scores = []
    for agent_id, points in sorted(resampled.items()):
        pos_errors, speed_sq = [], []
        for p in points:
            world = by_tick.get(p.tick)
            if world is None:
                continue
            ag = world.agent(agent_id)
            x, y = graph.polyline(ag.lane_id).point_at(ag.s, ag.d)
            pos_errors.append(math.hypot(x - p.x, y - p.y))
            speed_sq.append((ag.v - p.speed) ** 2)
        if not pos_errors:
            continue
        mean_err = math.fsum(pos_errors) / len(pos_errors)
        per_agent[agent_id] = AgentFidelity(
            mean_position_error=mean_err,
            max_position_error=max(pos_errors),
            speed_rms_error=math.sqrt(math.fsum(speed_sq) / len(speed_sq)),
        )
        scores.append(math.exp(-mean_err))
    if not scores:
        raise ReplayError("no overlapping ticks between trace and source")
    return FidelityReport(per_agent=per_agent,
                          score=math.fsum(scores) / len(scores))


def self_fidelity(resampled: dict[int, list[ResampledPoint]],
                  graph: LaneGraph, dt: float = 0.05) -> FidelityReport:
    return fidelity(replay(resampled, graph, dt).states, resampled, graph)


# --- map matching ------------------------------------------------------------------


def match_map(log: TrajectoryLog, graphs: dict[int, LaneGraph]) -> int:
    """Graph id with the lowest mean projection residual; ties pick lowest id."""
    if not graphs:
        raise NoPlausibleMap("no graphs available")
    best_id, best_mean = None, math.inf
    for gid in sorted(graphs):
        graph = graphs[gid]
        residuals = [_project(graph, r.x, r.y)[2] for r in log.records]
        mean = math.fsum(residuals) / len(residuals) if residuals else math.inf
        if mean < best_mean:
            best_id, best_mean = gid, mean
    if best_id is None or best_mean > OFF_MAP_M:
        raise NoPlausibleMap(f"best mean residual {best_mean:.2f} m exceeds "
                             f"{OFF_MAP_M} m")
    return best_id
