"""Scenario files: the JSON format every pipeline stage shares.

A scenario bundles a lane graph (inline or by reference), initial agent
placements with controller assignments, the tick size, termination rules, a
seed, and optional behavior parameters, language goals, and per-agent
scripts. See docs/schemas.md for the full JSON schema.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

from . import SkyliteError
from .world import (
    A_MAX_DEFAULT,
    A_MIN_DEFAULT,
    AgentKind,
    AgentState,
    Lane,
    LaneGraph,
    ScriptTrack,
    WorldState,
    make_world,
)

CONTROLLERS = ("idm", "external", "policy", "human", "scripted", "hold")

_DEFAULT_CONTROLLER = {
    AgentKind.rule_based: "idm",
    AgentKind.policy_driven: "policy",
    AgentKind.human_controllable: "idm",
    AgentKind.scripted_replay: "scripted",
}


class ScenarioError(SkyliteError):
    pass


@dataclass(frozen=True, slots=True)
class Termination:
    route_completion_s: float = math.inf
    collision_ends_episode: bool = True


@dataclass(frozen=True, slots=True)
class AgentSeed:
    agent_id: int
    kind: AgentKind
    lane_id: int
    s: float = 0.0
    d: float = 0.0
    v: float = 0.0
    heading: float | None = None
    length: float = 4.5
    width: float = 1.8
    controller: str = ""

    def resolved_controller(self) -> str:
        return self.controller or _DEFAULT_CONTROLLER[self.kind]


@dataclass(slots=True)
class ScenarioSpec:
    name: str
    graph: LaneGraph
    agents: list[AgentSeed]
    dt: float = 0.05
    max_ticks: int = 1000
    seed: int = 0
    termination: Termination = Termination()
    ego_agent_id: int | None = None
    behavior: dict = field(default_factory=dict)
    bounds: tuple[float, float] = (A_MIN_DEFAULT, A_MAX_DEFAULT)
    goals: dict | None = None
    scripts: dict[int, ScriptTrack] = field(default_factory=dict)
    lane_graph_ref: str | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ScenarioError("dt must be positive")
        if self.max_ticks <= 0:
            raise ScenarioError("max_ticks must be positive")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ScenarioError("agent ids must be unique")
        for a in self.agents:
            if a.lane_id not in self.graph.lanes:
                raise ScenarioError(f"agent {a.agent_id}: unknown lane {a.lane_id}")
            ctrl = a.resolved_controller()
            if ctrl not in CONTROLLERS:
                raise ScenarioError(f"agent {a.agent_id}: unknown controller {ctrl!r}")
        for agent_id in self.scripts:
            if agent_id not in set(ids):
                raise ScenarioError(f"script for unknown agent {agent_id}")

    def ego_id(self) -> int:
        if self.ego_agent_id is not None:
            return self.ego_agent_id
        for kind in (AgentKind.policy_driven, AgentKind.human_controllable):
            picks = [a.agent_id for a in self.agents if a.kind == kind]
            if picks:
                return min(picks)
        return min(a.agent_id for a in self.agents)

    def controller_map(self) -> dict[int, str]:
        return {a.agent_id: a.resolved_controller() for a in self.agents}


def graph_to_dict(graph: LaneGraph) -> dict:
    return {
        "v": 1,
        "lanes": [
            {
                "id": lane.id,
                "centerline": [[x, y] for x, y in lane.centerline],
                "width": lane.width,
                "speed_limit": lane.speed_limit,
                "left_neighbor": lane.left_neighbor,
                "right_neighbor": lane.right_neighbor,
            }
            for lane in sorted(graph.lanes.values(), key=lambda ln: ln.id)
        ],
        "connections": [[a, b] for a, b in graph.connections],
    }


def graph_from_dict(data: dict) -> LaneGraph:
    try:
        lanes = [
            Lane(
                id=int(ld["id"]),
                centerline=tuple((float(x), float(y)) for x, y in ld["centerline"]),
                width=float(ld["width"]),
                speed_limit=float(ld["speed_limit"]),
                left_neighbor=ld.get("left_neighbor"),
                right_neighbor=ld.get("right_neighbor"),
            )
            for ld in data["lanes"]
        ]
        connections = [(int(a), int(b)) for a, b in data.get("connections", [])]
        return LaneGraph(lanes, connections)
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"bad lane graph: {exc}") from exc


def load_graph(path: str) -> LaneGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return graph_from_dict(json.load(fh))


def spec_to_dict(spec: ScenarioSpec) -> dict:
    data: dict = {"v": 1, "name": spec.name}
    if spec.lane_graph_ref:
        data["lane_graph_ref"] = spec.lane_graph_ref
    else:
        data["lane_graph"] = graph_to_dict(spec.graph)
    data.update(
        dt=spec.dt,
        max_ticks=spec.max_ticks,
        seed=spec.seed,
        termination={
            "route_completion_s": (None if math.isinf(spec.termination.route_completion_s)
                                   else spec.termination.route_completion_s),
            "collision_ends_episode": spec.termination.collision_ends_episode,
        },
        agents=[
            {
                "agent_id": a.agent_id,
                "kind": a.kind.name,
                "lane_id": a.lane_id,
                "s": a.s,
                "d": a.d,
                "v": a.v,
                "heading": a.heading,
                "length": a.length,
                "width": a.width,
                "controller": a.resolved_controller(),
            }
            for a in spec.agents
        ],
    )
    if spec.ego_agent_id is not None:
        data["ego_agent_id"] = spec.ego_agent_id
    if spec.behavior:
        data["behavior"] = spec.behavior
    if spec.bounds != (A_MIN_DEFAULT, A_MAX_DEFAULT):
        data["bounds"] = {"a_min": spec.bounds[0], "a_max": spec.bounds[1]}
    if spec.goals:
        data["goals"] = spec.goals
    if spec.scripts:
        data["scripts"] = {
            str(agent_id): [[lane, s, v] for lane, s, v in track.rows]
            for agent_id, track in sorted(spec.scripts.items())
        }
    return data


def spec_from_dict(data: dict, base_dir: str = ".") -> ScenarioSpec:
    try:
        if "lane_graph_ref" in data:
            ref = data["lane_graph_ref"]
            graph = load_graph(os.path.join(base_dir, ref))
        else:
            ref = None
            graph = graph_from_dict(data["lane_graph"])
        term = data.get("termination", {})
        rc = term.get("route_completion_s")
        agents = [
            AgentSeed(
                agent_id=int(ad["agent_id"]),
                kind=AgentKind[ad.get("kind", "rule_based")],
                lane_id=int(ad["lane_id"]),
                s=float(ad.get("s", 0.0)),
                d=float(ad.get("d", 0.0)),
                v=float(ad.get("v", 0.0)),
                heading=None if ad.get("heading") is None else float(ad["heading"]),
                length=float(ad.get("length", 4.5)),
                width=float(ad.get("width", 1.8)),
                controller=ad.get("controller", ""),
            )
            for ad in data["agents"]
        ]
        bounds_d = data.get("bounds", {})
        scripts = {
            int(agent_id): ScriptTrack([tuple(row) for row in rows])
            for agent_id, rows in data.get("scripts", {}).items()
        }
        return ScenarioSpec(
            name=data.get("name", "unnamed"),
            graph=graph,
            agents=agents,
            dt=float(data.get("dt", 0.05)),
            max_ticks=int(data.get("max_ticks", 1000)),
            seed=int(data.get("seed", 0)),
            termination=Termination(
                route_completion_s=math.inf if rc is None else float(rc),
                collision_ends_episode=bool(term.get("collision_ends_episode", True)),
            ),
            ego_agent_id=data.get("ego_agent_id"),
            behavior=data.get("behavior", {}),
            bounds=(float(bounds_d.get("a_min", A_MIN_DEFAULT)),
                    float(bounds_d.get("a_max", A_MAX_DEFAULT))),
            goals=data.get("goals"),
            scripts=scripts,
            lane_graph_ref=ref,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"bad scenario: {exc}") from exc


def load_scenario(path: str) -> ScenarioSpec:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return spec_from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))


def save_scenario(spec: ScenarioSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec_to_dict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")


def scenario_json(spec: ScenarioSpec) -> str:
    """Canonical single-line JSON used on the wire and in run logs."""
    return json.dumps(spec_to_dict(spec), sort_keys=True, separators=(",", ":"))


def scenario_from_json(text: str) -> ScenarioSpec:
    return spec_from_dict(json.loads(text))


def initial_world(spec: ScenarioSpec) -> WorldState:
    agents = []
    for seed in spec.agents:
        lane_id, s, d, v = seed.lane_id, seed.s, seed.d, seed.v
        track = spec.scripts.get(seed.agent_id)
        if track is not None and track.row(0) is not None:
            lane_id, s, v = track.row(0)
            d = 0.0
        poly = spec.graph.polyline(lane_id)
        heading = seed.heading if seed.heading is not None else poly.heading_at(s)
        if not 0.0 <= s <= poly.length:
            raise ScenarioError(f"agent {seed.agent_id}: s={s} outside lane {lane_id}")
        if v < 0:
            raise ScenarioError(f"agent {seed.agent_id}: negative speed")
        agents.append(AgentState(
            agent_id=seed.agent_id, kind=seed.kind, lane_id=lane_id, s=s, d=d,
            v=v, a=0.0, heading=heading, length=seed.length, width=seed.width,
        ))
    return make_world(agents, tick=0, dt=spec.dt)
