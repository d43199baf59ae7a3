"""Shared fixtures: small lane graphs, agent factories, and a free-port helper."""

import socket

import pytest

from skylite.world import (
    AgentKind,
    AgentState,
    Lane,
    LaneChange,
    LaneGraph,
    WorldState,
)


def straight_lane(lane_id: int = 0, length: float = 900.0, y: float = 0.0,
                  width: float = 3.5, speed_limit: float = 30.0,
                  left: int | None = None, right: int | None = None) -> Lane:
    return Lane(id=lane_id, centerline=((0.0, y), (length, y)), width=width,
                speed_limit=speed_limit, left_neighbor=left, right_neighbor=right)


@pytest.fixture
def straight_graph() -> LaneGraph:
    """One 900 m straight lane along +x, no connections."""
    return LaneGraph([straight_lane()], [])


@pytest.fixture
def two_lane_graph() -> LaneGraph:
    """Two parallel 900 m lanes; lane 1 sits to the left of lane 0."""
    return LaneGraph(
        [straight_lane(0, y=0.0, left=1), straight_lane(1, y=3.5, right=0)],
        [],
    )


@pytest.fixture
def crossing_graph() -> LaneGraph:
    """Perpendicular lanes crossing at (100, 0): lane 0 is west-east,
    lane 1 south-north."""
    lane_we = Lane(id=0, centerline=((0.0, 0.0), (200.0, 0.0)), width=3.5,
                   speed_limit=20.0)
    lane_sn = Lane(id=1, centerline=((100.0, -100.0), (100.0, 100.0)),
                   width=3.5, speed_limit=20.0)
    return LaneGraph([lane_we, lane_sn], [])


def make_agent(agent_id: int = 0, *, kind: AgentKind = AgentKind.rule_based,
               lane_id: int = 0, s: float = 0.0, d: float = 0.0,
               v: float = 0.0, a: float = 0.0, heading: float = 0.0,
               length: float = 4.5, width: float = 1.8,
               lane_change: LaneChange = LaneChange.none,
               lc_progress: float = 0.0) -> AgentState:
    return AgentState(agent_id=agent_id, kind=kind, lane_id=lane_id, s=s, d=d,
                      v=v, a=a, heading=heading, length=length, width=width,
                      lane_change=lane_change, lc_progress=lc_progress)


def make_world(*agents: AgentState, tick: int = 0, sim_time: float = 0.0,
               rng_counter: int = 0,
               collisions: tuple[tuple[int, int], ...] = ()) -> WorldState:
    ordered = tuple(sorted(agents, key=lambda ag: ag.agent_id))
    return WorldState(tick=tick, sim_time=sim_time, agents=ordered,
                      rng_counter=rng_counter, collisions_this_tick=collisions)


def free_port() -> int:
    """Bind-and-release to reserve a port number for a short-lived test server."""
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]
