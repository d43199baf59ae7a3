"""Deterministic fixed-step kinematic world on a lane graph.

State advance is a pure function of (state, actions, graph, dt): same inputs
give bit-identical outputs on any machine, which is what makes cross-terminal
digest comparison meaningful. All arithmetic here goes through
:mod:`skylite.geometry` rules (no platform libm transcendentals).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import IntEnum

from . import SkyliteError
from .geometry import Polyline, det_hypot

DT_DEFAULT = 0.05           # 20 Hz fixed step
LANE_CHANGE_DURATION = 3.0  # s, lateral interpolation time
A_MIN_DEFAULT = -8.0        # m/s^2
A_MAX_DEFAULT = 4.0         # m/s^2
COLLISION_WINDOW = 50.0     # m, pair prefilter radius
TTC_INF = math.inf


class WorldError(SkyliteError):
    pass


class MissingAction(WorldError):
    def __init__(self, agent_id: int):
        super().__init__(f"no action for agent {agent_id}")
        self.agent_id = agent_id


class UnknownAgent(WorldError):
    def __init__(self, agent_id: int):
        super().__init__(f"unknown agent {agent_id}")
        self.agent_id = agent_id


class NonFiniteInput(WorldError):
    pass


class NotLongitudinallyComparable(WorldError):
    """Agents sit on lanes with no same/connected longitudinal relation."""


class EmptyTrace(WorldError):
    pass


class AgentKind(IntEnum):
    rule_based = 0
    policy_driven = 1
    human_controllable = 2
    scripted_replay = 3


class LaneChange(IntEnum):
    none = 0
    to_left = 1
    to_right = 2


class LaneIntent(IntEnum):
    keep = 0
    left = 1
    right = 2


class ActionSource(IntEnum):
    behavior_model = 0
    policy = 1
    human = 2
    fallback = 3


@dataclass(frozen=True, slots=True)
class Lane:
    id: int
    centerline: tuple[tuple[float, float], ...]
    width: float
    speed_limit: float
    left_neighbor: int | None = None
    right_neighbor: int | None = None


class LaneGraph:
    """Validated lane graph with cached arc-length geometry per lane."""

    def __init__(self, lanes: list[Lane], connections: list[tuple[int, int]]):
        self.lanes = {lane.id: lane for lane in lanes}
        if len(self.lanes) != len(lanes):
            raise ValueError("duplicate lane ids")
        self.connections = sorted(set((int(a), int(b)) for a, b in connections))
        self.polylines = {lane.id: Polyline(list(lane.centerline)) for lane in lanes}
        self._successors: dict[int, list[int]] = {lid: [] for lid in self.lanes}
        for a, b in self.connections:
            if a not in self.lanes or b not in self.lanes:
                raise ValueError(f"connection ({a}, {b}) references unknown lane")
            self._successors[a].append(b)
        for lane in lanes:
            if lane.width <= 0:
                raise ValueError(f"lane {lane.id}: width must be positive")
            for side in ("left_neighbor", "right_neighbor"):
                nid = getattr(lane, side)
                if nid is None:
                    continue
                if nid not in self.lanes:
                    raise ValueError(f"lane {lane.id}: {side} {nid} does not exist")
                back = self.lanes[nid]
                mirror = "right_neighbor" if side == "left_neighbor" else "left_neighbor"
                if getattr(back, mirror) != lane.id:
                    raise ValueError(
                        f"lane {lane.id}: {side} relation to {nid} is not symmetric")

    def __eq__(self, other) -> bool:
        return (isinstance(other, LaneGraph) and self.lanes == other.lanes
                and self.connections == other.connections)

    def lane(self, lane_id: int) -> Lane:
        try:
            return self.lanes[lane_id]
        except KeyError:
            raise ValueError(f"unknown lane {lane_id}") from None

    def polyline(self, lane_id: int) -> Polyline:
        return self.polylines[lane_id]

    def length(self, lane_id: int) -> float:
        return self.polylines[lane_id].length

    def successors(self, lane_id: int) -> list[int]:
        return self._successors.get(lane_id, [])

    def next_lane(self, lane_id: int) -> int | None:
        """Deterministic continuation: the lowest-id connected successor."""
        succ = self.successors(lane_id)
        return min(succ) if succ else None

    def neighbor(self, lane_id: int, intent: LaneIntent) -> int | None:
        lane = self.lane(lane_id)
        if intent == LaneIntent.left:
            return lane.left_neighbor
        if intent == LaneIntent.right:
            return lane.right_neighbor
        return None


@dataclass(frozen=True, slots=True)
class AgentState:
    agent_id: int
    kind: AgentKind
    lane_id: int
    s: float            # longitudinal position along centerline, m
    d: float            # lateral offset, m, left positive
    v: float            # speed, m/s, >= 0
    a: float            # acceleration applied on the last step, m/s^2
    heading: float      # rad
    length: float
    width: float
    lane_change: LaneChange = LaneChange.none
    lc_progress: float = 0.0


@dataclass(frozen=True, slots=True)
class ActionCommand:
    agent_id: int
    tick: int
    accel: float
    lane_intent: LaneIntent = LaneIntent.keep
    source: ActionSource = ActionSource.behavior_model


@dataclass(frozen=True, slots=True)
class WorldState:
    tick: int
    sim_time: float
    agents: tuple[AgentState, ...]   # sorted by agent_id
    rng_counter: int = 0
    collisions_this_tick: tuple[tuple[int, int], ...] = ()

    def agent(self, agent_id: int) -> AgentState:
        for ag in self.agents:
            if ag.agent_id == agent_id:
                return ag
        raise UnknownAgent(agent_id)

    def with_rng_counter(self, n: int) -> "WorldState":
        return replace(self, rng_counter=n)


class ScriptTrack:
    """Per-tick (lane, s, v) track a scripted agent follows verbatim."""

    __slots__ = ("rows",)

    def __init__(self, rows: list[tuple[int, float, float]]):
        self.rows = [(int(lane), float(s), float(v)) for lane, s, v in rows]

    def row(self, tick: int) -> tuple[int, float, float] | None:
        if 0 <= tick < len(self.rows):
            return self.rows[tick]
        return None

    def __len__(self) -> int:
        return len(self.rows)

    def __eq__(self, other) -> bool:
        return isinstance(other, ScriptTrack) and self.rows == other.rows


def make_world(agents: list[AgentState], tick: int = 0, dt: float = DT_DEFAULT,
               rng_counter: int = 0) -> WorldState:
    ordered = tuple(sorted(agents, key=lambda a: a.agent_id))
    ids = [a.agent_id for a in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate agent ids")
    return WorldState(tick=tick, sim_time=tick * dt, agents=ordered,
                      rng_counter=rng_counter)


def _clamp(x: float, lo: float, hi: float) -> float:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


def _advance_longitudinal(v: float, accel: float, dt: float) -> tuple[float, float]:
    """One Euler-exact step of ds, v' with the stop boundary handled.

    If the agent would cross v = 0 mid-step it stops exactly there:
    ds = -v^2 / (2 a) for a < 0, then v' = 0.
    """
    v_next = v + accel * dt
    if v_next < 0.0:
        if accel < 0.0:
            ds = -(v * v) / (2.0 * accel)
        else:
            ds = 0.0
        return ds, 0.0
    ds = v * dt + 0.5 * accel * dt * dt
    return ds, v_next


def _lateral_gap(graph: LaneGraph, lane_id: int, target_id: int, s: float) -> float:
    """Distance between the two lane centerlines at arc position s."""
    cx, cy = graph.polyline(lane_id).point_at(s)
    target = graph.polyline(target_id)
    ts = s if s <= target.length else target.length
    tx, ty = target.point_at(ts)
    return det_hypot(tx - cx, ty - cy)


def _step_agent(agent: AgentState, action: ActionCommand, graph: LaneGraph,
                dt: float, bounds: tuple[float, float]) -> AgentState:
    accel = _clamp(action.accel, bounds[0], bounds[1])
    ds, v_next = _advance_longitudinal(agent.v, accel, dt)
    s_next = agent.s + ds
    lane_id = agent.lane_id

    # lane overflow: follow the lowest-id connection, else stop at the end.
    # A lane change in flight across an overflow is cancelled (deterministic).
    lane_change = agent.lane_change
    progress = agent.lc_progress
    while s_next > graph.length(lane_id):
        nxt = graph.next_lane(lane_id)
        if nxt is None:
            s_next = graph.length(lane_id)
            v_next = 0.0
            break
        s_next -= graph.length(lane_id)
        lane_id = nxt
        if lane_change != LaneChange.none:
            lane_change = LaneChange.none
            progress = 0.0

    # lane-change state machine: intents are ignored while a change runs
    d = 0.0
    if lane_change == LaneChange.none and action.lane_intent != LaneIntent.keep:
        target = graph.neighbor(lane_id, action.lane_intent)
        if target is not None:
            lane_change = (LaneChange.to_left if action.lane_intent == LaneIntent.left
                           else LaneChange.to_right)
            progress = 0.0
    if lane_change != LaneChange.none:
        progress = progress + dt / LANE_CHANGE_DURATION
        intent = (LaneIntent.left if lane_change == LaneChange.to_left
                  else LaneIntent.right)
        target = graph.neighbor(lane_id, intent)
        if target is None or progress >= 1.0:
            if target is not None:
                lane_id = target
                s_next = min(s_next, graph.length(lane_id))
            lane_change = LaneChange.none
            progress = 0.0
            d = 0.0
        else:
            gap = _lateral_gap(graph, lane_id, target, s_next)
            sign = 1.0 if lane_change == LaneChange.to_left else -1.0
            d = sign * progress * gap

    heading = graph.polyline(lane_id).heading_at(s_next)
    return replace(agent, lane_id=lane_id, s=s_next, d=d, v=v_next, a=accel,
                   heading=heading, lane_change=lane_change, lc_progress=progress)


def _apply_script(agent: AgentState, row: tuple[int, float, float],
                  graph: LaneGraph, dt: float) -> AgentState:
    lane_id, s, v = row
    s = _clamp(s, 0.0, graph.length(lane_id))
    heading = graph.polyline(lane_id).heading_at(s)
    accel = (v - agent.v) / dt
    return replace(agent, lane_id=lane_id, s=s, d=0.0, v=v, a=accel,
                   heading=heading, lane_change=LaneChange.none, lc_progress=0.0)


def _rect_corners(agent: AgentState, graph: LaneGraph):
    poly = graph.polyline(agent.lane_id)
    cx, cy = poly.point_at(agent.s, agent.d)
    ux, uy = poly.direction_at(agent.s)
    hl = 0.5 * agent.length
    hw = 0.5 * agent.width
    # left normal (-uy, ux)
    fx, fy = ux * hl, uy * hl
    nx, ny = -uy * hw, ux * hw
    return ((cx + fx + nx, cy + fy + ny), (cx + fx - nx, cy + fy - ny),
            (cx - fx - nx, cy - fy - ny), (cx - fx + nx, cy - fy + ny)), (ux, uy)


def _rects_overlap(corners_a, axes_a, corners_b, axes_b) -> bool:
    # separating axis test over both rectangles' edge normals
    for ux, uy in (axes_a, (-axes_a[1], axes_a[0]), axes_b, (-axes_b[1], axes_b[0])):
        min_a = min(x * ux + y * uy for x, y in corners_a)
        max_a = max(x * ux + y * uy for x, y in corners_a)
        min_b = min(x * ux + y * uy for x, y in corners_b)
        max_b = max(x * ux + y * uy for x, y in corners_b)
        if max_a < min_b or max_b < min_a:
            return False
    return True


def detect_collisions(agents: tuple[AgentState, ...],
                      graph: LaneGraph) -> tuple[tuple[int, int], ...]:
    """Symmetric oriented-rectangle overlaps among agents within 50 m."""
    geom = []
    for ag in agents:
        poly = graph.polyline(ag.lane_id)
        geom.append((ag, poly.point_at(ag.s, ag.d)))
    pairs = []
    for i in range(len(geom)):
        ai, (xi, yi) = geom[i]
        for j in range(i + 1, len(geom)):
            aj, (xj, yj) = geom[j]
            if det_hypot(xj - xi, yj - yi) > COLLISION_WINDOW:
                continue
            ca, axa = _rect_corners(ai, graph)
            cb, axb = _rect_corners(aj, graph)
            if _rects_overlap(ca, axa, cb, axb):
                pairs.append((ai.agent_id, aj.agent_id))
    return tuple(sorted(pairs))


def step(world: WorldState, actions: list[ActionCommand], graph: LaneGraph,
         dt: float, scripts: dict[int, ScriptTrack] | None = None,
         bounds: tuple[float, float] = (A_MIN_DEFAULT, A_MAX_DEFAULT)) -> WorldState:
    """Advance one tick. Pure: never mutates its inputs.

    Requires exactly one action per agent, all stamped with world.tick.
    Scripted agents take their next (lane, s, v) row verbatim when a script
    covers tick+1; their action still has to be present.
    """
    by_id: dict[int, ActionCommand] = {}
    known = {ag.agent_id for ag in world.agents}
    for act in actions:
        if act.agent_id not in known:
            raise UnknownAgent(act.agent_id)
        if act.tick != world.tick:
            raise WorldError(f"action tick {act.tick} != world tick {world.tick}")
        if not math.isfinite(act.accel):
            raise NonFiniteInput(f"agent {act.agent_id}: accel={act.accel!r}")
        if act.agent_id in by_id:
            raise WorldError(f"duplicate action for agent {act.agent_id}")
        by_id[act.agent_id] = act
    for ag in world.agents:
        if ag.agent_id not in by_id:
            raise MissingAction(ag.agent_id)

    next_tick = world.tick + 1
    moved = []
    for ag in world.agents:
        row = scripts[ag.agent_id].row(next_tick) if scripts and ag.agent_id in scripts else None
        if row is not None:
            moved.append(_apply_script(ag, row, graph, dt))
        else:
            moved.append(_step_agent(ag, by_id[ag.agent_id], graph, dt, bounds))
    agents = tuple(moved)
    return WorldState(tick=next_tick, sim_time=next_tick * dt, agents=agents,
                      rng_counter=world.rng_counter,
                      collisions_this_tick=detect_collisions(agents, graph))


def longitudinal_gap(ego: AgentState, other: AgentState, graph: LaneGraph) -> float:
    """Signed center-to-center arc distance from ego to other (positive = ahead).

    Defined on the same lane or across one lane connection in either
    direction; anything else raises NotLongitudinallyComparable.
    """
    if other.lane_id == ego.lane_id:
        return other.s - ego.s
    if other.lane_id in graph.successors(ego.lane_id):
        return (graph.length(ego.lane_id) - ego.s) + other.s
    if ego.lane_id in graph.successors(other.lane_id):
        return -((graph.length(other.lane_id) - other.s) + ego.s)
    raise NotLongitudinallyComparable(
        f"lanes {ego.lane_id} and {other.lane_id} are not longitudinally related")


def bumper_gap(ego: AgentState, other: AgentState, graph: LaneGraph) -> float:
    centers = longitudinal_gap(ego, other, graph)
    sep = abs(centers) - 0.5 * (ego.length + other.length)
    return sep if sep > 0.0 else 0.0


def time_to_collision(ego: AgentState, other: AgentState, graph: LaneGraph) -> float:
    """Bumper-to-bumper gap over closing speed; inf when not closing."""
    centers = longitudinal_gap(ego, other, graph)
    gap = bumper_gap(ego, other, graph)
    closing = ego.v - other.v if centers >= 0.0 else other.v - ego.v
    if closing <= 0.0:
        return TTC_INF
    return gap / closing


def min_ttc(world: WorldState, graph: LaneGraph, agent_id: int) -> float:
    ego = world.agent(agent_id)
    best = TTC_INF
    for other in world.agents:
        if other.agent_id == agent_id:
            continue
        try:
            t = time_to_collision(ego, other, graph)
        except NotLongitudinallyComparable:
            continue
        if t < best:
            best = t
    return best


def leader_of(world: WorldState, graph: LaneGraph, agent_id: int,
              horizon: float = 200.0, lane_id: int | None = None,
              ego_s: float | None = None) -> tuple[AgentState | None, float]:
    """Nearest agent ahead in the (given or current) lane within horizon.

    Returns (leader, bumper gap). Looks across lane connections up to the
    horizon; beyond it the road counts as free.
    """
    ego = world.agent(agent_id)
    lane_id = ego.lane_id if lane_id is None else lane_id
    ego_s = ego.s if ego_s is None else ego_s
    best: AgentState | None = None
    best_dist = horizon
    offset = 0.0
    lane = lane_id
    s_from = ego_s
    seen = set()
    while lane not in seen:
        seen.add(lane)
        for other in world.agents:
            if other.agent_id == agent_id or other.lane_id != lane:
                continue
            dist = offset + (other.s - s_from)
            if 0.0 < dist <= best_dist:
                best = other
                best_dist = dist
        offset += graph.length(lane) - s_from
        if offset > horizon:
            break
        nxt = graph.next_lane(lane)
        if nxt is None:
            break
        lane = nxt
        s_from = 0.0
    if best is None:
        return None, math.inf
    gap = best_dist - 0.5 * (ego.length + best.length)
    return best, gap if gap > 0.0 else 0.0


def follower_of(world: WorldState, graph: LaneGraph, agent_id: int,
                horizon: float = 200.0,
                lane_id: int | None = None) -> tuple[AgentState | None, float]:
    """Nearest agent behind in the (given or current) lane within horizon."""
    ego = world.agent(agent_id)
    lane_id = ego.lane_id if lane_id is None else lane_id
    best: AgentState | None = None
    best_dist = horizon
    for other in world.agents:
        if other.agent_id == agent_id or other.lane_id != lane_id:
            continue
        dist = ego.s - other.s
        if 0.0 < dist <= best_dist:
            best = other
            best_dist = dist
    if best is None:
        return None, math.inf
    gap = best_dist - 0.5 * (ego.length + best.length)
    return best, gap if gap > 0.0 else 0.0


@dataclass(frozen=True, slots=True)
class MetricsReport:
    safety_violation_count: int
    success: bool
    route_completion: float
    traveled_distance: float
    average_speed: float
    min_ttc: float
    disturbance_rate: float
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "safety_violation_count": self.safety_violation_count,
            "success": self.success,
            "route_completion": self.route_completion,
            "traveled_distance": self.traveled_distance,
            "average_speed": self.average_speed,
            "min_ttc": None if math.isinf(self.min_ttc) else self.min_ttc,
            "disturbance_rate": self.disturbance_rate,
            "sample_count": self.sample_count,
        }


def episode_metrics(trace: list[WorldState], graph: LaneGraph, *, ego_id: int,
                    route_completion_s: float, dt: float,
                    comfortable_decel: float = 3.0) -> MetricsReport:
    """Summary metrics over one episode trace.

    Safety violations are rising-edge collision events. A step counts as
    disturbed when the ego's follower brakes harder than comfortable_decel.
    """
    if not trace:
        raise EmptyTrace("metrics need at least one state")
    traveled = 0.0
    lowest_ttc = TTC_INF
    violations = 0
    disturbed = 0
    ego_collided = False
    prev_pairs: set[tuple[int, int]] = set()
    for w in trace:
        ego = w.agent(ego_id)
        new_pairs = set(w.collisions_this_tick) - prev_pairs
        violations += len(new_pairs)
        prev_pairs = set(w.collisions_this_tick)
        if any(ego_id in pair for pair in w.collisions_this_tick):
            ego_collided = True
        t = min_ttc(w, graph, ego_id)
        if t < lowest_ttc:
            lowest_ttc = t
        follower, gap = follower_of(w, graph, ego_id)
        if follower is not None and gap <= COLLISION_WINDOW and \
                follower.a < -comfortable_decel:
            disturbed += 1
    for prev, cur in zip(trace, trace[1:]):
        # trapezoid matches the integrator's ds = v*dt + a*dt^2/2 exactly
        traveled += 0.5 * (prev.agent(ego_id).v + cur.agent(ego_id).v) * dt
    steps = max(1, len(trace) - 1)
    avg_speed = traveled / (steps * dt)
    completion = traveled / route_completion_s if route_completion_s > 0 else 0.0
    completion = completion if completion < 1.0 else 1.0
    success = completion >= 1.0 and not ego_collided
    return MetricsReport(
        safety_violation_count=violations,
        success=success,
        route_completion=completion,
        traveled_distance=traveled,
        average_speed=avg_speed,
        min_ttc=lowest_ttc,
        disturbance_rate=disturbed / len(trace),
        sample_count=len(trace),
    )
