"""Longitudinal car-following and lane-change decision models.

The car-following law is the standard desired-speed/desired-gap form
a * [1 - (v/v0)^delta - (s*/gap)^2] with s* = s0 + max(0, v*T + v*dv/(2*sqrt(a*b))).
The lane-change rule combines a safety veto on the prospective follower with
a politeness-weighted acceleration incentive. Both are pure functions, also
used as the fallback action source and as the scripted takeover mentor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from . import SkyliteError
from .world import (
    ActionCommand,
    ActionSource,
    LaneGraph,
    LaneIntent,
    WorldState,
    follower_of,
    leader_of,
    min_ttc,
)

LEADER_HORIZON = 200.0  # m; beyond this the road counts as free


class NonPositiveGap(SkyliteError):
    pass


@dataclass(frozen=True, slots=True)
class IDMParams:
    v0: float = 30.0     # desired speed, m/s
    T: float = 1.5       # time headway, s
    a: float = 2.0       # max accel, m/s^2
    b: float = 3.0       # comfortable decel, m/s^2 (positive)
    s0: float = 2.0      # jam distance, m
    delta: float = 4.0


@dataclass(frozen=True, slots=True)
class MOBILParams:
    politeness: float = 0.5
    delta_a_th: float = 0.1   # switching threshold, m/s^2
    b_safe: float = 4.0       # max decel imposed on the new follower, m/s^2


def _pow(x: float, exponent: float) -> float:
    # integer exponents unroll to multiplications (fixed evaluation order)
    n = int(exponent)
    if n == exponent and n >= 0:
        out = 1.0
        for _ in range(n):
            out *= x
        return out
    return x ** exponent


def idm_acceleration(v: float, gap: float, dv: float, p: IDMParams) -> float:
    """Car-following acceleration; gap is bumper-to-bumper, dv closing speed.

    gap may be math.inf for a free road. Unbounded below; the caller clamps
    to command bounds.
    """
    if v < 0:
        raise ValueError("speed must be non-negative")
    free = p.a * (1.0 - _pow(v / p.v0, p.delta))
    if math.isinf(gap):
        return free
    if gap <= 0.0:
        raise NonPositiveGap(f"gap={gap}")
    s_star = p.s0 + max(0.0, v * p.T + v * dv / (2.0 * math.sqrt(p.a * p.b)))
    ratio = s_star / gap
    return free - p.a * ratio * ratio


@dataclass(frozen=True, slots=True)
class NeighborKinematics:
    gap: float  # bumper-to-bumper gap to the ego's (possibly virtual) slot, m
    v: float


@dataclass(frozen=True, slots=True)
class LaneView:
    leader: NeighborKinematics | None = None
    follower: NeighborKinematics | None = None


def _follow_accel(v: float, leader: NeighborKinematics | None, p: IDMParams) -> float:
    if leader is None:
        return idm_acceleration(v, math.inf, 0.0, p)
    if leader.gap <= 0.0:
        return -2.0 * p.b  # contact: the slot is blocked, brake hard
    return idm_acceleration(v, leader.gap, v - leader.v, p)


def _chain_gap(follower: NeighborKinematics, leader: NeighborKinematics | None,
               ego_length: float) -> NeighborKinematics | None:
    """The follower's view of the leader once the ego is out of the way."""
    if leader is None:
        return None
    return NeighborKinematics(gap=follower.gap + ego_length + leader.gap, v=leader.v)


def mobil_decision(ego_v: float, ego_length: float, current: LaneView,
                   target: LaneView, idm: IDMParams, p: MOBILParams) -> str:
    """Lane-change decision: 'change' only if safety and incentive both hold.

    Safety: the prospective follower must not be forced below -b_safe.
    Incentive: ego gain plus politeness-weighted follower gains must exceed
    the switching threshold.
    """
    a_c = _follow_accel(ego_v, current.leader, idm)
    a_c_tilde = _follow_accel(ego_v, target.leader, idm)

    if target.follower is not None:
        a_n_tilde = _follow_accel(
            target.follower.v, NeighborKinematics(target.follower.gap, ego_v), idm)
        a_n = _follow_accel(
            target.follower.v, _chain_gap(target.follower, target.leader, ego_length),
            idm)
        if a_n_tilde < -p.b_safe:
            return "keep"
    else:
        a_n_tilde = a_n = 0.0

    if current.follower is not None:
        a_o = _follow_accel(
            current.follower.v, NeighborKinematics(current.follower.gap, ego_v), idm)
        a_o_tilde = _follow_accel(
            current.follower.v, _chain_gap(current.follower, current.leader, ego_length),
            idm)
    else:
        a_o = a_o_tilde = 0.0

    incentive = (a_c_tilde - a_c
                 + p.politeness * ((a_n_tilde - a_n) + (a_o_tilde - a_o)))
    return "change" if incentive > p.delta_a_th else "keep"


def lane_view(world: WorldState, graph: LaneGraph, agent_id: int,
              lane_id: int) -> LaneView:
    """Leader/follower kinematics around the ego's slot in the given lane."""
    leader, lgap = leader_of(world, graph, agent_id, LEADER_HORIZON, lane_id=lane_id)
    follower, fgap = follower_of(world, graph, agent_id, LEADER_HORIZON, lane_id=lane_id)
    return LaneView(
        leader=None if leader is None else NeighborKinematics(lgap, leader.v),
        follower=None if follower is None else NeighborKinematics(fgap, follower.v),
    )


def behavior_action(world: WorldState, graph: LaneGraph, agent_id: int,
                    idm: IDMParams, mobil: MOBILParams | None = None,
                    source: ActionSource = ActionSource.behavior_model) -> ActionCommand:
    """Rule-based action: car-following accel plus an optional lane-change intent.

    Desired speed follows the lane speed limit when the params leave v0 at
    its default above it.
    """
    ego = world.agent(agent_id)
    limit = graph.lane(ego.lane_id).speed_limit
    p = replace(idm, v0=min(idm.v0, limit)) if limit > 0 else idm
    leader, gap = leader_of(world, graph, agent_id, LEADER_HORIZON)
    if leader is None:
        accel = idm_acceleration(ego.v, math.inf, 0.0, p)
    elif gap <= 0.0:
        accel = -2.0 * p.b  # contact: brake hard
    else:
        accel = idm_acceleration(ego.v, gap, ego.v - leader.v, p)

    intent = LaneIntent.keep
    if mobil is not None and ego.lane_change.value == 0:
        for intent_candidate, neighbor_attr in ((LaneIntent.left, "left_neighbor"),
                                                (LaneIntent.right, "right_neighbor")):
            nid = getattr(graph.lane(ego.lane_id), neighbor_attr)
            if nid is None:
                continue
            decision = mobil_decision(
                ego.v, ego.length,
                current=lane_view(world, graph, agent_id, ego.lane_id),
                target=lane_view(world, graph, agent_id, nid),
                idm=p, p=mobil)
            if decision == "change":
                intent = intent_candidate
                break
    return ActionCommand(agent_id=agent_id, tick=world.tick, accel=accel,
                         lane_intent=intent, source=source)


def guardian_policy(world: WorldState, graph: LaneGraph, agent_id: int,
                    idm: IDMParams, ttc_threshold: float) -> ActionCommand | None:
    """Scripted mentor: brakes the agent out of trouble when TTC drops.

    Returns a takeover action (car-following braking, never positive accel)
    when the agent's minimum TTC falls below the threshold, otherwise None.
    """
    if min_ttc(world, graph, agent_id) >= ttc_threshold:
        return None
    ego = world.agent(agent_id)
    leader, gap = leader_of(world, graph, agent_id, LEADER_HORIZON)
    if leader is not None and gap > 0.0:
        accel = idm_acceleration(ego.v, gap, ego.v - leader.v, idm)
    else:
        accel = -2.0 * idm.b
    accel = min(accel, -idm.b)
    return ActionCommand(agent_id=agent_id, tick=world.tick, accel=accel,
                         lane_intent=LaneIntent.keep, source=ActionSource.human)


def params_from_spec(behavior: dict) -> tuple[IDMParams, MOBILParams]:
    """Resolve behavior overrides from a scenario's "behavior" mapping."""
    idm_d = behavior.get("idm", {})
    mobil_d = behavior.get("mobil", {})
    idm = IDMParams(**{k: float(v) for k, v in idm_d.items()})
    mobil = MOBILParams(**{k: float(v) for k, v in mobil_d.items()})
    return idm, mobil
