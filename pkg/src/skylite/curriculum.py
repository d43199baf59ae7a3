"""Safety-critical scenario search over parameterized background vehicles.

A failure trace is first classified into a discrete insight tag by fixed
rules. Candidate background-vehicle trajectories (cut-in, lead-brake,
cross-path families) are then scored by

    total = prior x response_likelihood x alignment

where prior measures kinematic plausibility (smoothness x feasibility),
response_likelihood is the fraction of seeded policy rollouts that survive
the interaction window, and alignment grades how well rollout outcomes match
the tag's signature. The optimizer is an exhaustive argmax over the grid
with ties broken by lowest index.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Sequence

from . import SkyliteError
from .controllers import EpisodeResult, build_controllers, run_episode
from .scenario import AgentSeed, ScenarioSpec, save_scenario
from .seeding import derive_seed
from .world import (
    AgentKind,
    LaneGraph,
    MetricsReport,
    NotLongitudinallyComparable,
    ScriptTrack,
    WorldState,
    longitudinal_gap,
    min_ttc,
)

ALIGNMENT_VERSION = 1
A_LIMIT = 8.0          # |accel| bound for a feasible trajectory, m/s^2
JERK_REF = 50.0        # m/s^3 normalization for the smoothness prior
WINDOW_TICKS = 120     # interaction window length after trigger
BRAKE_ONSET_A = -2.0   # ego accel that counts as a braking response
ROLLOUT_SALT = 0x63757272  # seed-derivation salt for scoring rollouts
YIELD_DROP = 3.0       # m/s speed drop that counts as yielding


class CurriculumError(SkyliteError):
    pass


class NoFailureInTrace(CurriculumError):
    pass


class InfeasibleCandidate(CurriculumError):
    pass


class EmptyGrid(CurriculumError):
    pass


class SpecConflict(CurriculumError):
    pass


class InsightKind(Enum):
    late_braking_at_intersection = "late_braking_at_intersection"
    unsafe_merge_response = "unsafe_merge_response"
    tailgating_under_cutin = "tailgating_under_cutin"
    failure_to_yield = "failure_to_yield"


@dataclass(frozen=True, slots=True)
class InsightTag:
    kind: InsightKind
    note: str = ""


class CandidateFamily(Enum):
    cut_in = "cut_in"
    lead_brake = "lead_brake"
    cross_path = "cross_path"


@dataclass(frozen=True, slots=True)
class BVCandidate:
    """One parameterized background-vehicle trajectory, fully realized."""

    family: CandidateFamily
    trigger_gap: float        # m ahead of the projected ego at trigger
    lateral_offset: float     # m; sign picks the cut-in side
    decel: float              # m/s^2 braking magnitude after trigger
    start_tick: int
    trajectory: tuple[tuple[int, int, float, float], ...]  # (tick, lane, s, v)
    window_start: int
    window_end: int


@dataclass(frozen=True, slots=True)
class CandidateScore:
    prior: float
    response_likelihood: float
    alignment: float

    @property
    def total(self) -> float:
        return self.prior * self.response_likelihood * self.alignment


# --- insight derivation -------------------------------------------------------


def _ego_collision(trace: Sequence[WorldState], ego_id: int):
    """First (tick index, partner id) where the ego collides, else None."""
    for i, world in enumerate(trace):
        for a, b in world.collisions_this_tick:
            if ego_id == a:
                return i, b
            if ego_id == b:
                return i, a
    return None


def _lane_history(trace: Sequence[WorldState], agent_id: int) -> list[int]:
    return [w.agent(agent_id).lane_id for w in trace]


def _changed_lane_recently(lanes: list[int], at: int, lookback: int) -> bool:
    lo = max(0, at - lookback)
    return len(set(lanes[lo:at + 1])) > 1


def derive_insight(trace: Sequence[WorldState], metrics: MetricsReport,
                   graph: LaneGraph, ego_id: int) -> InsightTag:
    """First-match classification of what went wrong for the ego."""
    if metrics.safety_violation_count == 0 and metrics.success:
        raise NoFailureInTrace("trace has no safety violation or failure")
    if not trace:
        raise NoFailureInTrace("empty trace")

    ego_lanes = _lane_history(trace, ego_id)
    hit = _ego_collision(trace, ego_id)
    if hit is not None:
        at, partner_id = hit
        ego = trace[at].agent(ego_id)
        partner = trace[at].agent(partner_id)
        crossing = False
        try:
            longitudinal_gap(ego, partner, graph)
        except NotLongitudinallyComparable:
            lane = graph.lane(ego.lane_id)
            crossing = partner.lane_id not in (lane.left_neighbor,
                                               lane.right_neighbor)
        if crossing:
            return InsightTag(InsightKind.failure_to_yield,
                              note=f"collision with crossing agent {partner_id}")
        if _changed_lane_recently(ego_lanes, at, 40):
            return InsightTag(InsightKind.unsafe_merge_response,
                              note="ego collided shortly after its own lane change")
        partner_lanes = _lane_history(trace, partner_id)
        if _changed_lane_recently(partner_lanes, at, 60):
            return InsightTag(InsightKind.tailgating_under_cutin,
                              note=f"agent {partner_id} cut in before the collision")
        return InsightTag(InsightKind.late_braking_at_intersection,
                          note="rear collision with a slower leader")

    # no collision: grade the closest call
    worst_i, worst_ttc = 0, math.inf
    for i, world in enumerate(trace):
        t = min_ttc(world, graph, ego_id)
        if t < worst_ttc:
            worst_i, worst_ttc = i, t
    if worst_ttc < 1.0:
        if _changed_lane_recently(ego_lanes, worst_i, 40):
            return InsightTag(InsightKind.unsafe_merge_response,
                              note=f"TTC {worst_ttc:.2f}s right after a lane change")
        return InsightTag(InsightKind.late_braking_at_intersection,
                          note=f"TTC dropped to {worst_ttc:.2f}s behind the leader")
    return InsightTag(InsightKind.late_braking_at_intersection,
                      note="unclassified longitudinal failure")


# --- candidate realization ------------------------------------------------------


def _ego_seed(base: ScenarioSpec) -> AgentSeed:
    ego_id = base.ego_id()
    for a in base.agents:
        if a.agent_id == ego_id:
            return a
    raise CurriculumError(f"ego agent {ego_id} missing from scenario")


def _clamp_lane(graph: LaneGraph, lane: int, s: float) -> float:
    return min(max(s, 0.0), graph.length(lane))


def _braking_speeds(v0: float, decel: float, n: int, start: int,
                    dt: float) -> list[float]:
    out = []
    v = v0
    for t in range(n):
        out.append(v)
        if t >= start:
            v = max(0.0, v - decel * dt)
    return out


def realize_candidate(family: CandidateFamily, base: ScenarioSpec, *,
                      trigger_gap: float, lateral_offset: float = 0.0,
                      decel: float = 0.0, start_tick: int = 0) -> BVCandidate:
    """Build the full per-tick (lane, s, v) trajectory for one candidate.

    Cut-in assumes the neighbor lane runs parallel with a shared arc-length
    origin, which holds for the generated maps this module targets.
    """
    graph = base.graph
    ego = _ego_seed(base)
    n = base.max_ticks + 1
    dt = base.dt
    if not 0 <= start_tick < base.max_ticks:
        raise InfeasibleCandidate(f"start_tick {start_tick} outside episode")

    if family is CandidateFamily.lead_brake:
        speeds = _braking_speeds(ego.v, decel, n, start_tick, dt)
        rows, s = [], ego.s + trigger_gap
        for t in range(n):
            rows.append((t, ego.lane_id, _clamp_lane(graph, ego.lane_id, s),
                         speeds[t]))
            s += speeds[t] * dt
        w0, w1 = start_tick, min(start_tick + WINDOW_TICKS, base.max_ticks)

    elif family is CandidateFamily.cut_in:
        lane = graph.lane(ego.lane_id)
        side = lane.left_neighbor if lateral_offset >= 0 else lane.right_neighbor
        if side is None:
            side = lane.right_neighbor if lateral_offset >= 0 else lane.left_neighbor
        if side is None:
            raise InfeasibleCandidate("cut_in needs a neighbor lane")
        speeds = _braking_speeds(ego.v, decel, n, start_tick, dt)
        # positioned so the swap lands trigger_gap ahead of the projected ego
        s_at_start = ego.s + ego.v * start_tick * dt + trigger_gap
        s = s_at_start - sum(speeds[t] * dt for t in range(start_tick))
        rows = []
        for t in range(n):
            lane_t = side if t < start_tick else ego.lane_id
            rows.append((t, lane_t, _clamp_lane(graph, lane_t, s), speeds[t]))
            s += speeds[t] * dt
        w0, w1 = start_tick, min(start_tick + WINDOW_TICKS, base.max_ticks)

    else:  # cross_path
        cross = None
        ego_lane = graph.lane(ego.lane_id)
        for lid in sorted(graph.lanes):
            if lid == ego.lane_id:
                continue
            if lid in (ego_lane.left_neighbor, ego_lane.right_neighbor):
                continue
            if lid in graph.successors(ego.lane_id) or ego.lane_id in graph.successors(lid):
                continue
            cross = lid
            break
        if cross is None:
            raise InfeasibleCandidate("cross_path needs an unconnected lane")
        s_e, s_c = _conflict_point(graph, ego.lane_id, cross)
        if s_e is None:
            raise InfeasibleCandidate("lanes never come within conflict range")
        if ego.v <= 0:
            raise InfeasibleCandidate("ego at rest: no arrival time to target")
        tau_ego = (s_e - ego.s) / ego.v
        tau_bv = tau_ego - trigger_gap / ego.v
        v_bv = ego.v
        rows = []
        for t in range(n):
            s = s_c + v_bv * (t * dt - tau_bv)
            rows.append((t, cross, _clamp_lane(graph, cross, s), v_bv))
        mid = int(tau_ego / dt)
        w0 = max(0, mid - WINDOW_TICKS // 3)
        w1 = min(mid + WINDOW_TICKS, base.max_ticks)

    return BVCandidate(family=family, trigger_gap=trigger_gap,
                       lateral_offset=lateral_offset, decel=decel,
                       start_tick=start_tick, trajectory=tuple(rows),
                       window_start=w0, window_end=w1)


def _conflict_point(graph: LaneGraph, lane_a: int,
                    lane_b: int) -> tuple[float | None, float | None]:
    """Arc positions of the nearest approach between two lane centerlines."""
    pa, pb = graph.polyline(lane_a), graph.polyline(lane_b)
    step = 2.0
    best = (None, None, 4.0)  # conflict only if lanes come within 4 m
    sa = 0.0
    while sa <= pa.length:
        xa, ya = pa.point_at(sa)
        sb = 0.0
        while sb <= pb.length:
            xb, yb = pb.point_at(sb)
            d = math.hypot(xa - xb, ya - yb)
            if d < best[2]:
                best = (sa, sb, d)
            sb += step
        sa += step
    return best[0], best[1]


def candidate_grid(base: ScenarioSpec,
                   families: Sequence[CandidateFamily] = (CandidateFamily.lead_brake,),
                   trigger_gaps: Sequence[float] = (15.0, 25.0, 35.0),
                   decels: Sequence[float] = (2.0, 4.0, 6.0),
                   start_ticks: Sequence[int] = (40,),
                   lateral_offset: float = 0.0) -> list[BVCandidate]:
    """Cartesian parameter grid, realized; infeasible combinations dropped."""
    out = []
    for family in families:
        for gap in trigger_gaps:
            for decel in decels:
                for start in start_ticks:
                    try:
                        out.append(realize_candidate(
                            family, base, trigger_gap=gap,
                            lateral_offset=lateral_offset, decel=decel,
                            start_tick=start))
                    except InfeasibleCandidate:
                        continue
    return out


def without_scripted_agents(base: ScenarioSpec) -> ScenarioSpec:
    """Copy of the scenario minus scripted agents and their tracks.

    Scoring injects each candidate as the sole scripted disturbance; a base
    that still carries the scripted actor behind the mined failure would
    pre-empt every candidate's interaction window.
    """
    keep = [a for a in base.agents if a.kind is not AgentKind.scripted_replay]
    if len(keep) == len(base.agents):
        return base
    kept_ids = {a.agent_id for a in keep}
    scripts = {aid: trk for aid, trk in base.scripts.items() if aid in kept_ids}
    return replace(base, agents=keep, scripts=scripts)


_FAMILIES_BY_INSIGHT: dict[InsightKind, tuple[CandidateFamily, ...]] = {
    InsightKind.late_braking_at_intersection: (CandidateFamily.lead_brake,),
    InsightKind.tailgating_under_cutin: (CandidateFamily.cut_in,
                                         CandidateFamily.lead_brake),
    InsightKind.unsafe_merge_response: (CandidateFamily.cut_in,),
    InsightKind.failure_to_yield: (CandidateFamily.cross_path,
                                   CandidateFamily.lead_brake),
}


def families_for(kind: InsightKind) -> tuple[CandidateFamily, ...]:
    """Candidate families worth enumerating for one insight kind."""
    return _FAMILIES_BY_INSIGHT[kind]


# --- scoring -------------------------------------------------------------------

RolloutEngine = Callable[[ScenarioSpec, int], EpisodeResult]


def default_engine(overrides=None) -> RolloutEngine:
    def engine(scenario: ScenarioSpec, seed: int) -> EpisodeResult:
        run = replace(scenario, seed=seed)
        return run_episode(run, controllers=build_controllers(run, overrides))
    return engine


def _feasible(c: BVCandidate, dt: float) -> bool:
    rows = c.trajectory
    for t in range(len(rows) - 1):
        v0, v1 = rows[t][3], rows[t + 1][3]
        if v0 < 0 or v1 < 0:
            return False
        if rows[t][1] == rows[t + 1][1] and abs((v1 - v0) / dt) > A_LIMIT + 1e-9:
            return False
    return True


def _mean_abs_jerk(c: BVCandidate, dt: float) -> float:
    rows = c.trajectory
    if len(rows) < 3:
        return 0.0
    accels = [(rows[t + 1][3] - rows[t][3]) / dt for t in range(len(rows) - 1)]
    jerks = [abs((accels[t + 1] - accels[t]) / dt) for t in range(len(accels) - 1)]
    return math.fsum(jerks) / len(jerks)


def _band(x: float, lo: float, hi: float) -> float:
    """1 inside [lo, hi], linear falloff over one band-width outside."""
    if not math.isfinite(x):
        return 0.0
    width = hi - lo
    if width <= 0:
        return 1.0 if x == lo else 0.0
    if x < lo:
        return max(0.0, 1.0 - (lo - x) / width)
    if x > hi:
        return max(0.0, 1.0 - (x - hi) / width)
    return 1.0


@dataclass(frozen=True, slots=True)
class _RolloutFeatures:
    min_ttc: float
    brake_onset: int | None
    yielded: bool
    collided: bool
    survived_window: bool


def _rollout_features(result: EpisodeResult, graph: LaneGraph, ego_id: int,
                      c: BVCandidate) -> _RolloutFeatures:
    w0 = min(c.window_start, len(result.states) - 1)
    w1 = min(c.window_end, len(result.states) - 1)
    window = result.states[w0:w1 + 1]
    ttc = min((min_ttc(w, graph, ego_id) for w in window), default=math.inf)
    onset = None
    for w in window:
        if w.agent(ego_id).a <= BRAKE_ONSET_A:
            onset = w.tick
            break
    v_start = window[0].agent(ego_id).v if window else 0.0
    yielded = any(w.agent(ego_id).v <= v_start - YIELD_DROP for w in window)
    collided = any(w.collisions_this_tick for w in window)
    survived = len(result.states) - 1 >= c.window_end and not collided
    return _RolloutFeatures(min_ttc=ttc, brake_onset=onset, yielded=yielded,
                            collided=collided, survived_window=survived)


def _alignment(kind: InsightKind, c: BVCandidate, f: _RolloutFeatures) -> float:
    """Graded tag-signature match; rule table version ALIGNMENT_VERSION."""
    def fam(preferred: CandidateFamily) -> float:
        return 1.0 if c.family is preferred else 0.2

    if kind is InsightKind.late_braking_at_intersection:
        onset = 1.0 if f.brake_onset is not None else 0.1
        return fam(CandidateFamily.lead_brake) * _band(f.min_ttc, 0.3, 2.5) * onset
    if kind is InsightKind.tailgating_under_cutin:
        return fam(CandidateFamily.cut_in) * _band(f.min_ttc, 0.3, 2.0)
    if kind is InsightKind.unsafe_merge_response:
        yielded = 1.0 if f.yielded else 0.3
        return fam(CandidateFamily.cut_in) * _band(f.min_ttc, 0.5, 3.0) * yielded
    # failure_to_yield
    yielded = 0.2 if f.yielded else 1.0
    return fam(CandidateFamily.cross_path) * _band(f.min_ttc, 0.0, 2.5) * yielded


def score_candidate(c: BVCandidate, insight: InsightTag, engine: RolloutEngine,
                    base: ScenarioSpec, k: int = 5) -> CandidateScore:
    """Prior, response likelihood, and alignment for one candidate over k rollouts."""
    if k <= 0:
        raise ValueError("k must be positive")
    feasible = _feasible(c, base.dt)
    smooth = 1.0 - min(1.0, _mean_abs_jerk(c, base.dt) / JERK_REF)
    prior = smooth * (1.0 if feasible else 0.0)
    if prior == 0.0:
        return CandidateScore(prior=0.0, response_likelihood=0.0, alignment=0.0)

    scenario = emit_scenario(base, c)
    ego_id = base.ego_id()
    completed = 0
    align_sum = 0.0
    for i in range(k):
        result = engine(scenario, derive_seed(base.seed, ROLLOUT_SALT, i))
        feats = _rollout_features(result, base.graph, ego_id, c)
        if feats.survived_window:
            completed += 1
        align_sum += _alignment(insight.kind, c, feats)
    return CandidateScore(prior=prior, response_likelihood=completed / k,
                          alignment=align_sum / k)


def score_grid(grid: Sequence[BVCandidate], insight: InsightTag,
               engine: RolloutEngine, base: ScenarioSpec,
               k: int = 5) -> list[CandidateScore]:
    return [score_candidate(c, insight, engine, base, k) for c in grid]


def optimize(grid: Sequence[BVCandidate], insight: InsightTag,
             engine: RolloutEngine, base: ScenarioSpec,
             k: int = 5) -> BVCandidate:
    """Exhaustive argmax of total score; ties keep the lowest grid index."""
    if not grid:
        raise EmptyGrid("no candidates")
    scores = score_grid(grid, insight, engine, base, k)
    best_i = 0
    for i in range(1, len(grid)):
        if scores[i].total > scores[best_i].total:
            best_i = i
    assert all(scores[best_i].total >= s.total for s in scores)
    return grid[best_i]


# --- emission --------------------------------------------------------------------


def emit_scenario(base: ScenarioSpec, winner: BVCandidate,
                  bv_agent_id: int | None = None) -> ScenarioSpec:
    """New scenario with the winning background vehicle scripted in."""
    taken = {a.agent_id for a in base.agents}
    if bv_agent_id is None:
        bv_agent_id = max(taken) + 1
    elif bv_agent_id in taken:
        raise SpecConflict(f"agent id {bv_agent_id} already in scenario")
    first = winner.trajectory[0]
    bv = AgentSeed(agent_id=bv_agent_id, kind=AgentKind.scripted_replay,
                   lane_id=first[1], s=first[2], v=first[3])
    rows = [(lane, s, v) for _, lane, s, v in winner.trajectory]
    scripts = dict(base.scripts)
    scripts[bv_agent_id] = ScriptTrack(rows)
    return replace(base,
                   name=f"{base.name}+{winner.family.value}",
                   agents=[*base.agents, bv],
                   scripts=scripts)


def write_batch(out_dir: str, base: ScenarioSpec, insight: InsightTag,
                grid: Sequence[BVCandidate], scores: Sequence[CandidateScore],
                winner_index: int) -> str:
    """Scenario file per candidate plus a manifest of all three factors."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, (c, s) in enumerate(zip(grid, scores)):
        fname = f"candidate_{i:03d}.json"
        save_scenario(emit_scenario(base, c), os.path.join(out_dir, fname))
        entries.append({
            "index": i,
            "file": fname,
            "family": c.family.value,
            "trigger_gap": c.trigger_gap,
            "decel": c.decel,
            "start_tick": c.start_tick,
            "prior": s.prior,
            "response_likelihood": s.response_likelihood,
            "alignment": s.alignment,
            "total": s.total,
        })
    manifest = {
        "v": 1,
        "alignment_version": ALIGNMENT_VERSION,
        "insight": {"kind": insight.kind.value, "note": insight.note},
        "winner_index": winner_index,
        "candidates": entries,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
