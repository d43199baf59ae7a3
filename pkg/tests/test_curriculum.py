"""Failure-insight mining, candidate realization, scoring, and batch emission."""

import json
import math

import pytest

from conftest import make_agent, make_world, straight_lane
from skylite.controllers import run_episode
from skylite.curriculum import (
    ALIGNMENT_VERSION,
    ROLLOUT_SALT,
    WINDOW_TICKS,
    BVCandidate,
    CandidateFamily,
    CandidateScore,
    EmptyGrid,
    InfeasibleCandidate,
    InsightKind,
    NoFailureInTrace,
    SpecConflict,
    candidate_grid,
    default_engine,
    derive_insight,
    emit_scenario,
    families_for,
    optimize,
    realize_candidate,
    score_candidate,
    score_grid,
    without_scripted_agents,
    write_batch,
)
from skylite.scenario import AgentSeed, ScenarioSpec, load_scenario
from skylite.seeding import derive_seed
from skylite.world import (
    AgentKind,
    LaneGraph,
    MetricsReport,
    ScriptTrack,
    episode_metrics,
)

DT = 0.05


def metrics_for(trace, graph, ego_id=0):
    return episode_metrics(trace, graph, ego_id=ego_id,
                           route_completion_s=1e9, dt=DT)


def two_lane():
    return LaneGraph(
        [straight_lane(0, left=1), straight_lane(1, y=3.5, right=0)], [])


# --- insight derivation over hand-labeled traces -------------------------------


def trace_constant(agents_by_tick):
    """agents_by_tick: list of (tick, [agents], collisions)."""
    return [make_world(*agents, tick=t, sim_time=t * DT, collisions=coll)
            for t, agents, coll in agents_by_tick]


def test_crossing_collision_is_failure_to_yield(crossing_graph):
    rows = []
    for t in range(12):
        ego = make_agent(0, lane_id=0, s=80.0 + 2.0 * t, v=20.0)
        partner = make_agent(1, lane_id=1, s=80.0 + 2.0 * t, v=20.0)
        coll = ((0, 1),) if t == 11 else ()
        rows.append((t, [ego, partner], coll))
    trace = trace_constant(rows)
    tag = derive_insight(trace, metrics_for(trace, crossing_graph),
                         crossing_graph, 0)
    assert tag.kind is InsightKind.failure_to_yield
    assert "crossing" in tag.note


def test_ego_recent_lane_change_is_unsafe_merge():
    graph = two_lane()
    rows = []
    for t in range(15):
        ego_lane = 0 if t < 5 else 1
        ego = make_agent(0, lane_id=ego_lane, s=100.0 + t, v=20.0)
        partner = make_agent(1, lane_id=1, s=103.0 + t, v=20.0)
        coll = ((0, 1),) if t == 10 else ()
        rows.append((t, [ego, partner], coll))
    trace = trace_constant(rows)
    tag = derive_insight(trace, metrics_for(trace, graph), graph, 0)
    assert tag.kind is InsightKind.unsafe_merge_response


def test_partner_cut_in_is_tailgating():
    graph = two_lane()
    rows = []
    for t in range(25):
        ego = make_agent(0, lane_id=0, s=100.0 + t, v=20.0)
        partner_lane = 1 if t < 5 else 0
        partner = make_agent(1, lane_id=partner_lane, s=103.0 + t, v=20.0)
        coll = ((0, 1),) if t == 20 else ()
        rows.append((t, [ego, partner], coll))
    trace = trace_constant(rows)
    tag = derive_insight(trace, metrics_for(trace, graph), graph, 0)
    assert tag.kind is InsightKind.tailgating_under_cutin
    assert "cut in" in tag.note


def test_plain_rear_end_is_late_braking(straight_graph):
    rows = []
    for t in range(10):
        ego = make_agent(0, lane_id=0, s=100.0 + 2.0 * t, v=20.0)
        lead = make_agent(1, lane_id=0, s=110.0 + t, v=10.0)
        coll = ((0, 1),) if t == 9 else ()
        rows.append((t, [ego, lead], coll))
    trace = trace_constant(rows)
    tag = derive_insight(trace, metrics_for(trace, straight_graph),
                         straight_graph, 0)
    assert tag.kind is InsightKind.late_braking_at_intersection
    assert "rear" in tag.note


def test_crossing_rule_wins_over_merge_rule(crossing_graph):
    # Ego also changed lanes recently, but a crossing partner classifies first.
    rows = []
    for t in range(12):
        ego_lane = 1 if t < 3 else 0
        ego = make_agent(0, lane_id=ego_lane, s=90.0 + t, v=20.0)
        partner = make_agent(1, lane_id=1 if ego_lane == 0 else 0,
                             s=90.0 + t, v=20.0)
        coll = ((0, 1),) if t == 11 else ()
        rows.append((t, [ego, partner], coll))
    trace = trace_constant(rows)
    tag = derive_insight(trace, metrics_for(trace, crossing_graph),
                         crossing_graph, 0)
    assert tag.kind is InsightKind.failure_to_yield


def test_near_miss_after_lane_change_is_unsafe_merge():
    graph = two_lane()
    rows = []
    for t in range(20):
        ego_lane = 0 if t < 8 else 1
        # At t=10 the ego sits 10 m behind a much slower leader: TTC < 1.
        if t == 10:
            ego = make_agent(0, lane_id=ego_lane, s=100.0, v=20.0)
            lead = make_agent(1, lane_id=1, s=110.0, v=5.0)
        else:
            ego = make_agent(0, lane_id=ego_lane, s=50.0 + t, v=10.0)
            lead = make_agent(1, lane_id=1, s=150.0 + t, v=10.0)
        rows.append((t, [ego, lead], ()))
    trace = trace_constant(rows)
    tag = derive_insight(trace, metrics_for(trace, graph), graph, 0)
    assert tag.kind is InsightKind.unsafe_merge_response
    assert "TTC" in tag.note


def test_near_miss_without_lane_change_is_late_braking(straight_graph):
    rows = []
    for t in range(20):
        if t == 12:
            ego = make_agent(0, lane_id=0, s=100.0, v=20.0)
            lead = make_agent(1, lane_id=0, s=110.0, v=5.0)
        else:
            ego = make_agent(0, lane_id=0, s=50.0 + t, v=10.0)
            lead = make_agent(1, lane_id=0, s=150.0 + t, v=10.0)
        rows.append((t, [ego, lead], ()))
    trace = trace_constant(rows)
    tag = derive_insight(trace, metrics_for(trace, straight_graph),
                         straight_graph, 0)
    assert tag.kind is InsightKind.late_braking_at_intersection
    assert "TTC" in tag.note


def test_failed_run_without_close_call_still_classifies(straight_graph):
    rows = [(t, [make_agent(0, lane_id=0, s=10.0 + t, v=10.0)], ())
            for t in range(10)]
    trace = trace_constant(rows)
    report = metrics_for(trace, straight_graph)   # incomplete -> not a success
    assert not report.success
    tag = derive_insight(trace, report, straight_graph, 0)
    assert tag.kind is InsightKind.late_braking_at_intersection
    assert tag.note == "unclassified longitudinal failure"


def test_clean_successful_trace_raises(straight_graph):
    rows = [(t, [make_agent(0, lane_id=0, s=10.0 + 2.0 * t, v=40.0)], ())
            for t in range(10)]
    trace = trace_constant(rows)
    report = episode_metrics(trace, straight_graph, ego_id=0,
                             route_completion_s=5.0, dt=DT)
    assert report.success
    with pytest.raises(NoFailureInTrace):
        derive_insight(trace, report, straight_graph, 0)


def test_empty_trace_raises(straight_graph):
    report = MetricsReport(safety_violation_count=1, success=False,
                           route_completion=0.0, traveled_distance=0.0,
                           average_speed=0.0, min_ttc=math.inf,
                           disturbance_rate=0.0, sample_count=0)
    with pytest.raises(NoFailureInTrace):
        derive_insight([], report, straight_graph, 0)


def test_families_cover_every_insight_kind():
    for kind in InsightKind:
        fams = families_for(kind)
        assert fams
        assert all(isinstance(f, CandidateFamily) for f in fams)
    assert families_for(InsightKind.failure_to_yield)[0] \
        is CandidateFamily.cross_path
    assert families_for(InsightKind.tailgating_under_cutin)[0] \
        is CandidateFamily.cut_in


# --- candidate realization ------------------------------------------------------


def lead_brake_base(max_ticks=60, v=20.0, lanes=1):
    if lanes == 1:
        graph = LaneGraph([straight_lane()], [])
    else:
        graph = two_lane()
    return ScenarioSpec(
        name="mine", graph=graph,
        agents=[AgentSeed(agent_id=0, kind=AgentKind.policy_driven,
                          lane_id=0, s=0.0, v=v)],
        seed=11, dt=DT, max_ticks=max_ticks)


def test_lead_brake_trajectory_matches_reference():
    base = lead_brake_base()
    c = realize_candidate(CandidateFamily.lead_brake, base,
                          trigger_gap=30.0, decel=4.0, start_tick=10)
    assert len(c.trajectory) == base.max_ticks + 1
    assert c.window_start == 10
    assert c.window_end == min(10 + WINDOW_TICKS, base.max_ticks)
    # Independent reconstruction: hold v until start_tick, then ramp down.
    v, s = 20.0, 30.0
    for t, (tick, lane, s_got, v_got) in enumerate(c.trajectory):
        assert tick == t and lane == 0
        assert s_got == pytest.approx(s, abs=1e-12)
        assert v_got == pytest.approx(v, abs=1e-12)
        s += v * DT
        if t >= 10:
            v = max(0.0, v - 4.0 * DT)


def test_lead_brake_speed_never_negative_under_heavy_decel():
    base = lead_brake_base(max_ticks=300)
    c = realize_candidate(CandidateFamily.lead_brake, base,
                          trigger_gap=20.0, decel=6.0, start_tick=5)
    assert all(v >= 0.0 for _, _, _, v in c.trajectory)
    assert c.trajectory[-1][3] == 0.0


def test_cut_in_switches_lane_at_start_tick():
    base = lead_brake_base(lanes=2)
    start = 12
    c = realize_candidate(CandidateFamily.cut_in, base,
                          trigger_gap=25.0, decel=2.0, start_tick=start)
    lanes = [lane for _, lane, _, _ in c.trajectory]
    assert set(lanes[:start]) == {1}     # neighbor lane before the swap
    assert set(lanes[start:]) == {0}
    # The swap lands trigger_gap ahead of the ego's constant-speed projection.
    s_at_start = c.trajectory[start][2]
    assert s_at_start == pytest.approx(0.0 + 20.0 * start * DT + 25.0)


def test_cut_in_requires_a_neighbor_lane():
    with pytest.raises(InfeasibleCandidate):
        realize_candidate(CandidateFamily.cut_in, lead_brake_base(lanes=1),
                          trigger_gap=20.0)


def test_cross_path_targets_conflict_point(crossing_graph):
    base = ScenarioSpec(
        name="crossing", graph=crossing_graph,
        agents=[AgentSeed(agent_id=0, kind=AgentKind.policy_driven,
                          lane_id=0, s=10.0, v=20.0)],
        seed=2, dt=DT, max_ticks=120)
    c = realize_candidate(CandidateFamily.cross_path, base, trigger_gap=0.0)
    # Ego reaches the conflict (s=100 on lane 0) at tau = 90/20 = 4.5 s; with
    # zero trigger gap the crossing vehicle arrives simultaneously.
    tau_tick = int(4.5 / DT)
    _, lane, s, v = c.trajectory[tau_tick]
    assert lane == 1
    assert v == 20.0
    assert s == pytest.approx(100.0, abs=2.5)   # 2 m conflict-scan grid
    assert c.window_start <= tau_tick <= c.window_end


def test_cross_path_needs_an_unconnected_lane():
    with pytest.raises(InfeasibleCandidate):
        realize_candidate(CandidateFamily.cross_path,
                          lead_brake_base(lanes=2), trigger_gap=10.0)


def test_start_tick_bounds_checked():
    base = lead_brake_base(max_ticks=50)
    with pytest.raises(InfeasibleCandidate):
        realize_candidate(CandidateFamily.lead_brake, base, trigger_gap=10.0,
                          start_tick=50)
    with pytest.raises(InfeasibleCandidate):
        realize_candidate(CandidateFamily.lead_brake, base, trigger_gap=10.0,
                          start_tick=-1)


def test_candidate_grid_enumerates_cartesian_product():
    base = lead_brake_base()
    grid = candidate_grid(base, trigger_gaps=(15.0, 25.0), decels=(2.0, 4.0),
                          start_ticks=(10, 20))
    assert len(grid) == 8
    combos = {(c.trigger_gap, c.decel, c.start_tick) for c in grid}
    assert combos == {(g, d, s) for g in (15.0, 25.0) for d in (2.0, 4.0)
                      for s in (10, 20)}


def test_candidate_grid_drops_infeasible_families():
    base = lead_brake_base(lanes=1)
    grid = candidate_grid(base, families=(CandidateFamily.lead_brake,
                                          CandidateFamily.cut_in),
                          trigger_gaps=(20.0,), decels=(2.0,),
                          start_ticks=(10,))
    assert [c.family for c in grid] == [CandidateFamily.lead_brake]


# --- scoring --------------------------------------------------------------------


LATE = None  # set in fixture-free helper below


def late_braking_tag():
    from skylite.curriculum import InsightTag
    return InsightTag(InsightKind.late_braking_at_intersection, note="test")


def test_infeasible_decel_zeroes_prior_without_rollouts():
    base = lead_brake_base()
    c = realize_candidate(CandidateFamily.lead_brake, base, trigger_gap=20.0,
                          decel=12.0, start_tick=10)   # above the accel bound

    def exploding_engine(scenario, seed):
        raise AssertionError("engine must not run for an infeasible candidate")

    score = score_candidate(c, late_braking_tag(), exploding_engine, base)
    assert score == CandidateScore(prior=0.0, response_likelihood=0.0,
                                   alignment=0.0)
    assert score.total == 0.0


def test_rollouts_use_documented_seed_derivation():
    base = lead_brake_base()
    c = realize_candidate(CandidateFamily.lead_brake, base, trigger_gap=25.0,
                          decel=2.0, start_tick=10)
    seen = []
    inner = default_engine()

    def recording_engine(scenario, seed):
        seen.append(seed)
        return inner(scenario, seed)

    score_candidate(c, late_braking_tag(), recording_engine, base, k=4)
    assert seen == [derive_seed(base.seed, ROLLOUT_SALT, i) for i in range(4)]


def test_completing_rollouts_score_full_response():
    base = lead_brake_base()
    c = realize_candidate(CandidateFamily.lead_brake, base, trigger_gap=30.0,
                          decel=2.0, start_tick=10)
    score = score_candidate(c, late_braking_tag(), default_engine(), base,
                            k=1)
    assert score.response_likelihood == 1.0
    assert 0.0 < score.prior <= 1.0
    assert 0.0 <= score.alignment <= 1.0


def test_score_factors_bounded_and_total_is_product():
    base = lead_brake_base()
    grid = candidate_grid(base, trigger_gaps=(15.0, 35.0), decels=(2.0, 6.0))
    scores = score_grid(grid, late_braking_tag(), default_engine(), base,
                        k=2)
    for s in scores:
        assert 0.0 <= s.prior <= 1.0
        assert 0.0 <= s.response_likelihood <= 1.0
        assert 0.0 <= s.alignment <= 1.0
        assert s.total == s.prior * s.response_likelihood * s.alignment


def test_k_must_be_positive():
    base = lead_brake_base()
    c = realize_candidate(CandidateFamily.lead_brake, base, trigger_gap=20.0)
    with pytest.raises(ValueError):
        score_candidate(c, late_braking_tag(), default_engine(), base, k=0)


def test_optimize_matches_external_argmax():
    base = lead_brake_base()
    grid = candidate_grid(base, trigger_gaps=(15.0, 25.0, 35.0),
                          decels=(2.0, 4.0, 6.0))
    engine = default_engine()
    tag = late_braking_tag()
    winner = optimize(grid, tag, engine, base, k=2)
    scores = score_grid(grid, tag, engine, base, k=2)
    best = max(range(len(grid)), key=lambda i: (scores[i].total, -i))
    assert winner is grid[best]


def test_optimize_tie_keeps_lowest_index():
    base = lead_brake_base()
    grid = candidate_grid(base, trigger_gaps=(15.0, 25.0), decels=(12.0,))

    def never_called(scenario, seed):
        raise AssertionError("all candidates are infeasible")

    # Every candidate scores 0: the earliest one must win.
    winner = optimize(grid, late_braking_tag(), never_called, base)
    assert winner is grid[0]


def test_optimize_rejects_empty_grid():
    base = lead_brake_base()
    with pytest.raises(EmptyGrid):
        optimize([], late_braking_tag(), default_engine(), base)


# --- emission --------------------------------------------------------------------


def test_emit_scenario_scripts_the_background_vehicle():
    base = lead_brake_base()
    c = realize_candidate(CandidateFamily.lead_brake, base, trigger_gap=30.0,
                          decel=4.0, start_tick=10)
    out = emit_scenario(base, c)
    assert out.name == "mine+lead_brake"
    assert len(out.agents) == 2
    bv = out.agents[-1]
    assert bv.agent_id == 1
    assert bv.kind is AgentKind.scripted_replay
    assert len(base.agents) == 1          # base untouched
    assert 1 not in base.scripts
    # The scripted rows reproduce the candidate trajectory verbatim.
    rows = out.scripts[1].rows
    assert rows == [(lane, s, v) for _, lane, s, v in c.trajectory]


def test_emit_scenario_run_reproduces_trajectory():
    base = lead_brake_base()
    c = realize_candidate(CandidateFamily.lead_brake, base, trigger_gap=30.0,
                          decel=4.0, start_tick=10)
    result = run_episode(emit_scenario(base, c))
    for t, world in enumerate(result.states):
        _, lane, s, v = c.trajectory[t]
        bv = world.agent(1)
        assert (bv.lane_id, bv.s, bv.v) == (lane, s, v)


def test_emitted_cut_in_swaps_lanes_in_simulation():
    base = lead_brake_base(lanes=2)
    start = 12
    c = realize_candidate(CandidateFamily.cut_in, base, trigger_gap=25.0,
                          decel=2.0, start_tick=start)
    result = run_episode(emit_scenario(base, c))
    assert result.states[start - 1].agent(1).lane_id == 1
    assert result.states[start].agent(1).lane_id == 0


def test_emit_scenario_id_conflict():
    base = lead_brake_base()
    c = realize_candidate(CandidateFamily.lead_brake, base, trigger_gap=20.0)
    with pytest.raises(SpecConflict):
        emit_scenario(base, c, bv_agent_id=0)


def test_without_scripted_agents_strips_scripts():
    base = lead_brake_base()
    c = realize_candidate(CandidateFamily.lead_brake, base, trigger_gap=20.0)
    scripted = emit_scenario(base, c)
    clean = without_scripted_agents(scripted)
    assert [a.agent_id for a in clean.agents] == [0]
    assert clean.scripts == {}
    # A scenario with no scripted agents passes through unchanged.
    assert without_scripted_agents(base) is base


def test_write_batch_manifest_and_files(tmp_path):
    base = lead_brake_base()
    grid = candidate_grid(base, trigger_gaps=(15.0, 25.0), decels=(2.0,))
    tag = late_braking_tag()
    engine = default_engine()
    scores = score_grid(grid, tag, engine, base, k=1)
    winner = max(range(len(grid)), key=lambda i: (scores[i].total, -i))
    out = str(tmp_path / "batch")
    manifest_path = write_batch(out, base, tag, grid, scores, winner)

    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    assert manifest["v"] == 1
    assert manifest["alignment_version"] == ALIGNMENT_VERSION == 1
    assert manifest["winner_index"] == winner
    assert manifest["insight"]["kind"] == tag.kind.value
    assert len(manifest["candidates"]) == len(grid)
    for i, entry in enumerate(manifest["candidates"]):
        assert entry["index"] == i
        assert entry["total"] == pytest.approx(scores[i].total)
        assert entry["total"] == pytest.approx(
            entry["prior"] * entry["response_likelihood"] * entry["alignment"])
        spec = load_scenario(str(tmp_path / "batch" / entry["file"]))
        assert spec.agents[-1].kind is AgentKind.scripted_replay
        assert entry["family"] == grid[i].family.value
