"""Takeover-guided policy learning on a discretized driving state.

A mentor (scripted guardian or live human) can reject the agent's sampled
action; trajectories then follow the mixture

    pi_mix(a|s) = pi_AV(a|s) * (1 - I(a|s)) + pi_human(a|s) * F(s)

where I marks rejected actions and F is the agent's total rejected mass.
Three tabular critics track a human-alignment value, expected intervention
cost, and expected traffic disturbance; the policy is the closed-form
softmax maximizer of

    psi*Qhat - alpha*log pi - beta*Q_ex - phi*Q_im.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import SkyliteError
from .behavior import IDMParams, guardian_policy
from .scenario import AgentSeed, ScenarioSpec, Termination, initial_world
from .seeding import DetRng, derive_seed
from .world import (
    ActionCommand,
    ActionSource,
    AgentKind,
    Lane,
    LaneGraph,
    LaneIntent,
    ScriptTrack,
    WorldState,
    follower_of,
    leader_of,
    min_ttc,
    step,
)

_NORM_TOL = 1e-9
_KL_EPS = 1e-6


class UnnormalizedPolicy(SkyliteError):
    pass


class MissingCriticEntry(SkyliteError):
    pass


class DivergedValues(SkyliteError):
    pass


# --- action space ------------------------------------------------------------

_DEFAULT_LEVELS = (-6.0, -3.0, -1.5, 0.0, 1.0, 2.0, 3.0)
_INTENTS = (LaneIntent.keep, LaneIntent.left, LaneIntent.right)


@dataclass(frozen=True)
class DiscreteActionSet:
    """Ordered (accel, lane_intent) grid the policy distributes over."""

    actions: tuple[tuple[float, LaneIntent], ...] = tuple(
        (lvl, intent) for lvl in _DEFAULT_LEVELS for intent in _INTENTS)

    def __post_init__(self) -> None:
        if not self.actions:
            raise ValueError("empty action set")
        for accel, _ in self.actions:
            if not -8.0 <= accel <= 4.0:
                raise ValueError(f"accel level {accel} outside command bounds")

    def __len__(self) -> int:
        return len(self.actions)

    def command(self, index: int, agent_id: int, tick: int,
                source: ActionSource = ActionSource.policy) -> ActionCommand:
        accel, intent = self.actions[index]
        return ActionCommand(agent_id=agent_id, tick=tick, accel=accel,
                             lane_intent=intent, source=source)

    def nearest(self, accel: float, intent: LaneIntent) -> int:
        """Index of the intent-matching action closest in accel (tie: lowest)."""
        best = None
        for i, (lvl, it) in enumerate(self.actions):
            if it != intent:
                continue
            d = abs(lvl - accel)
            if best is None or d < best[0]:
                best = (d, i)
        if best is None:
            raise ValueError(f"no action with intent {intent!r}")
        return best[1]


# --- mixed behavior policy ---------------------------------------------------


@dataclass(frozen=True)
class MixedPolicyContext:
    human_active: bool
    human_action: ActionCommand | None
    eta: float
    admissible: frozenset[int]          # indices the mentor would accept
    rejection_mass: float               # F: agent mass on rejected actions
    indicator: tuple[int, ...]          # I(a): 1 iff a rejected while active


def _check_dist(p: Sequence[float], name: str) -> None:
    total = math.fsum(p)
    if abs(total - 1.0) > _NORM_TOL or any(x < 0 for x in p):
        raise UnnormalizedPolicy(f"{name} sums to {total!r}")


def build_context(pi_av: Sequence[float], human_active: bool,
                  human_action: ActionCommand | None, eta: float,
                  action_set: DiscreteActionSet) -> MixedPolicyContext:
    """Admissible set, per-action rejection indicator, and rejected mass."""
    _check_dist(pi_av, "pi_av")
    n = len(action_set)
    if len(pi_av) != n:
        raise UnnormalizedPolicy(f"distribution length {len(pi_av)} != {n} actions")
    if not human_active or human_action is None:
        return MixedPolicyContext(
            human_active=False, human_action=None, eta=eta,
            admissible=frozenset(range(n)), rejection_mass=0.0,
            indicator=(0,) * n)
    admissible = frozenset(
        i for i, (accel, intent) in enumerate(action_set.actions)
        if abs(accel - human_action.accel) <= eta
        and intent == human_action.lane_intent)
    indicator = tuple(0 if i in admissible else 1 for i in range(n))
    rejected = math.fsum(p for i, p in enumerate(pi_av) if indicator[i])
    return MixedPolicyContext(
        human_active=True, human_action=human_action, eta=eta,
        admissible=admissible, rejection_mass=rejected, indicator=indicator)


def mixed_policy(pi_av: Sequence[float], pi_human: Sequence[float],
                 ctx: MixedPolicyContext) -> tuple[float, ...]:
    """The executed-action distribution under possible mentor rejection."""
    _check_dist(pi_av, "pi_av")
    _check_dist(pi_human, "pi_human")
    if len(pi_av) != len(pi_human) or len(pi_av) != len(ctx.indicator):
        raise UnnormalizedPolicy("distribution/context length mismatch")
    f = ctx.rejection_mass
    return tuple(p * (1 - ind) + q * f
                 for p, q, ind in zip(pi_av, pi_human, ctx.indicator))


def discrepancy(pi_av: Sequence[Sequence[float]],
                pi_human: Sequence[Sequence[float]],
                weights: Sequence[float]) -> float:
    """Weighted KL(pi_human || pi_av), epsilon-smoothed against zeros."""
    if len(pi_av) != len(pi_human) or len(pi_av) != len(weights):
        raise ValueError("per-state tables and weights must align")
    wsum = math.fsum(weights)
    if wsum <= 0:
        raise ValueError("weights must have positive mass")
    total = 0.0
    for p_av, p_h, w in zip(pi_av, pi_human, weights):
        if w == 0:
            continue
        n = len(p_av)
        kl = 0.0
        for a in range(n):
            ph = (p_h[a] + _KL_EPS) / (1.0 + n * _KL_EPS)
            pa = (p_av[a] + _KL_EPS) / (1.0 + n * _KL_EPS)
            kl += ph * math.log(ph / pa)
        total += (w / wsum) * kl
    return total


# --- critics and objective ---------------------------------------------------


@dataclass(frozen=True)
class StateGrid:
    """Discretization over (leader gap, ego speed, min TTC)."""

    gap_bins: int = 12
    v_bins: int = 10
    ttc_bins: int = 8
    gap_max: float = 120.0
    v_max: float = 40.0
    ttc_max: float = 16.0

    @property
    def n_states(self) -> int:
        return self.gap_bins * self.v_bins * self.ttc_bins

    @staticmethod
    def _bin(x: float, width: float, n: int) -> int:
        if not math.isfinite(x):
            return n - 1
        i = int(x / width)
        return 0 if i < 0 else min(i, n - 1)

    def index(self, gap: float, v: float, ttc: float) -> int:
        g = self._bin(gap, self.gap_max / self.gap_bins, self.gap_bins)
        s = self._bin(v, self.v_max / self.v_bins, self.v_bins)
        t = self._bin(ttc, self.ttc_max / self.ttc_bins, self.ttc_bins)
        return (g * self.v_bins + s) * self.ttc_bins + t


def observe(world: WorldState, graph: LaneGraph, agent_id: int,
            grid: StateGrid) -> int:
    ego = world.agent(agent_id)
    _, gap = leader_of(world, graph, agent_id)
    return grid.index(gap, ego.v, min_ttc(world, graph, agent_id))


@dataclass
class CriticSet:
    """Tabular critics, one row per discretized state."""

    q_hat: np.ndarray   # human-aligned value proxy
    q_ex: np.ndarray    # expected intervention cost
    q_im: np.ndarray    # expected traffic-disturbance cost

    @classmethod
    def zeros(cls, grid: StateGrid, action_set: DiscreteActionSet) -> "CriticSet":
        shape = (grid.n_states, len(action_set))
        return cls(q_hat=np.zeros(shape), q_ex=np.zeros(shape),
                   q_im=np.zeros(shape))

    def check_finite(self, where: str) -> None:
        for name, table in (("q_hat", self.q_hat), ("q_ex", self.q_ex),
                            ("q_im", self.q_im)):
            if not np.isfinite(table).all():
                bad = int(np.count_nonzero(~np.isfinite(table)))
                raise DivergedValues(
                    f"{name} has {bad} non-finite entries ({where}); "
                    f"max|q_hat|={np.nanmax(np.abs(self.q_hat)):.3g} "
                    f"max|q_ex|={np.nanmax(np.abs(self.q_ex)):.3g} "
                    f"max|q_im|={np.nanmax(np.abs(self.q_im)):.3g}")


@dataclass(frozen=True)
class LearningConfig:
    value_weight: float = 1.0        # psi
    entropy_temp: float = 0.2        # alpha, > 0
    intervention_weight: float = 1.0  # beta
    disturbance_weight: float = 0.2  # phi
    learning_rate: float = 0.2
    discount: float = 0.95
    episodes: int = 300
    eta: float = 0.5                 # mentor admissibility radius, m/s^2
    disturbance_decel: float = 3.0   # follower decel beyond this counts as cost
    grid: StateGrid = field(default_factory=StateGrid)
    actions: DiscreteActionSet = field(default_factory=DiscreteActionSet)

    def __post_init__(self) -> None:
        if self.entropy_temp <= 0:
            raise ValueError("entropy_temp must be positive")
        for name in ("value_weight", "intervention_weight", "disturbance_weight"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative")


def _logits(state: int, critics: CriticSet, cfg: LearningConfig) -> np.ndarray:
    if not 0 <= state < critics.q_hat.shape[0]:
        raise MissingCriticEntry(f"state {state} outside critic table")
    return (cfg.value_weight * critics.q_hat[state]
            - cfg.intervention_weight * critics.q_ex[state]
            - cfg.disturbance_weight * critics.q_im[state]) / cfg.entropy_temp


def optimal_policy(state: int, critics: CriticSet,
                   cfg: LearningConfig) -> np.ndarray:
    """Closed-form maximizer of the entropy-regularized objective."""
    z = _logits(state, critics, cfg)
    z = z - z.max()  # shift invariance keeps exp in range
    e = np.exp(z)
    return e / e.sum()


def objective(state: int, action: int, critics: CriticSet,
              pi_av: Sequence[float], cfg: LearningConfig) -> float:
    """Per-sample value the optimal policy maximizes in expectation."""
    if not 0 <= state < critics.q_hat.shape[0]:
        raise MissingCriticEntry(f"state {state} outside critic table")
    if not 0 <= action < critics.q_hat.shape[1]:
        raise MissingCriticEntry(f"action {action} outside critic table")
    p = pi_av[action]
    return (cfg.value_weight * float(critics.q_hat[state, action])
            - cfg.entropy_temp * math.log(p if p > 0 else _KL_EPS)
            - cfg.intervention_weight * float(critics.q_ex[state, action])
            - cfg.disturbance_weight * float(critics.q_im[state, action]))


# --- takeover bookkeeping ----------------------------------------------------


@dataclass(frozen=True)
class TakeoverEvent:
    episode: int
    agent_id: int
    start_tick: int
    end_tick: int  # inclusive


@dataclass(frozen=True)
class PreferencePair:
    """Post-takeover conduct is labeled preferable to what preceded it."""

    episode: int
    pre_ticks: tuple[int, ...]
    post_ticks: tuple[int, ...]
    label: str = "post"


_SEGMENT_W = 20  # ticks of context on each side of a takeover


def _pairs_from_events(events: list[TakeoverEvent],
                       last_tick: int) -> list[PreferencePair]:
    pairs = []
    for ev in events:
        if ev.start_tick > 0:
            lo = max(0, ev.start_tick - _SEGMENT_W)
            pre = tuple(range(lo, ev.start_tick))
        else:
            pre = (0,)  # takeover at the first step: initial state as context
        hi = min(ev.end_tick + _SEGMENT_W, last_tick)
        post = tuple(range(ev.start_tick, hi + 1))
        pairs.append(PreferencePair(episode=ev.episode, pre_ticks=pre,
                                    post_ticks=post))
    return pairs


# --- training ---------------------------------------------------------------

MentorFn = Callable[[WorldState, LaneGraph, int], ActionCommand | None]


def make_guardian(idm: IDMParams | None = None,
                  ttc_threshold: float = 2.0) -> MentorFn:
    """A scripted mentor that brakes the agent whenever TTC gets short."""
    p = idm if idm is not None else IDMParams()

    def mentor(world: WorldState, graph: LaneGraph, agent_id: int):
        return guardian_policy(world, graph, agent_id, p, ttc_threshold)

    return mentor


@dataclass
class TrainResult:
    theta: np.ndarray                 # policy table, n_states x n_actions
    log: list[dict]                   # one record per episode
    pairs: list[PreferencePair]
    events: list[TakeoverEvent]
    critics: CriticSet
    grid: StateGrid
    actions: DiscreteActionSet


def _follower_excess_decel(world: WorldState, graph: LaneGraph, ego: int,
                           threshold: float) -> float:
    follower, gap = follower_of(world, graph, ego, horizon=50.0)
    if follower is None:
        return 0.0
    return max(0.0, -follower.a - threshold)


def train(spec: ScenarioSpec, mentor: MentorFn,
          cfg: LearningConfig | None = None) -> TrainResult:
    """Episodic mentor-in-the-loop tabular learning on one scenario."""
    cfg = cfg if cfg is not None else LearningConfig()
    graph = spec.graph
    ego = spec.ego_id()
    grid, actions = cfg.grid, cfg.actions
    critics = CriticSet.zeros(grid, actions)
    lr, gamma = cfg.learning_rate, cfg.discount
    # Optimistic start for the alignment critic: every action begins at the
    # per-step-max discounted sum, so an action the mentor keeps rejecting
    # cannot stay argmax just because the alternatives were never sampled.
    critics.q_hat[:] = 1.0 / (1.0 - gamma) if gamma < 1.0 else 1.0

    log: list[dict] = []
    events: list[TakeoverEvent] = []
    for episode in range(cfg.episodes):
        rng = DetRng(derive_seed(spec.seed, 0x6D656E74, episode))
        world = initial_world(spec)
        s = observe(world, graph, ego, grid)
        pending: tuple[int, int, float, float, float] | None = None
        interventions = 0
        disturbed = 0
        run_start: int | None = None
        traveled = 0.0
        last_tick = 0
        for _ in range(spec.max_ticks):
            pi_av = optimal_policy(s, critics, cfg)
            a_av = rng.pick(pi_av.tolist())
            if pending is not None:
                ps, pa, r_hat, c_ex, d_im = pending
                critics.q_hat[ps, pa] += lr * (
                    r_hat + gamma * critics.q_hat[s, a_av] - critics.q_hat[ps, pa])
                critics.q_ex[ps, pa] += lr * (
                    c_ex + gamma * critics.q_ex[s, a_av] - critics.q_ex[ps, pa])
                critics.q_im[ps, pa] += lr * (
                    d_im + gamma * critics.q_im[s, a_av] - critics.q_im[ps, pa])

            human_action = mentor(world, graph, ego)
            ctx = build_context(pi_av.tolist(), human_action is not None,
                                human_action, cfg.eta, actions)
            if ctx.human_active and a_av not in ctx.admissible:
                intervened = True
                executed = human_action
            else:
                intervened = False
                executed = actions.command(a_av, ego, world.tick)

            placeholder = [
                ActionCommand(agent_id=ag.agent_id, tick=world.tick, accel=0.0,
                              lane_intent=LaneIntent.keep,
                              source=ActionSource.behavior_model)
                for ag in world.agents if ag.agent_id != ego]
            world = step(world, [executed, *placeholder], graph, spec.dt,
                         scripts=spec.scripts or None, bounds=spec.bounds)
            last_tick = world.tick
            traveled += world.agent(ego).v * spec.dt

            if intervened:
                interventions += 1
                if run_start is None:
                    run_start = world.tick - 1
            elif run_start is not None:
                events.append(TakeoverEvent(episode, ego, run_start,
                                            world.tick - 2))
                run_start = None

            d_im = _follower_excess_decel(world, graph, ego,
                                          cfg.disturbance_decel)
            if d_im > 0:
                disturbed += 1
            pending = (s, a_av, 0.0 if intervened else 1.0,
                       1.0 if intervened else 0.0, d_im)
            s = observe(world, graph, ego, grid)
            if world.collisions_this_tick and spec.termination.collision_ends_episode:
                break

        if pending is not None:  # terminal: no bootstrap
            ps, pa, r_hat, c_ex, d_im = pending
            critics.q_hat[ps, pa] += lr * (r_hat - critics.q_hat[ps, pa])
            critics.q_ex[ps, pa] += lr * (c_ex - critics.q_ex[ps, pa])
            critics.q_im[ps, pa] += lr * (d_im - critics.q_im[ps, pa])
        if run_start is not None:
            events.append(TakeoverEvent(episode, ego, run_start, last_tick - 1))
        critics.check_finite(f"episode {episode}")

        ticks = last_tick
        collided = bool(world.collisions_this_tick)
        log.append({
            "episode": episode,
            "ticks": ticks,
            "interventions": interventions,
            "takeover_rate": interventions / ticks if ticks else 0.0,
            "disturbance_rate": disturbed / ticks if ticks else 0.0,
            "collision": collided,
            "traveled_m": round(traveled, 3),
        })

    theta = np.vstack([optimal_policy(i, critics, cfg)
                       for i in range(grid.n_states)])
    pairs = _pairs_from_events(events, last_tick=max(spec.max_ticks - 1, 0))
    return TrainResult(theta=theta, log=log, pairs=pairs, events=events,
                       critics=critics, grid=grid, actions=actions)


# --- policy persistence -------------------------------------------------------


def save_policy(path: str, result: TrainResult) -> None:
    """Flat binary float64 table behind a length-prefixed JSON header."""
    g, acts = result.grid, result.actions
    header = {
        "v": 1,
        "bins": [g.gap_bins, g.v_bins, g.ttc_bins],
        "ranges": {"gap_max": g.gap_max, "v_max": g.v_max, "ttc_max": g.ttc_max},
        "actions": [[accel, int(intent)] for accel, intent in acts.actions],
        "shape": list(result.theta.shape),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(result.theta, dtype="<f8").tobytes())


def load_policy(path: str) -> tuple[np.ndarray, StateGrid, DiscreteActionSet]:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        table = np.frombuffer(fh.read(), dtype="<f8").reshape(header["shape"])
    gb, vb, tb = header["bins"]
    r = header["ranges"]
    grid = StateGrid(gap_bins=gb, v_bins=vb, ttc_bins=tb,
                     gap_max=r["gap_max"], v_max=r["v_max"], ttc_max=r["ttc_max"])
    actions = DiscreteActionSet(actions=tuple(
        (float(a), LaneIntent(i)) for a, i in header["actions"]))
    return table.copy(), grid, actions


@dataclass(slots=True)
class PolicyController:
    """Greedy controller over a learned policy table."""

    theta: np.ndarray
    grid: StateGrid
    action_set: DiscreteActionSet

    def act(self, world: WorldState, graph: LaneGraph, agent_id: int,
            spec: ScenarioSpec) -> ActionCommand:
        s = observe(world, graph, agent_id, self.grid)
        a = int(np.argmax(self.theta[s]))
        return self.action_set.command(a, agent_id, world.tick)


# --- toy scenario -------------------------------------------------------------


def make_pursuit_spec(seed: int = 0, *, ticks: int = 400,
                      dt: float = 0.05) -> ScenarioSpec:
    """Two vehicles on one straight lane: fast ego behind a steady leader.

    The ego starts 10 m/s faster, so an unmanaged approach drives TTC through
    the guardian's threshold — the canonical mentor-in-the-loop exercise.
    """
    lane = Lane(id=0, centerline=((0.0, 0.0), (900.0, 0.0)), width=3.5,
                speed_limit=30.0)
    graph = LaneGraph(lanes=[lane], connections=[])
    leader_v = 15.0
    rows = [(0, 55.0 + leader_v * dt * t, leader_v) for t in range(ticks + 1)]
    return ScenarioSpec(
        name="pursuit",
        graph=graph,
        agents=[
            AgentSeed(agent_id=0, kind=AgentKind.policy_driven, lane_id=0,
                      s=0.0, d=0.0, v=25.0),
            AgentSeed(agent_id=1, kind=AgentKind.scripted_replay, lane_id=0,
                      s=55.0, d=0.0, v=leader_v),
        ],
        dt=dt,
        max_ticks=ticks,
        seed=seed,
        termination=Termination(collision_ends_episode=True),
        ego_agent_id=0,
        scripts={1: ScriptTrack(rows)},
    )
