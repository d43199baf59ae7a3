"""Per-agent action sources and the single-process episode runner.

A controller turns the current world into one ActionCommand for its agent.
The same runner drives training rollouts, scripted-scenario evaluation, and
the degenerate zero-client host loop, so trajectories agree bit-for-bit
across those paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

from .behavior import IDMParams, MOBILParams, behavior_action, params_from_spec
from .scenario import ScenarioSpec, initial_world
from .world import (
    ActionCommand,
    ActionSource,
    LaneGraph,
    LaneIntent,
    WorldState,
    step,
)


class Controller(Protocol):
    def act(self, world: WorldState, graph: LaneGraph, agent_id: int,
            spec: ScenarioSpec) -> ActionCommand: ...


@dataclass(slots=True)
class BehaviorController:
    """Rule-based car following with optional lane changes."""

    idm: IDMParams = field(default_factory=IDMParams)
    mobil: MOBILParams | None = field(default_factory=MOBILParams)

    def act(self, world: WorldState, graph: LaneGraph, agent_id: int,
            spec: ScenarioSpec) -> ActionCommand:
        return behavior_action(world, graph, agent_id, self.idm, self.mobil)


@dataclass(slots=True)
class HoldController:
    """Keeps current speed and lane; also the placeholder for scripted agents."""

    source: ActionSource = ActionSource.behavior_model

    def act(self, world: WorldState, graph: LaneGraph, agent_id: int,
            spec: ScenarioSpec) -> ActionCommand:
        return ActionCommand(agent_id=agent_id, tick=world.tick, accel=0.0,
                             lane_intent=LaneIntent.keep, source=self.source)


@dataclass(slots=True)
class HumanOverrideController:
    """Held human input while a takeover is active; delegates otherwise.

    The gateway thread flips `active` and updates the held accel/intent;
    reads happen on the simulation thread. Plain attribute writes are atomic
    enough for this hand-off — the sim only ever sees a complete command.
    """

    fallback: Controller
    active: bool = False
    accel: float = 0.0
    intent: LaneIntent = LaneIntent.keep

    def act(self, world: WorldState, graph: LaneGraph, agent_id: int,
            spec: ScenarioSpec) -> ActionCommand:
        if not self.active:
            return self.fallback.act(world, graph, agent_id, spec)
        return ActionCommand(agent_id=agent_id, tick=world.tick, accel=self.accel,
                             lane_intent=self.intent, source=ActionSource.human)

    def set_input(self, accel: float, intent: LaneIntent) -> None:
        self.accel = accel
        self.intent = intent
        self.active = True

    def release(self) -> None:
        self.active = False


def build_controllers(spec: ScenarioSpec,
                      overrides: dict[int, Controller] | None = None,
                      ) -> dict[int, Controller]:
    """One controller per agent from the scenario's controller map.

    `overrides` wins per agent id; "policy" and "external" slots without an
    override fall back to the behavior model so a scenario stays runnable
    before any policy exists.
    """
    idm, mobil = params_from_spec(spec.behavior)
    rule = BehaviorController(idm=idm, mobil=mobil)
    scripted = HoldController()
    out: dict[int, Controller] = {}
    for agent_id, name in spec.controller_map().items():
        if overrides and agent_id in overrides:
            out[agent_id] = overrides[agent_id]
        elif name == "scripted":
            out[agent_id] = scripted
        elif name == "hold":
            out[agent_id] = HoldController()
        else:  # idm, human (pre-takeover), policy/external without override
            out[agent_id] = rule
    return out


@dataclass(slots=True)
class EpisodeResult:
    states: list[WorldState]          # length ticks+1, includes the initial state
    actions: list[tuple[ActionCommand, ...]]  # actions[i] produced states[i+1]
    reason: str                       # max_ticks | collision | route_complete

    @property
    def final(self) -> WorldState:
        return self.states[-1]

    @property
    def ticks(self) -> int:
        return len(self.actions)


def run_episode(spec: ScenarioSpec,
                controllers: dict[int, Controller] | None = None,
                on_tick: Callable[[WorldState, tuple[ActionCommand, ...]], None] | None = None,
                max_ticks: int | None = None) -> EpisodeResult:
    """Run one episode to termination under the scenario's rules.

    Termination: collision (when the scenario says collisions end episodes),
    ego route completion by traveled distance, or the tick budget.
    """
    graph = spec.graph
    ctl = controllers if controllers is not None else build_controllers(spec)
    world = initial_world(spec)
    limit = spec.max_ticks if max_ticks is None else max_ticks
    ego = spec.ego_id()
    goal_s = spec.termination.route_completion_s
    traveled = 0.0

    states = [world]
    actions_log: list[tuple[ActionCommand, ...]] = []
    reason = "max_ticks"
    for _ in range(limit):
        acts = tuple(ctl[ag.agent_id].act(world, graph, ag.agent_id, spec)
                     for ag in world.agents)
        v_before = world.agent(ego).v
        world = step(world, list(acts), graph, spec.dt,
                     scripts=spec.scripts or None, bounds=spec.bounds)
        states.append(world)
        actions_log.append(acts)
        if on_tick is not None:
            on_tick(world, acts)
        # trapezoid matches the integrator's ds = v*dt + a*dt^2/2 exactly
        traveled += 0.5 * (v_before + world.agent(ego).v) * spec.dt
        if world.collisions_this_tick and spec.termination.collision_ends_episode:
            reason = "collision"
            break
        if traveled >= goal_s:
            reason = "route_complete"
            break
    return EpisodeResult(states=states, actions=actions_log, reason=reason)
