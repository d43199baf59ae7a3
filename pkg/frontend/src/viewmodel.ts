/** Accumulates the event stream into the state the dashboard draws from. */

import type {
  ActionRow,
  AgentRow,
  DesyncPayload,
  LaneShape,
  TelemetryEvent,
} from "./protocol.js";
import { parseLaneShapes } from "./protocol.js";

export interface AgentView extends AgentRow {
  action: ActionRow | null;
  inTakeover: boolean;
  colliding: boolean;
}

export class DashboardModel {
  /** Tick of the newest event seen (any kind). */
  tick = -1;
  /** Tick of the last agent_state frame; what the scene actually shows. */
  worldTick = -1;
  framesSeen = 0;
  digest = "";
  scenarioName = "";
  dt = 0;
  lanes: LaneShape[] = [];
  agents: AgentRow[] = [];
  actions: ActionRow[] = [];
  collisions: [number, number][] = [];
  takenOver = new Set<number>();
  desyncs: DesyncPayload[] = [];
  metrics: Record<string, unknown>[] = [];
  /** seq values that broke the +1 contract; live joins set the baseline instead. */
  seqGaps: number[] = [];
  private lastSeq = 0;

  apply(ev: TelemetryEvent): void {
    // A live subscriber joins mid-stream, so the first seq is the baseline;
    // every later one must follow it without a hole.
    if (this.lastSeq !== 0 && ev.seq !== this.lastSeq + 1) {
      this.seqGaps.push(ev.seq);
    }
    this.lastSeq = ev.seq;
    if (ev.tick > this.tick) this.tick = ev.tick;

    switch (ev.kind) {
      case "scenario_loaded":
        this.scenarioName = ev.payload.name;
        this.dt = ev.payload.dt;
        this.lanes = parseLaneShapes(ev.payload.scenario);
        break;
      case "agent_state":
        this.worldTick = ev.tick;
        this.framesSeen += 1;
        this.digest = ev.payload.digest;
        this.agents = ev.payload.agents;
        this.actions = ev.payload.actions;
        this.collisions = ev.payload.collisions;
        break;
      case "takeover_begin":
        this.takenOver.add(ev.payload.agent);
        break;
      case "takeover_end":
        this.takenOver.delete(ev.payload.agent);
        break;
      case "metric":
        this.metrics.push(ev.payload);
        break;
      case "desync":
        this.desyncs.push(ev.payload);
        break;
    }
  }

  /** Agent rows joined with their latest action and status flags. */
  agentViews(): AgentView[] {
    const byAgent = new Map(this.actions.map((a) => [a.agent, a]));
    const hit = new Set<number>();
    for (const [a, b] of this.collisions) {
      hit.add(a);
      hit.add(b);
    }
    return this.agents.map((row) => ({
      ...row,
      action: byAgent.get(row.id) ?? null,
      inTakeover: this.takenOver.has(row.id),
      colliding: hit.has(row.id),
    }));
  }
}
