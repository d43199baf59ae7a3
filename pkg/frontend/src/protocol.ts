/** Wire types for the gateway's JSON surface: events, commands, acks, run logs.
 *
 * Everything here is pure data + parsing; no sockets, no DOM. The shapes match
 * what the host emits byte for byte, so golden strings captured from a live
 * run parse without adapters.
 */

export const SCHEMA_V = 1;

export type EventKind =
  | "agent_state"
  | "takeover_begin"
  | "takeover_end"
  | "metric"
  | "scenario_loaded"
  | "desync";

export type LaneIntent = "keep" | "left" | "right";
export type ActionSource = "behavior_model" | "policy" | "human" | "fallback";

export interface AgentRow {
  id: number;
  lane: number;
  s: number;
  d: number;
  x: number;
  y: number;
  heading: number;
  v: number;
  a: number;
  ttc: number | null; // null means no leader in range
}

export interface ActionRow {
  agent: number;
  accel: number;
  intent: LaneIntent;
  source: ActionSource;
}

export interface AgentStatePayload {
  agents: AgentRow[];
  actions: ActionRow[];
  digest: string; // 16 lowercase hex chars, post-step world hash
  collisions: [number, number][];
}

export interface TakeoverPayload {
  agent: number;
}

export interface ScenarioLoadedPayload {
  name: string;
  seed: number;
  dt: number;
  scenario: string; // canonical single-line scenario JSON
}

export interface DesyncPayload {
  client: string;
  tick: number;
  expected: string;
  got: string;
}

interface EventBase {
  v: typeof SCHEMA_V;
  seq: number; // gapless from 1 within one run/stream
  tick: number;
}

export type TelemetryEvent =
  | (EventBase & { kind: "agent_state"; payload: AgentStatePayload })
  | (EventBase & { kind: "takeover_begin" | "takeover_end"; payload: TakeoverPayload })
  | (EventBase & { kind: "scenario_loaded"; payload: ScenarioLoadedPayload })
  | (EventBase & { kind: "metric"; payload: { name: string } & Record<string, unknown> })
  | (EventBase & { kind: "desync"; payload: DesyncPayload });

const EVENT_KINDS: ReadonlySet<string> = new Set([
  "agent_state",
  "takeover_begin",
  "takeover_end",
  "metric",
  "scenario_loaded",
  "desync",
]);

export type Command =
  | { kind: "takeover_start" | "takeover_end"; agent_id: number }
  | {
      kind: "control_input";
      agent_id: number;
      accel_delta: number;
      lane_intent: LaneIntent;
    }
  | { kind: "load_scenario"; scenario: string }
  | { kind: "pause" }
  | { kind: "resume" };

export type Ack =
  | { v: typeof SCHEMA_V; ok: true; kind: string; agent_id: number | null }
  | { v: typeof SCHEMA_V; ok: false; error: string; detail: string };

export type ServerMessage =
  | { type: "event"; event: TelemetryEvent }
  | { type: "ack"; ack: Ack };

/** Serialize a command, stamping schema version and auth token. */
export function encodeCommand(cmd: Command, token: string): string {
  return JSON.stringify({ v: SCHEMA_V, token, ...cmd });
}

function fail(why: string): never {
  throw new Error(`bad gateway message: ${why}`);
}

function asRecord(value: unknown, what: string): Record<string, unknown> {
  if (typeof value !== "object" || value === null || Array.isArray(value)) {
    fail(`${what} is not an object`);
  }
  return value as Record<string, unknown>;
}

export function parseEvent(data: unknown): TelemetryEvent {
  const obj = asRecord(data, "event");
  if (obj.v !== SCHEMA_V) fail(`schema version ${JSON.stringify(obj.v)}`);
  if (typeof obj.seq !== "number" || !Number.isInteger(obj.seq) || obj.seq < 1) {
    fail(`seq ${JSON.stringify(obj.seq)}`);
  }
  if (typeof obj.tick !== "number" || !Number.isInteger(obj.tick) || obj.tick < 0) {
    fail(`tick ${JSON.stringify(obj.tick)}`);
  }
  if (typeof obj.kind !== "string" || !EVENT_KINDS.has(obj.kind)) {
    fail(`kind ${JSON.stringify(obj.kind)}`);
  }
  asRecord(obj.payload, "payload");
  return obj as unknown as TelemetryEvent;
}

export function parseAck(data: unknown): Ack {
  const obj = asRecord(data, "ack");
  if (obj.v !== SCHEMA_V) fail(`schema version ${JSON.stringify(obj.v)}`);
  if (obj.ok === true) {
    if (typeof obj.kind !== "string") fail("ok ack without kind");
    return obj as unknown as Ack;
  }
  if (obj.ok === false) {
    if (typeof obj.error !== "string") fail("error ack without error");
    return obj as unknown as Ack;
  }
  fail(`ok ${JSON.stringify(obj.ok)}`);
}

/** Route one WS text frame: acks carry "ok", events carry "seq". */
export function parseServerMessage(text: string): ServerMessage {
  let data: unknown;
  try {
    data = JSON.parse(text);
  } catch {
    fail(`unparseable JSON: ${text.slice(0, 80)}`);
  }
  const obj = asRecord(data, "message");
  if ("ok" in obj) return { type: "ack", ack: parseAck(obj) };
  if ("seq" in obj) return { type: "event", event: parseEvent(obj) };
  fail("neither ack nor event");
}

/** Parse a .jsonl run log; enforces the gapless seq contract from 1. */
export function parseRunLog(text: string): TelemetryEvent[] {
  const events: TelemetryEvent[] = [];
  const lines = text.split("\n");
  for (let i = 0; i < lines.length; i++) {
    const line = lines[i].trim();
    if (!line) continue;
    let event: TelemetryEvent;
    try {
      event = parseEvent(JSON.parse(line));
    } catch (exc) {
      throw new Error(`run log line ${i + 1}: ${(exc as Error).message}`);
    }
    if (event.seq !== events.length + 1) {
      throw new Error(
        `run log line ${i + 1}: seq ${event.seq} breaks gapless order`,
      );
    }
    events.push(event);
  }
  if (events.length === 0) throw new Error("empty run file");
  return events;
}

/** Ticks of human-sourced actions not covered by a takeover window. */
export function humanActionsOutsideWindows(events: TelemetryEvent[]): number[] {
  const active = new Map<number, boolean>();
  const violations: number[] = [];
  for (const ev of events) {
    if (ev.kind === "takeover_begin") {
      active.set(ev.payload.agent, true);
    } else if (ev.kind === "takeover_end") {
      active.set(ev.payload.agent, false);
    } else if (ev.kind === "agent_state") {
      for (const a of ev.payload.actions) {
        if (a.source === "human" && !active.get(a.agent)) violations.push(ev.tick);
      }
    }
  }
  return violations;
}

export function parseRunsListing(data: unknown): string[] {
  const obj = asRecord(data, "runs listing");
  if (obj.v !== SCHEMA_V) fail(`schema version ${JSON.stringify(obj.v)}`);
  if (!Array.isArray(obj.runs) || obj.runs.some((r) => typeof r !== "string")) {
    fail("runs is not a string array");
  }
  return obj.runs as string[];
}

// --- scenario geometry (from the scenario_loaded payload) ---------------------------

export interface LaneShape {
  id: number;
  width: number;
  centerline: [number, number][];
}

/** Pull lane geometry out of the canonical scenario JSON string. */
export function parseLaneShapes(scenarioJson: string): LaneShape[] {
  const doc = asRecord(JSON.parse(scenarioJson), "scenario");
  const graph = asRecord(doc.lane_graph, "lane_graph");
  const lanes = graph.lanes;
  if (!Array.isArray(lanes)) fail("lane_graph.lanes is not an array");
  return lanes.map((raw) => {
    const lane = asRecord(raw, "lane");
    return {
      id: lane.id as number,
      width: lane.width as number,
      centerline: lane.centerline as [number, number][],
    };
  });
}
