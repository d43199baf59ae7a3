/** Frame building: model state -> plain data (SVG markup + table rows).
 *
 * No DOM access here so every drawing decision is unit-testable in node;
 * main.ts only pastes the results into elements.
 */

import type { DashboardModel } from "./viewmodel.js";
import type { TelemetryEvent } from "./protocol.js";

export interface Frame {
  tick: number;
  statusLine: string;
  svg: string;
  agentRows: string[][]; // id, lane, s, v, a, ttc, source, flags
}

const VIEW_W = 960;
const VIEW_H = 240;
const PAD = 24;

function esc(text: string): string {
  return text.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}

function fmt(value: number, digits = 1): string {
  return value.toFixed(digits);
}

interface Box {
  minX: number;
  maxX: number;
  minY: number;
  maxY: number;
}

function worldBox(model: DashboardModel): Box {
  const xs: number[] = [];
  const ys: number[] = [];
  for (const lane of model.lanes) {
    for (const [x, y] of lane.centerline) {
      xs.push(x);
      ys.push(y);
    }
  }
  for (const agent of model.agents) {
    xs.push(agent.x);
    ys.push(agent.y);
  }
  if (xs.length === 0) return { minX: 0, maxX: 1, minY: 0, maxY: 1 };
  return {
    minX: Math.min(...xs),
    maxX: Math.max(...xs),
    minY: Math.min(...ys) - 4,
    maxY: Math.max(...ys) + 4,
  };
}

/** Scene markup: lane centerlines plus one oriented marker per agent. */
export function sceneSvg(model: DashboardModel): string {
  const box = worldBox(model);
  const sx = (VIEW_W - 2 * PAD) / Math.max(box.maxX - box.minX, 1e-9);
  const sy = (VIEW_H - 2 * PAD) / Math.max(box.maxY - box.minY, 1e-9);
  const scale = Math.min(sx, sy);
  const px = (x: number) => PAD + (x - box.minX) * scale;
  // SVG y grows downward; world y grows left of travel. Flip for a map view.
  const py = (y: number) => VIEW_H - PAD - (y - box.minY) * scale;

  const parts: string[] = [];
  for (const lane of model.lanes) {
    const points = lane.centerline
      .map(([x, y]) => `${fmt(px(x), 2)},${fmt(py(y), 2)}`)
      .join(" ");
    const stroke = Math.max(lane.width * scale, 2);
    parts.push(
      `<polyline class="lane" data-lane="${lane.id}" points="${points}" ` +
        `stroke-width="${fmt(stroke, 2)}"/>`,
    );
  }
  for (const view of model.agentViews()) {
    const cls = ["agent"];
    if (view.colliding) cls.push("colliding");
    if (view.inTakeover) cls.push("taken-over");
    if (view.action?.source === "human") cls.push("human-driven");
    const deg = (-view.heading * 180) / Math.PI;
    parts.push(
      `<g class="${cls.join(" ")}" data-agent="${view.id}" ` +
        `transform="translate(${fmt(px(view.x), 2)},${fmt(py(view.y), 2)}) ` +
        `rotate(${fmt(deg, 1)})">` +
        `<rect x="-7" y="-3.5" width="14" height="7" rx="1.5"/>` +
        `<title>${esc(`#${view.id} v=${fmt(view.v)} m/s`)}</title></g>`,
    );
  }
  return (
    `<svg viewBox="0 0 ${VIEW_W} ${VIEW_H}" ` +
    `preserveAspectRatio="xMidYMid meet">${parts.join("")}</svg>`
  );
}

export function buildFrame(model: DashboardModel): Frame {
  const status =
    model.worldTick < 0
      ? "waiting for telemetry"
      : `${model.scenarioName || "run"} · tick ${model.worldTick}` +
        ` · t=${fmt(model.worldTick * model.dt, 2)}s · digest ${model.digest}` +
        (model.collisions.length ? ` · COLLISION ${JSON.stringify(model.collisions)}` : "") +
        (model.desyncs.length ? ` · DESYNC ×${model.desyncs.length}` : "") +
        (model.seqGaps.length ? ` · ${model.seqGaps.length} dropped events` : "");
  const agentRows = model.agentViews().map((view) => [
    String(view.id),
    String(view.lane),
    fmt(view.s),
    fmt(view.v),
    fmt(view.a, 2),
    view.ttc === null ? "—" : fmt(view.ttc),
    view.action?.source ?? "—",
    [view.inTakeover ? "takeover" : "", view.colliding ? "collision" : ""]
      .filter(Boolean)
      .join(" "),
  ]);
  return { tick: model.worldTick, statusLine: status, svg: sceneSvg(model), agentRows };
}

/** Coalesces bursts of events into at most one draw per flush call.
 *
 * Invariant: renderedTick never exceeds receivedTick — a frame only shows
 * state the model has fully ingested, no matter how ingest and flush calls
 * interleave.
 */
export class RenderLoop {
  renderedTick = -1;
  receivedTick = -1;
  private dirty = false;

  constructor(
    private readonly model: DashboardModel,
    private readonly present: (frame: Frame) => void,
  ) {}

  ingest(ev: TelemetryEvent): void {
    this.model.apply(ev);
    this.receivedTick = this.model.tick;
    this.dirty = true;
  }

  /** Draw if anything changed since the last flush; returns whether it drew. */
  flush(): boolean {
    if (!this.dirty) return false;
    this.dirty = false;
    const frame = buildFrame(this.model);
    this.renderedTick = frame.tick;
    this.present(frame);
    return true;
  }
}
