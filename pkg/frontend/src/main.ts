/** Browser wiring: connect, render on animation frames, forward keys.
 *
 * Query parameters:
 *   ?host=http://127.0.0.1:7702  gateway base URL (default: page origin)
 *   &token=...                   command token (required to drive)
 *   &agent=0                     agent the keyboard controls (default 0)
 */

import { GatewayClient, fetchRuns, fetchRunText } from "./connect.js";
import { TakeoverController } from "./controls.js";
import { RenderLoop, buildFrame, type Frame } from "./render.js";
import { DashboardModel } from "./viewmodel.js";
import { parseRunLog } from "./protocol.js";

const params = new URLSearchParams(location.search);
const host = params.get("host") ?? location.origin;
const token = params.get("token") ?? "";
const agentId = Number(params.get("agent") ?? "0");

const $ = (id: string) => document.getElementById(id)!;

function present(frame: Frame): void {
  $("status").textContent = frame.statusLine;
  $("scene").innerHTML = frame.svg;
  const body = frame.agentRows
    .map((row) => `<tr>${row.map((c) => `<td>${c}</td>`).join("")}</tr>`)
    .join("");
  $("agents-body").innerHTML = body;
}

function setTakeoverBadge(controller: TakeoverController): void {
  const badge = $("takeover");
  badge.textContent =
    controller.phase === "active"
      ? `driving #${controller.agentId} — arrows steer, Enter releases`
      : controller.phase === "idle"
        ? "Enter takes over"
        : controller.phase;
  badge.className = controller.phase;
}

async function showRun(name: string): Promise<void> {
  const events = parseRunLog(await fetchRunText(host, name));
  const slider = $("scrub") as HTMLInputElement;
  slider.max = String(events.length);
  slider.style.display = "block";
  const redraw = () => {
    const model = new DashboardModel();
    for (const ev of events.slice(0, Number(slider.value))) model.apply(ev);
    present(buildFrame(model));
  };
  slider.oninput = redraw;
  slider.value = slider.max;
  redraw();
}

async function listRuns(): Promise<void> {
  const runsEl = $("runs");
  try {
    const names = await fetchRuns(host);
    runsEl.innerHTML = "";
    for (const name of names) {
      const link = document.createElement("a");
      link.textContent = name;
      link.href = "#";
      link.onclick = (ev) => {
        ev.preventDefault();
        void showRun(name);
      };
      runsEl.appendChild(link);
    }
  } catch (exc) {
    runsEl.textContent = `runs unavailable: ${(exc as Error).message}`;
  }
}

async function live(): Promise<void> {
  const model = new DashboardModel();
  const loop = new RenderLoop(model, present);
  const client = new GatewayClient(host, token, (url) => new WebSocket(url));
  const controller = new TakeoverController(client, agentId);

  client.onEvent = (ev) => loop.ingest(ev);
  client.onClose = () => {
    $("status").textContent += " · connection closed";
  };

  document.addEventListener("keydown", (ev) => {
    const handled = controller.handleKey(ev.key);
    if (handled !== null) {
      ev.preventDefault();
      void handled.then(() => setTakeoverBadge(controller));
      setTakeoverBadge(controller);
    }
  });

  const tickDraw = () => {
    loop.flush();
    requestAnimationFrame(tickDraw);
  };
  requestAnimationFrame(tickDraw);

  await client.connect();
  setTakeoverBadge(controller);
}

void listRuns();
live().catch((exc) => {
  $("status").textContent = `gateway unreachable: ${(exc as Error).message}`;
});
