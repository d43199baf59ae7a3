/** Keyboard takeover controls with one hard rule: a control_input is only ever
 * sent inside an acknowledged takeover window.
 *
 * The window opens when the gateway acks takeover_start with ok:true and
 * closes the instant release is requested — before the takeover_end frame
 * goes out — so no input can race past the boundary.
 */

import type { Ack, Command, LaneIntent } from "./protocol.js";

export type TakeoverPhase = "idle" | "requesting" | "active" | "releasing";

export interface CommandPort {
  send(cmd: Command): Promise<Ack>;
}

export interface SentRecord {
  phase: TakeoverPhase; // phase at the moment the frame was sent
  cmd: Command;
}

export class TakeoverController {
  phase: TakeoverPhase = "idle";
  /** Arrow presses swallowed because no window was open. */
  dropped = 0;
  /** Audit trail of every frame this controller sent. */
  readonly sent: SentRecord[] = [];

  constructor(
    private readonly port: CommandPort,
    readonly agentId: number,
  ) {}

  get active(): boolean {
    return this.phase === "active";
  }

  /** Enter key: request takeover when idle, release it when active. */
  async toggle(): Promise<Ack | null> {
    if (this.phase === "idle") {
      this.phase = "requesting";
      const ack = await this.dispatch({
        kind: "takeover_start",
        agent_id: this.agentId,
      });
      this.phase = ack !== null && ack.ok ? "active" : "idle";
      return ack;
    }
    if (this.phase === "active") {
      // Close the window before the frame leaves: inputs stop immediately.
      this.phase = "releasing";
      const ack = await this.dispatch({
        kind: "takeover_end",
        agent_id: this.agentId,
      });
      this.phase = "idle";
      return ack;
    }
    return null; // mid-handshake; ignore the keypress
  }

  /** Up/Down arrows: bump commanded acceleration by ±1 m/s². */
  async nudge(accelDelta: number): Promise<Ack | null> {
    return this.controlInput(accelDelta, "keep");
  }

  /** Left/Right arrows: request a lane change, leaving acceleration as is. */
  async lane(intent: Exclude<LaneIntent, "keep">): Promise<Ack | null> {
    return this.controlInput(0, intent);
  }

  handleKey(key: string): Promise<Ack | null> | null {
    switch (key) {
      case "Enter":
        return this.toggle();
      case "ArrowUp":
        return this.nudge(1);
      case "ArrowDown":
        return this.nudge(-1);
      case "ArrowLeft":
        return this.lane("left");
      case "ArrowRight":
        return this.lane("right");
      default:
        return null;
    }
  }

  private async controlInput(
    accelDelta: number,
    intent: LaneIntent,
  ): Promise<Ack | null> {
    if (this.phase !== "active") {
      this.dropped += 1;
      return null;
    }
    const ack = await this.dispatch({
      kind: "control_input",
      agent_id: this.agentId,
      accel_delta: accelDelta,
      lane_intent: intent,
    });
    if (ack !== null && !ack.ok) this.phase = "idle"; // window gone server-side
    return ack;
  }

  private async dispatch(cmd: Command): Promise<Ack | null> {
    this.sent.push({ phase: this.phase, cmd });
    try {
      return await this.port.send(cmd);
    } catch {
      return null; // connection died; callers see phase fall back via toggle paths
    }
  }
}
