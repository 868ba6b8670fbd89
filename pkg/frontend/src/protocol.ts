/** Probe protocol: JSON envelopes {type, seq, payload} over WebSocket. */

export type CommandType =
  | "set_image"
  | "shift"
  | "gray_region"
  | "reset_state_region"
  | "pause"
  | "resume"
  | "step"
  | "set_rate";

export interface Envelope {
  type: string;
  seq: number;
  payload?: Record<string, unknown>;
  reason?: string;
}

export interface IouPayload {
  background: number | null;
  object: number | null;
  boundary: number | null;
}

export interface FramePayload {
  step: number;
  input_png: string;
  prediction_png: string;
  state_rgb_png: string;
  mean_gate: number | null;
  iou?: IouPayload;
}

export interface Frame {
  seq: number;
  payload: FramePayload;
}

/** Outbound command sequencing: strictly increasing per connection. */
export class CommandSequencer {
  private seq = 0;

  next(): number {
    this.seq += 1;
    return this.seq;
  }

  get current(): number {
    return this.seq;
  }

  reset(): void {
    this.seq = 0;
  }
}

export function encodeCommand(
  type: CommandType,
  seq: number,
  payload?: Record<string, unknown>,
): string {
  const msg: Envelope = { type, seq };
  if (payload !== undefined) msg.payload = payload;
  return JSON.stringify(msg);
}

export type Decoded =
  | { kind: "frame"; frame: Frame }
  | { kind: "ack"; seq: number }
  | { kind: "error"; seq: number; reason: string }
  | { kind: "unknown"; raw: unknown };

export function decodeMessage(raw: string): Decoded {
  let obj: unknown;
  try {
    obj = JSON.parse(raw);
  } catch {
    return { kind: "unknown", raw };
  }
  if (typeof obj !== "object" || obj === null) return { kind: "unknown", raw: obj };
  const env = obj as Envelope;
  if (env.type === "frame" && env.payload && typeof env.seq === "number") {
    return {
      kind: "frame",
      frame: { seq: env.seq, payload: env.payload as unknown as FramePayload },
    };
  }
  if (env.type === "ack" && typeof env.seq === "number") {
    return { kind: "ack", seq: env.seq };
  }
  if (env.type === "error" && typeof env.seq === "number") {
    return { kind: "error", seq: env.seq, reason: env.reason ?? "unknown" };
  }
  return { kind: "unknown", raw: obj };
}

/** Keeps only in-order frames: a frame with seq <= the latest seen is stale. */
export class FrameOrderGate {
  private latest = -1;

  accept(frame: Frame): boolean {
    if (frame.seq <= this.latest) return false;
    this.latest = frame.seq;
    return true;
  }

  get latestSeq(): number {
    return this.latest;
  }

  reset(): void {
    this.latest = -1;
  }
}
