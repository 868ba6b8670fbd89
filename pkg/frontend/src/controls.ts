/** Tool state: rectangle dragging and keyboard shifts, kept pure for tests. */

export type Tool = "swap" | "shift" | "gray" | "reset-region" | "none";

export interface Rect {
  x: number;
  y: number;
  w: number;
  h: number;
}

/** Normalise two drag corners into a clamped, non-empty cell rect. */
export function dragToRect(
  x0: number,
  y0: number,
  x1: number,
  y1: number,
  gridSize: number,
): Rect {
  const clamp = (v: number) => Math.max(0, Math.min(gridSize - 1, v));
  const ax = clamp(Math.min(x0, x1));
  const ay = clamp(Math.min(y0, y1));
  const bx = clamp(Math.max(x0, x1));
  const by = clamp(Math.max(y0, y1));
  return { x: ax, y: ay, w: bx - ax + 1, h: by - ay + 1 };
}

const ARROW_DELTAS: Record<string, { dx: number; dy: number }> = {
  ArrowLeft: { dx: -1, dy: 0 },
  ArrowRight: { dx: 1, dy: 0 },
  ArrowUp: { dx: 0, dy: -1 },
  ArrowDown: { dx: 0, dy: 1 },
};

/** Arrow key -> unit shift payload; null for any other key. */
export function arrowKeyShift(key: string): { dx: number; dy: number } | null {
  return ARROW_DELTAS[key] ?? null;
}

export interface DragState {
  active: boolean;
  startX: number;
  startY: number;
  lastX: number;
  lastY: number;
}

export function beginDrag(x: number, y: number): DragState {
  return { active: true, startX: x, startY: y, lastX: x, lastY: y };
}

export function updateDrag(s: DragState, x: number, y: number): DragState {
  return { ...s, lastX: x, lastY: y };
}

export function endDrag(s: DragState, gridSize: number): Rect {
  return dragToRect(s.startX, s.startY, s.lastX, s.lastY, gridSize);
}

/** Client-side guard for uploads (the protocol inlines base64 PNGs). */
export function uploadAcceptable(byteLength: number, maxBytes = 2 * 1024 * 1024): boolean {
  return byteLength > 0 && byteLength <= maxBytes;
}
