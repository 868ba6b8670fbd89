/** Wires the probe client to three canvases, the tool strip, and the
 *  mean-gate sparkline. */

import { ProbeClient } from "./client.js";
import { arrowKeyShift, beginDrag, DragState, endDrag, Tool, updateDrag,
  uploadAcceptable } from "./controls.js";
import { Frame } from "./protocol.js";
import { canvasToCell, CLASS_COLORS, decodeBase64Png, drawBitmap,
  drawDragRect, drawSparkline, fitScale, PaneLayout } from "./render.js";

const CANVAS_SIZE = 480;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const statusEl = el<HTMLSpanElement>("status");
const stepEl = el<HTMLSpanElement>("step");
const gateEl = el<HTMLSpanElement>("gate");
const iouEl = el<HTMLSpanElement>("iou");
const droppedEl = el<HTMLSpanElement>("dropped");
const inputCanvas = el<HTMLCanvasElement>("pane-input");
const predCanvas = el<HTMLCanvasElement>("pane-pred");
const stateCanvas = el<HTMLCanvasElement>("pane-state");
const sparkCanvas = el<HTMLCanvasElement>("sparkline");
const fileInput = el<HTMLInputElement>("file");

let tool: Tool = "none";
let drag: DragState | null = null;
let gridSize = 48;
let layout: PaneLayout = fitScale(gridSize, CANVAS_SIZE);
let gateHistory: number[] = [];
let droppedFrames = 0;
let lastFrame: Frame | null = null;

const wsUrl = (() => {
  const proto = location.protocol === "https:" ? "wss" : "ws";
  return `${proto}://${location.host}/`;
})();

const client = new ProbeClient(
  wsUrl,
  {
    onFrame: (f) => void renderFrame(f),
    onStatus: (s, attempt) => {
      statusEl.textContent = s === "retrying" ? `retrying (#${attempt})` : s;
      statusEl.className = `status ${s}`;
    },
    onError: (_seq, reason) => flash(`server: ${reason}`),
  },
  (url) => new WebSocket(url),
);

async function renderFrame(f: Frame): Promise<void> {
  lastFrame = f;
  stepEl.textContent = String(f.payload.step);
  if (typeof f.payload.mean_gate === "number") {
    gateEl.textContent = f.payload.mean_gate.toFixed(3);
    gateHistory.push(f.payload.mean_gate);
    if (gateHistory.length > 100) gateHistory = gateHistory.slice(-100);
    const sctx = sparkCanvas.getContext("2d")!;
    drawSparkline(sctx, gateHistory, sparkCanvas.width, sparkCanvas.height);
  }
  iouEl.textContent = f.payload.iou
    ? `bg ${fmt(f.payload.iou.background)} · obj ${fmt(f.payload.iou.object)} · bnd ${fmt(f.payload.iou.boundary)}`
    : "no label";
  try {
    const [inp, pred, state] = await Promise.all([
      decodeBase64Png(f.payload.input_png),
      decodeBase64Png(f.payload.prediction_png),
      decodeBase64Png(f.payload.state_rgb_png),
    ]);
    gridSize = pred.width;
    layout = drawBitmap(predCanvas.getContext("2d")!, pred, pred.width, CANVAS_SIZE);
    drawBitmap(inputCanvas.getContext("2d")!, inp, inp.width, CANVAS_SIZE);
    drawBitmap(stateCanvas.getContext("2d")!, state, state.width, CANVAS_SIZE);
    if (drag?.active) {
      drawDragRect(predCanvas.getContext("2d")!,
        endDrag(drag, gridSize), layout);
    }
  } catch {
    droppedFrames += 1;
    droppedEl.textContent = String(droppedFrames);
  }
}

function fmt(v: number | null): string {
  return v === null ? "–" : v.toFixed(3);
}

function flash(msg: string): void {
  const box = el<HTMLDivElement>("messages");
  box.textContent = msg;
  box.classList.add("visible");
  setTimeout(() => box.classList.remove("visible"), 4000);
}

// -- tool strip ---------------------------------------------------------------

function selectTool(next: Tool): void {
  tool = next;
  for (const b of document.querySelectorAll<HTMLButtonElement>("[data-tool]")) {
    b.classList.toggle("active", b.dataset.tool === tool);
  }
}

for (const b of document.querySelectorAll<HTMLButtonElement>("[data-tool]")) {
  b.addEventListener("click", () => selectTool(b.dataset.tool as Tool));
}

el<HTMLButtonElement>("btn-pause").addEventListener("click", () => {
  void client.command("pause");
});
el<HTMLButtonElement>("btn-resume").addEventListener("click", () => {
  void client.command("resume");
});
el<HTMLButtonElement>("btn-step").addEventListener("click", () => {
  void client.command("step", { n: 1 });
});

fileInput.addEventListener("change", async () => {
  const file = fileInput.files?.[0];
  if (!file) return;
  if (!uploadAcceptable(file.size)) {
    flash("image too large (2 MB limit)");
    fileInput.value = "";
    return;
  }
  const buf = new Uint8Array(await file.arrayBuffer());
  let b64 = "";
  for (let i = 0; i < buf.length; i += 0x8000) {
    b64 += String.fromCharCode(...buf.subarray(i, i + 0x8000));
  }
  const ok = await client.command("set_image", { png: btoa(b64) }, "swap");
  if (!ok) flash("set_image rejected");
  fileInput.value = "";
});

// drag rectangles on the prediction pane drive gray/reset-region tools
predCanvas.addEventListener("mousedown", (ev) => {
  if (tool !== "gray" && tool !== "reset-region") return;
  const cell = canvasToCell(ev.offsetX, ev.offsetY, gridSize, layout);
  if (cell) drag = beginDrag(cell.cx, cell.cy);
});
predCanvas.addEventListener("mousemove", (ev) => {
  if (!drag?.active) return;
  const cell = canvasToCell(ev.offsetX, ev.offsetY, gridSize, layout);
  if (cell) drag = updateDrag(drag, cell.cx, cell.cy);
});
predCanvas.addEventListener("mouseup", () => {
  if (!drag?.active) return;
  const rect = endDrag(drag, gridSize);
  drag = null;
  const cmd = tool === "gray" ? "gray_region" : "reset_state_region";
  void client.command(cmd, { x: rect.x, y: rect.y, w: rect.w, h: rect.h }, tool);
});

window.addEventListener("keydown", (ev) => {
  if (tool !== "shift") return;
  const delta = arrowKeyShift(ev.key);
  if (!delta) return;
  ev.preventDefault();
  void client.command("shift", { dx: delta.dx, dy: delta.dy }, "shift");
});

// class legend
const legend = el<HTMLDivElement>("legend");
for (const [name, color] of Object.entries(CLASS_COLORS)) {
  const chip = document.createElement("span");
  chip.className = "chip";
  chip.innerHTML = `<i style="background:${color}"></i>${name}`;
  legend.appendChild(chip);
}

client.connect();
export { client, renderFrame };
