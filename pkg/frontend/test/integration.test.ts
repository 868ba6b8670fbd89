/** Scripted end-to-end session against the real probe service:
 *  connect, pause, step x3, gray_region, set_image, shift -- every command
 *  acked, frames gapless, sustained rate at least 5/s at 48x48, and the
 *  prediction changes within 40 steps of a set_image. */
import { ChildProcess, execFileSync, spawn } from "node:child_process";
import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import WebSocket from "ws";

import { ProbeClient } from "../src/client.js";
import { Frame } from "../src/protocol.js";

const PY = process.env.PYTHON ?? "python3";

function pythonHasCellseg(): boolean {
  try {
    execFileSync(PY, ["-c", "import cellseg"], { stdio: "ignore" });
    return true;
  } catch {
    return false;
  }
}

const available = pythonHasCellseg();
const suite = available ? describe : describe.skip;

suite("probe service integration", () => {
  let proc: ChildProcess;
  let url = "";
  const dir = mkdtempSync(join(tmpdir(), "cellseg-ui-"));
  const ckpt = join(dir, "model.ncaw");

  beforeAll(async () => {
    execFileSync(PY, ["-c", `
from cellseg.checkpoint import save_checkpoint
from cellseg.model import ArchConfig, init_params
from cellseg.rng import RngStream
cfg = ArchConfig(cell_size=8, hidden_size=12, norm_kind="instance", resettable=True)
save_checkpoint(init_params(cfg, RngStream(1, 1)), cfg, {}, r"${ckpt}")
`]);
    proc = spawn(PY, ["-m", "cellseg.cli", "serve", "--checkpoint", ckpt,
      "--port", "0", "--resolution", "48", "--rate", "30"]);
    url = await new Promise<string>((resolve, reject) => {
      const timer = setTimeout(() => reject(new Error("server did not start")), 20000);
      proc.stdout!.on("data", (chunk: Buffer) => {
        const m = chunk.toString().match(/ws:\/\/[\d.]+:(\d+)\//);
        if (m) {
          clearTimeout(timer);
          resolve(`ws://127.0.0.1:${m[1]}/`);
        }
      });
      proc.on("exit", () => reject(new Error("server exited early")));
    });
  }, 30000);

  afterAll(() => {
    proc?.kill();
  });

  it("runs the scripted session", async () => {
    const frames: Frame[] = [];
    const errors: string[] = [];
    const client = new ProbeClient(
      url,
      {
        onFrame: (f) => frames.push(f),
        onError: (_s, reason) => errors.push(reason),
      },
      (u) => new WebSocket(u) as unknown as import("../src/client.js").SocketLike,
    );
    client.connect();
    await waitFor(() => client.status === "open", 10000);

    // frame rate while running: >= 5/s at 48x48
    const t0 = Date.now();
    await waitFor(() => frames.length >= 10, 10000);
    const fps = (frames.length / (Date.now() - t0)) * 1000;
    expect(fps).toBeGreaterThanOrEqual(5);

    expect(await client.command("pause")).toBe(true);
    await sleep(300);
    const idle = frames.length;
    const before = frames[frames.length - 1];

    expect(await client.command("step", { n: 3 })).toBe(true);
    await waitFor(() => frames.length >= idle + 3, 5000);
    const stepped = frames.slice(idle, idle + 3).map((f) => f.payload.step);
    expect(stepped).toEqual([before.payload.step + 1, before.payload.step + 2,
      before.payload.step + 3]);

    expect(await client.command("gray_region",
      { x: 8, y: 8, w: 16, h: 16 }, "gray")).toBe(true);

    // 48x48 PNG with a solid color, pre-encoded (red square)
    const png = solidPng();
    expect(await client.command("set_image", { png }, "swap")).toBe(true);
    const markBefore = lastPrediction(frames);
    expect(await client.command("step", { n: 40 })).toBe(true);
    await waitFor(() => frames.length >= idle + 3 + 40, 20000);
    const changed = frames.slice(-40).some(
      (f) => f.payload.prediction_png !== markBefore);
    expect(changed).toBe(true);
    // label cleared by set_image
    expect(frames[frames.length - 1].payload.iou).toBeUndefined();

    expect(await client.command("shift", { dx: 2, dy: 1 }, "shift")).toBe(true);

    // gapless frame seq across the whole session
    const seqs = frames.map((f) => f.seq);
    for (let i = 1; i < seqs.length; i++) {
      expect(seqs[i]).toBe(seqs[i - 1] + 1);
    }
    expect(errors).toEqual([]);
    client.close();
  }, 60000);

  function lastPrediction(frames: Frame[]): string {
    return frames[frames.length - 1].payload.prediction_png;
  }
});

function sleep(ms: number): Promise<void> {
  return new Promise((r) => setTimeout(r, ms));
}

async function waitFor(cond: () => boolean, timeoutMs: number): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (!cond()) {
    if (Date.now() > deadline) throw new Error("timeout waiting for condition");
    await sleep(25);
  }
}

/** Generates a 48x48 solid-red PNG at test time via zlib (no fixtures). */
function solidPng(): string {
  // minimal PNG writer: 48x48 RGB, single color
  const zlib = require("node:zlib") as typeof import("node:zlib");
  const w = 48, h = 48;
  const raw = Buffer.alloc(h * (1 + w * 3));
  for (let y = 0; y < h; y++) {
    const row = y * (1 + w * 3);
    raw[row] = 0; // filter none
    for (let x = 0; x < w; x++) {
      raw[row + 1 + x * 3] = 200;
      raw[row + 2 + x * 3] = 30;
      raw[row + 3 + x * 3] = 30;
    }
  }
  const idat = zlib.deflateSync(raw);

  function chunk(type: string, data: Buffer): Buffer {
    const len = Buffer.alloc(4);
    len.writeUInt32BE(data.length);
    const body = Buffer.concat([Buffer.from(type, "latin1"), data]);
    const crc = Buffer.alloc(4);
    crc.writeUInt32BE(crc32(body) >>> 0);
    return Buffer.concat([len, body, crc]);
  }

  function crc32(buf: Buffer): number {
    let c = ~0;
    for (const b of buf) {
      c ^= b;
      for (let k = 0; k < 8; k++) c = (c >>> 1) ^ (0xedb88320 & -(c & 1));
    }
    return ~c;
  }

  const ihdr = Buffer.alloc(13);
  ihdr.writeUInt32BE(w, 0);
  ihdr.writeUInt32BE(h, 4);
  ihdr[8] = 8;  // bit depth
  ihdr[9] = 2;  // color type RGB
  const png = Buffer.concat([
    Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]),
    chunk("IHDR", ihdr),
    chunk("IDAT", idat),
    chunk("IEND", Buffer.alloc(0)),
  ]);
  return png.toString("base64");
}
