import { beforeEach, describe, expect, it, vi } from "vitest";

import { ProbeClient, SocketLike } from "../src/client.js";

class FakeSocket implements SocketLike {
  static instances: FakeSocket[] = [];
  sent: string[] = [];
  onopen: ((ev?: unknown) => void) | null = null;
  onclose: ((ev?: unknown) => void) | null = null;
  onerror: ((ev?: unknown) => void) | null = null;
  onmessage: ((ev: { data: unknown }) => void) | null = null;

  constructor(public url: string) {
    FakeSocket.instances.push(this);
  }

  send(data: string): void {
    this.sent.push(data);
  }

  close(): void {
    this.onclose?.();
  }

  // test helpers
  open(): void {
    this.onopen?.();
  }

  receive(obj: unknown): void {
    this.onmessage?.({ data: JSON.stringify(obj) });
  }
}

function makeClient(events = {}) {
  const client = new ProbeClient(
    "ws://test/",
    events,
    (url) => new FakeSocket(url),
    50,
  );
  return client;
}

beforeEach(() => {
  FakeSocket.instances = [];
  vi.useFakeTimers();
});

describe("ProbeClient", () => {
  it("reports frames in order and drops stale ones", () => {
    const frames: number[] = [];
    const client = makeClient({ onFrame: (f: { seq: number }) => frames.push(f.seq) });
    client.connect();
    const sock = FakeSocket.instances[0];
    sock.open();
    const payload = { step: 1, input_png: "", prediction_png: "",
                      state_rgb_png: "", mean_gate: null };
    sock.receive({ type: "frame", seq: 1, payload });
    sock.receive({ type: "frame", seq: 3, payload });
    sock.receive({ type: "frame", seq: 2, payload });
    expect(frames).toEqual([1, 3]);
  });

  it("resolves commands on ack and frees the tool", async () => {
    const client = makeClient();
    client.connect();
    const sock = FakeSocket.instances[0];
    sock.open();
    const p = client.command("gray_region", { x: 0, y: 0, w: 2, h: 2 }, "gray");
    expect(client.isBusy("gray")).toBe(true);
    sock.receive({ type: "ack", seq: 1 });
    await expect(p).resolves.toBe(true);
    expect(client.isBusy("gray")).toBe(false);
  });

  it("blocks a second in-flight command for the same tool", async () => {
    const client = makeClient();
    client.connect();
    const sock = FakeSocket.instances[0];
    sock.open();
    void client.command("gray_region", { x: 0, y: 0, w: 1, h: 1 }, "gray");
    const second = client.command("gray_region", { x: 1, y: 1, w: 1, h: 1 }, "gray");
    await expect(second).resolves.toBe(false);
    expect(sock.sent).toHaveLength(1);
  });

  it("surfaces error responses through the callback", async () => {
    const errors: string[] = [];
    const client = makeClient({
      onError: (_seq: number, reason: string) => errors.push(reason),
    });
    client.connect();
    const sock = FakeSocket.instances[0];
    sock.open();
    const p = client.command("step", { n: 0 });
    sock.receive({ type: "error", seq: 1, reason: "step count must be >= 1" });
    await expect(p).resolves.toBe(false);
    expect(errors).toEqual(["step count must be >= 1"]);
  });

  it("retries with growing backoff after a drop", () => {
    const statuses: string[] = [];
    const client = makeClient({ onStatus: (s: string) => statuses.push(s) });
    client.connect();
    const first = FakeSocket.instances[0];
    first.open();
    first.close(); // connection lost
    expect(statuses).toContain("retrying");
    expect(FakeSocket.instances).toHaveLength(1);
    vi.advanceTimersByTime(260);
    expect(FakeSocket.instances).toHaveLength(2);
    FakeSocket.instances[1].close();
    vi.advanceTimersByTime(260);
    expect(FakeSocket.instances).toHaveLength(2); // second retry waits 500ms
    vi.advanceTimersByTime(300);
    expect(FakeSocket.instances).toHaveLength(3);
  });

  it("does not retry after a user close", () => {
    const client = makeClient();
    client.connect();
    FakeSocket.instances[0].open();
    client.close();
    vi.advanceTimersByTime(2000);
    expect(FakeSocket.instances).toHaveLength(1);
    expect(client.status).toBe("closed");
  });

  it("fails pending commands when the connection drops", async () => {
    const client = makeClient();
    client.connect();
    const sock = FakeSocket.instances[0];
    sock.open();
    const p = client.command("pause");
    sock.close();
    await expect(p).resolves.toBe(false);
  });

  it("restarts command seq on reconnect", async () => {
    const client = makeClient();
    client.connect();
    const sock = FakeSocket.instances[0];
    sock.open();
    void client.command("pause");
    sock.receive({ type: "ack", seq: 1 });
    sock.close();
    vi.advanceTimersByTime(260);
    const sock2 = FakeSocket.instances[1];
    sock2.open();
    void client.command("resume");
    expect(JSON.parse(sock2.sent[0]).seq).toBe(1);
  });
});
