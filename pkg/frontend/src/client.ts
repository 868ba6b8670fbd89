/** Connection management: auto-retry with backoff, ack correlation,
 *  stale-frame dropping, and per-tool single-flight commands. */

import {
  CommandSequencer,
  CommandType,
  Decoded,
  decodeMessage,
  encodeCommand,
  Frame,
  FrameOrderGate,
} from "./protocol.js";

export type ConnectionStatus = "connecting" | "open" | "closed" | "retrying";

/** The subset of the WebSocket API the client needs (injectable for tests).
 *  Handler params are `any` so browser and `ws` sockets both satisfy it. */
export interface SocketLike {
  send(data: string): void;
  close(): void;
  // eslint-disable-next-line @typescript-eslint/no-explicit-any
  onopen: ((ev: any) => void) | null;
  onclose: ((ev: any) => void) | null;
  onerror: ((ev: any) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export interface ClientEvents {
  onFrame?: (frame: Frame) => void;
  onStatus?: (status: ConnectionStatus, attempt: number) => void;
  onError?: (seq: number, reason: string) => void;
}

interface Pending {
  tool: string;
  resolve: (ok: boolean) => void;
}

export class ProbeClient {
  private sock: SocketLike | null = null;
  private readonly seq = new CommandSequencer();
  private readonly gate = new FrameOrderGate();
  private pending = new Map<number, Pending>();
  private busyTools = new Set<string>();
  private attempt = 0;
  private retryTimer: ReturnType<typeof setTimeout> | null = null;
  private closedByUser = false;
  status: ConnectionStatus = "closed";

  constructor(
    private readonly url: string,
    private readonly events: ClientEvents,
    private readonly makeSocket: SocketFactory,
    private readonly maxBackoffMs = 5000,
  ) {}

  connect(): void {
    this.closedByUser = false;
    this.open();
  }

  private open(): void {
    this.setStatus("connecting");
    let sock: SocketLike;
    try {
      sock = this.makeSocket(this.url);
    } catch {
      this.scheduleRetry();
      return;
    }
    this.sock = sock;
    sock.onopen = () => {
      this.attempt = 0;
      this.seq.reset();
      this.gate.reset();
      this.setStatus("open");
    };
    sock.onmessage = (ev) => this.handleMessage(String(ev.data));
    sock.onclose = () => this.handleClose();
    sock.onerror = () => {
      /* onclose follows; nothing else to do */
    };
  }

  private handleClose(): void {
    this.sock = null;
    for (const [, p] of this.pending) p.resolve(false);
    this.pending.clear();
    this.busyTools.clear();
    if (!this.closedByUser) this.scheduleRetry();
    else this.setStatus("closed");
  }

  private scheduleRetry(): void {
    this.attempt += 1;
    this.setStatus("retrying");
    const delay = Math.min(this.maxBackoffMs, 250 * 2 ** (this.attempt - 1));
    this.retryTimer = setTimeout(() => this.open(), delay);
  }

  private setStatus(s: ConnectionStatus): void {
    this.status = s;
    this.events.onStatus?.(s, this.attempt);
  }

  private handleMessage(raw: string): void {
    const msg: Decoded = decodeMessage(raw);
    if (msg.kind === "frame") {
      if (this.gate.accept(msg.frame)) this.events.onFrame?.(msg.frame);
      return;
    }
    if (msg.kind === "ack" || msg.kind === "error") {
      const p = this.pending.get(msg.seq);
      if (p) {
        this.pending.delete(msg.seq);
        this.busyTools.delete(p.tool);
        p.resolve(msg.kind === "ack");
      }
      if (msg.kind === "error") this.events.onError?.(msg.seq, msg.reason);
    }
  }

  /** True when a command for this tool is still awaiting its ack. */
  isBusy(tool: string): boolean {
    return this.busyTools.has(tool);
  }

  /** Send one command; resolves true on ack, false on error/disconnect.
   *  Rejects immediately (resolves false) while the tool is in flight. */
  command(
    type: CommandType,
    payload?: Record<string, unknown>,
    tool: string = type,
  ): Promise<boolean> {
    if (!this.sock || this.status !== "open" || this.busyTools.has(tool)) {
      return Promise.resolve(false);
    }
    const seq = this.seq.next();
    this.busyTools.add(tool);
    return new Promise((resolve) => {
      this.pending.set(seq, { tool, resolve });
      this.sock!.send(encodeCommand(type, seq, payload));
    });
  }

  close(): void {
    this.closedByUser = true;
    if (this.retryTimer !== null) clearTimeout(this.retryTimer);
    this.sock?.close();
    this.setStatus("closed");
  }
}
