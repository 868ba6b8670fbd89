"""Live probe service: one evolving colony, JSON commands over WebSocket.

The server speaks plain HTTP on the same port (serving the optional static
UI directory) and upgrades to WebSocket for the probe protocol.  Every
message is a JSON envelope {type, seq, payload}.  Client commands:

    set_image {png}            replace the environment (base64 PNG), state kept
    shift {dx, dy}             translate the current image (and label)
    gray_region {x, y, w, h}   blank a rectangle to mid-gray
    reset_state_region {x,y,w,h}  re-randomise the cells under the rect
    pause / resume             stop/start the stepping loop
    step {n}                   run exactly n steps while paused
    set_rate {sps}             stepping rate target

Every command is answered with {type:"ack", seq} or {type:"error", seq,
reason}; command seq must increase strictly per connection.  Frames are
{type:"frame", seq, payload:{step, prediction_png, state_rgb_png, mean_gate,
iou?}} with a session-global gapless seq.
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import model as M
from .checkpoint import load_checkpoint
from .data import Sample, SyntheticSpec, gray_region, shift_image, synthetic_dataset
from .experiments import class_map_to_rgb
from .metrics import iou
from .model import CellGrid, Environment
from .rng import StreamSet
from .tensor import Tensor, no_grad

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

_MIME = {".html": "text/html", ".js": "text/javascript", ".css": "text/css",
         ".png": "image/png", ".ico": "image/x-icon", ".map": "application/json",
         ".svg": "image/svg+xml"}


def accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + WS_GUID).encode()).digest()
    return base64.b64encode(digest).decode()


# -- WebSocket framing ---------------------------------------------------------

class SocketClosed(Exception):
    pass


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise SocketClosed
        buf += chunk
    return buf


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    """Returns (opcode, payload) of one complete message (handles fragments)."""
    opcode_final = None
    payload = b""
    while True:
        b1, b2 = _read_exact(sock, 2)
        fin = b1 & 0x80
        opcode = b1 & 0x0F
        masked = b2 & 0x80
        length = b2 & 0x7F
        if length == 126:
            (length,) = struct.unpack(">H", _read_exact(sock, 2))
        elif length == 127:
            (length,) = struct.unpack(">Q", _read_exact(sock, 8))
        mask = _read_exact(sock, 4) if masked else b""
        data = _read_exact(sock, length) if length else b""
        if mask:
            data = bytes(c ^ mask[i % 4] for i, c in enumerate(data))
        if opcode != 0:
            opcode_final = opcode
        payload += data
        if fin:
            return opcode_final or 0, payload


def write_frame(sock: socket.socket, payload: bytes, opcode: int = 1) -> None:
    header = bytes([0x80 | opcode])
    n = len(payload)
    if n < 126:
        header += bytes([n])
    elif n < 2**16:
        header += bytes([126]) + struct.pack(">H", n)
    else:
        header += bytes([127]) + struct.pack(">Q", n)
    sock.sendall(header + payload)


# -- protocol helpers ----------------------------------------------------------

def png_b64(arr_u8: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(arr_u8).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def decode_png_b64(payload: str) -> np.ndarray:
    raw = base64.b64decode(payload, validate=True)
    img = Image.open(io.BytesIO(raw))
    img.load()
    return np.asarray(img.convert("RGB"))


@dataclass
class Subscriber:
    sock: socket.socket
    lock: threading.Lock
    alive: bool = True

    def send_json(self, obj: dict) -> bool:
        data = json.dumps(obj, separators=(",", ":")).encode()
        try:
            with self.lock:
                write_frame(self.sock, data)
            return True
        except OSError:
            self.alive = False
            return False


class ProbeSession:
    """The single evolving colony behind the service."""

    def __init__(self, params, cfg, resolution: int = 48, seed: int = 0,
                 rate: float = 8.0, sample: Optional[Sample] = None,
                 start_paused: bool = False):
        cfg.validate()
        self.params = params
        self.cfg = cfg
        self.resolution = resolution
        self.streams = StreamSet(seed)
        self.rate = rate
        self.paused = start_paused
        self.pending_steps = 0
        self.step_index = 0
        self.frame_seq = 0
        self.commands: "queue.Queue[tuple[Subscriber, dict]]" = queue.Queue()
        self.subscribers: list[Subscriber] = []
        self.sub_lock = threading.Lock()
        self.stop_flag = threading.Event()

        if sample is None:
            sample = synthetic_dataset(SyntheticSpec(
                resolution=resolution, count=1, seed=seed)).samples[0]
        self.image = sample.image.copy()
        self.label: Optional[np.ndarray] = sample.label.classes.copy()
        hs = resolution // cfg.resolution_factor
        self.grid = M.init_state(1, hs, hs, cfg.cell_size, self.streams.init)
        self._rebuild_env()

    # -- colony ------------------------------------------------------------

    def _rebuild_env(self):
        pixels = Tensor(self.image[None])
        with no_grad():
            if self.cfg.resolution_factor == 1:
                self.env = Environment(pixels=pixels)
            else:
                self.env = Environment(pixels=pixels,
                                       encoded=M.encode_env(pixels, self.params))

    def _step_and_frame(self) -> dict:
        with no_grad():
            self.grid, diag = M.step(self.grid, self.env, self.params, self.cfg,
                                     self.streams.mask, self.streams.noise,
                                     step_index=self.step_index + 1)
            logits = M.predict_logits(self.grid, self.params, self.cfg).data
        self.step_index += 1
        pred = logits.argmax(-1)[0]
        payload = {
            "step": self.step_index,
            "input_png": png_b64(
                np.clip((self.image + 0.5) * 255, 0, 255).astype(np.uint8)),
            "prediction_png": png_b64(class_map_to_rgb(pred)),
            "state_rgb_png": png_b64(
                np.clip(M.state_rgb(self.grid)[0] * 255, 0, 255).astype(np.uint8)),
            "mean_gate": None if diag.mean_gate is None
            else round(float(diag.mean_gate.mean()), 6),
        }
        if self.label is not None:
            rep = iou(pred[None], self.label[None], self.cfg.num_classes)
            payload["iou"] = {"background": rep.get(0), "object": rep.get(1),
                              "boundary": rep.get(2)}
        self.frame_seq += 1
        return {"type": "frame", "seq": self.frame_seq, "payload": payload}

    def _broadcast(self, message: dict):
        with self.sub_lock:
            subs = list(self.subscribers)
        for s in subs:
            if not s.send_json(message):
                self.unsubscribe(s)

    # -- commands ----------------------------------------------------------

    def _apply(self, cmd: dict) -> Optional[str]:
        """Returns an error reason, or None on success."""
        ctype = cmd.get("type")
        payload = cmd.get("payload") or {}
        try:
            if ctype == "pause":
                self.paused = True
            elif ctype == "resume":
                self.paused = False
            elif ctype == "step":
                n = int(payload.get("n", 1))
                if n < 1:
                    return "step count must be >= 1"
                self.pending_steps += n
            elif ctype == "set_rate":
                sps = float(payload.get("sps", 0))
                if not 0 < sps <= 1000:
                    return "sps must be in (0, 1000]"
                self.rate = sps
            elif ctype == "shift":
                dx, dy = int(payload.get("dx", 0)), int(payload.get("dy", 0))
                self.image = shift_image(self.image, dx, dy, fill=0.0)
                if self.label is not None:
                    self.label = shift_image(self.label, dx, dy, fill=0)
                self._rebuild_env()
            elif ctype == "gray_region":
                rect = tuple(int(payload[k]) for k in ("x", "y", "w", "h"))
                self.image = gray_region(self.image, rect)
                self._rebuild_env()
            elif ctype == "set_image":
                arr = decode_png_b64(payload["png"])
                img = Image.fromarray(arr)
                if img.size != (self.resolution, self.resolution):
                    img = img.resize((self.resolution, self.resolution), Image.BOX)
                self.image = (np.asarray(img, dtype=np.float32) / 255.0) - 0.5
                self.label = None  # uploaded images carry no label
                self._rebuild_env()
            elif ctype == "reset_state_region":
                rect = [int(payload[k]) for k in ("x", "y", "w", "h")]
                f = self.cfg.resolution_factor
                x, y, w, h = (v // f for v in rect)
                state = self.grid.state.data
                if w < 1 or h < 1 or x < 0 or y < 0 or \
                        x + w > state.shape[2] or y + h > state.shape[1]:
                    return f"rect {rect} outside the state grid"
                state[0, y:y + h, x:x + w, :] = self.streams.init.normal(
                    (h, w, state.shape[3]))
            else:
                return f"unknown command type {ctype!r}"
        except (KeyError, TypeError, ValueError, OSError) as e:
            # OSError covers PIL decode failures on bad set_image payloads
            return f"bad {ctype} payload: {e}"
        return None

    def _drain_commands(self):
        while True:
            try:
                sub, cmd = self.commands.get_nowait()
            except queue.Empty:
                return
            reason = self._apply(cmd)
            seq = cmd.get("seq", 0)
            if reason is None:
                sub.send_json({"type": "ack", "seq": seq})
            else:
                sub.send_json({"type": "error", "seq": seq, "reason": reason})

    # -- loop ---------------------------------------------------------------

    def run_loop(self):
        next_due = time.monotonic()
        while not self.stop_flag.is_set():
            self._drain_commands()
            now = time.monotonic()
            if self.pending_steps > 0:
                self._broadcast(self._step_and_frame())
                self.pending_steps -= 1
            elif not self.paused and now >= next_due:
                self._broadcast(self._step_and_frame())
                next_due = max(next_due + 1.0 / self.rate, now)
            else:
                time.sleep(0.002)

    def subscribe(self, sub: Subscriber):
        with self.sub_lock:
            self.subscribers.append(sub)

    def unsubscribe(self, sub: Subscriber):
        with self.sub_lock:
            if sub in self.subscribers:
                self.subscribers.remove(sub)

    def stop(self):
        self.stop_flag.set()


class ProbeServer:
    """Accepts HTTP(+WebSocket upgrade) connections for one ProbeSession."""

    def __init__(self, session: ProbeSession, host: str = "127.0.0.1",
                 port: int = 8765, ui_dir: Optional[str] = None):
        self.session = session
        self.host = host
        self.port = port
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self.sock = socket.create_server((host, port))
        self.sock.settimeout(0.2)
        self.port = self.sock.getsockname()[1]
        self.threads: list[threading.Thread] = []
        self.stop_flag = threading.Event()

    def serve_forever(self):
        loop = threading.Thread(target=self.session.run_loop, daemon=True)
        loop.start()
        try:
            while not self.stop_flag.is_set():
                try:
                    conn, _ = self.sock.accept()
                except socket.timeout:
                    continue
                t = threading.Thread(target=self._handle, args=(conn,), daemon=True)
                t.start()
                self.threads.append(t)
        finally:
            self.session.stop()
            self.sock.close()

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t

    def stop(self):
        self.stop_flag.set()
        self.session.stop()

    # -- connection handling -------------------------------------------------

    def _handle(self, conn: socket.socket):
        try:
            request = b""
            conn.settimeout(5.0)
            while b"\r\n\r\n" not in request:
                chunk = conn.recv(4096)
                if not chunk:
                    return
                request += chunk
            head = request.split(b"\r\n\r\n", 1)[0].decode("latin1")
            lines = head.split("\r\n")
            path = lines[0].split(" ")[1] if len(lines[0].split(" ")) > 1 else "/"
            headers = {}
            for ln in lines[1:]:
                if ":" in ln:
                    k, v = ln.split(":", 1)
                    headers[k.strip().lower()] = v.strip()

            if headers.get("upgrade", "").lower() == "websocket":
                self._websocket(conn, headers)
            else:
                self._static(conn, path)
        except (OSError, SocketClosed):
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _static(self, conn: socket.socket, path: str):
        if self.ui_dir is None:
            body = b"cellseg probe service: connect via WebSocket"
            conn.sendall(b"HTTP/1.1 200 OK\r\nContent-Type: text/plain\r\n"
                         + f"Content-Length: {len(body)}\r\n\r\n".encode() + body)
            return
        rel = path.split("?")[0].lstrip("/") or "index.html"
        target = (self.ui_dir / rel).resolve()
        if not str(target).startswith(str(self.ui_dir.resolve())) or not target.is_file():
            conn.sendall(b"HTTP/1.1 404 Not Found\r\nContent-Length: 9\r\n\r\nnot found")
            return
        body = target.read_bytes()
        mime = _MIME.get(target.suffix, "application/octet-stream")
        conn.sendall(f"HTTP/1.1 200 OK\r\nContent-Type: {mime}\r\n"
                     f"Content-Length: {len(body)}\r\n\r\n".encode() + body)

    def _websocket(self, conn: socket.socket, headers: dict):
        key = headers.get("sec-websocket-key")
        if not key:
            conn.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
            return
        conn.sendall(
            ("HTTP/1.1 101 Switching Protocols\r\n"
             "Upgrade: websocket\r\nConnection: Upgrade\r\n"
             f"Sec-WebSocket-Accept: {accept_key(key)}\r\n\r\n").encode())
        conn.settimeout(None)
        sub = Subscriber(sock=conn, lock=threading.Lock())
        self.session.subscribe(sub)
        last_seq = 0
        try:
            while not self.stop_flag.is_set():
                opcode, payload = read_frame(conn)
                if opcode == 8:      # close
                    break
                if opcode == 9:      # ping
                    with sub.lock:
                        write_frame(conn, payload, opcode=10)
                    continue
                if opcode != 1:
                    continue
                try:
                    cmd = json.loads(payload.decode("utf-8"))
                    if not isinstance(cmd, dict):
                        raise ValueError("not an object")
                except (ValueError, UnicodeDecodeError) as e:
                    sub.send_json({"type": "error", "seq": 0,
                                   "reason": f"malformed JSON: {e}"})
                    continue
                seq = cmd.get("seq")
                if not isinstance(seq, int) or seq <= last_seq:
                    sub.send_json({"type": "error", "seq": seq if isinstance(seq, int) else 0,
                                   "reason": f"seq must increase (last {last_seq})"})
                    continue
                last_seq = seq
                self.session.commands.put((sub, cmd))
        except (SocketClosed, OSError):
            pass
        finally:
            self.session.unsubscribe(sub)


def serve(checkpoint_path, port: int = 8765, host: str = "127.0.0.1",
          resolution: int = 48, seed: int = 0, rate: float = 8.0,
          ui_dir: Optional[str] = None) -> ProbeServer:
    params, cfg, _ = load_checkpoint(checkpoint_path)
    session = ProbeSession(params, cfg, resolution=resolution, seed=seed, rate=rate)
    return ProbeServer(session, host=host, port=port, ui_dir=ui_dir)
