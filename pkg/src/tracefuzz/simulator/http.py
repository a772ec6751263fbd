"""Wall-clock HTTP front end over the simulator core.

Serves an OpenAI-style streaming completion endpoint plus the control surface
the execution adapter probes (health, reset, info, decode mode, KV events).
A driver thread keeps the core's virtual clock synced to wall time, so F2-style
descheduling shows up as real streaming latency.  A crash kills in-flight
completion streams abruptly (connection loss) but leaves the control plane up:
/health reports 503 until /control/reset revives the engine, standing in for
the external supervisor a real deployment would have.
"""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from ..trace import parse_prompt, token_word
from .config import SimConfig
from .engine import SimCore


class SimHttpServer:
    def __init__(self, config: SimConfig, host: str = "127.0.0.1", port: int = 0):
        self.config = config
        self.lock = threading.RLock()
        self.core = SimCore(config)
        self.generation = 0  # bumped on reset so stale streams terminate
        self.canonical = False
        self._rid_counter = 0
        self._stop = threading.Event()
        server = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                pass

            def _json(self, code: int, doc: dict) -> None:
                body = json.dumps(doc).encode("utf-8")
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if self.path == "/health":
                    with server.lock:
                        ok = not server.core.crashed
                    self._json(200 if ok else 503, {"status": "ok" if ok else "crashed"})
                elif self.path == "/control/info":
                    with server.lock:
                        info = server.info()
                    self._json(200, info)
                elif self.path == "/kv_events":
                    with server.lock:
                        lines = [e.to_json_line() for e in server.core.kv_events]
                    body = ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")
                    self.send_response(200)
                    self.send_header("Content-Type", "application/x-ndjson")
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                else:
                    self._json(404, {"error": "no such path"})

            def do_POST(self):
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b"{}"
                try:
                    doc = json.loads(raw or b"{}")
                except json.JSONDecodeError:
                    self._json(400, {"error": "body is not JSON"})
                    return
                if self.path == "/control/reset":
                    server.reset()
                    self._json(200, {"status": "reset"})
                elif self.path == "/control/decode_mode":
                    with server.lock:
                        server.canonical = bool(doc.get("canonical", False))
                        server.core.canonical_decode = server.canonical
                    self._json(200, {"canonical": server.canonical})
                elif self.path == "/v1/completions":
                    self._completions(doc)
                else:
                    self._json(404, {"error": "no such path"})

            def _completions(self, doc: dict) -> None:
                prompt = doc.get("prompt", "")
                tokens = parse_prompt(prompt) if isinstance(prompt, str) else tuple(int(t) for t in prompt)
                with server.lock:
                    if server.core.crashed:
                        self.close_connection = True
                        return
                    generation = server.generation
                    server._rid_counter += 1
                    rid = f"h~{server._rid_counter:06d}"
                    err = server.core.submit(
                        rid=rid,
                        prompt=tokens,
                        adapter=doc.get("model", "BASE"),
                        max_tokens=int(doc.get("max_tokens", 16)),
                        n_completions=int(doc.get("n", 1)),
                        request_seed=doc.get("seed"),
                        logprobs=doc.get("logprobs"),
                        dispatched_ms=server.core.clock_ms,
                    )
                if err is not None:
                    self._json(400, {"error": err})
                    return
                if doc.get("stream", True):
                    self._stream(rid, generation)
                else:
                    self._blocking(rid, generation)

            def _poll(self, rid: str, generation: int):
                """One locked snapshot: (alive, outputs, done)."""
                with server.lock:
                    if server.generation != generation or server.core.crashed:
                        return False, [], True
                    req = server.core.requests.get(rid)
                    if req is None:
                        return False, [], True
                    outs = [list(stream) for stream in req.outputs]
                    return True, outs, req.status is not None

            def _stream(self, rid: str, generation: int) -> None:
                self.send_response(200)
                self.send_header("Content-Type", "text/event-stream")
                self.send_header("Cache-Control", "no-cache")
                self.send_header("Connection", "close")
                self.end_headers()
                sent = 0
                try:
                    while not server._stop.is_set():
                        alive, outs, done = self._poll(rid, generation)
                        if not alive:
                            # Crash or reset: drop the connection mid-stream.
                            self.close_connection = True
                            return
                        stream0 = outs[0] if outs else []
                        while sent < len(stream0):
                            word = token_word(stream0[sent])
                            chunk = {"choices": [{"index": 0, "text": (" " if sent else "") + word}]}
                            self.wfile.write(f"data: {json.dumps(chunk)}\n\n".encode("utf-8"))
                            self.wfile.flush()
                            sent += 1
                        if done:
                            self.wfile.write(b"data: [DONE]\n\n")
                            self.wfile.flush()
                            return
                        time.sleep(server.config.tick_ms / 1000.0)
                except (BrokenPipeError, ConnectionResetError):
                    # Client went away: graceful abort and disconnect look the
                    # same from here, so treat both as a disconnect.
                    with server.lock:
                        if server.generation == generation and not server.core.crashed:
                            server.core.cancel(rid, disconnect=True)
                finally:
                    self.close_connection = True

            def _blocking(self, rid: str, generation: int) -> None:
                while not server._stop.is_set():
                    alive, outs, done = self._poll(rid, generation)
                    if not alive:
                        self.close_connection = True
                        return
                    if done:
                        texts = [" ".join(token_word(t) for t in stream) for stream in outs]
                        self._json(200, {"choices": [{"index": i, "text": s} for i, s in enumerate(texts)]})
                        return
                    time.sleep(server.config.tick_ms / 1000.0)

        self.httpd = ThreadingHTTPServer((host, port), Handler)
        self.httpd.daemon_threads = True
        self._serve_thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._driver_thread = threading.Thread(target=self._drive, daemon=True)

    # -- control -----------------------------------------------------------

    @property
    def base_url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def info(self) -> dict:
        return {
            "engine": "tracefuzz-sim",
            "vocab_size": self.config.vocab_size,
            "block_size_tokens": self.config.block_size_tokens,
            "total_kv_blocks": self.config.total_kv_blocks,
            "tick_ms": self.config.tick_ms,
            "adapters": list(self.config.adapters),
            "max_loras_per_batch": self.config.max_loras_per_batch,
            "chunked_prefill_limit": self.config.chunked_prefill_limit,
        }

    def reset(self) -> None:
        with self.lock:
            self.core = SimCore(self.config)
            self.core.canonical_decode = self.canonical
            self.generation += 1
            self._epoch = time.monotonic()

    def start(self) -> "SimHttpServer":
        self._epoch = time.monotonic()
        self._serve_thread.start()
        self._driver_thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self.httpd.shutdown()
        self.httpd.server_close()

    # -- clock driver --------------------------------------------------------

    def _drive(self) -> None:
        # Keep virtual time caught up with wall time.  A fault that inflates
        # the virtual clock (engine stall) makes this loop idle in wall time,
        # which is exactly the latency a client should feel.
        while not self._stop.is_set():
            with self.lock:
                target = int((time.monotonic() - self._epoch) * 1000)
                steps = 0
                while not self.core.crashed and self.core.clock_ms < target and steps < 10_000:
                    self.core.step()
                    steps += 1
            time.sleep(self.config.tick_ms / 1000.0)


def serve_http(config: SimConfig, host: str = "127.0.0.1", port: int = 0) -> SimHttpServer:
    return SimHttpServer(config, host, port).start()
