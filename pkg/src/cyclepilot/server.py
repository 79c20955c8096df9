"""HTTP control surface for a live run.

Serves the orchestrator's tick snapshots and accepts expert commands over
local TCP with JSON bodies.  Endpoints:

    GET  /state       latest completed-tick snapshot
    GET  /stream      newline-delimited snapshots, one per tick, no gaps
    POST /command     enqueue an expert command, returns the ack
    GET  /run-report  final run report once the loop has finished

All mutation funnels through the orchestrator's command queue, so any
number of concurrent readers leaves the run byte-identical.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from cyclepilot.run.loop import CommandRejected, RunState

__all__ = ["ControlServer"]

_STATUS_BY_REASON = {"invalid": 400, "not_found": 404}


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    # the server instance attaches .state / .server_ref
    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _send_json(self, obj, status=200):
        body = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self):
        state: RunState = self.server.state
        if self.path == "/state":
            self._send_json(state.snapshot())
        elif self.path == "/stream":
            self._stream(state)
        elif self.path == "/run-report":
            report = self.server.report_dict()
            if report is None:
                self._send_json({"error": "run not finished"}, status=404)
            else:
                self._send_json(report)
        else:
            self._send_json({"error": "unknown path"}, status=404)

    def _stream(self, state: RunState):
        q = state.add_listener()
        try:
            self.send_response(200)
            self.send_header("Content-Type", "application/x-ndjson")
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Transfer-Encoding", "chunked")
            self.end_headers()
            while True:
                snap = q.get()
                if snap is None:  # cut off after overrun
                    break
                data = json.dumps(snap).encode() + b"\n"
                self.wfile.write(f"{len(data):x}\r\n".encode() + data + b"\r\n")
                self.wfile.flush()
                if snap.get("finished"):
                    break
            self.wfile.write(b"0\r\n\r\n")
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            state.remove_listener(q)
            self.close_connection = True

    def do_POST(self):
        state: RunState = self.server.state
        if self.path != "/command":
            self._send_json({"error": "unknown path"}, status=404)
            return
        length = int(self.headers.get("Content-Length", 0))
        try:
            cmd = json.loads(self.rfile.read(length) or b"")
        except (json.JSONDecodeError, UnicodeDecodeError):
            self._send_json({"error": "body must be JSON"}, status=400)
            return
        try:
            ack = state.post_command(cmd)
        except CommandRejected as exc:
            self._send_json(
                {"error": exc.message, "reason": exc.reason},
                status=_STATUS_BY_REASON.get(exc.reason, 400),
            )
            return
        self._send_json(ack)


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True


class ControlServer:
    """Background HTTP server bound to one RunState."""

    def __init__(self, state: RunState, port: int, host: str = "127.0.0.1"):
        self.state = state
        self._report = None
        self._report_lock = threading.Lock()
        self._httpd = _Server((host, port), _Handler)
        self._httpd.state = state
        self._httpd.report_dict = self._report_dict
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    def _report_dict(self):
        if not self.state.finished or self.state.abort_reason:
            return None
        with self._report_lock:
            if self._report is None:
                self._report = self.state.build_report().to_dict()
            return self._report

    def start(self):
        self._thread.start()
        return self

    def stop(self):
        self._httpd.shutdown()
        self._httpd.server_close()
