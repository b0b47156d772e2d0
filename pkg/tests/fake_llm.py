"""In-process HTTP stand-in for an Ollama-style chat endpoint."""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class FakeLLM:
    """Serves scripted behaviours in order, repeating the last one.

    A behaviour is ``("ok", content)``, ``("raw", body_text)``,
    ``("status", code)`` or ``("hang", seconds)``.
    """

    def __init__(self, behaviours):
        self.behaviours = list(behaviours)
        self.requests: list[dict] = []
        fake = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802
                n = int(self.headers.get("Content-Length", 0))
                fake.requests.append(json.loads(self.rfile.read(n) or b"{}"))
                i = min(len(fake.requests), len(fake.behaviours)) - 1
                kind, arg = fake.behaviours[i]
                if kind == "hang":
                    time.sleep(arg)
                    kind, arg = "ok", "{}"
                if kind == "status":
                    self.send_response(arg)
                    self.end_headers()
                    return
                body = arg if kind == "raw" else json.dumps(
                    {"model": "fake", "message": {"role": "assistant", "content": arg}, "done": True})
                data = body.encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                try:
                    self.wfile.write(data)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def cot_answer(obj: dict) -> str:
    return ("<think>\nThe top attention patches sit early in the run, and the pressure channel "
            "dominates saliency. {\"draft\": true}\n</think>\n" + json.dumps(obj))


FAULTS = [
    ("hang", 1.0),
    ("raw", "{not json"),
    ("ok", "I think the answer is {\"important_features\": [[99, 0.5]], \"important_timestep_ranges\": []}"),
    ("ok", "{\"important_features\": [], \"important_timestep_ranges\": [[120, 400, 0.5]]}"),
    ("status", 500),
    ("ok", "no json here at all"),
]
