from __future__ import annotations

import shutil
from pathlib import Path

import pytest

import kgembed

TESTS_DATA = Path(__file__).parent / "data"
PACKAGE_DATA = Path(kgembed.__file__).parent / "data"


@pytest.fixture
def fixture_config(tmp_path: Path) -> Path:
    """Copy of the 4-document fixture pipeline inside a fresh directory."""
    for name in ("fixture_corpus.jsonl", "fixture_pipeline.toml"):
        shutil.copy(TESTS_DATA / name, tmp_path / name)
    return tmp_path / "fixture_pipeline.toml"


@pytest.fixture
def sample_config(tmp_path: Path) -> Path:
    """Copy of the bundled sample pipeline so outputs land in tmp_path."""
    for path in PACKAGE_DATA.iterdir():
        if path.is_file():
            shutil.copy(path, tmp_path / path.name)
    return tmp_path / "sample_pipeline.toml"


class _Service:
    """A local JSON-over-HTTP endpoint driven by a python handler."""

    def __init__(self, handler):
        import http.server
        import json
        import threading

        service = self
        self.requests: list = []

        class Handler(http.server.BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length) or b"null")
                service.requests.append({"payload": payload, "headers": dict(self.headers)})
                status, body = handler(payload)
                raw = body if isinstance(body, bytes) else json.dumps(body).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def log_message(self, *args):
                pass

        self.server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/v1"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def http_service():
    """Factory: ``http_service(handler)`` where ``handler(payload) -> (status, body)``."""
    started = []

    def start(handler):
        service = _Service(handler)
        started.append(service)
        return service

    yield start
    for service in started:
        service.close()
