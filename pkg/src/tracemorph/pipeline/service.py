"""Read-only HTTP service over a directory of trace bundles.

Endpoints (JSON unless noted):
  GET  /api/cases                                   -> {"cases": [ids]}
  GET  /api/cases/{id}/meta                         -> meta key/values
  GET  /api/cases/{id}/image/{name}                 -> PGM bytes
  GET  /api/cases/{id}/field/{forward|inverse}      -> PLSG bytes
  POST /api/cases/{id}/trace                        -> mapped points
  POST /api/cases/{id}/grade                        -> append to grades log
  GET  /api/cases/{id}/grades                       -> entries + averages

Trace queries are answered by bilinear sampling of the stored displacement
fields with the same code path in-process callers use, so responses match
library results bit for bit. Grade submissions append one JSON line each to
``grades.log`` under the bundle root.
"""

from __future__ import annotations

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from tracemorph.grid import VectorField2D, read_grid
from tracemorph.pipeline.config import read_meta
from tracemorph.pipeline.translate import BUNDLE_FILES, trace_points

IMAGE_NAMES = ("source", "translated", "structure_source", "structure_deformed")
GRADE_KEYS = ("progression", "realism", "traceability")


class BundleIndex:
    """Immutable view of the bundle directory, built once at startup; field
    tensors are cached on first use."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.cases: dict[str, Path] = {}
        for meta_path in sorted(self.root.glob("*/meta.txt")):
            d = meta_path.parent
            if all((d / name).exists() for name in BUNDLE_FILES):
                self.cases[d.name] = d
        self._fields: dict[tuple[str, str], VectorField2D] = {}
        self._lock = threading.Lock()

    def case_ids(self) -> list[str]:
        return sorted(self.cases)

    def meta(self, case_id: str) -> dict[str, str]:
        return read_meta(self.cases[case_id] / "meta.txt")

    def image_bytes(self, case_id: str, name: str) -> bytes:
        return (self.cases[case_id] / f"{name}.pgm").read_bytes()

    def field_bytes(self, case_id: str, direction: str) -> bytes:
        return (self.cases[case_id] / f"{direction}_field.plsg").read_bytes()

    def field(self, case_id: str, direction: str) -> VectorField2D:
        key = (case_id, direction)
        with self._lock:
            if key not in self._fields:
                grid = read_grid(self.cases[case_id] / f"{direction}_field.plsg")
                if not isinstance(grid, VectorField2D):
                    raise ValueError(f"{case_id}: {direction} field is not 2-channel")
                self._fields[key] = grid
            return self._fields[key]

    def append_grade(self, case_id: str, entry: dict) -> int:
        line = json.dumps({"case_id": case_id, **entry}, sort_keys=True)
        with self._lock:
            with open(self.root / "grades.log", "a") as f:
                f.write(line + "\n")
            return len(self.read_grades(case_id))

    def read_grades(self, case_id: str | None = None) -> list[dict]:
        path = self.root / "grades.log"
        if not path.exists():
            return []
        entries = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        if case_id is not None:
            entries = [e for e in entries if e.get("case_id") == case_id]
        return entries


def _grade_averages(entries: list[dict]) -> dict[str, float]:
    if not entries:
        return {}
    return {k: sum(e[k] for e in entries) / len(entries) for k in GRADE_KEYS}


class _Handler(BaseHTTPRequestHandler):
    index: BundleIndex  # injected by make_server
    ui_dir: Path | None = None

    # --- helpers ---------------------------------------------------------
    def _send(self, status: int, body: bytes, content_type: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _json(self, status: int, obj) -> None:
        self._send(status, json.dumps(obj).encode(), "application/json")

    def _error(self, status: int, message: str) -> None:
        self._json(status, {"error": message})

    def _read_body(self):
        length = int(self.headers.get("Content-Length", "0"))
        if length <= 0:
            raise ValueError("missing request body")
        return json.loads(self.rfile.read(length))

    def log_message(self, fmt, *args):  # quiet by default
        pass

    # --- routing ---------------------------------------------------------
    def do_GET(self) -> None:
        try:
            path = self.path.split("?", 1)[0]
            if path == "/api/cases":
                self._json(200, {"cases": self.index.case_ids()})
                return
            m = re.fullmatch(r"/api/cases/([\w-]+)/meta", path)
            if m:
                case_id = m.group(1)
                if case_id not in self.index.cases:
                    self._error(404, f"unknown case {case_id!r}")
                    return
                self._json(200, self.index.meta(case_id))
                return
            m = re.fullmatch(r"/api/cases/([\w-]+)/image/([\w]+)", path)
            if m:
                case_id, name = m.groups()
                if case_id not in self.index.cases:
                    self._error(404, f"unknown case {case_id!r}")
                    return
                if name not in IMAGE_NAMES:
                    self._error(404, f"unknown image {name!r}")
                    return
                self._send(200, self.index.image_bytes(case_id, name), "image/x-portable-graymap")
                return
            m = re.fullmatch(r"/api/cases/([\w-]+)/field/(forward|inverse)", path)
            if m:
                case_id, direction = m.groups()
                if case_id not in self.index.cases:
                    self._error(404, f"unknown case {case_id!r}")
                    return
                self._send(200, self.index.field_bytes(case_id, direction), "application/octet-stream")
                return
            m = re.fullmatch(r"/api/cases/([\w-]+)/grades", path)
            if m:
                case_id = m.group(1)
                if case_id not in self.index.cases:
                    self._error(404, f"unknown case {case_id!r}")
                    return
                entries = self.index.read_grades(case_id)
                self._json(200, {"entries": entries, "averages": _grade_averages(entries)})
                return
            if self._maybe_static(path):
                return
            self._error(404, f"no route for {path!r}")
        except Exception as e:  # pragma: no cover - defensive
            self._error(500, str(e))

    def _maybe_static(self, path: str) -> bool:
        if self.ui_dir is None:
            if path == "/":
                self._json(200, {"service": "trace bundles", "cases": len(self.index.cases)})
                return True
            return False
        rel = "index.html" if path == "/" else path.lstrip("/")
        target = (self.ui_dir / rel).resolve()
        if not str(target).startswith(str(self.ui_dir.resolve())) or not target.is_file():
            return False
        types = {
            ".html": "text/html",
            ".js": "text/javascript",
            ".css": "text/css",
            ".map": "application/json",
        }
        self._send(200, target.read_bytes(), types.get(target.suffix, "application/octet-stream"))
        return True

    def do_POST(self) -> None:
        try:
            path = self.path.split("?", 1)[0]
            m = re.fullmatch(r"/api/cases/([\w-]+)/trace", path)
            if m:
                self._handle_trace(m.group(1))
                return
            m = re.fullmatch(r"/api/cases/([\w-]+)/grade", path)
            if m:
                self._handle_grade(m.group(1))
                return
            self._error(404, f"no route for {path!r}")
        except json.JSONDecodeError:
            self._error(400, "request body is not valid JSON")
        except ValueError as e:
            self._error(400, str(e))

    def _handle_trace(self, case_id: str) -> None:
        if case_id not in self.index.cases:
            self._error(404, f"unknown case {case_id!r}")
            return
        body = self._read_body()
        direction = body.get("direction")
        if direction not in ("forward", "inverse"):
            self._error(400, "direction must be 'forward' or 'inverse'")
            return
        raw_points = body.get("points")
        if not isinstance(raw_points, list):
            self._error(400, "points must be a list of {x, y}")
            return
        try:
            pts = [(float(p["x"]), float(p["y"])) for p in raw_points]
        except (TypeError, KeyError) as e:
            self._error(400, f"malformed point: {e}")
            return
        field = self.index.field(case_id, direction)
        mapped = trace_points(field, pts)
        self._json(200, {"points": [{"x": x, "y": y} for x, y in mapped]})

    def _handle_grade(self, case_id: str) -> None:
        if case_id not in self.index.cases:
            self._error(404, f"unknown case {case_id!r}")
            return
        body = self._read_body()
        entry = {}
        for key in GRADE_KEYS:
            value = body.get(key)
            if not isinstance(value, int) or not 1 <= value <= 5:
                self._error(400, f"{key} must be an integer in 1..5")
                return
            entry[key] = value
        entry["note"] = str(body.get("note", ""))
        count = self.index.append_grade(case_id, entry)
        self._json(200, {"status": "ok", "grades_for_case": count})


def make_server(
    bundle_dir: str | Path, bind_addr: str = "127.0.0.1:0", ui_dir: str | Path | None = None
) -> ThreadingHTTPServer:
    host, _, port_s = bind_addr.partition(":")
    index = BundleIndex(bundle_dir)
    if not index.cases:
        raise FileNotFoundError(f"{bundle_dir}: no complete bundles to serve")
    handler = type(
        "BoundHandler",
        (_Handler,),
        {"index": index, "ui_dir": Path(ui_dir) if ui_dir else None},
    )
    return ThreadingHTTPServer((host or "127.0.0.1", int(port_s or 0)), handler)


def serve(bundle_dir: str | Path, bind_addr: str, ui_dir: str | Path | None = None) -> None:
    server = make_server(bundle_dir, bind_addr, ui_dir)
    host, port = server.server_address[:2]
    print(
        f"serving {len(server.RequestHandlerClass.index.cases)} bundles on http://{host}:{port}",
        flush=True,
    )
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
