"""Embedded HTTP service for collecting human judgments.

Serves session plans (2AFC and JND) as JSON over HTTP, records votes with
client-reported latencies, enforces sentinel QA, and appends into the dataset
store. Vote writes funnel through the store's single-writer log; sessions are
held in memory and finalized into sessions.jsonl.

Timing (1 s display, 250 ms gap) is enforced client-side; the server flags
answers faster than 200 ms as suspect rather than pretending to control
rendering.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from . import dataset as ds
from .errors import ConflictError, ConfigurationError, NotFoundError, PatchSimError
from .imagecore import Rng

SUSPECT_LATENCY_MS = 200
SESSION_TTL_S = 3600.0
JND_DISPLAY_MS = 1000
JND_GAP_MS = 250

_PLACEHOLDER_PAGE = b"""<!doctype html>
<html><head><meta charset="utf-8"><title>patchsim collection</title></head>
<body><h1>patchsim collection service</h1>
<p>No UI bundle configured. The JSON API lives under /api/.</p></body></html>
"""


@dataclass
class ApiSession:
    session_id: str
    kind: str  # 2afc | jnd
    plan: list[str]
    cursor: int = 0
    answers: dict[str, dict] = field(default_factory=dict)
    sentinel_correct: int = 0
    sentinel_total: int = 0
    jnd_identical_correct: int = 0
    jnd_identical_total: int = 0
    jnd_noise_correct: int = 0
    jnd_noise_total: int = 0
    latencies: list[float] = field(default_factory=list)
    last_active: float = 0.0
    status: str = "active"  # active | done | expired

    @property
    def done(self) -> int:
        return len(self.answers)


class CollectService:
    """Session and vote bookkeeping behind the HTTP handler."""

    def __init__(self, store: ds.DatasetStore, *, seed: int = 0,
                 twoafc_judgments: int = 60,
                 twoafc_sentinels: int = ds.SENTINELS_PER_2AFC_SESSION,
                 keep_failed: bool = False, ui_dir=None,
                 session_ttl: float = SESSION_TTL_S, clock=time.monotonic):
        self.store = store
        self.seed = seed
        self.twoafc_judgments = twoafc_judgments
        self.twoafc_sentinels = twoafc_sentinels
        self.keep_failed = keep_failed
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self.session_ttl = session_ttl
        self.clock = clock
        self._lock = threading.RLock()
        self._sessions: dict[str, ApiSession] = {}
        self._session_counter = 0
        self._accepted = 0
        self._pending: dict[str, int] = {}  # record id -> answers promised by active plans
        self._triplets = {t.id: t for t in store.triplets()}
        self._pairs = {p.id: p for p in store.jnd_pairs()}
        self._img_tokens: dict[str, str] = {}
        self._rel_tokens: dict[str, str] = {}
        self._server = None
        self._thread = None

    # -- content-addressed image names ---------------------------------------

    def img_url(self, rel: str) -> str:
        with self._lock:
            tok = self._rel_tokens.get(rel)
            if tok is None:
                digest = hashlib.sha256(self.store.image_bytes(rel)).hexdigest()[:24]
                tok = f"{digest}.png"
                self._rel_tokens[rel] = tok
                self._img_tokens[tok] = rel
            return f"/img/{tok}"

    def image_for_token(self, token: str) -> bytes:
        with self._lock:
            rel = self._img_tokens.get(token)
        if rel is None:
            raise NotFoundError(f"unknown image {token}")
        return self.store.image_bytes(rel)

    # -- sessions --------------------------------------------------------------

    def create_session(self, kind: str) -> ApiSession:
        if kind not in ("2afc", "jnd"):
            raise ConfigurationError(f"unknown session kind {kind!r}")
        with self._lock:
            self._session_counter += 1
            rng = Rng(self.seed, stream=0x5E5510).derive(self._session_counter)
            sid = f"s{self._session_counter:06d}-{rng.bytes(6).hex()}"
            if kind == "2afc":
                plan = ds.make_2afc_session(
                    self.store, seed=int(rng.integers(0, 2 ** 63)),
                    n_judgments=self.twoafc_judgments,
                    n_sentinels=self.twoafc_sentinels, pending=self._pending)
                for item in plan:
                    rec = self._triplets[item]
                    if not rec.is_sentinel:
                        self._pending[item] = self._pending.get(item, 0) + 1
            else:
                plan = ds.make_jnd_session(
                    self.store, seed=int(rng.integers(0, 2 ** 63)), pending=self._pending)
                for item in plan:
                    rec = self._pairs[item]
                    if rec.phase == "test":
                        self._pending[item] = self._pending.get(item, 0) + 1
            session = ApiSession(session_id=sid, kind=kind, plan=plan,
                                 last_active=self.clock())
            self._sessions[sid] = session
            return session

    def _get_session(self, sid: str) -> ApiSession:
        s = self._sessions.get(sid)
        if s is None:
            raise NotFoundError(f"unknown session {sid}")
        if s.status == "active" and self.clock() - s.last_active > self.session_ttl:
            s.status = "expired"
            self._release_pending(s)
            self._finalize(s)
        if s.status == "expired":
            raise NotFoundError(f"session {sid} expired")
        return s

    def _release_pending(self, s: ApiSession) -> None:
        for item in s.plan[s.cursor:]:
            if item in self._pending:
                self._pending[item] -= 1
                if self._pending[item] <= 0:
                    del self._pending[item]

    def current_item(self, sid: str) -> dict:
        with self._lock:
            s = self._get_session(sid)
            s.last_active = self.clock()
            if s.cursor >= len(s.plan):
                return {"done": True, "session_id": sid}
            item = s.plan[s.cursor]
            if s.kind == "2afc":
                rec = self._triplets[item]
                return {"id": item, "kind": "2afc",
                        "ref_url": self.img_url(rec.ref_path),
                        "p0_url": self.img_url(rec.p0_path),
                        "p1_url": self.img_url(rec.p1_path)}
            rec = self._pairs[item]
            return {"id": item, "kind": "jnd",
                    "ref_url": self.img_url(rec.ref_path),
                    "probe_url": self.img_url(rec.probe_path),
                    "display_ms": JND_DISPLAY_MS, "gap_ms": JND_GAP_MS}

    def answer(self, sid: str, item: str, *, choice=None, same=None,
               latency_ms: float = 0.0) -> dict:
        with self._lock:
            s = self._get_session(sid)
            s.last_active = self.clock()
            if item in s.answers:
                # duplicate POST of an already-recorded answer: idempotent no-op
                return {"accepted": True, "duplicate": True,
                        "next_available": s.cursor < len(s.plan)}
            if s.cursor >= len(s.plan) or s.plan[s.cursor] != item:
                raise ConflictError(
                    f"item {item} is not the current item of session {sid}")
            if s.kind == "2afc":
                if choice not in (0, 1):
                    raise ConfigurationError("2afc answers need choice 0 or 1")
                vote = self._record_2afc(s, item, int(choice), latency_ms)
            else:
                if not isinstance(same, bool):
                    raise ConfigurationError("jnd answers need a boolean `same`")
                vote = self._record_jnd(s, item, same, latency_ms)
            s.answers[item] = vote
            s.latencies.append(float(latency_ms))
            s.cursor += 1
            self._accepted += 1
            if s.cursor >= len(s.plan):
                s.status = "done"
                self._finalize(s)
            return {"accepted": True, "duplicate": False,
                    "next_available": s.cursor < len(s.plan)}

    def _record_2afc(self, s, item, choice, latency_ms):
        rec = self._triplets[item]
        phase = "sentinel" if rec.is_sentinel else "test"
        if rec.is_sentinel:
            s.sentinel_total += 1
            if choice == rec.sentinel_correct:
                s.sentinel_correct += 1
        else:
            self._consume_pending(item)
        vote = {"session": s.session_id, "kind": "2afc", "item": item,
                "phase": phase, "choice": choice, "latency_ms": float(latency_ms),
                "suspect": latency_ms < SUSPECT_LATENCY_MS}
        self.store.append_vote(vote)
        return vote

    def _record_jnd(self, s, item, same, latency_ms):
        rec = self._pairs[item]
        phase = rec.phase
        if phase == "sentinel":
            s.sentinel_total += 1
            if rec.sentinel_kind == "identical":
                s.jnd_identical_total += 1
                if same:
                    s.jnd_identical_correct += 1
                    s.sentinel_correct += 1
            else:
                s.jnd_noise_total += 1
                if not same:
                    s.jnd_noise_correct += 1
                    s.sentinel_correct += 1
        elif phase == "test":
            self._consume_pending(item)
        vote = {"session": s.session_id, "kind": "jnd", "item": item,
                "phase": phase, "same": bool(same), "latency_ms": float(latency_ms),
                "suspect": latency_ms < SUSPECT_LATENCY_MS}
        self.store.append_vote(vote)
        return vote

    def _consume_pending(self, item):
        if item in self._pending:
            self._pending[item] -= 1
            if self._pending[item] <= 0:
                del self._pending[item]

    def _passed(self, s: ApiSession) -> bool | None:
        if s.status != "done":
            return None
        if s.kind == "2afc":
            return s.sentinel_correct >= ds.SENTINEL_PASS_MIN
        return (s.jnd_identical_correct >= ds.JND_PASS_IDENTICAL_MIN
                and s.jnd_noise_correct >= ds.JND_PASS_NOISE_MIN)

    def _finalize(self, s: ApiSession) -> None:
        self.store.append_session({
            "session": s.session_id, "kind": s.kind, "status": s.status,
            "answered": s.done, "plan_length": len(s.plan),
            "sentinel_correct": s.sentinel_correct, "sentinel_total": s.sentinel_total,
            "passed": self._passed(s),
        })

    def summary(self, sid: str) -> dict:
        with self._lock:
            s = self._sessions.get(sid)
            if s is None:
                raise NotFoundError(f"unknown session {sid}")
            out = {"session_id": sid, "kind": s.kind, "status": s.status,
                   "done": s.done, "total": len(s.plan),
                   "sentinel_correct": s.sentinel_correct,
                   "sentinel_total": s.sentinel_total,
                   "passed": self._passed(s)}
            if s.kind == "jnd":
                out["jnd_sentinels"] = {
                    "identical_correct": s.jnd_identical_correct,
                    "identical_total": s.jnd_identical_total,
                    "noise_correct": s.jnd_noise_correct,
                    "noise_total": s.jnd_noise_total,
                }
            if s.latencies:
                lat = sorted(s.latencies)
                mid = len(lat) // 2
                med = lat[mid] if len(lat) % 2 else (lat[mid - 1] + lat[mid]) / 2.0
                out["median_latency_ms"] = med
            return out

    def audit(self) -> dict:
        """Referential integrity check, run on shutdown and exposed for tests."""
        with self._lock:
            report = self.store.audit()
            report["accepted_answers"] = self._accepted
            report["active_sessions"] = sum(
                1 for s in self._sessions.values() if s.status == "active")
            return report

    # -- static assets ---------------------------------------------------------

    def static_asset(self, path: str) -> tuple[bytes, str] | None:
        if self.ui_dir is None:
            if path in ("/", "/index.html"):
                return _PLACEHOLDER_PAGE, "text/html; charset=utf-8"
            return None
        rel = "index.html" if path == "/" else path.lstrip("/")
        target = (self.ui_dir / rel).resolve()
        if not str(target).startswith(str(self.ui_dir.resolve())) or not target.is_file():
            return None
        ctype = {"html": "text/html; charset=utf-8", "js": "text/javascript",
                 "css": "text/css", "map": "application/json",
                 "png": "image/png"}.get(target.suffix.lstrip("."), "application/octet-stream")
        return target.read_bytes(), ctype

    # -- server lifecycle --------------------------------------------------------

    def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        handler = _make_handler(self)
        self._server = ThreadingHTTPServer((host, port), handler)
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self._server.server_address[1]

    def stop(self) -> dict:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._thread.join(timeout=5)
            self._server = None
        with self._lock:
            for s in self._sessions.values():
                if s.status == "active":
                    s.status = "expired"
                    self._release_pending(s)
                    self._finalize(s)
        return self.audit()


# ---------------------------------------------------------------------------
# HTTP plumbing
# ---------------------------------------------------------------------------

_SUMMARY_RE = re.compile(r"^/api/session/([^/]+)/summary$")

_STATUS_BY_KIND = {"not-found": 404, "conflict": 409, "config": 400,
                   "missing-label": 400, "range": 400}


def _make_handler(service: CollectService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # stay quiet; stderr is for real logs
            pass

        def _send_json(self, obj, status=200, extra_headers=None):
            body = json.dumps(obj).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            for k, v in (extra_headers or {}).items():
                self.send_header(k, v)
            self.end_headers()
            self.wfile.write(body)

        def _send_error_obj(self, exc: PatchSimError):
            status = _STATUS_BY_KIND.get(exc.kind, 400)
            self._send_json({"error": exc.kind, "message": str(exc)}, status=status)

        def _read_body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if length == 0:
                return {}
            try:
                return json.loads(self.rfile.read(length).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise ConfigurationError(f"request body is not valid JSON: {e}") from e

        def do_POST(self):
            try:
                body = self._read_body()
                if self.path == "/api/session":
                    s = service.create_session(body.get("kind", "2afc"))
                    self._send_json({"session_id": s.session_id,
                                     "plan_length": len(s.plan)})
                elif self.path == "/api/answer":
                    out = service.answer(
                        body.get("session", ""), body.get("id", ""),
                        choice=body.get("choice"), same=body.get("same"),
                        latency_ms=float(body.get("latency_ms") or 0.0))
                    self._send_json(out)
                else:
                    self._send_json({"error": "not-found", "message": "no such endpoint"},
                                    status=404)
            except PatchSimError as e:
                self._send_error_obj(e)

        def do_GET(self):
            try:
                path, _, query = self.path.partition("?")
                params = dict(p.split("=", 1) for p in query.split("&") if "=" in p)
                if path == "/api/item":
                    self._send_json(service.current_item(params.get("session", "")))
                    return
                m = _SUMMARY_RE.match(path)
                if m:
                    self._send_json(service.summary(m.group(1)))
                    return
                if path.startswith("/img/"):
                    data = service.image_for_token(path[len("/img/"):])
                    self.send_response(200)
                    self.send_header("Content-Type", "image/png")
                    self.send_header("Content-Length", str(len(data)))
                    self.send_header("Cache-Control",
                                     "public, max-age=31536000, immutable")
                    self.end_headers()
                    self.wfile.write(data)
                    return
                asset = service.static_asset(path)
                if asset is not None:
                    data, ctype = asset
                    self.send_response(200)
                    self.send_header("Content-Type", ctype)
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                    return
                self._send_json({"error": "not-found", "message": "no such endpoint"},
                                status=404)
            except PatchSimError as e:
                self._send_error_obj(e)

    return Handler
