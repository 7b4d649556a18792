"""HTTP service hosting the session protocol for UI and scripted clients.

Endpoints (JSON bodies, JSON responses wrapped in {"ok": ..., ...}):

- POST /session                 create a simulated-camera session -> {session_id}
- POST /session/<id>            {"cmd": "get_state" | "get_guidance" |
                                 "set_virtual_pose" | "capture" | "reset" |
                                 "configure", ...args}
- GET  /healthz                 liveness probe
- GET  /<path>                  optional static frontend files

The camera behind a session is simulated: the client steers a virtual board
pose, the service projects the ground-truth camera and adds detector noise.
Noise draws are keyed by (seed, event counter) so identical command
sequences reproduce identical sessions bit for bit.
"""

from __future__ import annotations

import json
import logging
import threading
import uuid
from dataclasses import replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .errors import CamcalError, InvisiblePoseError
from .geometry import CameraTruth, project_board, project_points
from .session import Session, SessionConfig, SessionPhase, pose_from_dict
from .simulator import DEFAULT_TRUTH, NoiseModel, simulate_detection

logger = logging.getLogger(__name__)

CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".mjs": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".map": "application/json",
    ".json": "application/json",
    ".svg": "image/svg+xml",
    ".png": "image/png",
    ".ico": "image/x-icon",
}


class ProtocolError(CamcalError):
    """Malformed or out-of-order client message."""


class ServiceSession:
    """One simulated-camera session plus its steering state."""

    def __init__(self, config: SessionConfig, truth: CameraTruth, noise: NoiseModel) -> None:
        self.lock = threading.Lock()
        self.config = config
        self.truth = truth
        self.noise = noise
        self.session = Session(config)
        self.virtual_pose = None
        self.event_counter = 0
        self.guidance_requests = 0

    # -- helpers ------------------------------------------------------------

    def _frame_rng(self) -> np.random.Generator:
        rng = np.random.default_rng([self.config.seed, 7, self.event_counter])
        self.event_counter += 1
        return rng

    def _truth_visible(self, pose) -> bool:
        return project_board(
            self.config.board, pose, self.truth.intrinsics, self.truth.distortion,
            self.truth.width, self.truth.height,
        ).visible

    def _state(self) -> dict:
        state = self.session.state_dict()
        state["stats"]["guidance_requests"] = self.guidance_requests
        state["virtual_pose"] = None if self.virtual_pose is None else _pose_dict(self.virtual_pose)
        return state

    # -- commands -----------------------------------------------------------

    def handle(self, msg: dict) -> dict:
        cmd = msg.get("cmd")
        handler = {
            "get_state": self._cmd_get_state,
            "get_guidance": self._cmd_get_guidance,
            "set_virtual_pose": self._cmd_set_virtual_pose,
            "capture": self._cmd_capture,
            "skip_target": self._cmd_skip_target,
            "reset": self._cmd_reset,
            "configure": self._cmd_configure,
        }.get(cmd)
        if handler is None:
            raise ProtocolError(f"unknown command {cmd!r}")
        with self.lock:
            return handler(msg)

    def _cmd_get_state(self, msg: dict) -> dict:
        return self._state()

    def _cmd_get_guidance(self, msg: dict) -> dict:
        self.guidance_requests += 1
        payload = self.session.next_target()
        return payload.to_dict()

    def _cmd_set_virtual_pose(self, msg: dict) -> dict:
        try:
            pose = pose_from_dict(msg["pose"])
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"set_virtual_pose needs a pose object: {exc}") from exc
        self.virtual_pose = pose
        visible = self._truth_visible(pose)
        if self.session.phase is SessionPhase.STARTUP and visible:
            frame = simulate_detection(pose, self.truth, self.config.board, self.noise, self._frame_rng())
            self.session.observe_startup(frame)
        report = self.session.match_report(pose)
        # The camera's view of the board, so the thin client never projects.
        projection = None
        if visible:
            board = self.config.board
            corners, _ = project_points(board.corner_points(), pose, self.truth.intrinsics, self.truth.distortion)
            outline, _ = project_points(board.outline_points(), pose, self.truth.intrinsics, self.truth.distortion)
            projection = {"outline": outline.tolist(), "corners": corners.tolist()}
        return {"match": report.to_dict(), "visible": visible, "projection": projection}

    def _cmd_capture(self, msg: dict) -> dict:
        if self.session.phase is SessionPhase.STARTUP:
            self.session.confirm_startup()
            return {"accepted": True, "state": self._state()}
        if self.session.phase is SessionPhase.CONVERGED:
            return {"accepted": False, "reason": "session already converged", "state": self._state()}
        if self.virtual_pose is None:
            return {"accepted": False, "reason": "no virtual pose set", "state": self._state()}
        report = self.session.match_report(self.virtual_pose)
        if not report.matched:
            return {"accepted": False, "reason": "pose does not match the target",
                    "report": report.to_dict(), "state": self._state()}
        try:
            frame = simulate_detection(
                self.virtual_pose, self.truth, self.config.board, self.noise, self._frame_rng(),
            )
        except InvisiblePoseError:
            return {"accepted": False, "reason": "board not visible to the camera", "state": self._state()}
        self.session.capture(frame)
        return {"accepted": True, "report": report.to_dict(), "state": self._state()}

    def _cmd_skip_target(self, msg: dict) -> dict:
        self.session.skip_target()
        return {"state": self._state()}

    def _cmd_reset(self, msg: dict) -> dict:
        self.session = Session(self.config)
        self.virtual_pose = None
        self.event_counter = 0
        self.guidance_requests = 0
        return {"state": self._state()}

    def _cmd_configure(self, msg: dict) -> dict:
        changes = {}
        if "seed" in msg:
            changes["seed"] = int(msg["seed"])
        if "sa" in msg:
            changes["sa"] = dict(msg["sa"])
        tol = msg.get("tolerances", {})
        if "rot_tol_deg" in tol:
            changes["rot_tol_deg"] = float(tol["rot_tol_deg"])
        if "trans_tol_frac" in tol:
            changes["trans_tol_frac"] = float(tol["trans_tol_frac"])
        self.config = replace(self.config, **changes)
        return self._cmd_reset(msg)


def _pose_dict(pose) -> dict:
    from .session import pose_to_dict

    return pose_to_dict(pose)


class SessionService:
    """Registry of sessions, one per client-created id."""

    def __init__(self, base_config: SessionConfig | None = None,
                 truth: CameraTruth = DEFAULT_TRUTH, noise: NoiseModel | None = None) -> None:
        self.base_config = base_config or SessionConfig(
            image_width=truth.width, image_height=truth.height,
        )
        self.truth = truth
        self.noise = noise if noise is not None else NoiseModel()
        self.sessions: dict[str, ServiceSession] = {}
        self.lock = threading.Lock()

    def create(self, msg: dict) -> dict:
        config = self.base_config
        if "seed" in msg:
            config = replace(config, seed=int(msg["seed"]))
        sid = uuid.uuid4().hex
        with self.lock:
            self.sessions[sid] = ServiceSession(config, self.truth, self.noise)
        logger.info("event=session_created id=%s seed=%d", sid, config.seed)
        return {"session_id": sid}

    def get(self, sid: str) -> ServiceSession:
        with self.lock:
            sess = self.sessions.get(sid)
        if sess is None:
            raise ProtocolError(f"unknown session {sid!r}")
        return sess


def make_handler(service: SessionService, static_dir: Path | None = None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # route through logging, not stderr
            logger.debug("event=http %s", fmt % args)

        def _send_json(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _send_error(self, status: int, exc: Exception) -> None:
            self._send_json(status, {"ok": False, "error": {"type": type(exc).__name__, "message": str(exc)}})

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_POST(self):
            try:
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b"{}"
                try:
                    msg = json.loads(raw) if raw.strip() else {}
                    if not isinstance(msg, dict):
                        raise ValueError("message must be a JSON object")
                except (json.JSONDecodeError, ValueError) as exc:
                    self._send_error(400, ProtocolError(f"malformed message: {exc}"))
                    return

                parts = [p for p in self.path.split("/") if p]
                if parts == ["session"]:
                    self._send_json(200, {"ok": True, "result": service.create(msg)})
                elif len(parts) == 2 and parts[0] == "session":
                    try:
                        sess = service.get(parts[1])
                        result = sess.handle(msg)
                    except ProtocolError as exc:
                        self._send_error(400, exc)
                        return
                    except CamcalError as exc:
                        self._send_error(409, exc)
                        return
                    self._send_json(200, {"ok": True, "result": result})
                else:
                    self._send_error(404, ProtocolError(f"no such endpoint {self.path}"))
            except BrokenPipeError:
                pass
            except Exception as exc:  # internal error: report, keep serving
                logger.exception("event=internal_error path=%s", self.path)
                try:
                    self._send_error(500, exc)
                except Exception:
                    pass

        def do_GET(self):
            if self.path == "/healthz":
                self._send_json(200, {"ok": True})
                return
            if static_dir is not None:
                rel = self.path.lstrip("/") or "index.html"
                target = (static_dir / rel).resolve()
                if static_dir.resolve() in target.parents or target == static_dir.resolve():
                    if target.is_file():
                        body = target.read_bytes()
                        self.send_response(200)
                        ctype = CONTENT_TYPES.get(target.suffix, "application/octet-stream")
                        self.send_header("Content-Type", ctype)
                        self.send_header("Content-Length", str(len(body)))
                        self.end_headers()
                        self.wfile.write(body)
                        return
            self._send_error(404, ProtocolError(f"no such path {self.path}"))

    return Handler


def make_server(port: int, base_config: SessionConfig | None = None,
                truth: CameraTruth = DEFAULT_TRUTH, noise: NoiseModel | None = None,
                static_dir: Path | None = None) -> tuple[ThreadingHTTPServer, SessionService]:
    service = SessionService(base_config, truth, noise)
    handler = make_handler(service, static_dir)
    server = ThreadingHTTPServer(("127.0.0.1", port), handler)
    server.daemon_threads = True
    return server, service
