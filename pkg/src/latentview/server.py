"""Local HTTP service for interactive camera-controlled rendering.

One checkpoint per process. JSON request/response bodies with
base64-embedded PNGs; identical (checkpoint, session inputs, pose)
requests return byte-identical images.

Endpoints:
    POST /session  {"scene_id": id} or {"views": [b64 PNG, ...]}
    POST /render   {"session_id": ..., "pose": {"t": [3], "q": [4]}}
    GET  /scenes
    GET  /health
"""

from __future__ import annotations

import base64
import io
import json
import threading
import time
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from PIL import Image

from . import autodiff as ad
from . import camgeo, kernels, metrics
from . import model as lvm
from .checkpoint import checkpoint_hash
from .model import Model, SceneLatent
from .scenes import Dataset


def png_bytes(image: np.ndarray) -> bytes:
    q = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png_b64(data: str) -> np.ndarray:
    raw = base64.b64decode(data, validate=True)
    with Image.open(io.BytesIO(raw)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0)


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class RenderService:
    """Checkpoint + dataset + session table behind the HTTP handler."""

    def __init__(self, ckpt_path, data_root=None):
        self.ckpt_path = str(ckpt_path)
        self.model = Model.load(ckpt_path)
        self.hash = checkpoint_hash(ckpt_path)
        self.dataset = Dataset(data_root) if data_root else None
        self.intrinsics = (self.dataset.intrinsics if self.dataset
                           else camgeo.Intrinsics.default(self.model.config.resolution))
        self.sessions = {}
        self._lock = threading.Lock()

    # -- endpoint logic ------------------------------------------------------

    def scenes_payload(self) -> dict:
        if self.dataset is None:
            return {"scenes": []}
        return {"scenes": list(self.dataset.manifest.scenes)}

    def health_payload(self) -> dict:
        return {
            "status": "ok",
            "checkpoint_hash": self.hash,
            "config": self.model.config.to_dict(),
            "has_mapper": self.model.has_mapper,
            "kernel_backend": kernels.backend(),
        }

    def create_session(self, body: dict) -> dict:
        res = self.model.config.resolution
        gt = None
        input_poses = None
        if "scene_id" in body:
            if self.dataset is None:
                raise ApiError(404, "no dataset attached to this server")
            sid = str(body["scene_id"])
            try:
                task = self.dataset.task(sid)
            except Exception:
                raise ApiError(404, f"unknown scene id {sid!r}")
            i, j = task.inputs
            views = [self.dataset.image(sid, i), self.dataset.image(sid, j)]
            poses = self.dataset.poses(sid)
            rel = [camgeo.pose_compose(camgeo.pose_inverse(poses[i]), p) for p in poses]
            input_poses = [list(camgeo.pose_to_camvec(rel[k])) for k in (i, j)]
            gt = {
                "scene_id": sid,
                "poses": [camgeo.pose_to_camvec(p) for p in rel],
            }
        elif "views" in body:
            if not isinstance(body["views"], list) or not body["views"]:
                raise ApiError(400, "views must be a non-empty list of base64 PNGs")
            views = []
            for k, b64 in enumerate(body["views"]):
                try:
                    img = decode_png_b64(b64)
                except Exception:
                    raise ApiError(400, f"view {k}: invalid base64 PNG")
                if img.shape[:2] != (res, res):
                    raise ApiError(
                        400,
                        f"view {k}: resolution {img.shape[1]}x{img.shape[0]} does not "
                        f"match the model; expected {res}x{res}",
                    )
                views.append(img)
        else:
            raise ApiError(400, "body must contain scene_id or views")

        if self.model.config.variant == "up":
            latent = self.model.encode_scene(views, self.intrinsics)
            latent_data = latent.tokens.data.copy()
        else:
            latent_data = None
        sess = {
            "views": views,
            "latent": latent_data,
            "gt": gt,
            "created": time.time(),
        }
        sid = uuid.uuid4().hex
        with self._lock:
            self.sessions[sid] = sess
        out = {"session_id": sid, "intrinsics": self.intrinsics.to_dict()}
        if input_poses is not None:
            out["input_poses"] = input_poses
            out["gt_available"] = True
        else:
            out["gt_available"] = False
        return out

    def render(self, body: dict) -> dict:
        sess = self.sessions.get(str(body.get("session_id", "")))
        if sess is None:
            raise ApiError(404, "unknown session id")
        pose_body = body.get("pose")
        if not isinstance(pose_body, dict) or "t" not in pose_body or "q" not in pose_body:
            raise ApiError(400, "pose must be {t: [3], q: [4]}")
        t = np.asarray(pose_body["t"], dtype=np.float64)
        q = np.asarray(pose_body["q"], dtype=np.float64)
        if t.shape != (3,) or q.shape != (4,):
            raise ApiError(400, "pose must be {t: [3], q: [4]}")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(q))):
            raise ApiError(400, "pose components must be finite")
        qn = np.linalg.norm(q)
        if qn <= 1e-12:
            raise ApiError(400, "zero quaternion")
        pose = camgeo.camvec_to_pose(np.concatenate([t, q / qn]))

        if self.model.config.variant == "up":
            if not self.model.has_mapper:
                raise ApiError(409, "checkpoint has no camera mapper; run the "
                                    "map-fit command and serve that checkpoint")
            latent = SceneLatent(ad.const(sess["latent"]), len(sess["views"]),
                                 self.model.config.tokens_per_view)
            cam = lvm.mapped_camvec(self.model, camgeo.pose_to_camvec(pose))
            pm = lvm.plucker_from_camvec(cam, self.intrinsics)
            image = self.model.decode_view(latent, pm).data.astype(np.float64)
        else:
            image = self.model.forward_ptlvsm(sess["views"], pose,
                                              self.intrinsics).data.astype(np.float64)

        png = png_bytes(image)
        out = {"image": base64.b64encode(png).decode("ascii")}
        if sess["gt"] is not None:
            cam = camgeo.pose_to_camvec(pose)
            for k, gt_cam in enumerate(sess["gt"]["poses"]):
                if np.linalg.norm(gt_cam - cam) < 1e-6:
                    gt_img = self.dataset.image(sess["gt"]["scene_id"], k)
                    out["psnr_vs_gt"] = metrics.psnr(png_bytes_to_float(png), gt_img)
                    out["gt_view"] = k
                    break
        return out


def png_bytes_to_float(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0)


def make_handler(service: RenderService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send(self, status: int, payload: dict):
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _json_body(self) -> dict:
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length) if length else b"{}"
            try:
                body = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                raise ApiError(400, "request body is not valid JSON")
            if not isinstance(body, dict):
                raise ApiError(400, "request body must be a JSON object")
            return body

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self):
            try:
                if self.path == "/scenes":
                    self._send(200, service.scenes_payload())
                elif self.path == "/health":
                    self._send(200, service.health_payload())
                else:
                    self._send(404, {"error": f"unknown path {self.path}"})
            except ApiError as e:
                self._send(e.status, {"error": str(e)})

        def do_POST(self):
            try:
                body = self._json_body()
                if self.path == "/session":
                    self._send(200, service.create_session(body))
                elif self.path == "/render":
                    self._send(200, service.render(body))
                else:
                    self._send(404, {"error": f"unknown path {self.path}"})
            except ApiError as e:
                self._send(e.status, {"error": str(e)})

    return Handler


def serve(ckpt_path, port: int = 8080, data_root=None, host: str = "127.0.0.1"):
    """Build the server (returns before serving; call serve_forever)."""
    service = RenderService(ckpt_path, data_root)
    httpd = ThreadingHTTPServer((host, port), make_handler(service))
    return httpd, service
