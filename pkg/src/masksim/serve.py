"""Session service exposing the learned simulator over HTTP and WebSocket.

A session pins a rolling sequence window; each step decodes one frame from
one action. Sessions created from an oracle reset also carry a shadow exact
environment steppable with the same actions for side-by-side comparison.
At most one step may be in flight per session (a concurrent step is rejected
and leaves state untouched); a bounded gate limits decodes across sessions.
"""

import asyncio
import base64
import io
import json
import time
import uuid
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request, WebSocket, WebSocketDisconnect
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image

from . import tokenizer as tk
from .envs import DOMAINS, make_env, render, step_oracle
from .sampling import SequenceState, decode_frame, encode_prompt

API_VERSION = "1"


def frame_to_png(frame):
    """(64, 64, 3) uint8 -> lossless PNG bytes."""
    buf = io.BytesIO()
    Image.fromarray(np.asarray(frame, dtype=np.uint8), "RGB").save(
        buf, format="PNG")
    return buf.getvalue()


def png_to_frame(data):
    """PNG bytes -> (H, W, 3) uint8."""
    return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))


class ApiError(Exception):
    def __init__(self, status, code, message):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class Session:
    id: str
    domain_id: int
    state: SequenceState
    oracle: object          # shadow EnvState, or None for uploaded prompts
    greedy: bool
    temperature: float
    m_passes: int
    n_test: int
    created: float
    last_used: float
    last_frame: np.ndarray
    step_index: int = 0
    oracle_index: int = 0
    latencies: deque = None
    lock: asyncio.Lock = field(default_factory=asyncio.Lock)


def _b64png(frame):
    return base64.b64encode(frame_to_png(frame)).decode("ascii")


def create_app(model, codebook=None, *, max_sessions=64, idle_timeout=600.0,
               max_concurrent=2, latency_window=100):
    """Build the service around one model (weights shared by all sessions)."""
    if model.cfg.objective == "discrete":
        if codebook is None:
            raise ValueError("discrete models need a codebook")
        if model.cfg.vocab != codebook.size:
            raise ValueError("model vocab and codebook size disagree")
    served = sorted(i for i, _ in model.cfg.domain_chunk_dims if i in DOMAINS)

    app = FastAPI()
    sessions = {}
    gate = asyncio.Semaphore(max_concurrent)
    app.state.sessions = sessions
    app.state.model = model
    app.state.codebook = codebook

    def pixels(out):
        arr = out.numpy() if hasattr(out, "numpy") else np.asarray(out)
        if model.cfg.objective == "discrete":
            return tk.decode(codebook, arr)
        return tk.decode_soft(arr)

    def sweep(now):
        dead = [sid for sid, s in sessions.items()
                if now - s.last_used > idle_timeout]
        for sid in dead:
            del sessions[sid]

    def get_session(sid):
        s = sessions.get(sid)
        if s is not None and time.monotonic() - s.last_used > idle_timeout:
            del sessions[sid]
            s = None
        if s is None:
            raise ApiError(404, "unknown_session", f"no session {sid}")
        return s

    def parse_action(spec, body):
        action = body.get("action")
        if (not isinstance(action, (list, tuple))
                or len(action) != spec.action_dim
                or not all(isinstance(v, (int, float)) for v in action)):
            raise ApiError(
                400, "dimension",
                f"expected {spec.action_dim} action values for {spec.name}")
        native = np.asarray(action, dtype=np.float64)
        if not np.all(np.isfinite(native)):
            raise ApiError(400, "dimension", "action values must be finite")
        return spec.clamp(native)

    async def body_json(request):
        try:
            body = await request.json()
        except Exception:
            raise ApiError(400, "bad_request", "body must be JSON")
        if not isinstance(body, dict):
            raise ApiError(400, "bad_request", "body must be a JSON object")
        return body

    def acquire(s):
        # single-threaded event loop: locked-check plus acquire is atomic
        if s.lock.locked():
            raise ApiError(409, "busy", "a step is already in flight")
        return s.lock

    def step_work(s, native):
        """Decode one frame and PNG-encode it; returns (png, latency_ms).
        Timed region covers model decode + frame encode only."""
        spec = DOMAINS[s.domain_id]
        chunk = np.tile(native, spec.stride).astype(np.float32)
        t0 = time.perf_counter()
        out = decode_frame(model, s.state, chunk, m_passes=s.m_passes,
                           temperature=s.temperature, greedy=s.greedy,
                           n_test=s.n_test)
        frame = pixels(out)
        png = frame_to_png(frame)
        latency = (time.perf_counter() - t0) * 1000.0
        s.last_frame = frame
        return png, latency

    async def run_step(s, native):
        async with acquire(s):
            async with gate:
                png, latency = await asyncio.to_thread(step_work, s, native)
        s.step_index += 1
        s.latencies.append(latency)
        s.last_used = time.monotonic()
        return png, latency

    @app.middleware("http")
    async def version_header(request, call_next):
        response = await call_next(request)
        response.headers["hma-api"] = API_VERSION
        return response

    # browser clients load the page from a separate static origin
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"],
                       expose_headers=["hma-api"])

    @app.exception_handler(ApiError)
    async def api_error(request, exc):
        return JSONResponse({"code": exc.code, "message": exc.message},
                            status_code=exc.status)

    @app.get("/v1/domains")
    async def list_domains():
        return {"domains": [DOMAINS[i].to_json() for i in served]}

    @app.post("/v1/sessions")
    async def create_session(request: Request):
        body = await body_json(request)
        domain = body.get("domain")
        if domain not in served:
            raise ApiError(404, "unknown_domain",
                           f"domain {domain!r} is not served by this model; "
                           f"available: {served}")
        spec = DOMAINS[domain]
        seed = int(body.get("seed", 0))
        greedy = bool(body.get("greedy", True))
        temperature = float(body.get("temperature", 1.0))
        m_passes = int(body.get("m_passes", 2))
        n_test = int(body.get("n_test", 100))
        if (temperature <= 0 and not greedy) or m_passes < 1 or n_test < 1:
            raise ApiError(400, "bad_request", "invalid decode parameters")
        now = time.monotonic()
        sweep(now)
        if len(sessions) >= max_sessions:
            raise ApiError(429, "capacity",
                           f"session capacity {max_sessions} exceeded")
        n_prompt = model.cfg.prompt_frames
        if "frames" in body:
            raw = body["frames"]
            if not isinstance(raw, list) or len(raw) != n_prompt:
                raise ApiError(400, "bad_prompt",
                               f"expected {n_prompt} base64 PNG frames")
            frames = []
            for item in raw:
                try:
                    f = png_to_frame(base64.b64decode(item))
                except Exception:
                    raise ApiError(400, "bad_prompt", "undecodable PNG frame")
                if f.shape != (64, 64, 3):
                    raise ApiError(400, "bad_prompt",
                                   f"frames must be 64x64 RGB, got {f.shape}")
                frames.append(f)
            oracle = None
        else:
            oracle = make_env(domain, seed)
            frames = [render(oracle)] * n_prompt
        enc = encode_prompt(model, codebook, np.stack(frames))
        stored = [pixels(e) for e in enc]
        state = SequenceState.from_prompt(
            model, domain, enc,
            np.zeros((n_prompt - 1, spec.chunk_dim), dtype=np.float32),
            seed=seed)
        s = Session(id=uuid.uuid4().hex, domain_id=domain, state=state,
                    oracle=oracle, greedy=greedy, temperature=temperature,
                    m_passes=m_passes, n_test=n_test, created=time.time(),
                    last_used=now, last_frame=stored[-1],
                    latencies=deque(maxlen=latency_window))
        sessions[s.id] = s
        return {"session_id": s.id, "frames": [_b64png(f) for f in stored],
                "step_index": 0, "domain": spec.to_json()}

    @app.post("/v1/sessions/{sid}/step")
    async def step(sid: str, request: Request):
        s = get_session(sid)
        native = parse_action(DOMAINS[s.domain_id], await body_json(request))
        png, latency = await run_step(s, native)
        return {"frame": base64.b64encode(png).decode("ascii"),
                "step_index": s.step_index, "latency_ms": latency}

    @app.post("/v1/sessions/{sid}/oracle-step")
    async def oracle_step(sid: str, request: Request):
        s = get_session(sid)
        if s.oracle is None:
            raise ApiError(400, "not_oracle",
                           "session was created from uploaded frames")
        spec = DOMAINS[s.domain_id]
        native = parse_action(spec, await body_json(request))
        async with acquire(s):
            t0 = time.perf_counter()
            for _ in range(spec.stride):
                s.oracle = step_oracle(s.oracle, native)
            png = frame_to_png(render(s.oracle))
            latency = (time.perf_counter() - t0) * 1000.0
        s.oracle_index += 1
        s.last_used = time.monotonic()
        return {"frame": base64.b64encode(png).decode("ascii"),
                "step_index": s.oracle_index, "latency_ms": latency}

    @app.delete("/v1/sessions/{sid}")
    async def delete_session(sid: str):
        sessions.pop(sid, None)
        return {"ok": True}

    @app.websocket("/v1/sessions/{sid}/stream")
    async def stream(ws: WebSocket, sid: str):
        await ws.accept(headers=[(b"hma-api", API_VERSION.encode())])

        async def send_error(exc):
            await ws.send_text(json.dumps({"code": exc.code,
                                           "message": exc.message}))

        try:
            get_session(sid)
        except ApiError as exc:
            await send_error(exc)
            await ws.close(code=4404)
            return
        while True:
            try:
                text = await ws.receive_text()
            except (WebSocketDisconnect, KeyError, RuntimeError):
                return
            try:
                s = get_session(sid)
                try:
                    body = json.loads(text)
                except ValueError:
                    raise ApiError(400, "bad_request", "messages are JSON")
                if not isinstance(body, dict):
                    raise ApiError(400, "bad_request", "messages are JSON")
                native = parse_action(DOMAINS[s.domain_id], body)
            except ApiError as exc:
                await send_error(exc)
                if exc.code == "unknown_session":
                    await ws.close(code=4404)
                    return
                continue
            try:
                png, _ = await run_step(s, native)
            except ApiError as exc:
                await send_error(exc)
                continue
            await ws.send_bytes(png)

    return app
