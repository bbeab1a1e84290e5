"""Interactive posing service: drive the avatar live over a WebSocket.

Wire protocol (one session per connection):
  client -> server: JSON text messages
    {"kind": "info"}
    {"kind": "params", "seq": n, "psi": [...], "theta": [...],
     "pose": [rx, ry, rz, tx, ty, tz], "w": 504, "h": 504,
     "format": "png" | "raw"}          (format defaults to png)
    {"kind": "load", "avatar": path, "template": path}
  server -> client:
    info reply   {"kind": "info", "K_expr", "B", "M", "joints"}
    error reply  {"kind": "error", "seq", "msg"}
    frame reply  binary: b"FRM1" + 8-byte big-endian seq + PNG bytes
    raw reply    binary: b"RAW1" + 8-byte big-endian seq + 4-byte BE width
                 + 4-byte BE height + RGBA8 bytes

Scheduling is latest-wins: while a frame is rendering, newer "params"
messages replace any queued one, and messages whose sequence is not strictly
greater than the newest seen are dropped.
"""

from __future__ import annotations

import asyncio
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .animation import pose_avatar
from .avatar import CanonicalAvatar
from .rasterizer import DEFAULT_CONFIG, RenderConfig, head_camera, render
from .template import FlameParams, HeadTemplate


@dataclass
class ServeState:
    avatar: CanonicalAvatar
    template: HeadTemplate
    config: RenderConfig = DEFAULT_CONFIG
    swap_lock: asyncio.Lock = field(default_factory=asyncio.Lock)


def _info_payload(state: ServeState) -> dict:
    return {
        "kind": "info",
        "K_expr": state.template.num_expression,
        "B": state.template.num_bones,
        "joints": state.template.num_bones - 1,
        "M": state.avatar.count,
    }


def _parse_params(state: ServeState, msg: dict) -> tuple[FlameParams, int, int, str]:
    K = state.template.num_expression
    J = state.template.num_bones - 1
    psi = np.asarray(msg.get("psi", []), dtype=float)
    theta = np.asarray(msg.get("theta", []), dtype=float)
    pose = np.asarray(msg.get("pose", [0, 0, 0, 0, 0, -1.0]), dtype=float)
    if psi.shape != (K,):
        raise ValueError(f"psi must have length {K}")
    if theta.size != 3 * J:
        raise ValueError(f"theta must have length {3 * J}")
    if pose.shape != (6,):
        raise ValueError("pose must have 6 entries (axis-angle + translation)")
    params = FlameParams(
        expression=psi,
        articulation=theta.reshape(J, 3),
        head_rotation=pose[:3],
        head_translation=pose[3:],
    )
    params.validate()
    w = int(msg.get("w", 504))
    h = int(msg.get("h", 504))
    if not (0 < w <= 4096 and 0 < h <= 4096):
        raise ValueError("resolution out of range")
    fmt = msg.get("format", "png")
    if fmt not in ("png", "raw"):
        raise ValueError(f"unknown format {fmt!r}")
    return params, w, h, fmt


def render_frame_bytes(state: ServeState, params: FlameParams, w: int, h: int, fmt: str, seq: int) -> bytes:
    cam = head_camera(w, h)
    frame = render(pose_avatar(state.avatar, state.template, params), cam, state.config)
    if fmt == "raw":
        rgba = fileio.rgba_to_bytes(frame.rgb, frame.alpha)
        return b"RAW1" + struct.pack(">QII", seq, w, h) + rgba.tobytes()
    return b"FRM1" + struct.pack(">Q", seq) + fileio.encode_png(frame.rgb, frame.alpha)


async def _session(state: ServeState, ws) -> None:
    send_lock = asyncio.Lock()
    pending: dict = {}
    wakeup = asyncio.Event()
    newest_seq = -1
    closed = False

    async def send_json(obj: dict) -> None:
        async with send_lock:
            await ws.send(json.dumps(obj))

    async def worker() -> None:
        nonlocal closed
        while not closed:
            await wakeup.wait()
            wakeup.clear()
            while pending:
                msg = pending.pop("msg", None)
                if msg is None:
                    break
                seq = msg["seq"]
                try:
                    params, w, h, fmt = _parse_params(state, msg)
                    blob = await asyncio.to_thread(
                        render_frame_bytes, state, params, w, h, fmt, seq
                    )
                except Exception as exc:  # noqa: BLE001 - report to client, keep session
                    await send_json({"kind": "error", "seq": seq, "msg": str(exc)})
                    continue
                async with send_lock:
                    await ws.send(blob)

    task = asyncio.create_task(worker())
    try:
        async for raw in ws:
            if isinstance(raw, (bytes, bytearray)):
                await send_json({"kind": "error", "seq": None, "msg": "binary messages not supported"})
                continue
            try:
                msg = json.loads(raw)
                kind = msg.get("kind")
            except json.JSONDecodeError as exc:
                await send_json({"kind": "error", "seq": None, "msg": f"bad JSON: {exc}"})
                continue
            if kind == "info":
                await send_json(_info_payload(state))
            elif kind == "params":
                seq = msg.get("seq")
                if not isinstance(seq, int):
                    await send_json({"kind": "error", "seq": None, "msg": "params needs an integer seq"})
                    continue
                if seq <= newest_seq:
                    continue  # stale: latest wins
                newest_seq = seq
                pending["msg"] = msg
                wakeup.set()
            elif kind == "load":
                try:
                    async with state.swap_lock:
                        template = fileio.read_template(msg["template"])
                        avatar = fileio.read_avatar(msg["avatar"])
                        if avatar.template_crc != template.checksum():
                            raise ValueError("avatar/template checksum mismatch")
                        state.template = template
                        state.avatar = avatar
                    await send_json(_info_payload(state))
                except Exception as exc:  # noqa: BLE001
                    await send_json({"kind": "error", "seq": None, "msg": str(exc)})
            else:
                await send_json({"kind": "error", "seq": None, "msg": f"unknown kind {kind!r}"})
    finally:
        closed = True
        wakeup.set()
        task.cancel()


async def start_server(
    avatar_path: str | Path,
    template_path: str | Path,
    host: str = "127.0.0.1",
    port: int = 0,
    config: RenderConfig = DEFAULT_CONFIG,
):
    """Bind the service; returns (server, state).  Raises on bad input files."""
    from websockets.asyncio.server import serve as ws_serve

    template = fileio.read_template(template_path)
    avatar = fileio.read_avatar(avatar_path)
    if avatar.template_crc != template.checksum():
        raise ValueError("avatar was not built from this template")
    state = ServeState(avatar=avatar, template=template, config=config)

    async def handler(ws):
        await _session(state, ws)

    server = await ws_serve(handler, host, port, max_size=16 * 1024 * 1024)
    return server, state


def serve(
    avatar_path: str | Path,
    template_path: str | Path,
    bind_address: str = "127.0.0.1:8787",
    config: RenderConfig = DEFAULT_CONFIG,
) -> None:
    """Blocking entry point; prints the bound address once listening."""
    host, _, port_s = bind_address.partition(":")
    port = int(port_s) if port_s else 8787

    async def main():
        server, _ = await start_server(avatar_path, template_path, host, port, config)
        for sock in server.sockets:
            addr = sock.getsockname()
            print(f"listening on ws://{addr[0]}:{addr[1]}", flush=True)
        await server.serve_forever()

    asyncio.run(main())
