"""Streaming setpoint service.

One duplex connection per session carrying newline-delimited JSON (raw TCP,
plus an optional WebSocket mirror where each text frame is one JSON line).
The generation loop is autoregressive: emitted setpoints are committed, and
constraint edits apply from the next undecoded step. Bounds and via points
reshape the per-step predictive; while spherical obstacles are active the
server draws several candidates per step and commits the best-scoring one
(log-likelihood plus obstacle penalty), the online analogue of beam scoring.

Client -> server: start, add_constraint, remove_constraint, pause, resume,
reset. Server -> client: setpoint, beams (debug), ack, done, error.
"""

from __future__ import annotations

import asyncio
import json
import time

import numpy as np

from .adapt import (
    InfeasibleConstraintError,
    SphereObstacle,
    compose,
    obstacle_score,
    parse_constraints,
    _sample_step,
    _scaled,
)
from .distributions import gaussian_logpdf
from .model import Model
from .tensor import NumericError, RngStream

ERR_PROTOCOL = 2
ERR_INFEASIBLE = 3
ERR_NUMERIC = 4


class ProtocolError(ValueError):
    pass


class Session:
    def __init__(self, model: Model, meta: dict, send, rate: float, candidates: int):
        self.model = model
        self.meta = meta
        self.send = send
        self.rate = rate
        self.candidates = max(1, candidates)
        self.constraints: dict[int, object] = {}
        self.next_cid = 1
        self.task: asyncio.Task | None = None
        self.paused = asyncio.Event()
        self.paused.set()

    async def handle(self, msg: dict) -> None:
        kind = msg.get("type")
        if kind == "start":
            await self._start(msg)
        elif kind == "add_constraint":
            payload = msg.get("constraint", {k: v for k, v in msg.items() if k not in ("type", "id")})
            parsed = parse_constraints([payload], d=self.model.cfg.d, dt=self.meta["dt"])
            cid = int(msg.get("id", 0)) or self.next_cid
            self.next_cid = max(self.next_cid, cid) + 1
            self.constraints[cid] = parsed[0]
            await self.send({"type": "ack", "op": "add_constraint", "id": cid})
        elif kind == "remove_constraint":
            cid = int(msg.get("id", -1))
            if cid not in self.constraints:
                raise ProtocolError(f"no constraint with id {cid}")
            del self.constraints[cid]
            await self.send({"type": "ack", "op": "remove_constraint", "id": cid})
        elif kind == "pause":
            self.paused.clear()
            await self.send({"type": "ack", "op": "pause"})
        elif kind == "resume":
            self.paused.set()
            await self.send({"type": "ack", "op": "resume"})
        elif kind == "reset":
            await self._cancel()
            self.constraints.clear()
            self.paused.set()
            await self.send({"type": "ack", "op": "reset"})
        else:
            raise ProtocolError(f"unknown message type {kind!r}")

    async def _start(self, msg: dict) -> None:
        if self.task is not None and not self.task.done():
            raise ProtocolError("session already generating (reset first)")
        d = self.model.cfg.d
        try:
            x1 = np.asarray([float(v) for v in msg["x1"]], dtype=np.float64)
            xT = np.asarray([float(v) for v in msg["xT"]], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad start message: {exc}") from exc
        if x1.shape != (d,) or xT.shape != (d,):
            raise ProtocolError(f"x1/xT must have {d} components")
        T = int(msg.get("T", self.model.cfg.T))
        if not 4 <= T <= self.model.cfg.t_max:
            raise ProtocolError(f"T must be in 4..{self.model.cfg.t_max}")
        temperature = float(msg.get("temperature", 1.0))
        if temperature <= 0:
            raise ProtocolError("temperature must be > 0")
        seed = int(msg.get("seed", 0))
        debug = bool(msg.get("debug", False))
        for item in msg.get("constraints", []):
            parsed = parse_constraints([item], d=d, dt=self.meta["dt"])
            self.constraints[self.next_cid] = parsed[0]
            self.next_cid += 1
        self.task = asyncio.create_task(
            self._generate(x1, xT, T, temperature, seed, debug)
        )

    async def _cancel(self) -> None:
        if self.task is not None and not self.task.done():
            self.task.cancel()
            try:
                await self.task
            except asyncio.CancelledError:
                pass
        self.task = None

    async def _generate(self, x1, xT, T, temperature, seed, debug) -> None:
        root = RngStream(seed)
        prior = self.model.prior(x1, xT, T=T)
        z = prior.mu + prior.sigma * root.fork(0).normal(prior.mu.shape, dtype=np.float64)
        rng = root.fork(1)
        state, mu, sigma = self.model.begin_rollout(x1, xT, z, T=T)
        points = np.empty((T, self.model.cfg.d), dtype=np.float64)
        points[0] = x1
        points[T - 1] = xT
        total_ll = 0.0
        min_obs_dist = float("inf")
        t_wall = time.perf_counter()
        try:
            for t in range(1, T - 1):
                await self.paused.wait()
                active = list(self.constraints.values())
                obstacles = [c for c in active if isinstance(c, SphereObstacle)]
                others = [c for c in active if not isinstance(c, SphereObstacle)]
                dist = compose(others, _scaled(mu[0], sigma[0], temperature), points[:t])
                if obstacles:
                    cands = [_sample_step(dist, rng) for _ in range(self.candidates)]
                    scores = [
                        gaussian_logpdf(c, mu[0], sigma[0]) + obstacle_score(c, obstacles)
                        for c in cands
                    ]
                    best = int(np.argmax(scores))
                    x = cands[best]
                    if debug:
                        await self.send({
                            "type": "beams", "t": t + 1,
                            "candidates": [c.tolist() for c in cands],
                        })
                else:
                    x = _sample_step(dist, rng)
                points[t] = x
                total_ll += gaussian_logpdf(x, mu[0], sigma[0])
                for ob in obstacles:
                    min_obs_dist = min(min_obs_dist, float(np.linalg.norm(x - ob.center)))
                await self.send({
                    "type": "setpoint", "t": t + 1, "x": x.tolist(),
                    "mu": mu[0].tolist(), "sigma": sigma[0].tolist(),
                })
                if t < T - 2:
                    mu, sigma = self.model.decode_append(state, x[None], t + 1)
                if self.rate > 0:
                    await asyncio.sleep(1.0 / self.rate)
            path_len = float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())
            await self.send({
                "type": "done",
                "metrics": {
                    "steps": T - 2,
                    "log_likelihood": total_ll,
                    "path_length": path_len,
                    "min_obstacle_distance": None if min_obs_dist == float("inf") else min_obs_dist,
                    "wall_s": time.perf_counter() - t_wall,
                },
            })
        except InfeasibleConstraintError as exc:
            await self.send({"type": "error", "code": ERR_INFEASIBLE, "msg": str(exc)})
        except NumericError as exc:
            await self.send({"type": "error", "code": ERR_NUMERIC, "msg": str(exc)})


async def _serve_stream(model, meta, reader, writer, rate, candidates, slots):
    if slots.locked():  # all session slots taken
        writer.write(json.dumps({"type": "error", "code": ERR_PROTOCOL,
                                 "msg": "server at max sessions"}).encode() + b"\n")
        await writer.drain()
        writer.close()
        return
    await slots.acquire()
    lock = asyncio.Lock()

    async def send(obj):
        async with lock:
            writer.write(json.dumps(obj).encode("utf-8") + b"\n")
            await writer.drain()

    session = Session(model, meta, send, rate, candidates)
    try:
        while True:
            line = await reader.readline()
            if not line:
                break
            try:
                msg = json.loads(line)
                await session.handle(msg)
            except (ProtocolError, ValueError) as exc:
                await send({"type": "error", "code": ERR_PROTOCOL, "msg": str(exc)})
                break
    finally:
        await session._cancel()
        writer.close()
        slots.release()


def run_server(model: Model, meta: dict, host: str, port: int, ws_port: int = 0,
               rate: float = 20.0, max_sessions: int = 8, candidates: int = 16) -> None:
    """Blocking entry point; serves until interrupted."""

    async def main():
        slots = asyncio.Semaphore(max_sessions)

        async def tcp_handler(reader, writer):
            await _serve_stream(model, meta, reader, writer, rate, candidates, slots)

        server = await asyncio.start_server(tcp_handler, host, port)
        actual_port = server.sockets[0].getsockname()[1]
        print(f"listening on tcp://{host}:{actual_port}", flush=True)

        ws_server = None
        if ws_port:
            import websockets

            async def ws_handler(conn):
                lock = asyncio.Lock()

                async def send(obj):
                    async with lock:
                        await conn.send(json.dumps(obj))

                session = Session(model, meta, send, rate, candidates)
                try:
                    async for raw in conn:
                        try:
                            await session.handle(json.loads(raw))
                        except (ProtocolError, ValueError) as exc:
                            await send({"type": "error", "code": ERR_PROTOCOL, "msg": str(exc)})
                            break
                finally:
                    await session._cancel()

            ws_server = await websockets.serve(ws_handler, host, ws_port)
            print(f"listening on ws://{host}:{ws_port}", flush=True)

        async with server:
            await server.serve_forever()
        if ws_server:
            ws_server.close()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
