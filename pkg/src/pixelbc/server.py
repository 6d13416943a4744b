"""Interactive session endpoint: live play, takeover, and human recording.

One client at a time connects over a websocket and exchanges JSON
messages with the tick loop:

    server -> client: {"type":"frame", "tick", "w", "h", "px": base64 raw RGB}
                      {"type":"state", "mode", "score", "tick"}
                      {"type":"episode_end", "score"}
    client -> server: {"type":"action", "keys":[ids], "dx", "dy", "tick"?}
                      {"type":"mode", "value":"human"|"agent"}
                      {"type":"reset", "seed"}

Unknown message types are ignored with a logged warning; malformed
messages are rejected and the session continues. Frames are emitted
exactly once per tick at the configured rate. In human mode the latest
non-stale client action is applied each tick (null action when none
arrived) and the (frame, action) pair joins the recording buffer;
agent-mode ticks run the policy and are never recorded as human data.
Mode switches take effect on the next tick.

Agent inference runs on a worker thread. The env clock never waits for
it: if the result misses the tick deadline the previous action repeats
and the overrun is logged; a late result is applied at the next tick
boundary.
"""
from __future__ import annotations

import asyncio
import base64
import concurrent.futures
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env as E
from .actions import (
    Action,
    MAX_CHORD,
    MOUSE_CLAMP,
    NULL_ACTION,
    canonicalize_chord,
    discretize_mouse,
)
from .data import EpisodeRecord, resize_frame, write_episodes
from .policy import PolicyNet, act, fresh_cache

log = logging.getLogger(__name__)


def action_from_message(msg: dict) -> tuple[Action, tuple[int, int]]:
    """Client action message -> (Action, raw pixel deltas).

    Keys beyond the chord limit are dropped oldest-first (list order is
    press order); deltas clamp to the discretizer's domain.
    """
    keys = [int(k) for k in msg.get("keys", []) if 0 <= int(k) < 8]
    dedup: list[int] = []
    for k in keys:
        if k not in dedup:
            dedup.append(k)
    kept = dedup[:MAX_CHORD]
    dx = float(np.clip(float(msg.get("dx", 0.0)), -MOUSE_CLAMP, MOUSE_CLAMP))
    dy = float(np.clip(float(msg.get("dy", 0.0)), -MOUSE_CLAMP, MOUSE_CLAMP))
    action = Action(chord=canonicalize_chord(kept),
                    dx_bin=discretize_mouse(dx), dy_bin=discretize_mouse(dy))
    return action, (int(round(dx)), int(round(dy)))


@dataclass
class Recording:
    frames: list[np.ndarray] = field(default_factory=list)
    actions: list[Action] = field(default_factory=list)
    raws: list[tuple[int, int]] = field(default_factory=list)

    def add(self, frame: np.ndarray, action: Action, raw: tuple[int, int]) -> None:
        self.frames.append(frame)
        self.actions.append(action)
        self.raws.append(raw)

    def __len__(self) -> int:
        return len(self.frames)


class GameSession:
    """Owns one env + decode cache, advanced strictly one tick at a time."""

    def __init__(self, net: PolicyNet | None, env_cfg: E.EnvConfig,
                 tick_rate: float = 20.0, record_dir: Path | None = None,
                 act_fn=None):
        self.net = net
        self.env_cfg = env_cfg
        self.tick_rate = tick_rate
        self.budget = 1.0 / tick_rate
        self.record_dir = Path(record_dir) if record_dir else None
        self.mode = "human"
        self.pending_mode: str | None = None
        self.pending_reset: int | None = None
        self.latest_action: tuple[Action, tuple[int, int]] | None = None
        self.last_agent_action: Action = NULL_ACTION
        self.overruns = 0
        self.episodes_finished = 0
        self.recordings_written: list[Path] = []
        # act_fn(net, cache, frame, rng, temperature) -> (action, cache, trace);
        # injectable so tests can fault-inject slow inference.
        self._act_fn = act_fn or act
        self._reset(env_cfg.seed)

    def _reset(self, seed: int) -> None:
        self.env_cfg = dataclasses.replace(self.env_cfg, seed=seed)
        self.state, self.frame = E.reset(self.env_cfg)
        self.cache = fresh_cache(self.net) if self.net is not None else None
        self.rng = np.random.default_rng(seed)
        self.recording = Recording()
        self.latest_action = None
        self.last_agent_action = NULL_ACTION

    # -- message intake ------------------------------------------------------

    def handle_message(self, raw: str) -> None:
        try:
            msg = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError):
            log.warning("rejecting malformed message")
            return
        if not isinstance(msg, dict):
            log.warning("rejecting non-object message")
            return
        mtype = msg.get("type")
        if mtype == "action":
            try:
                action, deltas = action_from_message(msg)
            except (ValueError, TypeError):
                log.warning("rejecting malformed action message")
                return
            tick = msg.get("tick")
            if tick is not None and tick < self.state.tick:
                return  # stale: answers an older frame than the last one sent
            self.latest_action = (action, deltas)
        elif mtype == "mode":
            if msg.get("value") in ("human", "agent"):
                self.pending_mode = msg["value"]
        elif mtype == "reset":
            try:
                self.pending_reset = int(msg.get("seed", self.env_cfg.seed + 1))
            except (ValueError, TypeError):
                log.warning("rejecting malformed reset message")
        else:
            log.warning("ignoring unknown message type %r", mtype)

    # -- tick mechanics ------------------------------------------------------

    def apply_pending_controls(self) -> None:
        """Mode and reset switches take effect between ticks."""
        if self.pending_mode is not None:
            self.mode = self.pending_mode
            self.pending_mode = None
        if self.pending_reset is not None:
            self._persist_recording()
            seed = self.pending_reset
            self.pending_reset = None
            self._reset(seed)

    def frame_message(self) -> dict:
        size = self.net.config.frame_size if self.net is not None else self.env_cfg.frame_size
        obs = resize_frame(self.frame, size, size)
        self._obs = obs
        return {"type": "frame", "tick": self.state.tick, "w": obs.shape[1],
                "h": obs.shape[0], "px": base64.b64encode(obs.tobytes()).decode()}

    def state_message(self) -> dict:
        return {"type": "state", "mode": self.mode, "score": self.state.score,
                "tick": self.state.tick}

    def human_action(self) -> tuple[Action, tuple[int, int]]:
        if self.latest_action is None:
            return NULL_ACTION, (0, 0)
        action, deltas = self.latest_action
        self.latest_action = None
        return action, deltas

    def run_inference(self, obs: np.ndarray) -> Action:
        """Worker-thread entry: one act() call; owns the cache exclusively."""
        from .policy import inference_threads

        with inference_threads(1):
            action, self.cache, _ = self._act_fn(self.net, self.cache, obs,
                                                 self.rng, 0.0)
        return action

    def advance(self, action: Action, raw: tuple[int, int] | None) -> bool:
        """Step the env; human ticks join the recording. True at episode end."""
        if self.mode == "human" and raw is not None:
            self.recording.add(self._obs, action, raw)
        self.state, self.frame, _, done = E.step(self.state, action)
        return done

    def finish_episode(self) -> dict:
        msg = {"type": "episode_end", "score": self.state.score}
        self.episodes_finished += 1
        self._persist_recording()
        self._reset(self.env_cfg.seed + 1)
        return msg

    def _persist_recording(self) -> None:
        if self.record_dir is None or len(self.recording) == 0:
            self.recording = Recording()
            return
        rec = EpisodeRecord(
            frames=np.stack(self.recording.frames),
            actions=list(self.recording.actions),
            raw_deltas=np.array(self.recording.raws, dtype=np.int16),
            provenance="human",
            seed=self.env_cfg.seed,
        )
        self.record_dir.mkdir(parents=True, exist_ok=True)
        path = self.record_dir / f"human_{self.env_cfg.seed}_{int(time.time() * 1e3)}.p2pd"
        write_episodes([rec], path)
        self.recordings_written.append(path)
        self.recording = Recording()


class SessionServer:
    """Single-client websocket endpoint around a GameSession."""

    def __init__(self, net: PolicyNet | None, env_cfg: E.EnvConfig,
                 host: str = "127.0.0.1", port: int = 8765,
                 tick_rate: float = 20.0, record_dir=None, act_fn=None):
        self.net = net
        self.env_cfg = env_cfg
        self.host = host
        self.port = port
        self.tick_rate = tick_rate
        self.record_dir = record_dir
        self.act_fn = act_fn
        self.session: GameSession | None = None
        self._busy = False
        self._server = None
        self._worker = concurrent.futures.ThreadPoolExecutor(max_workers=1)

    async def start(self):
        from websockets.asyncio.server import serve

        self._server = await serve(self._handler, self.host, self.port)
        if self.port == 0:
            self.port = next(iter(self._server.sockets)).getsockname()[1]
        return self

    async def stop(self):
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        self._worker.shutdown(wait=False, cancel_futures=True)

    async def serve_forever(self):
        await self.start()
        await asyncio.Future()

    async def _handler(self, ws):
        if self._busy:
            await ws.close(code=1013, reason="session busy")
            return
        self._busy = True
        session = GameSession(self.net, self.env_cfg, self.tick_rate,
                              self.record_dir, act_fn=self.act_fn)
        self.session = session
        reader = asyncio.create_task(self._read(ws, session))
        try:
            await self._tick_loop(ws, session)
        except Exception:
            log.exception("session ended with error")
        finally:
            reader.cancel()
            session._persist_recording()
            self._busy = False

    async def _read(self, ws, session: GameSession):
        from websockets.exceptions import ConnectionClosed

        try:
            async for raw in ws:
                session.handle_message(raw)
        except ConnectionClosed:
            pass

    async def _tick_loop(self, ws, session: GameSession):
        from websockets.exceptions import ConnectionClosed

        loop = asyncio.get_running_loop()
        period = 1.0 / self.tick_rate
        pending: asyncio.Future | None = None
        deadline = loop.time() + period
        try:
            while True:
                session.apply_pending_controls()
                await ws.send(json.dumps(session.frame_message()))
                await ws.send(json.dumps(session.state_message()))

                if session.mode == "agent" and session.net is not None:
                    if pending is None:
                        pending = loop.run_in_executor(self._worker, session.run_inference,
                                                       session._obs)
                    done_set, _ = await asyncio.wait(
                        {pending}, timeout=max(deadline - loop.time(), 0.0))
                    if pending in done_set:
                        session.last_agent_action = pending.result()
                        pending = None
                    else:
                        session.overruns += 1  # repeat the previous action
                    action, raw = session.last_agent_action, None
                else:
                    action, raw = NULL_ACTION, (0, 0)  # placeholder; read at deadline

                remaining = deadline - loop.time()
                if remaining > 0:
                    await asyncio.sleep(remaining)
                if session.mode == "human":
                    action, raw = session.human_action()
                deadline += period
                if loop.time() > deadline:  # persistent overload: drop ticks, keep cadence
                    deadline += period * int((loop.time() - deadline) / period + 1)

                done = session.advance(action, raw)
                if done:
                    if pending is not None:
                        await asyncio.wait({pending})
                        pending = None
                    await ws.send(json.dumps(session.finish_episode()))
        except ConnectionClosed:
            pass
        finally:
            if pending is not None:
                await asyncio.wait({pending})


def run_server(net, env_cfg, host="127.0.0.1", port=8765, tick_rate=20.0,
               record_dir=None, static_dir=None):
    """Blocking entry point for the CLI; optional static hosting for the UI."""
    httpd = None
    if static_dir is not None:
        import functools
        import http.server
        import threading

        handler = functools.partial(http.server.SimpleHTTPRequestHandler,
                                    directory=str(static_dir))
        httpd = http.server.ThreadingHTTPServer((host, port + 1), handler)
        threading.Thread(target=httpd.serve_forever, daemon=True).start()
        print(f"ui: http://{host}:{port + 1}/ (websocket on ws://{host}:{port})")
    server = SessionServer(net, env_cfg, host, port, tick_rate, record_dir)
    try:
        asyncio.run(server.serve_forever())
    except KeyboardInterrupt:
        pass
    finally:
        if httpd is not None:
            httpd.shutdown()
