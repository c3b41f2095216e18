"""Newline-delimited JSON environment server.

One session per connection (or one on stdio); each session owns one
environment instance.  Every message carries ``v: 1``; unknown fields are
ignored and malformed messages get a structured error reply without
killing the session.

Messages:
  {"v":1,"cmd":"spec"}                       -> observation/action space
  {"v":1,"cmd":"reset","seed":7,"stream":0}  -> {"obs":...,"info":{...}}
  {"v":1,"cmd":"step","actions":{id:0|1}}    -> {"obs":...,"reward":...,"done":...,"info":...}
  {"v":1,"cmd":"close"}                      -> {"ok":true}
"""

from __future__ import annotations

import dataclasses
import json
import socket
import socketserver
import sys
import threading

from .episode import CHANNELS, Episode, EpisodeConfig, channel_value
from .network import Network
from .powerflow import PowerFlowError, SolveOptions
from .scenario import FaultConfig, ProfileSet

PROTOCOL_VERSION = 1


def _error(code: str, message: str) -> dict:
    return {"v": PROTOCOL_VERSION, "error": {"code": code, "message": message}}


class Session:
    """Protocol state machine for one connection."""

    def __init__(self, net: Network, profiles: ProfileSet,
                 cfg: EpisodeConfig | None = None,
                 fault_cfg: FaultConfig | None = None,
                 options: SolveOptions | None = None,
                 debug: bool = False):
        self.net = net
        self.profiles = profiles
        self.cfg = cfg or EpisodeConfig()
        self.fault_cfg = fault_cfg or FaultConfig()
        self.options = options
        self.debug = debug
        self.env: Episode | None = None
        self.closed = False

    # --- encoding ------------------------------------------------------

    def _encode_obs(self, obs) -> dict:
        out = {}
        for dev_id, ob in obs.items():
            hist = list(ob.history)
            out[dev_id] = {ch: [channel_value(f, ch) for f in hist]
                           for ch in CHANNELS}
        return out

    def spec_reply(self) -> dict:
        return {
            "v": PROTOCOL_VERSION,
            "spec": {
                "engine": "feederlab/0.1.0",
                "devices": [d.device_id for d in self.net.devices],
                "channels": list(CHANNELS),
                "window": self.cfg.history_len,
                "actions": [0, 1],
                "steps_per_episode": self.cfg.steps_per_episode,
                "step_seconds": self.cfg.step_seconds,
            },
        }

    # --- message handling -----------------------------------------------

    def handle(self, message: str) -> dict:
        try:
            msg = json.loads(message)
        except json.JSONDecodeError as exc:
            return _error("bad_json", str(exc))
        if not isinstance(msg, dict):
            return _error("bad_json", "message must be an object")
        if msg.get("v") != PROTOCOL_VERSION:
            return _error("version", f"expected v={PROTOCOL_VERSION}")
        cmd = msg.get("cmd")
        if cmd == "spec":
            return self.spec_reply()
        if cmd == "reset":
            return self._reset(msg)
        if cmd == "step":
            return self._step(msg)
        if cmd == "close":
            self.closed = True
            return {"v": PROTOCOL_VERSION, "ok": True}
        return _error("unknown_cmd", f"unknown command {cmd!r}")

    def _reset(self, msg: dict) -> dict:
        if "seed" not in msg:
            return _error("protocol", "reset requires a seed")
        cfg = self.cfg
        if self.debug:
            cfg = dataclasses.replace(cfg, debug_expectations=True)
        self.env = Episode(self.net, self.profiles, cfg, self.fault_cfg,
                           seed=int(msg["seed"]), stream=int(msg.get("stream", 0)),
                           options=self.options)
        try:
            obs = self.env.reset()
        except PowerFlowError as exc:
            self.env = None
            return _error("divergence", str(exc))
        info = {"fault": self.env.fault.to_json_dict() if self.env.fault else None}
        if self.debug:
            info["expectations"] = self.env.expectations.to_json_dict()
        return {"v": PROTOCOL_VERSION, "obs": self._encode_obs(obs), "info": info}

    def _step(self, msg: dict) -> dict:
        if self.env is None or self.env.done:
            return _error("protocol", "step without an active episode")
        actions = msg.get("actions", {})
        if not isinstance(actions, dict):
            return _error("protocol", "actions must be a map")
        try:
            actions = {str(k): int(v) for k, v in actions.items()}
            obs, rewards, done, info = self.env.step(actions)
        except KeyError as exc:
            return _error("protocol", f"unknown device in actions: {exc}")
        except PowerFlowError as exc:
            self.env = None
            return _error("divergence", str(exc))
        reply = {"v": PROTOCOL_VERSION, "obs": self._encode_obs(obs),
                 "reward": rewards, "done": done, "info": info}
        if done:
            reply["info"] = dict(info)
            reply["info"]["record"] = self.env.record().to_json_dict()
        return reply


def serve_stream(session: Session, lines, write) -> None:
    """Drive a session over an iterable of request lines."""
    for line in lines:
        line = line.strip()
        if not line:
            continue
        reply = session.handle(line)
        write(json.dumps(reply, sort_keys=True) + "\n")
        if session.closed:
            break


def serve_stdio(net: Network, profiles: ProfileSet, **kwargs) -> None:
    session = Session(net, profiles, **kwargs)
    serve_stream(session, sys.stdin,
                 lambda text: (sys.stdout.write(text), sys.stdout.flush()))


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        srv = self.server
        session = Session(srv.net, srv.profiles, cfg=srv.cfg,
                          fault_cfg=srv.fault_cfg, options=srv.options,
                          debug=srv.debug)

        def lines():
            while True:
                raw = self.rfile.readline()
                if not raw:
                    return
                yield raw.decode("utf-8", errors="replace")

        serve_stream(session, lines(),
                     lambda text: self.wfile.write(text.encode()))


class EnvServer(socketserver.ThreadingTCPServer):
    """TCP server: one independent session per connection."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, net: Network, profiles: ProfileSet, host: str = "127.0.0.1",
                 port: int = 0, cfg: EpisodeConfig | None = None,
                 fault_cfg: FaultConfig | None = None,
                 options: SolveOptions | None = None, debug: bool = False):
        super().__init__((host, port), _Handler)
        self.net = net
        self.profiles = profiles
        self.cfg = cfg
        self.fault_cfg = fault_cfg
        self.options = options
        self.debug = debug

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


def connect_lines(host: str, port: int):
    """Tiny NDJSON client: returns (send(dict) -> dict reply, close)."""
    sock = socket.create_connection((host, port))
    reader = sock.makefile("r", encoding="utf-8")
    writer = sock.makefile("w", encoding="utf-8")

    def send(msg: dict) -> dict:
        writer.write(json.dumps(msg) + "\n")
        writer.flush()
        line = reader.readline()
        if not line:
            raise ConnectionError("server closed the connection")
        return json.loads(line)

    def close():
        try:
            sock.close()
        except OSError:
            pass

    return send, close
