"""Batch analytics on top of the episode engine.

Under-reach mapping: sweep configured faults over every candidate bus and
flag the buses where at least one fault goes undetected by episode end.
Dataset export: stream per-step (or per-episode) feature windows labeled
from the desired behavior, never from agent output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .episode import (
    CHANNELS,
    Episode,
    EpisodeConfig,
    channel_value,
    desired_behavior,
)
from .network import Network
from .powerflow import PowerFlowError, SolveOptions
from .relays import AgentSpec, build_agents
from .scenario import FaultConfig, ProfileSet, Rng
from .shortcircuit import FaultSpec, phase_choices, valid_fault_types
from .topology import build_topology, to_dot


@dataclass
class UnderreachMap:
    tested: dict[str, int]
    undetected: dict[str, int]

    def flag(self, bus: str) -> str:
        return "missed_some" if self.undetected.get(bus, 0) > 0 else "detected_all"

    @property
    def missed_buses(self) -> set[str]:
        return {b for b, n in self.undetected.items() if n > 0}

    def to_csv(self) -> str:
        lines = ["bus,tested,undetected,flag"]
        for bus in sorted(self.tested):
            lines.append(f"{bus},{self.tested[bus]},{self.undetected.get(bus, 0)},"
                         f"{self.flag(bus)}")
        return "\n".join(lines) + "\n"

    def to_dot(self, net: Network) -> str:
        topo = build_topology(net)
        colors = {}
        for bus in self.tested:
            colors[bus] = "red" if self.undetected.get(bus, 0) > 0 else "lightblue"
        return to_dot(net, topo, node_colors=colors)


def underreach_map(
    net: Network,
    profiles: ProfileSet,
    agent_specs: list[AgentSpec],
    *,
    zf_ohm: float = 0.0,
    kinds: tuple[str, ...] = ("3ph", "slg", "ll"),
    scenarios_per_bus: int = 3,
    onset_step: int = 10,
    seed: int = 0,
    cfg: EpisodeConfig | None = None,
    options: SolveOptions | None = None,
) -> UnderreachMap:
    """Monte-Carlo fault sweep: which buses can the installed agents not see?

    For every bus and every allowed fault kind valid there, a few sampled
    scenarios are simulated with the fault forced at the bus; a bus is
    flagged when any of its faults draws no trip before the episode ends.
    """
    cfg = cfg or EpisodeConfig()
    tested: dict[str, int] = {}
    undetected: dict[str, int] = {}
    stream = 0
    for bus in net.buses:
        valid = valid_fault_types(net, bus) & set(kinds)
        tested[bus] = 0
        undetected[bus] = 0
        for kind in sorted(valid):
            combos = phase_choices(kind, net.buses[bus].phases)
            for combo in combos[:1]:  # one phase combination per kind
                for _ in range(scenarios_per_bus):
                    spec = FaultSpec(kind=kind, phases=combo, bus=bus,
                                     zf_ohm=zf_ohm, onset_step=onset_step)
                    stream += 1
                    rec = _run_forced(net, profiles, agent_specs, cfg, spec,
                                      seed, stream, options)
                    if rec is None:
                        continue
                    tested[bus] += 1
                    if not any(t is not None for t in rec.trip_steps.values()):
                        undetected[bus] += 1
    return UnderreachMap(tested, undetected)


def _run_forced(net, profiles, agent_specs, cfg, spec, seed, stream, options):
    from .episode import run_episode

    agents = build_agents(agent_specs)
    rec = run_episode(net, profiles, agents, cfg,
                      FaultConfig(fault_probability=0.0), seed=seed,
                      stream=stream, options=options, forced_fault=spec)
    return None if rec.aborted else rec


DATASET_LABELS = ("no_trip", "trip_instant", "trip_delayed")
DEFAULT_DATASET_CHANNELS = ("v1_mag", "i1_mag")


@dataclass
class DatasetWriter:
    """Streams labeled feature rows; one file plus a class-count sidecar."""

    channels: tuple[str, ...] = DEFAULT_DATASET_CHANNELS
    window: int = 10
    granularity: str = "step"  # "step" | "episode"
    rows: list[str] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=lambda: {l: 0 for l in DATASET_LABELS})

    def header(self) -> str:
        cols = ["episode", "device", "step", "label"]
        for ch in self.channels:
            for k in range(self.window - 1, -1, -1):
                cols.append(f"{ch}[t-{k}]" if k else f"{ch}[t]")
        return ",".join(cols)

    def add_row(self, episode: int, device: str, step: int, label: str,
                history) -> None:
        feats = []
        frames = list(history)[-self.window:]
        frames = [frames[0]] * (self.window - len(frames)) + frames
        for ch in self.channels:
            feats.extend(channel_value(f, ch) for f in frames)
        self.counts[label] += 1
        self.rows.append(
            f"{episode},{device},{step},{label},"
            + ",".join(f"{x:.9g}" for x in feats))

    def to_csv(self) -> str:
        return self.header() + "\n" + "\n".join(self.rows) + "\n"

    def summary_json(self) -> str:
        return json.dumps({"rows": len(self.rows), "counts": self.counts,
                           "channels": list(self.channels),
                           "window": self.window,
                           "granularity": self.granularity},
                          indent=2, sort_keys=True) + "\n"


def step_label(expectations, device: str, step: int) -> str:
    """Desired action at a step: what a perfectly trained relay would pick."""
    if expectations.onset_step is None or not expectations.chain:
        return "no_trip"
    onset, w = expectations.onset_step, expectations.window_steps
    if not onset <= step < onset + w:
        return "no_trip"
    if device == expectations.chain[0]:
        return "trip_instant"
    if len(expectations.chain) > 1 and device == expectations.chain[1]:
        return "trip_delayed"
    return "no_trip"


def build_dataset(
    net: Network,
    profiles: ProfileSet,
    n_episodes: int,
    seed: int,
    *,
    cfg: EpisodeConfig | None = None,
    fault_cfg: FaultConfig | None = None,
    channels: tuple[str, ...] = DEFAULT_DATASET_CHANNELS,
    granularity: str = "step",
    options: SolveOptions | None = None,
) -> DatasetWriter:
    """Labeled dataset from hold-agent episodes: the fault signature stays
    visible for its whole duration and labels come from desired_behavior."""
    cfg = cfg or EpisodeConfig()
    fault_cfg = fault_cfg or FaultConfig()
    bad = set(channels) - set(CHANNELS)
    if bad:
        raise ValueError(f"unknown channels {sorted(bad)}")
    if granularity not in ("step", "episode"):
        raise ValueError(f"bad granularity {granularity!r}")
    writer = DatasetWriter(tuple(channels), cfg.history_len, granularity)
    for ep in range(n_episodes):
        env = Episode(net, profiles, cfg, fault_cfg, seed, ep, options)
        try:
            obs = env.reset()
        except PowerFlowError:
            continue
        exp = env.expectations
        if granularity == "episode":
            target = exp.onset_step if exp.onset_step is not None \
                else cfg.steps_per_episode // 2
        done = False
        while not done:
            obs, _, done, _ = env.step({})
            step = env.t
            for dev_id, ob in obs.items():
                if granularity == "step":
                    writer.add_row(ep, dev_id, step, step_label(exp, dev_id, step),
                                   ob.history)
                elif step == target:
                    label = ("no_trip" if exp.onset_step is None else
                             step_label(exp, dev_id, exp.onset_step))
                    writer.add_row(ep, dev_id, step, label, ob.history)
    return writer
