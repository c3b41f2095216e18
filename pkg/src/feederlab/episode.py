"""The environment core: reset/step episode loops, outcomes, rewards, batches.

An episode starts from a profile-drawn steady state, optionally applies
one randomized fault, routes per-device observations to agents and their
binary actions to breakers, then classifies the result:

  correct               every agent did what the fault (or its absence) required
  false_positive        a trip with no fault present
  false_negative        an in-region fault left untripped past its deadline
  coordination_failure  an out-of-region trip, or a backup beating its primary

Quasi-static stepping: within one episode the network state only changes
at discrete events (fault onset, breaker openings), so each distinct
state is solved once and cached.
"""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .network import Network
from .powerflow import (
    PowerFlowError,
    SolveOptions,
    assemble_admittance,
    sequence_components,
    solve_powerflow,
)
from .relays import AgentSpec, build_agents
from .scenario import (
    FaultConfig,
    ProfileSet,
    Rng,
    ScenarioSample,
    ScenarioSampler,
    generate_fault,
)
from .shortcircuit import FaultSpec, insert_midline_bus, measure_device, solve_fault
from .topology import build_topology, coordination_chain

NOMINAL_HZ = 60.0

OUTCOMES = ("correct", "false_positive", "false_negative", "coordination_failure")
_KIND_ORDER = {"false_positive": 0, "false_negative": 1, "coordination_failure": 2}


@dataclass
class RewardTable:
    r_trip: float = 10.0    # correct primary trip
    r_backup: float = 5.0   # coordinated backup trip after a primary failure
    r_bad: float = -10.0    # any violating trip
    r_miss: float = -10.0   # missed deadline

    @classmethod
    def preset(cls, name: str) -> "RewardTable":
        presets = {
            "default": cls(),
            "detection_only": cls(r_backup=0.0),
            "harsh_miss": cls(r_miss=-50.0),
            "symmetric": cls(r_trip=1.0, r_backup=1.0, r_bad=-1.0, r_miss=-1.0),
        }
        try:
            return presets[name]
        except KeyError:
            raise ValueError(f"unknown reward preset {name!r}; "
                             f"available: {sorted(presets)}") from None


@dataclass
class EpisodeConfig:
    step_seconds: float = 1.0 / 60.0
    steps_per_episode: int = 180
    primary_window_seconds: float = 0.3
    backup_margin_seconds: float = 0.3
    history_len: int = 10
    post_clear_hold_steps: int = 30
    rewards: RewardTable = field(default_factory=RewardTable)
    scenario_mode: str = "random"  # "random" | "sequential"
    record_detail: str = "seq"  # "none" | "seq" | "full"
    debug_expectations: bool = False

    def __post_init__(self):
        if min(self.step_seconds, self.primary_window_seconds,
               self.backup_margin_seconds) <= 0:
            raise ValueError("durations must be positive")
        for name in ("primary_window_seconds", "backup_margin_seconds"):
            steps = getattr(self, name) / self.step_seconds
            if abs(steps - round(steps)) > 1e-9:
                raise ValueError(f"{name} must be a whole number of steps")

    @property
    def window_steps(self) -> int:
        return round(self.primary_window_seconds / self.step_seconds)

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["rewards"] = dataclasses.asdict(self.rewards)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "EpisodeConfig":
        d = dict(d)
        if "rewards" in d:
            d["rewards"] = RewardTable(**d["rewards"])
        return cls(**d)


@dataclass
class Frame:
    """One step's measurements at one device."""

    step: int
    time_s: float
    v: np.ndarray
    i: np.ndarray
    v_seq: tuple[complex, complex, complex]
    i_seq: tuple[complex, complex, complex]
    z_apparent: np.ndarray


@dataclass
class Observation:
    """Per-device bundle handed to the agent each step."""

    device_id: str
    step: int
    time_s: float
    v: np.ndarray
    i: np.ndarray
    v_seq: tuple[complex, complex, complex]
    i_seq: tuple[complex, complex, complex]
    z_apparent: np.ndarray
    history: tuple[Frame, ...]  # oldest first, length <= config.history_len
    remote: dict[str, Frame] = field(default_factory=dict)


_Z_UNDEFINED = 1e9  # exported sentinel for an undefined apparent impedance

CHANNELS = (
    "va_mag", "vb_mag", "vc_mag", "va_ang", "vb_ang", "vc_ang",
    "ia_mag", "ib_mag", "ic_mag", "ia_ang", "ib_ang", "ic_ang",
    "v0_mag", "v1_mag", "v2_mag", "i0_mag", "i1_mag", "i2_mag",
    "za_mag", "zb_mag", "zc_mag", "freq_hz",
)


def channel_value(frame: Frame, name: str) -> float:
    """Scalar feature channel from a frame; a fixed-frequency solver exports
    freq_hz as the nominal constant (flagged, not synthesized)."""
    kind, _, suffix = name.partition("_")
    if name == "freq_hz":
        return NOMINAL_HZ
    if kind[0] == "v" and kind[1] in "abc":
        u = frame.v["abc".index(kind[1])]
    elif kind[0] == "i" and kind[1] in "abc":
        u = frame.i["abc".index(kind[1])]
    elif kind[0] == "v":
        u = frame.v_seq[int(kind[1])]
    elif kind[0] == "i":
        u = frame.i_seq[int(kind[1])]
    elif kind[0] == "z":
        z = frame.z_apparent["abc".index(kind[1])]
        if np.isnan(z.real):
            return _Z_UNDEFINED
        u = z
    else:
        raise KeyError(name)
    return float(abs(u)) if suffix == "mag" else float(np.degrees(np.angle(u)))


@dataclass
class Expectations:
    """Desired behavior for one episode: chain roles and the primary deadline."""

    roles: dict[str, str]  # device -> primary | backup | hold
    chain: tuple[str, ...]  # nearest-first; empty for no-fault episodes
    onset_step: int | None
    window_steps: int
    fault_bus: str | None = None

    def to_json_dict(self) -> dict:
        return {"roles": self.roles, "chain": list(self.chain),
                "onset_step": self.onset_step, "window_steps": self.window_steps,
                "fault_bus": self.fault_bus}


def desired_behavior(topo, fault: FaultSpec | None, device_ids, cfg: EpisodeConfig,
                     fault_bus: str | None = None) -> Expectations:
    """Per-device expectation: the chain's head must clear the fault inside the
    primary window; each backup may act only after its predecessor's turn;
    everyone else holds."""
    device_ids = list(device_ids)
    if fault is None:
        return Expectations({d: "hold" for d in device_ids}, (), None,
                            cfg.window_steps)
    bus = fault_bus or fault.bus
    chain = coordination_chain(topo, bus)
    roles = {d: "hold" for d in device_ids}
    for k, dev in enumerate(chain):
        roles[dev] = "primary" if k == 0 else "backup"
    return Expectations(roles, tuple(chain), fault.onset_step, cfg.window_steps,
                        fault_bus=bus)


@dataclass(frozen=True)
class Violation:
    kind: str  # outcome label minus "correct"
    device: str
    step: int

    def sort_key(self):
        return (self.step, _KIND_ORDER[self.kind], self.device)

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "device": self.device, "step": self.step}


def _chain_schedule(exp: Expectations, trips: dict[str, int | None]):
    """(permitted, deadline) steps per chain position given trips so far."""
    permitted, deadline = [], []
    for i, dev in enumerate(exp.chain):
        if i == 0:
            permitted.append(exp.onset_step)
        else:
            prev_trip = trips.get(exp.chain[i - 1])
            prev_deadline = deadline[i - 1]
            permitted.append(min(prev_trip, prev_deadline)
                             if prev_trip is not None else prev_deadline)
        deadline.append(permitted[i] + exp.window_steps)
    return permitted, deadline


def assess(exp: Expectations, trips: dict[str, int | None],
           isolated_step: int | None, last_step: int,
           rewards: RewardTable) -> tuple[list[Violation], dict]:
    """Violations and reward events implied by the trip record.

    Pure function of (expectations, trip steps, isolation step): the engine
    calls it incrementally each step and offline recomputation reproduces
    the stream exactly.
    """
    violations: list[Violation] = []
    events: dict[tuple[str, int], float] = {}

    def add_event(dev: str, step: int, value: float):
        if value != 0.0:
            events[(dev, step)] = events.get((dev, step), 0.0) + value

    onset = exp.onset_step
    if onset is None:
        for dev, t in trips.items():
            if t is not None:
                violations.append(Violation("false_positive", dev, t))
                add_event(dev, t, rewards.r_bad)
        return violations, events

    permitted, deadline = _chain_schedule(exp, trips)
    pos = {dev: i for i, dev in enumerate(exp.chain)}
    for dev, t in trips.items():
        if t is None:
            continue
        if t < onset:
            violations.append(Violation("false_positive", dev, t))
            add_event(dev, t, rewards.r_bad)
        elif dev not in pos:
            violations.append(Violation("coordination_failure", dev, t))
            add_event(dev, t, rewards.r_bad)
        else:
            i = pos[dev]
            if i == 0:
                if t <= deadline[0]:
                    add_event(dev, t, rewards.r_trip)
                # a late primary trip is not itself a violation
            elif t < permitted[i]:
                violations.append(Violation("coordination_failure", dev, t))
                add_event(dev, t, rewards.r_bad)
            else:
                prev = exp.chain[i - 1]
                prev_trip = trips.get(prev)
                prev_failed = prev_trip is None or prev_trip > deadline[i - 1]
                if prev_failed:
                    add_event(dev, t, rewards.r_backup)
    # missed deadlines, judged only while the fault stays energized
    for i, dev in enumerate(exp.chain):
        d = deadline[i]
        if d > last_step:
            continue  # beyond the judged horizon so far
        if isolated_step is not None and isolated_step <= d:
            continue
        t = trips.get(dev)
        if t is None or t > d:
            violations.append(Violation("false_negative", dev, d))
            add_event(dev, d, rewards.r_miss)
    return violations, events


def classify_outcome(violations: list[Violation]) -> str:
    """Earliest violation by step wins; same-step ties follow a fixed order."""
    if not violations:
        return "correct"
    return min(violations, key=Violation.sort_key).kind


@dataclass
class EpisodeRecord:
    seed: int
    stream: int
    scenario: ScenarioSample
    fault: FaultSpec | None
    outcome: str | None  # None when aborted
    violations: list[Violation]
    trip_steps: dict[str, int | None]
    isolated_step: int | None
    steps_run: int
    rewards_total: dict[str, float]
    reward_events: dict[str, dict[int, float]]
    actions: dict[str, list[int]]  # per device, one per step
    series: dict[str, dict[str, list[float]]]  # device -> channel -> per step
    aborted: bool = False
    abort_reason: str = ""
    agent_errors: dict[str, str] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "v": 1,
            "seed": self.seed,
            "stream": self.stream,
            "scenario": self.scenario.to_json_dict() if self.scenario else None,
            "fault": self.fault.to_json_dict() if self.fault else None,
            "outcome": self.outcome,
            "violations": [v.to_json_dict() for v in self.violations],
            "trip_steps": self.trip_steps,
            "isolated_step": self.isolated_step,
            "steps_run": self.steps_run,
            "rewards_total": self.rewards_total,
            "reward_events": {d: {str(k): v for k, v in ev.items()}
                              for d, ev in self.reward_events.items()},
            "actions": self.actions,
            "series": self.series,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "agent_errors": self.agent_errors,
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)


_SEQ_CHANNELS = ("v1_mag", "i1_mag")


class Episode:
    """One live episode; single-threaded, owned by one worker."""

    def __init__(self, net: Network, profiles: ProfileSet, cfg: EpisodeConfig,
                 fault_cfg: FaultConfig, seed: int, stream: int = 0,
                 options: SolveOptions | None = None,
                 forced_fault: FaultSpec | None = None):
        self.base_net = net
        self.profiles = profiles
        self.cfg = cfg
        self.fault_cfg = fault_cfg
        self.seed = seed
        self.stream = stream
        self.options = options or SolveOptions()
        self.rng = Rng(seed, stream)
        self.sampler = ScenarioSampler(net, profiles, cfg.scenario_mode)
        self.forced_fault = forced_fault
        self.done = True

    # --- lifecycle ----------------------------------------------------

    def reset(self) -> dict[str, Observation]:
        self.scenario = self.sampler.sample(self.rng)
        self.fault = self.forced_fault if self.forced_fault is not None \
            else generate_fault(self.base_net, self.fault_cfg, self.rng)
        self.net = self.base_net
        self.fault_stamp_spec = self.fault
        if self.fault is not None and self.fault.line is not None:
            self.net, mid_bus = insert_midline_bus(
                self.base_net, self.fault.line, self.fault.position)
            self.fault_stamp_spec = FaultSpec(
                kind=self.fault.kind, phases=self.fault.phases, bus=mid_bus,
                zf_ohm=self.fault.zf_ohm, onset_step=self.fault.onset_step)
        self.topo = build_topology(self.net)
        self.device_ids = [d.device_id for d in self.net.devices]
        self.expectations = desired_behavior(
            self.topo, self.fault, self.device_ids, self.cfg,
            fault_bus=self.fault_stamp_spec.bus if self.fault else None)

        try:
            self.prefault = solve_powerflow(self.net, self.scenario, self.options)
        except PowerFlowError as exc:
            self.done = True
            self.abort_reason = str(exc)
            raise
        self.t = -1
        self.done = False
        self.open_lines: frozenset[str] = frozenset()
        self.trip_steps: dict[str, int | None] = {d: None for d in self.device_ids}
        self.isolated_step: int | None = None
        self._solution_cache = {}
        self._fault_base_system = None
        self._history: dict[str, list[Frame]] = {}
        self._actions_log: dict[str, list[int]] = {d: [] for d in self.device_ids}
        self._series: dict[str, dict[str, list[float]]] = {
            d: {ch: [] for ch in self._series_channels()} for d in self.device_ids}
        self._events_emitted: set = set()
        self._reward_events: dict[str, dict[int, float]] = {d: {} for d in self.device_ids}
        self._violations: list[Violation] = []

        # the pre-episode steady state is labeled step -1; actions computed
        # from an observation at step k take effect at step k + 1
        frames = self._measure(self.prefault, step=-1)
        for dev, frame in frames.items():
            self._history[dev] = [frame] * self.cfg.history_len
        return self._observations(frames, step=-1)

    def _series_channels(self):
        if self.cfg.record_detail == "none":
            return ()
        if self.cfg.record_detail == "seq":
            return _SEQ_CHANNELS
        return CHANNELS

    # --- solving ------------------------------------------------------

    def _solve_state(self, fault_active: bool):
        key = (self.open_lines, fault_active)
        sol = self._solution_cache.get(key)
        if sol is not None:
            return sol
        if fault_active:
            if self._fault_base_system is None or \
                    self._fault_base_system[0] != self.open_lines:
                base = assemble_admittance(
                    self.net, self.scenario, self.options,
                    open_branches=self.open_lines, loads_as_z_at=self.prefault.v)
                self._fault_base_system = (self.open_lines, base)
            sol = solve_fault(
                self.net, self.scenario, self.fault_stamp_spec, self.prefault,
                self.options, open_branches=self.open_lines,
                base_system=self._fault_base_system[1])
        else:
            sol = solve_powerflow(self.net, self.scenario, self.options,
                                  open_branches=self.open_lines,
                                  warm_start=self.prefault.v)
        self._solution_cache[key] = sol
        return sol

    def _measure(self, sol, step: int) -> dict[str, Frame]:
        frames = {}
        for dev in self.net.devices:
            m = measure_device(sol, dev)
            frames[dev.device_id] = Frame(
                step, step * self.cfg.step_seconds, m.v, m.i, m.v_seq, m.i_seq,
                m.z_apparent)
        return frames

    def _observations(self, frames: dict[str, Frame], step: int):
        obs = {}
        for dev_id, frame in frames.items():
            hist = tuple(self._history[dev_id][-self.cfg.history_len:])
            remote = {other: frames[other] for other in frames if other != dev_id}
            obs[dev_id] = Observation(
                dev_id, step, frame.time_s, frame.v, frame.i, frame.v_seq,
                frame.i_seq, frame.z_apparent, hist, remote)
        return obs

    def _fault_isolated(self) -> bool:
        if self.fault is None:
            return True
        bus = self.fault_stamp_spec.bus
        seen = {self.net.source.bus}
        stack = [self.net.source.bus]
        adj: dict[str, list[str]] = {}
        for ln in self.net.lines.values():
            if ln.is_open or ln.id in self.open_lines:
                continue
            adj.setdefault(ln.from_bus, []).append(ln.to_bus)
            adj.setdefault(ln.to_bus, []).append(ln.from_bus)
        for tx in self.net.transformers.values():
            a, b = tx.windings[0].bus, tx.windings[1].bus
            adj.setdefault(a, []).append(b)
            adj.setdefault(b, []).append(a)
        while stack:
            u = stack.pop()
            if u == bus:
                return False
            for v in adj.get(u, ()):
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return True

    # --- stepping -----------------------------------------------------

    def step(self, actions: dict[str, int]):
        if self.done:
            raise RuntimeError("step() after episode end")
        unknown = set(actions) - set(self.device_ids)
        if unknown:
            raise KeyError(f"actions for unknown devices: {sorted(unknown)}")
        self.t += 1
        t = self.t

        # 1. apply trips: an opened breaker stays open for the episode
        for dev_id in self.device_ids:
            a = int(actions.get(dev_id, 0))
            self._actions_log[dev_id].append(a)
            if a == 1 and self.trip_steps[dev_id] is None:
                self.trip_steps[dev_id] = t
                line = self.net.device(dev_id).line
                self.open_lines = self.open_lines | {line}
                self._solution_cache.clear()
                if (self.fault is not None and self.isolated_step is None
                        and self._fault_isolated()):
                    self.isolated_step = t

        # 2-3. fault stamp at/after onset; re-solve quasi-statically
        fault_active = self.fault is not None and t >= self.fault.onset_step
        sol = self._solve_state(fault_active)

        # 4. observations
        frames = self._measure(sol, step=t)
        for dev_id, frame in frames.items():
            self._history[dev_id].append(frame)
            if len(self._history[dev_id]) > self.cfg.history_len:
                self._history[dev_id] = self._history[dev_id][-self.cfg.history_len:]
            series = self._series[dev_id]
            for ch in series:
                series[ch].append(channel_value(frame, ch))
        obs = self._observations(frames, step=t)

        # 5. rewards: emit only events newly implied at this step
        self._violations, events = assess(
            self.expectations, self.trip_steps, self.isolated_step, t,
            self.cfg.rewards)
        rewards = {d: 0.0 for d in self.device_ids}
        for (dev, step), value in events.items():
            if (dev, step) not in self._events_emitted and step <= t:
                self._events_emitted.add((dev, step))
                self._reward_events[dev][step] = value
                rewards[dev] += value

        hold_done = (self.isolated_step is not None
                     and t - self.isolated_step >= self.cfg.post_clear_hold_steps)
        self.done = t >= self.cfg.steps_per_episode - 1 or hold_done
        info = {"step": t, "fault_active": fault_active,
                "isolated_step": self.isolated_step}
        if self.done:
            info["outcome"] = classify_outcome(self._violations)
            info["violations"] = [v.to_json_dict() for v in self._violations]
            info["trip_steps"] = dict(self.trip_steps)
        if self.cfg.debug_expectations:
            info["expectations"] = self.expectations.to_json_dict()
        return obs, rewards, self.done, info

    def record(self, agent_errors: dict[str, str] | None = None) -> EpisodeRecord:
        if not self.done:
            raise RuntimeError("record() before episode end")
        totals = {d: float(sum(ev.values())) for d, ev in self._reward_events.items()}
        return EpisodeRecord(
            seed=self.seed, stream=self.stream, scenario=self.scenario,
            fault=self.fault, outcome=classify_outcome(self._violations),
            violations=sorted(self._violations, key=Violation.sort_key),
            trip_steps=dict(self.trip_steps), isolated_step=self.isolated_step,
            steps_run=self.t + 1, rewards_total=totals,
            reward_events=self._reward_events, actions=self._actions_log,
            series=self._series, agent_errors=agent_errors or {})


def compute_rewards(record: EpisodeRecord, expectations: Expectations,
                    cfg: EpisodeConfig) -> dict[str, dict[int, float]]:
    """Offline reward stream from a finished record; matches the live stream."""
    _, events = assess(expectations, record.trip_steps, record.isolated_step,
                       record.steps_run - 1, cfg.rewards)
    out: dict[str, dict[int, float]] = {d: {} for d in record.trip_steps}
    for (dev, step), value in events.items():
        out.setdefault(dev, {})[step] = value
    return out


def run_episode(net: Network, profiles: ProfileSet, agents: dict,
                cfg: EpisodeConfig | None = None,
                fault_cfg: FaultConfig | None = None,
                seed: int = 0, stream: int = 0,
                options: SolveOptions | None = None,
                forced_fault: FaultSpec | None = None) -> EpisodeRecord:
    """Full observe/act loop for one episode.

    An agent raising an exception is flagged in the record and holds for
    the rest of the episode; the loop carries on.
    """
    cfg = cfg or EpisodeConfig()
    fault_cfg = fault_cfg or FaultConfig()
    env = Episode(net, profiles, cfg, fault_cfg, seed, stream, options,
                  forced_fault=forced_fault)
    try:
        obs = env.reset()
    except PowerFlowError as exc:
        scenario = getattr(env, "scenario", None)
        return EpisodeRecord(
            seed=seed, stream=stream, scenario=scenario,
            fault=getattr(env, "fault", None), outcome=None, violations=[],
            trip_steps={}, isolated_step=None, steps_run=0, rewards_total={},
            reward_events={}, actions={}, series={}, aborted=True,
            abort_reason=str(exc))
    errors: dict[str, str] = {}
    for dev_id, agent in agents.items():
        agent.reset()
        if hasattr(agent, "bind_expectations"):
            agent.bind_expectations(env.expectations)
    while True:
        actions = {}
        for dev_id, agent in agents.items():
            if dev_id in errors or dev_id not in obs:
                continue
            try:
                agent.observe(obs[dev_id])
                actions[dev_id] = int(agent.act())
            except Exception as exc:  # noqa: BLE001 - agent code is untrusted
                errors[dev_id] = f"{type(exc).__name__}: {exc}"
        obs, _, done, _ = env.step(actions)
        if done:
            return env.record(agent_errors=errors)


@dataclass
class BatchSummary:
    episodes: int
    aborted: int
    counts: dict[str, int]

    @property
    def success_rate(self) -> float:
        judged = self.episodes - self.aborted
        return self.counts.get("correct", 0) / judged if judged else 0.0

    def to_csv(self, label: str = "agents") -> str:
        head = "agent,false_positive,false_negative,coordination_failure,success_rate"
        row = (f"{label},{self.counts.get('false_positive', 0)},"
               f"{self.counts.get('false_negative', 0)},"
               f"{self.counts.get('coordination_failure', 0)},"
               f"{100.0 * self.success_rate:.2f}%")
        return head + "\n" + row + "\n"


def _run_episode_span(args) -> list[EpisodeRecord]:
    (net, profiles, specs, cfg, fault_cfg, seed, episodes, options) = args
    out = []
    for ep in episodes:
        agents = build_agents(specs)
        out.append(run_episode(net, profiles, agents, cfg, fault_cfg,
                               seed=seed, stream=ep, options=options))
    return out


def run_batch(net: Network, profiles: ProfileSet, agent_specs: list[AgentSpec],
              n_episodes: int, seed: int,
              cfg: EpisodeConfig | None = None,
              fault_cfg: FaultConfig | None = None,
              workers: int = 1,
              options: SolveOptions | None = None
              ) -> tuple[BatchSummary, list[EpisodeRecord]]:
    """Run n episodes with per-episode Rng streams; worker count never
    changes the results, only the wall time."""
    cfg = cfg or EpisodeConfig()
    fault_cfg = fault_cfg or FaultConfig()
    episodes = list(range(n_episodes))
    if workers <= 1:
        records = _run_episode_span(
            (net, profiles, agent_specs, cfg, fault_cfg, seed, episodes, options))
    else:
        spans = [episodes[k::workers] for k in range(workers)]
        args = [(net, profiles, agent_specs, cfg, fault_cfg, seed, span, options)
                for span in spans if span]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_episode_span, args))
        records = [rec for chunk in chunks for rec in chunk]
        records.sort(key=lambda r: r.stream)
    counts = {label: 0 for label in OUTCOMES}
    aborted = 0
    for rec in records:
        if rec.aborted:
            aborted += 1
        else:
            counts[rec.outcome] += 1
    return BatchSummary(n_episodes, aborted, counts), records
