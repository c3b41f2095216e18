"""Scenario ingredients: percentage profiles, reproducible sampling, random faults.

Profiles are hourly percent-of-base series ("85" means 0.85 x the base
value in the case file).  All randomness flows through Rng, a Philox
counter-based generator keyed by (seed, stream): the same key yields the
same draw sequence on every platform, and per-episode streams keep
parallel workers deterministic.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .network import Network, ground_path_exists
from .shortcircuit import FaultSpec, phase_choices, valid_fault_kinds_for

LOAD_GROUP = "load"


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class ProfileSet:
    """Named hourly series sharing one gap-free timeline; values are fractions."""

    timestamps: tuple[datetime, ...]
    series: dict[str, np.ndarray]

    def __post_init__(self):
        n = len(self.timestamps)
        for name, vals in self.series.items():
            if len(vals) != n:
                raise ProfileError(f"series {name!r} length {len(vals)} != {n} timestamps")
            if np.any(vals < 0):
                raise ProfileError(f"series {name!r} has negative values")
        for i in range(1, n):
            if self.timestamps[i] - self.timestamps[i - 1] != timedelta(hours=1):
                raise ProfileError(
                    f"timeline gap between {self.timestamps[i - 1].isoformat()} "
                    f"and {self.timestamps[i].isoformat()}")

    def __len__(self) -> int:
        return len(self.timestamps)

    def value(self, series: str, hour: int) -> float:
        try:
            return float(self.series[series][hour])
        except KeyError:
            raise ProfileError(f"profile set has no series {series!r}") from None

    def minimum(self, series: str) -> float:
        try:
            return float(self.series[series].min())
        except KeyError:
            raise ProfileError(f"profile set has no series {series!r}") from None

    def slice(self, start: int, stop: int) -> "ProfileSet":
        return ProfileSet(self.timestamps[start:stop],
                          {k: v[start:stop] for k, v in self.series.items()})


def load_profiles(source: str) -> ProfileSet:
    """Parse a profile CSV (``timestamp,<series>,...``; ISO-8601 hourly; percent).

    `source` is a path or raw CSV text.
    """
    text = source
    if "\n" not in source and "," not in source:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ProfileError("empty profile file")
    header = [c.strip() for c in lines[0].split(",")]
    if header[0].lower() != "timestamp" or len(header) < 2:
        raise ProfileError("header must be 'timestamp,<series1>,...'")
    names = [c.lower() for c in header[1:]]
    stamps: list[datetime] = []
    cols: list[list[float]] = [[] for _ in names]
    seen: set[datetime] = set()
    for lineno, row in enumerate(lines[1:], start=2):
        cells = [c.strip() for c in row.split(",")]
        if len(cells) != len(header):
            raise ProfileError(f"row {lineno}: expected {len(header)} cells, got {len(cells)}")
        try:
            ts = datetime.fromisoformat(cells[0])
        except ValueError:
            raise ProfileError(f"row {lineno}: bad timestamp {cells[0]!r}") from None
        if ts in seen:
            raise ProfileError(f"row {lineno}: duplicate timestamp {cells[0]}")
        seen.add(ts)
        stamps.append(ts)
        for k, cell in enumerate(cells[1:]):
            try:
                pct = float(cell)
            except ValueError:
                raise ProfileError(f"row {lineno}: bad value {cell!r}") from None
            if pct < 0:
                raise ProfileError(f"row {lineno}: negative value {pct}")
            cols[k].append(pct / 100.0)
    return ProfileSet(tuple(stamps), {n: np.array(c) for n, c in zip(names, cols)})


def synthetic_profiles(hours: int = 8760, seed: int = 7,
                       start: datetime | None = None) -> ProfileSet:
    """Sinusoidal daily/seasonal load, solar and wind shapes plus noise."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    t0 = start or datetime(2030, 1, 1)
    stamps = tuple(t0 + timedelta(hours=h) for h in range(hours))
    hod = np.arange(hours) % 24
    doy = np.arange(hours) / 24.0
    load = (0.72 + 0.18 * np.sin(np.pi * (hod - 5) / 14)
            + 0.06 * np.sin(2 * np.pi * doy / 365.0)
            + rng.normal(0, 0.03, hours))
    solar = np.where((hod >= 6) & (hod <= 18),
                     0.9 * np.sin(np.pi * (hod - 6) / 12), 0.0)
    solar = solar * rng.uniform(0.7, 1.0, hours)
    wind = 0.45 + 0.25 * np.sin(2 * np.pi * np.arange(hours) / 73.0) \
        + rng.normal(0, 0.06, hours)
    return ProfileSet(stamps, {
        "load": np.clip(load, 0.05, None),
        "pv": np.clip(solar, 0.0, None),
        "wind": np.clip(wind, 0.0, None),
    })


@dataclass(frozen=True)
class ScenarioSample:
    """One initial-condition draw: per-element scaling plus its timestamp."""

    timestamp: datetime
    load_scale: dict[str, float]
    der_scale: dict[str, float]

    def to_json_dict(self) -> dict:
        return {"timestamp": self.timestamp.isoformat(),
                "load_scale": self.load_scale, "der_scale": self.der_scale}


def scenario_at_hour(net: Network, profiles: ProfileSet, hour: int,
                     der_at_minimum: bool = False) -> ScenarioSample:
    """Scales for one profile hour: loads follow 'load', DERs their kind's series."""
    load_s = profiles.value(LOAD_GROUP, hour)
    loads = {lid: load_s for lid in net.loads}
    ders = {}
    for der in net.ders.values():
        ders[der.id] = profiles.minimum(der.kind) if der_at_minimum \
            else profiles.value(der.kind, hour)
    return ScenarioSample(profiles.timestamps[hour], loads, ders)


class Rng:
    """Deterministic 64-bit counter-based generator (Philox 4x64).

    Identical (seed, stream) pairs produce identical sequences on every
    platform; stream is conventionally the episode index.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=(self.stream,))))

    def random(self) -> float:
        return float(self._gen.random())

    def uniform(self, lo: float, hi: float) -> float:
        return float(self._gen.uniform(lo, hi))

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        return int(self._gen.integers(lo, hi + 1))

    def choice(self, seq):
        return seq[int(self._gen.integers(0, len(seq)))]


class ScenarioExhausted(RuntimeError):
    pass


@dataclass
class ScenarioSampler:
    """Sequential (consecutive-hours) or random draws from a profile set."""

    net: Network
    profiles: ProfileSet
    mode: str = "random"  # "sequential" | "random"
    cursor: int = 0

    def __post_init__(self):
        if self.mode not in ("sequential", "random"):
            raise ValueError(f"bad mode {self.mode!r}")
        if not len(self.profiles):
            raise ProfileError("profile set is empty")

    def sample(self, rng: Rng) -> ScenarioSample:
        if self.mode == "sequential":
            if self.cursor >= len(self.profiles):
                raise ScenarioExhausted(
                    f"sequential cursor at {self.cursor} past the last profile hour")
            hour = self.cursor
            self.cursor += 1
        else:
            hour = rng.integer(0, len(self.profiles) - 1)
        return scenario_at_hour(self.net, self.profiles, hour)


def sample_scenario(profiles: ProfileSet, net: Network, mode: str, rng: Rng,
                    sampler: ScenarioSampler | None = None) -> ScenarioSample:
    """One-shot convenience over ScenarioSampler."""
    sampler = sampler or ScenarioSampler(net, profiles, mode)
    return sampler.sample(rng)


@dataclass(frozen=True)
class FaultConfig:
    """Ranges within which random faults are created."""

    allowed_kinds: tuple[str, ...] = ("slg", "ll", "llg", "3ph", "3phg")
    zf_range_ohm: tuple[float, float] = (0.0, 15.0)
    onset_step_range: tuple[int, int] = (10, 60)
    location_buses: tuple[str, ...] | None = None  # None = whole network
    fault_probability: float = 0.8

    def __post_init__(self):
        lo, hi = self.zf_range_ohm
        if not 0 <= lo <= hi:
            raise ValueError("zf range must satisfy 0 <= lo <= hi")
        if not 0.0 <= self.fault_probability <= 1.0:
            raise ValueError("fault_probability must be in [0, 1]")
        bad = set(self.allowed_kinds) - {"slg", "ll", "llg", "3ph", "3phg"}
        if bad:
            raise ValueError(f"unknown fault kinds {bad}")


def fault_candidates(net: Network, cfg: FaultConfig) -> tuple[list[str], list[str]]:
    """(bus ids, line ids) where at least one allowed fault kind is valid."""
    grounded = ground_path_exists(net)
    allowed = set(cfg.allowed_kinds)
    buses = []
    for bus in net.buses.values():
        if cfg.location_buses is not None and bus.id not in cfg.location_buses:
            continue
        if valid_fault_kinds_for(bus.phases, grounded) & allowed:
            buses.append(bus.id)
    lines = []
    if cfg.location_buses is None:
        for ln in net.lines.values():
            if ln.switchable or ln.is_open:
                continue
            if valid_fault_kinds_for(ln.phases, grounded) & allowed:
                lines.append(ln.id)
    return buses, lines


def generate_fault(net: Network, cfg: FaultConfig, rng: Rng) -> FaultSpec | None:
    """Draw one randomized fault, or None for a no-fault episode.

    Draw order (fixed, for replay stability): fault coin, location class
    (bus vs line interior, 50/50 when both exist), location, position,
    kind, phases, impedance, onset.
    """
    if rng.random() >= cfg.fault_probability:
        return None
    buses, lines = fault_candidates(net, cfg)
    if not buses and not lines:
        raise ValueError("no valid fault location under this configuration")
    grounded = ground_path_exists(net)
    allowed = set(cfg.allowed_kinds)
    if buses and lines:
        use_bus = rng.random() < 0.5
    else:
        use_bus = bool(buses)
    if use_bus:
        bus_id = rng.choice(sorted(buses))
        phases = net.buses[bus_id].phases
        loc = {"bus": bus_id}
    else:
        line_id = rng.choice(sorted(lines))
        phases = net.lines[line_id].phases
        loc = {"line": line_id, "position": rng.uniform(0.0, 1.0) * 0.98 + 0.01}
    kinds = sorted(valid_fault_kinds_for(phases, grounded) & allowed)
    kind = rng.choice(kinds)
    combo = rng.choice(phase_choices(kind, phases))
    zf = rng.uniform(*cfg.zf_range_ohm)
    onset = rng.integer(*cfg.onset_step_range)
    return FaultSpec(kind=kind, phases=combo, zf_ohm=zf, onset_step=onset, **loc)


def stream_to_jsonl(entries: list[tuple[int, ScenarioSample, FaultSpec | None]]) -> str:
    """Scenario/fault stream export: one JSON object per episode."""
    buf = io.StringIO()
    for episode, scen, fault in entries:
        obj = {"episode": episode, **scen.to_json_dict(),
               "fault": fault.to_json_dict() if fault else None}
        buf.write(json.dumps(obj, sort_keys=True) + "\n")
    return buf.getvalue()
