"""Protective-device agents: the observe/act contract and conventional relays.

An agent sees only the Observation bundle for its device (and any extra
devices it declares) and returns a single binary action per step: hold (0)
or trip (1).  Everything else -- timers, curves, scheduled delayed trips --
is internal state invisible to the environment.

Observation duck-type: objects with .step, .time_s, .v, .i (3-vectors of
complex), .v_seq / .i_seq (zero, positive, negative), .z_apparent, a
.history tuple (oldest first) of the same frames, and .remote mapping
extra device ids to their frames.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

# IEEE C37.112 inverse-time curve constants: t = TDS * (A / (M^p - 1) + B)
CURVES = {
    "moderately_inverse": (0.0515, 0.114, 0.02),
    "very_inverse": (19.61, 0.491, 2.0),
    "extremely_inverse": (28.2, 0.1217, 2.0),
}


class SettingsError(ValueError):
    pass


def it_oc_time(multiple: float, curve: str, tds: float) -> float | None:
    """Operate time in seconds for current at `multiple` x pickup; None = no trip."""
    if curve not in CURVES:
        raise SettingsError(f"unknown curve {curve!r}")
    if tds <= 0:
        raise SettingsError("time dial must be positive")
    if multiple <= 1.0:
        return None
    a, b, p = CURVES[curve]
    return tds * (a / (multiple ** p - 1.0) + b)


class Agent:
    """Base protective agent bound to one device."""

    window_len = 1
    extra_devices: tuple[str, ...] = ()

    def __init__(self, device_id: str):
        self.device_id = device_id

    def reset(self):
        pass

    def observe(self, obs) -> None:
        raise NotImplementedError

    def act(self) -> int:
        raise NotImplementedError


def _phase_multiples(i_abs: np.ndarray, pickup: np.ndarray) -> float:
    """Largest per-phase multiple of pickup (OR semantics across phases)."""
    with np.errstate(divide="ignore"):
        m = np.where(pickup > 0, i_abs / np.where(pickup == 0, 1, pickup), 0.0)
    return float(m.max())


def _as_pickup_vector(pickup_amps) -> np.ndarray:
    arr = np.asarray(pickup_amps, dtype=float)
    if arr.ndim == 0:
        arr = np.full(3, float(arr))
    if arr.shape != (3,):
        raise SettingsError("pickup_amps must be a scalar or a 3-vector")
    if not (arr[arr < math.inf] > 0).all():
        raise SettingsError("pickup must be positive")
    return arr


@dataclass
class OcSettings:
    pickup_amps: np.ndarray  # per phase; inf disables a phase
    mode: str = "inverse_time"  # "instantaneous" | "inverse_time"
    curve: str = "very_inverse"
    tds: float = 1.0

    def __post_init__(self):
        self.pickup_amps = _as_pickup_vector(self.pickup_amps)
        if self.mode not in ("instantaneous", "inverse_time"):
            raise SettingsError(f"bad OC mode {self.mode!r}")
        if self.curve not in CURVES:
            raise SettingsError(f"unknown curve {self.curve!r}")


class OvercurrentAgent(Agent):
    """Instantaneous or inverse-time overcurrent element.

    The inverse-time element integrates dt / t(M) while any phase is above
    pickup and trips when the accumulator reaches 1; dropping below pickup
    resets the accumulator instantly.
    """

    def __init__(self, device_id: str, settings: OcSettings):
        super().__init__(device_id)
        self.settings = settings
        self.reset()

    def reset(self):
        self._accumulator = 0.0
        self._multiple = 0.0
        self._last_time = None
        self._tripped = False

    def observe(self, obs) -> None:
        self._multiple = _phase_multiples(np.abs(obs.i), self.settings.pickup_amps)
        if self._last_time is None:
            self._dt = 0.0
        else:
            self._dt = obs.time_s - self._last_time
        self._last_time = obs.time_s

    def act(self) -> int:
        if self._tripped:
            return 1
        s = self.settings
        if s.mode == "instantaneous":
            if self._multiple > 1.0:
                self._tripped = True
                return 1
            return 0
        if self._multiple <= 1.0:
            self._accumulator = 0.0
            return 0
        t_op = it_oc_time(self._multiple, s.curve, s.tds)
        self._accumulator += self._dt / t_op if t_op > 0 else 1.0
        if self._accumulator >= 1.0:
            self._tripped = True
            return 1
        return 0


@dataclass
class DistanceSettings:
    zr_ohm: complex  # reach impedance (mho circle through origin and zr)
    zones: tuple[tuple[float, float], ...] = ((0.8, 0.0), (1.2, 0.3))
    # (reach multiplier, delay seconds) per zone, innermost first

    def __post_init__(self):
        if abs(self.zr_ohm) <= 0:
            raise SettingsError("reach impedance must be nonzero")


def distance_operate(settings: DistanceSettings, z: complex | None) -> int | None:
    """Smallest zone index whose mho circle contains z, else None.

    The characteristic is the circle through the origin and the (scaled)
    reach point; the boundary is inclusive.  Undefined z never operates.
    """
    if z is None or not np.isfinite(z.real) or not np.isfinite(z.imag):
        return None
    for k, (mult, _) in enumerate(settings.zones):
        zr = settings.zr_ohm * mult
        if abs(z - zr / 2.0) <= abs(zr) / 2.0 + 1e-12:
            return k
    return None


class DistanceAgent(Agent):
    """Mho distance element with per-zone delays, scheduled internally."""

    def __init__(self, device_id: str, settings: DistanceSettings):
        super().__init__(device_id)
        self.settings = settings
        self.reset()

    def reset(self):
        self._trip_due = None
        self._tripped = False
        self._time = 0.0

    def observe(self, obs) -> None:
        self._time = obs.time_s
        zones = []
        for k in range(3):
            z = obs.z_apparent[k]
            if not np.isnan(z.real):
                zone = distance_operate(self.settings, complex(z))
                if zone is not None:
                    zones.append(zone)
        if zones:
            delay = self.settings.zones[min(zones)][1]
            due = self._time + delay
            if self._trip_due is None or due < self._trip_due:
                self._trip_due = due
        else:
            self._trip_due = None  # dropout cancels a pending zone timer

    def act(self) -> int:
        if self._tripped:
            return 1
        if self._trip_due is not None and self._time >= self._trip_due - 1e-9:
            self._tripped = True
            return 1
        return 0


@dataclass
class DifferentialSettings:
    partner_device: str  # far-end boundary measurement
    slope: float = 0.2  # restraint fraction k
    min_operate_amps: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.slope < 1.0:
            raise SettingsError("slope must be in (0, 1)")


def differential_operate(settings: DifferentialSettings, i_in: np.ndarray,
                         i_out: np.ndarray) -> bool:
    """Per-phase percentage differential; both currents referenced into the zone."""
    diff = np.abs(i_in + i_out)
    restraint = np.maximum(settings.min_operate_amps,
                           settings.slope * (np.abs(i_in) + np.abs(i_out)) / 2.0)
    return bool((diff > restraint).any())


class DifferentialAgent(Agent):
    def __init__(self, device_id: str, settings: DifferentialSettings):
        super().__init__(device_id)
        self.settings = settings
        self.extra_devices = (settings.partner_device,)
        self.reset()

    def reset(self):
        self._operate = False
        self._tripped = False

    def observe(self, obs) -> None:
        remote = obs.remote.get(self.settings.partner_device)
        if remote is None:
            raise SettingsError(
                f"differential {self.device_id}: missing boundary measurement "
                f"from {self.settings.partner_device}")
        # both device orientations measure into the line, hence into the zone
        self._operate = differential_operate(self.settings, obs.i, remote.i)

    def act(self) -> int:
        if self._tripped:
            return 1
        if self._operate:
            self._tripped = True
            return 1
        return 0


class ScriptedAgent(Agent):
    """Opens its breaker at exactly trip_at_step; the workhorse for
    outcome-taxonomy tests.  An action returned after observing step k takes
    effect at step k + 1, so the agent leads its target by one step."""

    def __init__(self, device_id: str, trip_at_step: int | None = None):
        super().__init__(device_id)
        self.trip_at_step = trip_at_step
        self._step = -2

    def reset(self):
        self._step = -2

    def observe(self, obs) -> None:
        self._step = obs.step

    def act(self) -> int:
        return int(self.trip_at_step is not None
                   and self._step + 1 >= self.trip_at_step)


class HoldAgent(Agent):
    def observe(self, obs) -> None:
        pass

    def act(self) -> int:
        return 0


class OracleAgent(Agent):
    """Trips exactly per the environment's expectations (debug/baseline agent).

    The environment injects the expectation table at reset when the agent
    exposes bind_expectations; a primary trips at the first step the fault
    is observable, everyone else holds.
    """

    def __init__(self, device_id: str):
        super().__init__(device_id)
        self._trip_at = None
        self._step = -2

    def reset(self):
        self._trip_at = None
        self._step = -2

    def bind_expectations(self, expectations) -> None:
        role = expectations.roles.get(self.device_id)
        if role == "primary" and expectations.onset_step is not None:
            # trip at the first step the fault is observable
            self._trip_at = expectations.onset_step + 1
        else:
            self._trip_at = None

    def observe(self, obs) -> None:
        self._step = obs.step

    def act(self) -> int:
        return int(self._trip_at is not None and self._step + 1 >= self._trip_at)


@dataclass(frozen=True)
class AgentSpec:
    """Declarative, picklable agent description (settings-file row)."""

    device_id: str
    kind: str
    params: tuple[tuple[str, object], ...] = ()

    @classmethod
    def of(cls, device_id: str, kind: str, **params) -> "AgentSpec":
        return cls(device_id, kind, tuple(sorted(params.items())))

    @property
    def params_dict(self) -> dict:
        return dict(self.params)


def build_agent(spec: AgentSpec) -> Agent:
    p = spec.params_dict
    kind = spec.kind
    if kind == "instantaneous_oc":
        return OvercurrentAgent(spec.device_id, OcSettings(
            pickup_amps=p["pickup_amps"], mode="instantaneous"))
    if kind == "inverse_time_oc":
        return OvercurrentAgent(spec.device_id, OcSettings(
            pickup_amps=p["pickup_amps"], mode="inverse_time",
            curve=p.get("curve", "very_inverse"), tds=p.get("tds", 1.0)))
    if kind == "distance":
        zr = complex(p["zr_ohm"][0], p["zr_ohm"][1]) if isinstance(p["zr_ohm"], (list, tuple)) \
            else complex(p["zr_ohm"])
        zones = tuple(tuple(z) for z in p.get("zones", ((0.8, 0.0), (1.2, 0.3))))
        return DistanceAgent(spec.device_id, DistanceSettings(zr, zones))
    if kind == "differential":
        return DifferentialAgent(spec.device_id, DifferentialSettings(
            partner_device=p["partner"], slope=p.get("slope", 0.2),
            min_operate_amps=p.get("min_operate_amps", 10.0)))
    if kind == "scripted":
        return ScriptedAgent(spec.device_id, p.get("trip_at_step"))
    if kind == "hold":
        return HoldAgent(spec.device_id)
    if kind == "oracle":
        return OracleAgent(spec.device_id)
    raise SettingsError(f"unknown agent kind {kind!r}")


def build_agents(specs: list[AgentSpec]) -> dict[str, Agent]:
    agents = {}
    for spec in specs:
        if spec.device_id in agents:
            raise SettingsError(f"duplicate agent for device {spec.device_id}")
        agents[spec.device_id] = build_agent(spec)
    return agents


SETTINGS_VERSION = 1


def settings_to_json(specs: list[AgentSpec]) -> str:
    agents = {}
    for spec in specs:
        entry = {"type": spec.kind}
        for key, val in spec.params:
            if isinstance(val, np.ndarray):
                val = [float(x) for x in val]
            entry[key] = val
        agents[spec.device_id] = entry
    return json.dumps({"version": SETTINGS_VERSION, "agents": agents},
                      indent=2, sort_keys=True) + "\n"


def settings_from_json(text: str, net=None) -> list[AgentSpec]:
    """Parse and validate an agent settings file."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SettingsError(f"settings file is not valid JSON: {exc}") from exc
    if doc.get("version") != SETTINGS_VERSION:
        raise SettingsError(f"unsupported settings version {doc.get('version')!r}")
    specs = []
    known = {d.device_id for d in net.devices} if net is not None else None
    for device_id, entry in sorted(doc.get("agents", {}).items()):
        if known is not None and device_id not in known:
            raise SettingsError(f"settings refer to unknown device {device_id!r}")
        params = {k: v for k, v in entry.items() if k != "type"}
        spec = AgentSpec.of(device_id, entry["type"], **params)
        build_agent(spec)  # validates parameters eagerly
        specs.append(spec)
    return specs


def make_conventional_agents(
    net,
    profiles,
    *,
    pickup_factor: float = 2.0,
    curve: str = "very_inverse",
    tds_min: float = 0.5,
    tds_max: float = 15.0,
    margin_seconds: float = 0.3,
    grading_multiple: float = 3.0,
    options=None,
) -> tuple[list[AgentSpec], list[str]]:
    """Inverse-time OC agents for every device: pickup at a multiple of the
    worst-case load current, time dials graded so each backup sits at least
    `margin_seconds` above its downstream neighbor at the grading multiple.

    Returns (specs, warnings); warnings list grading-infeasible pairs.
    """
    from .powerflow import max_load_current
    from .topology import build_topology, coordination_chain

    topo = build_topology(net)
    warnings: list[str] = []
    pickups: dict[str, np.ndarray] = {}
    for dev in net.devices:
        worst = max_load_current(net, profiles, dev.device_id, options)
        present = worst > 1e-9
        if not present.any():
            raise SettingsError(f"device {dev.device_id} carries no load current")
        floor = 0.1 * worst[present].max()
        pickup = pickup_factor * np.where(present, np.maximum(worst, floor), np.inf)
        pickups[dev.device_id] = pickup

    # grade bottom-up: a device's dial must clear every device it backs up
    a, b, p = CURVES[curve]
    f_grade = a / (grading_multiple ** p - 1.0) + b
    tds: dict[str, float] = {}
    chains = []
    for dev in net.devices:
        edge = topo.edges.get(net.device(dev.device_id).line)
        chains.append(coordination_chain(topo, edge.down_bus))
    for chain in sorted(chains, key=len):
        for i, dev_id in enumerate(chain):
            if i == 0:
                tds.setdefault(dev_id, tds_min)
                continue
            need = tds.get(chain[i - 1], tds_min) + margin_seconds / f_grade
            tds[dev_id] = max(tds.get(dev_id, tds_min), need)
            if tds[dev_id] > tds_max:
                warnings.append(
                    f"grading {dev_id} above {chain[i - 1]} needs time dial "
                    f"{tds[dev_id]:.2f} > {tds_max}")
                tds[dev_id] = tds_max
    specs = [
        AgentSpec.of(dev.device_id, "inverse_time_oc",
                     pickup_amps=tuple(float(x) for x in pickups[dev.device_id]),
                     curve=curve, tds=round(tds.get(dev.device_id, tds_min), 6))
        for dev in net.devices
    ]
    return specs, warnings
