"""Electrical model of a radial distribution feeder.

Buses, lines with 3x3 phase impedance codes, two-winding transformers,
loads, inverter-based generators, one substation source, and the
locations of protective devices.  Everything is a plain frozen-ish
dataclass; a Network is immutable after construction and safe to share
across episode workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

PHASES = ("a", "b", "c")
_PHASE_INDEX = {"a": 0, "b": 1, "c": 2}


class NetworkError(ValueError):
    """Raised when a network definition is structurally invalid."""


@dataclass(frozen=True, order=True)
class PhaseSet:
    """Nonempty subset of the three phases, order independent."""

    phases: tuple[str, ...]

    def __post_init__(self):
        canon = tuple(p for p in PHASES if p in self.phases)
        if not canon:
            raise NetworkError("phase set must be nonempty")
        if len(set(self.phases)) != len(self.phases) or set(self.phases) - set(PHASES):
            raise NetworkError(f"bad phases {self.phases!r}")
        object.__setattr__(self, "phases", canon)

    @classmethod
    def from_string(cls, s: str) -> "PhaseSet":
        return cls(tuple(s.lower()))

    @classmethod
    def abc(cls) -> "PhaseSet":
        return cls(PHASES)

    def __contains__(self, phase: str) -> bool:
        return phase in self.phases

    def __iter__(self):
        return iter(self.phases)

    def __len__(self) -> int:
        return len(self.phases)

    def issubset(self, other: "PhaseSet") -> bool:
        return set(self.phases) <= set(other.phases)

    @property
    def indices(self) -> tuple[int, ...]:
        """Positions of the member phases in the fixed a,b,c order."""
        return tuple(_PHASE_INDEX[p] for p in self.phases)

    def to_string(self) -> str:
        return "".join(self.phases)


@dataclass(frozen=True)
class Bus:
    id: str
    phases: PhaseSet
    base_kv: float  # line-to-line kilovolts

    @property
    def v_base_ln(self) -> float:
        """Line-to-neutral base in volts."""
        return self.base_kv * 1000.0 / math.sqrt(3.0)


@dataclass(frozen=True)
class LineCode:
    """Per-unit-length series impedance, ohm/km, n x n over the code's phases."""

    id: str
    n_phases: int
    r_matrix: tuple[tuple[float, ...], ...]
    x_matrix: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        n = self.n_phases
        if n not in (1, 2, 3):
            raise NetworkError(f"linecode {self.id}: nphases must be 1..3")
        for name, m in (("rmatrix", self.r_matrix), ("xmatrix", self.x_matrix)):
            if len(m) != n or any(len(row) != n for row in m):
                raise NetworkError(f"linecode {self.id}: {name} must be {n}x{n}")
            for i in range(n):
                for j in range(n):
                    if abs(m[i][j] - m[j][i]) > 1e-12:
                        raise NetworkError(f"linecode {self.id}: {name} not symmetric")
        if any(self.r_matrix[i][i] < 0 for i in range(n)):
            raise NetworkError(f"linecode {self.id}: negative diagonal resistance")


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    phases: PhaseSet
    length_km: float
    code: str
    switchable: bool = False  # switch/fuse position, modeled as near-zero impedance
    is_open: bool = False

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkError(f"line {self.id}: from_bus equals to_bus")
        if not self.switchable and self.length_km <= 0:
            raise NetworkError(f"line {self.id}: length must be positive")


WINDING_CONNECTIONS = ("wye_grounded", "wye", "delta")


@dataclass(frozen=True)
class Winding:
    bus: str
    connection: str  # wye_grounded | wye | delta
    kv: float  # line-to-line rating
    kva: float
    tap: float = 1.0

    def __post_init__(self):
        if self.connection not in WINDING_CONNECTIONS:
            raise NetworkError(f"bad winding connection {self.connection!r}")
        if self.kva <= 0:
            raise NetworkError("winding kva must be positive")


@dataclass(frozen=True)
class Transformer:
    id: str
    windings: tuple[Winding, Winding]
    series_impedance: complex  # per unit on the transformer's own rating

    def __post_init__(self):
        if len(self.windings) != 2:
            raise NetworkError(f"transformer {self.id}: exactly 2 windings supported")


LOAD_MODELS = ("constant_pq", "constant_z", "constant_i")


@dataclass(frozen=True)
class LoadSpec:
    id: str
    bus: str
    phases: PhaseSet
    connection: str  # wye | delta
    kw: float  # per phase (wye) or per connected pair (delta)
    kvar: float
    model: str = "constant_pq"

    def __post_init__(self):
        if self.connection not in ("wye", "delta"):
            raise NetworkError(f"load {self.id}: bad connection {self.connection!r}")
        if self.model not in LOAD_MODELS:
            raise NetworkError(f"load {self.id}: bad model {self.model!r}")
        if self.kw < 0:
            raise NetworkError(f"load {self.id}: kw must be >= 0")


@dataclass(frozen=True)
class DerSpec:
    id: str
    bus: str
    phases: PhaseSet
    kind: str  # pv | wind
    rated_kva: float
    connection: str = "wye"
    fault_current_limit: float = 1.2  # multiple of rated current

    def __post_init__(self):
        if self.kind not in ("pv", "wind"):
            raise NetworkError(f"der {self.id}: bad kind {self.kind!r}")
        if self.rated_kva <= 0:
            raise NetworkError(f"der {self.id}: rated_kva must be positive")
        if self.connection not in ("wye", "delta"):
            raise NetworkError(f"der {self.id}: bad connection {self.connection!r}")
        if self.fault_current_limit < 1.0:
            raise NetworkError(f"der {self.id}: fault_current_limit must be >= 1")


@dataclass(frozen=True)
class SourceSpec:
    """Thevenin equivalent of the grid behind the substation bus."""

    bus: str
    nominal_kv: float
    pu: float = 1.0
    angle_deg: float = 0.0
    z1_ohm: complex = 0.001 + 0.01j  # positive sequence
    z0_ohm: complex = 0.001 + 0.01j  # zero sequence
    grounded: bool = True  # False models a delta/ungrounded equivalent


@dataclass(frozen=True)
class DeviceLocation:
    """Breaker/relay position: one end of a monitored line."""

    device_id: str
    line: str
    upstream_bus: str  # the end considered "upstream"; the device protects away from it


@dataclass(frozen=True)
class Shunt:
    """Capacitor bank; parsed and kept but excluded from the admittance model."""

    id: str
    bus: str
    phases: PhaseSet
    kvar: float


@dataclass
class Network:
    name: str
    buses: dict[str, Bus]
    line_codes: dict[str, LineCode]
    lines: dict[str, Line]
    transformers: dict[str, Transformer]
    loads: dict[str, LoadSpec]
    ders: dict[str, DerSpec]
    source: SourceSpec
    devices: tuple[DeviceLocation, ...] = ()
    shunts: dict[str, Shunt] = field(default_factory=dict)

    def branch_endpoints(self, branch_id: str) -> tuple[str, str]:
        if branch_id in self.lines:
            ln = self.lines[branch_id]
            return ln.from_bus, ln.to_bus
        tx = self.transformers[branch_id]
        return tx.windings[0].bus, tx.windings[1].bus

    def device(self, device_id: str) -> DeviceLocation:
        for dev in self.devices:
            if dev.device_id == device_id:
                return dev
        raise KeyError(device_id)

    def with_devices(self, devices: tuple[DeviceLocation, ...]) -> "Network":
        return replace(self, devices=devices)


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    element: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: [{self.element}] {self.message}"


def _closed_adjacency(net: Network) -> dict[str, list[tuple[str, str]]]:
    """bus -> [(neighbor, branch_id)] over closed lines and transformers."""
    adj: dict[str, list[tuple[str, str]]] = {b: [] for b in net.buses}
    for ln in net.lines.values():
        if ln.is_open:
            continue
        adj[ln.from_bus].append((ln.to_bus, ln.id))
        adj[ln.to_bus].append((ln.from_bus, ln.id))
    for tx in net.transformers.values():
        a, b = tx.windings[0].bus, tx.windings[1].bus
        adj[a].append((b, tx.id))
        adj[b].append((a, tx.id))
    return adj


def reachable_buses(net: Network, open_branches: frozenset[str] = frozenset()) -> set[str]:
    """Buses connected to the source through closed elements."""
    adj = _closed_adjacency(net)
    seen = {net.source.bus}
    stack = [net.source.bus]
    while stack:
        u = stack.pop()
        for v, branch in adj.get(u, ()):
            if branch in open_branches:
                continue
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def validate(net: Network) -> list[Diagnostic]:
    """Check every structural invariant; an empty list means the network is sound."""
    diags: list[Diagnostic] = []

    def err(element: str, message: str):
        diags.append(Diagnostic("error", element, message))

    def warn(element: str, message: str):
        diags.append(Diagnostic("warning", element, message))

    for ln in net.lines.values():
        for end in (ln.from_bus, ln.to_bus):
            if end not in net.buses:
                err(ln.id, f"references undeclared bus {end!r}")
        if ln.code not in net.line_codes:
            err(ln.id, f"references unknown linecode {ln.code!r}")
        else:
            code = net.line_codes[ln.code]
            if code.n_phases != len(ln.phases):
                err(ln.id, f"has {len(ln.phases)} phases but linecode {code.id} has {code.n_phases}")
        for end in (ln.from_bus, ln.to_bus):
            if end in net.buses and not ln.phases.issubset(net.buses[end].phases):
                err(ln.id, f"phases {ln.phases.to_string()} not present at bus {end}")

    for tx in net.transformers.values():
        for w in tx.windings:
            if w.bus not in net.buses:
                err(tx.id, f"references undeclared bus {w.bus!r}")

    for load in net.loads.values():
        if load.bus not in net.buses:
            err(load.id, f"references undeclared bus {load.bus!r}")
        elif not load.phases.issubset(net.buses[load.bus].phases):
            err(load.id, f"phases {load.phases.to_string()} not present at bus {load.bus}")
        if load.connection == "delta" and len(load.phases) < 2:
            err(load.id, "delta load needs at least 2 phases")

    for der in net.ders.values():
        if der.bus not in net.buses:
            err(der.id, f"references undeclared bus {der.bus!r}")
        elif not der.phases.issubset(net.buses[der.bus].phases):
            err(der.id, f"phases {der.phases.to_string()} not present at bus {der.bus}")
        if der.connection == "delta" and len(der.phases) < 2:
            err(der.id, "delta generator needs at least 2 phases")

    if net.source.bus not in net.buses:
        err("source", f"references undeclared bus {net.source.bus!r}")
    if net.source.nominal_kv <= 0:
        err("source", "nominal_kv must be positive")

    ends_seen: set[tuple[str, str]] = set()
    for dev in net.devices:
        if dev.line not in net.lines:
            err(dev.device_id, f"monitors unknown line {dev.line!r}")
            continue
        ln = net.lines[dev.line]
        if dev.upstream_bus not in (ln.from_bus, ln.to_bus):
            err(dev.device_id, f"upstream bus {dev.upstream_bus!r} is not an end of line {ln.id}")
        key = (dev.line, dev.upstream_bus)
        if key in ends_seen:
            err(dev.device_id, f"line end {key} already carries a device")
        ends_seen.add(key)

    for sh in net.shunts.values():
        warn(sh.id, "capacitor/shunt is stored but not included in the admittance model")

    if not any(d.severity == "error" for d in diags):
        missing = set(net.buses) - reachable_buses(net)
        if missing:
            err("network", "unreachable buses: " + ", ".join(sorted(missing)))

    return diags


def ground_path_exists(net: Network) -> bool:
    """True when fault current can return through ground somewhere in the circuit.

    The source counts when its equivalent is grounded, a transformer counts
    through any wye_grounded winding, and wye loads are taken to supply a
    grounded neutral.
    """
    if net.source.grounded:
        return True
    for tx in net.transformers.values():
        if any(w.connection == "wye_grounded" for w in tx.windings):
            return True
    return any(load.connection == "wye" for load in net.loads.values())


# --- canonical text form ------------------------------------------------

def _fmt(x: float) -> str:
    """Shortest exact decimal form; parse(fmt(x)) == x."""
    return repr(float(x))


def _fmt_bus(bus: str, phases: PhaseSet) -> str:
    if len(phases) == 3:
        return bus
    nodes = ".".join(str(i + 1) for i in phases.indices)
    return f"{bus}.{nodes}"


def _fmt_matrix(m: tuple[tuple[float, ...], ...]) -> str:
    rows = []
    for i, row in enumerate(m):
        rows.append(" ".join(_fmt(v) for v in row[: i + 1]))
    return "(" + " | ".join(rows) + ")"


def to_canonical_text(net: Network) -> str:
    """Deterministic sorted-key text form of the network, in the input grammar.

    Parsing the result reproduces the network field by field; used for
    round-trip tests and golden files.
    """
    src = net.source
    out = [
        f"New Circuit.{net.name} bus1={src.bus} basekv={_fmt(src.nominal_kv)}"
        f" pu={_fmt(src.pu)} angle={_fmt(src.angle_deg)}"
        f" r1={_fmt(src.z1_ohm.real)} x1={_fmt(src.z1_ohm.imag)}"
        f" r0={_fmt(src.z0_ohm.real)} x0={_fmt(src.z0_ohm.imag)}"
        f" grounded={'yes' if src.grounded else 'no'}"
    ]
    for code in sorted(net.line_codes.values(), key=lambda c: c.id):
        out.append(
            f"New LineCode.{code.id} nphases={code.n_phases} units=km"
            f" rmatrix={_fmt_matrix(code.r_matrix)} xmatrix={_fmt_matrix(code.x_matrix)}"
        )
    for ln in sorted(net.lines.values(), key=lambda l: l.id):
        parts = [
            f"New Line.{ln.id} bus1={_fmt_bus(ln.from_bus, ln.phases)}"
            f" bus2={_fmt_bus(ln.to_bus, ln.phases)} phases={len(ln.phases)}"
            f" length={_fmt(ln.length_km)} units=km linecode={ln.code}"
        ]
        if ln.switchable:
            parts.append("switch=yes")
        if ln.is_open:
            parts.append("enabled=no")
        out.append(" ".join(parts))
    for tx in sorted(net.transformers.values(), key=lambda t: t.id):
        w1, w2 = tx.windings
        conn = {"wye_grounded": "wyeg", "wye": "wye", "delta": "delta"}
        out.append(
            f"New Transformer.{tx.id} windings=2 buses=({w1.bus} {w2.bus})"
            f" conns=({conn[w1.connection]} {conn[w2.connection]})"
            f" kvs=({_fmt(w1.kv)} {_fmt(w2.kv)}) kvas=({_fmt(w1.kva)} {_fmt(w2.kva)})"
            f" taps=({_fmt(w1.tap)} {_fmt(w2.tap)})"
            f" rpu={_fmt(tx.series_impedance.real)} xpu={_fmt(tx.series_impedance.imag)}"
        )
    model_code = {"constant_pq": 1, "constant_z": 2, "constant_i": 5}
    for load in sorted(net.loads.values(), key=lambda l: l.id):
        out.append(
            f"New Load.{load.id} bus1={_fmt_bus(load.bus, load.phases)}"
            f" phases={len(load.phases)} conn={load.connection}"
            f" model={model_code[load.model]} kwph={_fmt(load.kw)} kvarph={_fmt(load.kvar)}"
        )
    for der in sorted(net.ders.values(), key=lambda d: d.id):
        cls = "PVSystem" if der.kind == "pv" else "Generator"
        out.append(
            f"New {cls}.{der.id} bus1={_fmt_bus(der.bus, der.phases)}"
            f" phases={len(der.phases)} conn={der.connection}"
            f" kva={_fmt(der.rated_kva)} climit={_fmt(der.fault_current_limit)}"
        )
    for sh in sorted(net.shunts.values(), key=lambda s: s.id):
        out.append(
            f"New Capacitor.{sh.id} bus1={_fmt_bus(sh.bus, sh.phases)}"
            f" phases={len(sh.phases)} kvar={_fmt(sh.kvar)}"
        )
    for dev in sorted(net.devices, key=lambda d: d.device_id):
        ln = net.lines[dev.line]
        end = 1 if dev.upstream_bus == ln.from_bus else 2
        out.append(f"New Relay.{dev.device_id} monitoredobj=Line.{dev.line} end={end}")
    return "\n".join(out) + "\n"
