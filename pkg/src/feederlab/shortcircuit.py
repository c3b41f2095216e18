"""Quasi-static fault studies on a solved network.

A fault is stamped as extra admittance between phase nodes (and the
ground reference for grounded types).  For the during-fault solve, loads
are converted to constant impedance at their prefault voltages and DERs
become current sources clamped at their inverter limit, iterated to a
fixed point.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, replace

import numpy as np

from .network import Bus, DeviceLocation, Line, Network, NetworkError, PhaseSet, ground_path_exists
from .powerflow import (
    AdmittanceSystem,
    PowerFlowDivergence,
    PowerFlowError,
    PowerFlowSolution,
    SolveOptions,
    assemble_admittance,
    sequence_components,
    solve_powerflow,
    _delta_pairs,
    _injection_currents,
)

FAULT_KINDS = ("slg", "ll", "llg", "3ph", "3phg")
GROUNDED_KINDS = frozenset({"slg", "llg", "3phg"})

_PAIRS = (("a", "b"), ("b", "c"), ("c", "a"))


class FaultError(ValueError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    """One fault: kind, faulted phases, location, impedance and onset step."""

    kind: str
    phases: tuple[str, ...]
    bus: str | None = None
    line: str | None = None
    position: float | None = None  # fraction along the line, strictly interior
    zf_ohm: float = 0.0
    onset_step: int = 0

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise FaultError(f"unknown fault kind {self.kind!r}")
        if (self.bus is None) == (self.line is None):
            raise FaultError("fault location must be a bus or a (line, position)")
        if self.line is not None:
            if self.position is None or not (0.0 < self.position < 1.0):
                raise FaultError("line fault position must be strictly interior")
        if not math.isfinite(self.zf_ohm) or self.zf_ohm < 0:
            raise FaultError("fault impedance must be finite and >= 0")
        n_need = {"slg": 1, "ll": 2, "llg": 2, "3ph": 3, "3phg": 3}[self.kind]
        if len(self.phases) != n_need:
            raise FaultError(f"{self.kind} fault needs {n_need} phases, got {self.phases}")

    @property
    def location_label(self) -> str:
        if self.bus is not None:
            return self.bus
        return f"{self.line}@{self.position:.3f}"

    def to_json_dict(self) -> dict:
        loc: dict = {"bus": self.bus} if self.bus is not None else \
            {"line": self.line, "position": self.position}
        return {"type": self.kind, "phases": "".join(self.phases),
                **loc, "zf_ohm": self.zf_ohm, "onset_step": self.onset_step}

    @classmethod
    def from_json_dict(cls, d: dict) -> "FaultSpec":
        return cls(kind=d["type"], phases=tuple(d["phases"]), bus=d.get("bus"),
                   line=d.get("line"), position=d.get("position"),
                   zf_ohm=d["zf_ohm"], onset_step=d["onset_step"])


def valid_fault_kinds_for(phases: PhaseSet, grounded: bool) -> set[str]:
    kinds: set[str] = set()
    n = len(phases)
    if grounded and n >= 1:
        kinds.add("slg")
    if n >= 2:
        kinds.update({"ll"})
        if grounded:
            kinds.add("llg")
    if n == 3:
        kinds.add("3ph")
        if grounded:
            kinds.add("3phg")
    return kinds


def valid_fault_types(net: Network, bus: str) -> set[str]:
    """Fault kinds that can draw meaningful current at a bus.

    Ground-referenced kinds need a ground return path somewhere in the
    circuit; multi-phase kinds need the phases to exist at the bus.
    """
    return valid_fault_kinds_for(net.buses[bus].phases, ground_path_exists(net))


def phase_choices(kind: str, phases: PhaseSet) -> list[tuple[str, ...]]:
    """Concrete faulted-phase combinations for a kind at a location."""
    present = set(phases)
    if kind == "slg":
        return [(p,) for p in phases]
    if kind in ("ll", "llg"):
        return [pair for pair in _PAIRS if set(pair) <= present]
    return [("a", "b", "c")] if len(phases) == 3 else []


def insert_midline_bus(net: Network, line_id: str, position: float,
                       bus_id: str = "") -> tuple[Network, str]:
    """Split a line at `position` with a dummy bus so a mid-line fault lands on a bus.

    Device locations are remapped onto the segment that still touches
    their monitored end.  Switch lines cannot be split (zero length); the
    caller should fault an endpoint instead.
    """
    if not 0.0 < position < 1.0:
        raise FaultError("position must be strictly interior")
    ln = net.lines[line_id]
    if ln.switchable:
        raise FaultError(f"line {line_id} is a switch; fault an endpoint instead")
    new_bus = bus_id or f"__mid_{line_id}"
    if new_bus in net.buses:
        raise NetworkError(f"bus {new_bus} already exists")
    seg_a = replace(ln, id=f"{line_id}__a", to_bus=new_bus,
                    length_km=ln.length_km * position)
    seg_b = replace(ln, id=f"{line_id}__b", from_bus=new_bus,
                    length_km=ln.length_km * (1.0 - position))
    buses = dict(net.buses)
    buses[new_bus] = Bus(new_bus, ln.phases, net.buses[ln.from_bus].base_kv)
    lines = {}
    for lid, obj in net.lines.items():
        if lid == line_id:
            lines[seg_a.id] = seg_a
            lines[seg_b.id] = seg_b
        else:
            lines[lid] = obj
    devices = []
    for dev in net.devices:
        if dev.line == line_id:
            seg = seg_a if dev.upstream_bus == ln.from_bus else seg_b
            devices.append(DeviceLocation(dev.device_id, seg.id, dev.upstream_bus))
        else:
            devices.append(dev)
    return replace(net, buses=buses, lines=lines, devices=tuple(devices)), new_bus


def fault_admittance_entries(spec: FaultSpec, net: Network, index,
                             options: SolveOptions) -> tuple[list, list, list]:
    """(rows, cols, values) admittance entries realizing the fault stamp."""
    if spec.bus is None:
        raise FaultError("stamp needs a bus location (insert a mid-line bus first)")
    bus = net.buses[spec.bus]
    missing = set(spec.phases) - set(bus.phases)
    if missing:
        raise FaultError(f"phases {missing} not present at bus {spec.bus}")
    y = (1.0 / spec.zf_ohm) if spec.zf_ohm > 0 else options.switch_conductance_s
    nodes = {p: index.pos[(spec.bus, p)] for p in spec.phases}
    rows: list[int] = []
    cols: list[int] = []
    vals: list[complex] = []

    def to_ground(p: str, yk: complex):
        rows.append(nodes[p]); cols.append(nodes[p]); vals.append(yk)

    def between(p: str, q: str, yk: complex):
        i, j = nodes[p], nodes[q]
        rows.extend([i, j, i, j]); cols.extend([i, j, j, i])
        vals.extend([yk, yk, -yk, -yk])

    if spec.kind == "slg":
        to_ground(spec.phases[0], y)
    elif spec.kind == "ll":
        between(spec.phases[0], spec.phases[1], y)
    elif spec.kind == "llg":
        for p in spec.phases:
            to_ground(p, y)
    elif spec.kind == "3ph":
        # star of y through a common floating point, reduced to its delta
        for p, q in _PAIRS:
            between(p, q, y / 3.0)
    else:  # 3phg
        for p in spec.phases:
            to_ground(p, y)
    return rows, cols, vals


def apply_fault(system: AdmittanceSystem, spec: FaultSpec, *,
                enforce_validity: bool = True) -> AdmittanceSystem:
    """Return a new admittance system with the fault stamped in."""
    net = system.net
    if enforce_validity and spec.bus is not None:
        if spec.kind not in valid_fault_types(net, spec.bus):
            raise FaultError(
                f"{spec.kind} fault is not valid at bus {spec.bus} "
                f"(no ground path or missing phases)")
    rows, cols, vals = fault_admittance_entries(spec, net, system.index, system.options)
    return system.with_fault_stamp(rows, cols, vals)


@dataclass
class FaultSolution(PowerFlowSolution):
    """Power-flow solution of the faulted system plus fault-branch quantities."""

    spec: FaultSpec = None  # type: ignore[assignment]
    fault_current: np.ndarray = None  # per faulted phase, into the fault
    der_limited: dict[str, bool] = None

    @property
    def fault_current_total(self) -> float:
        return float(np.abs(self.fault_current).max()) if len(self.fault_current) else 0.0


def _fault_currents(spec: FaultSpec, net: Network, index, v: np.ndarray,
                    options: SolveOptions) -> np.ndarray:
    y = (1.0 / spec.zf_ohm) if spec.zf_ohm > 0 else options.switch_conductance_s
    vp = {p: v[index.pos[(spec.bus, p)]] for p in spec.phases}
    if spec.kind == "slg":
        return np.array([vp[spec.phases[0]] * y])
    if spec.kind == "ll":
        i = (vp[spec.phases[0]] - vp[spec.phases[1]]) * y
        return np.array([i, -i])
    if spec.kind == "llg":
        return np.array([vp[p] * y for p in spec.phases])
    if spec.kind == "3phg":
        return np.array([vp[p] * y for p in spec.phases])
    # ungrounded 3ph: star point voltage = mean, current into star per phase
    vn = (vp["a"] + vp["b"] + vp["c"]) / 3.0
    return np.array([(vp[p] - vn) * y for p in ("a", "b", "c")])


def solve_fault(
    net: Network,
    scenario,
    spec: FaultSpec,
    prefault: PowerFlowSolution,
    options: SolveOptions | None = None,
    *,
    open_branches: frozenset[str] = frozenset(),
    enforce_validity: bool = True,
    base_system: AdmittanceSystem | None = None,
) -> FaultSolution:
    """During-fault solve with constant-impedance loads and clamped DER sources.

    `prefault` must be a converged solution of the same network (used to
    freeze load impedances and to seed DER output).  Mid-line faults must
    already be materialized via insert_midline_bus.
    """
    options = options or SolveOptions()
    if base_system is None:
        base_system = assemble_admittance(
            net, scenario, options, open_branches=open_branches,
            loads_as_z_at=prefault.v)
    faulted = apply_fault(base_system, spec, enforce_validity=enforce_validity)
    lu = faulted.lu()

    # DER loops: desired constant-power current, magnitude-clamped per loop
    der_meta = []
    for inj in base_system.injectors:
        der = net.ders.get(inj.owner)
        if der is None:
            continue
        n_loops = len(inj.nodes_i)
        i_rated = der.rated_kva * 1e3 / (n_loops * inj.v_nom)
        der_meta.append((der.id, inj, der.fault_current_limit * i_rated))

    v = prefault.v.copy()
    limited: dict[str, bool] = {d.id: False for d in net.ders.values()}
    i_der = np.zeros(len(v), dtype=complex)
    for _ in range(20):
        i_der[:] = 0.0
        limited = {d: False for d in limited}
        for der_id, inj, i_max in der_meta:
            vi = v[inj.nodes_i]
            u = vi if inj.nodes_j is None else vi - v[inj.nodes_j]
            dead = np.abs(u) < 1e-6 * inj.v_nom
            i_loop = np.conj(inj.s_va / np.where(dead, 1.0, u))
            i_loop[dead] = 0.0
            mag = np.abs(i_loop)
            over = mag > i_max
            if np.any(over):
                limited[der_id] = True
                i_loop = np.where(over, i_loop / np.where(mag == 0, 1, mag) * i_max, i_loop)
            np.add.at(i_der, inj.nodes_i, i_loop)
            if inj.nodes_j is not None:
                np.add.at(i_der, inj.nodes_j, -i_loop)
        v_new = lu.solve(faulted.base_injection + i_der)
        dv = float(np.abs(v_new - v).max() / faulted.index.v_base.max())
        v = v_new
        if dv < options.tolerance_pu:
            break
    else:
        raise PowerFlowError(
            f"DER clamp iteration did not reach a fixed point for fault at "
            f"{spec.location_label}")

    fi = _fault_currents(spec, net, faulted.index, v, options)
    return FaultSolution(net, faulted.index, v, prefault.iterations, 0.0, faulted,
                         spec=spec, fault_current=fi, der_limited=limited)


@dataclass
class DeviceMeasurement:
    """Per-phase phasors seen by one device during a solve."""

    device_id: str
    v: np.ndarray  # 3-vector, volts LN at the upstream end
    i: np.ndarray  # 3-vector, amps into the line (toward the protected zone)
    v_seq: tuple[complex, complex, complex]
    i_seq: tuple[complex, complex, complex]
    z_apparent: np.ndarray  # per-phase V/I; nan where |I| below floor

    @property
    def z_defined(self) -> np.ndarray:
        return ~np.isnan(self.z_apparent.real)


def measure_device(sol: PowerFlowSolution, dev: DeviceLocation,
                   i_floor_amps: float = 1e-6) -> DeviceMeasurement:
    ln = sol.net.lines[dev.line]
    i_f, i_t = sol.branch_current(dev.line)
    i = i_f if dev.upstream_bus == ln.from_bus else i_t
    v = sol.v_bus(dev.upstream_bus)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(np.abs(i) > i_floor_amps, v / np.where(i == 0, np.nan, i),
                     np.nan + 0j)
    return DeviceMeasurement(dev.device_id, v, i, sequence_components(*v),
                             sequence_components(*i), z)


def during_fault_measurements(sol: PowerFlowSolution, device_id: str) -> DeviceMeasurement:
    return measure_device(sol, sol.net.device(device_id))


def fault_report_csv(rows: list[tuple[str, FaultSolution]]) -> str:
    """CSV fault study report: one row per (fault, phase) with device currents."""
    buf = io.StringIO()
    devices = rows[0][1].net.devices if rows else ()
    head = "fault_id,type,location,zf_ohm,phase,if_amps"
    for dev in devices:
        head += f",{dev.device_id}_i_amps,{dev.device_id}_v_pu"
    buf.write(head + "\n")
    for fault_id, sol in rows:
        meas = {d.device_id: measure_device(sol, d) for d in sol.net.devices}
        for k, ph in enumerate(sol.spec.phases):
            cells = [fault_id, sol.spec.kind, sol.spec.location_label,
                     f"{sol.spec.zf_ohm:g}", ph,
                     f"{abs(sol.fault_current[k]):.3f}"]
            for dev in sol.net.devices:
                m = meas[dev.device_id]
                i3 = "abc".index(ph)
                vb = sol.net.buses[dev.upstream_bus].v_base_ln
                cells.append(f"{abs(m.i[i3]):.3f}")
                cells.append(f"{abs(m.v[i3]) / vb:.6f}")
            buf.write(",".join(cells) + "\n")
    return buf.getvalue()
