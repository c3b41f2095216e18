"""Unbalanced three-phase steady-state power flow.

Fixed-point current-injection solve against a factorized nodal admittance
matrix: lines, transformers, the source Norton equivalent and constant-
impedance loads are stamped into Y; constant-power/constant-current loads
and DER injections are iterated as current sources until the voltage
update falls below tolerance.

Node ordering is (bus insertion order x phase a<b<c), so factorizations
and outputs are reproducible for a given Network.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .network import Network, PhaseSet, reachable_buses

ALPHA = np.exp(2j * np.pi / 3)
# phase a,b,c nominal angles for a positive-sequence source
_PHASE_ROT = np.array([1.0, ALPHA ** 2, ALPHA])
_A_SEQ = np.array([[1, 1, 1], [1, ALPHA ** 2, ALPHA], [1, ALPHA, ALPHA ** 2]])
_A_SEQ_INV = np.linalg.inv(_A_SEQ)

S_BASE_VA = 1e6  # normalization for per-unit current residuals


class PowerFlowError(RuntimeError):
    pass


class PowerFlowDivergence(PowerFlowError):
    def __init__(self, worst_bus: str, mismatch_pu: float, iterations: int):
        super().__init__(
            f"power flow did not converge after {iterations} iterations; "
            f"worst bus {worst_bus} at {mismatch_pu:.3e} pu")
        self.worst_bus = worst_bus
        self.mismatch_pu = mismatch_pu
        self.iterations = iterations


@dataclass
class SolveOptions:
    tolerance_pu: float = 1e-6
    max_iterations: int = 100
    der_power_factor: float = 1.0
    ground_leak_s: float = 1e-8     # pins floating (delta/de-energized) subspaces
    switch_conductance_s: float = 1e6
    voltage_floor_pu: float = 0.5   # below this, PQ/I loads and DERs drop out


@dataclass
class NodeIndex:
    """Maps (bus id, phase) to a node position; ground is the implicit reference."""

    order: list[tuple[str, str]]
    pos: dict[tuple[str, str], int]
    v_base: np.ndarray  # line-to-neutral volts per node

    @classmethod
    def from_network(cls, net: Network) -> "NodeIndex":
        order: list[tuple[str, str]] = []
        v_base = []
        for bus in net.buses.values():
            for ph in bus.phases:
                order.append((bus.id, ph))
                v_base.append(bus.v_base_ln)
        pos = {key: i for i, key in enumerate(order)}
        return cls(order, pos, np.array(v_base))

    def __len__(self) -> int:
        return len(self.order)

    def nodes(self, bus: str, phases: PhaseSet) -> np.ndarray:
        return np.array([self.pos[(bus, p)] for p in phases], dtype=np.intp)

    def flat_start(self) -> np.ndarray:
        v = np.empty(len(self.order), dtype=complex)
        for i, (_, ph) in enumerate(self.order):
            v[i] = self.v_base[i] * _PHASE_ROT["abc".index(ph)]
        return v


@dataclass
class _Injector:
    """One constant-power or constant-current element (or DER loop set)."""

    owner: str  # element id
    nodes_i: np.ndarray  # loop head nodes
    nodes_j: np.ndarray | None  # loop tail nodes (delta), or None for wye
    s_va: np.ndarray  # per-loop complex power; positive = consumption
    model: str  # constant_pq | constant_i
    v_nom: float  # nominal loop voltage (LN for wye, LL for delta)
    sign: float  # -1 load, +1 generation


@dataclass
class _LineStamp:
    nf: np.ndarray
    nt: np.ndarray
    y: np.ndarray  # k x k series admittance


@dataclass
class _TransformerStamp:
    np_: np.ndarray
    ns: np.ndarray
    ypp: np.ndarray
    yps: np.ndarray
    ysp: np.ndarray
    yss: np.ndarray


@dataclass
class AdmittanceSystem:
    net: Network
    index: NodeIndex
    y: sp.csc_matrix
    base_injection: np.ndarray
    injectors: list[_Injector]
    line_stamps: dict[str, _LineStamp]
    tx_stamps: dict[str, _TransformerStamp]
    options: SolveOptions
    open_branches: frozenset[str] = frozenset()
    _lu: object = field(default=None, repr=False, compare=False)

    def lu(self):
        if self._lu is None:
            self._lu = splu(self.y)
        return self._lu

    def with_fault_stamp(self, rows, cols, values) -> "AdmittanceSystem":
        """New system with extra admittance entries added (matrix re-factorized lazily)."""
        n = len(self.index)
        extra = sp.coo_matrix((values, (rows, cols)), shape=(n, n)).tocsc()
        return replace(self, y=(self.y + extra).tocsc(), _lu=None)


def _y_series_line(net: Network, line_id: str, options: SolveOptions) -> np.ndarray:
    ln = net.lines[line_id]
    k = len(ln.phases)
    code = net.line_codes[ln.code]
    z = (np.array(code.r_matrix) + 1j * np.array(code.x_matrix)) * ln.length_km
    if ln.switchable or not np.any(z):
        if not ln.switchable:
            raise PowerFlowError(f"line {ln.id}: zero impedance on a non-switch line")
        return np.eye(k) * options.switch_conductance_s
    try:
        return np.linalg.inv(z)
    except np.linalg.LinAlgError:
        raise PowerFlowError(f"line {ln.id}: singular series impedance") from None


_YI = np.eye(3)
_YII = (np.full((3, 3), -1.0) + 3 * np.eye(3)) / 3.0
_YIII = np.array([[-1, 1, 0], [0, -1, 1], [1, 0, -1]]) / math.sqrt(3.0)

_TX_BLOCKS = {
    ("wye_grounded", "wye_grounded"): (_YI, _YI, -_YI),
    ("wye_grounded", "wye"): (_YII, _YII, -_YII),
    ("wye_grounded", "delta"): (_YI, _YII, _YIII),
    ("wye", "wye_grounded"): (_YII, _YII, -_YII),
    ("wye", "wye"): (_YII, _YII, -_YII),
    ("wye", "delta"): (_YII, _YII, _YIII),
    ("delta", "wye_grounded"): (_YII, _YI, _YIII.T),
    ("delta", "wye"): (_YII, _YII, _YIII.T),
    ("delta", "delta"): (_YII, _YII, -_YII),
}


def _tx_stamp(net: Network, tx_id: str) -> _TransformerStamp:
    tx = net.transformers[tx_id]
    w1, w2 = tx.windings
    y_pu = 1.0 / tx.series_impedance
    s_va = w1.kva * 1e3
    v1 = w1.kv * 1e3 * w1.tap
    v2 = w2.kv * 1e3 * w2.tap
    pp, ss, ps = _TX_BLOCKS[(w1.connection, w2.connection)]
    ypp = pp * y_pu * s_va / (v1 * v1)
    yss = ss * y_pu * s_va / (v2 * v2)
    yps = ps * y_pu * s_va / (v1 * v2)
    return _TransformerStamp(np.empty(0), np.empty(0), ypp, yps, yps.T.copy(), yss)


def _source_y_and_e(net: Network) -> tuple[np.ndarray, np.ndarray]:
    src = net.source
    v_ln = src.nominal_kv * 1e3 / math.sqrt(3.0) * src.pu
    e = v_ln * _PHASE_ROT * np.exp(1j * math.radians(src.angle_deg))
    if src.grounded:
        z_abc = _A_SEQ @ np.diag([src.z0_ohm, src.z1_ohm, src.z1_ohm]) @ _A_SEQ_INV
        y = np.linalg.inv(z_abc)
    else:
        # zero-sequence path blocked: build Y directly with y0 = 0
        y = _A_SEQ @ np.diag([0, 1 / src.z1_ohm, 1 / src.z1_ohm]) @ _A_SEQ_INV
    return y, e


def _delta_pairs(phases: PhaseSet) -> list[tuple[str, str]]:
    ph = list(phases)
    if len(ph) == 3:
        return [("a", "b"), ("b", "c"), ("c", "a")]
    if len(ph) == 2:
        return [(ph[0], ph[1])]
    raise PowerFlowError("delta connection needs at least 2 phases")


def assemble_admittance(
    net: Network,
    scenario=None,
    options: SolveOptions | None = None,
    *,
    open_branches: frozenset[str] = frozenset(),
    loads_as_z_at: np.ndarray | None = None,
) -> AdmittanceSystem:
    """Stamp the network into a sparse complex nodal admittance system.

    `scenario` supplies per-load / per-DER scaling (defaults to 1.0).
    `open_branches` are line/transformer ids left unstamped (breaker open).
    `loads_as_z_at` converts every load to constant impedance at the given
    node voltages (short-circuit convention); DERs become injectors only.
    """
    options = options or SolveOptions()
    index = NodeIndex.from_network(net)
    n = len(index)
    # loads/DERs in a de-energized island inject nothing (tripped offline)
    energized = reachable_buses(net, open_branches)
    rows: list[int] = []
    cols: list[int] = []
    vals: list[complex] = []

    def stamp(i: int, j: int, y: complex):
        rows.append(i)
        cols.append(j)
        vals.append(y)

    def stamp_block(ni: np.ndarray, nj: np.ndarray, block: np.ndarray):
        for a, ia in enumerate(ni):
            for b, jb in enumerate(nj):
                if block[a, b] != 0:
                    stamp(int(ia), int(jb), block[a, b])

    line_stamps: dict[str, _LineStamp] = {}
    for ln in net.lines.values():
        nf = index.nodes(ln.from_bus, ln.phases)
        nt = index.nodes(ln.to_bus, ln.phases)
        y = _y_series_line(net, ln.id, options)
        line_stamps[ln.id] = _LineStamp(nf, nt, y)
        if ln.is_open or ln.id in open_branches:
            continue
        stamp_block(nf, nf, y)
        stamp_block(nt, nt, y)
        stamp_block(nf, nt, -y)
        stamp_block(nt, nf, -y)

    tx_stamps: dict[str, _TransformerStamp] = {}
    for tx in net.transformers.values():
        st = _tx_stamp(net, tx.id)
        st.np_ = index.nodes(tx.windings[0].bus, PhaseSet.abc())
        st.ns = index.nodes(tx.windings[1].bus, PhaseSet.abc())
        tx_stamps[tx.id] = st
        if tx.id in open_branches:
            continue
        stamp_block(st.np_, st.np_, st.ypp)
        stamp_block(st.ns, st.ns, st.yss)
        stamp_block(st.np_, st.ns, st.yps)
        stamp_block(st.ns, st.np_, st.ysp)

    # source Norton equivalent
    y_src, e_src = _source_y_and_e(net)
    src_nodes = index.nodes(net.source.bus, PhaseSet.abc())
    stamp_block(src_nodes, src_nodes, y_src)
    base_injection = np.zeros(n, dtype=complex)
    base_injection[src_nodes] += y_src @ e_src

    injectors: list[_Injector] = []

    def load_scale(load_id: str) -> float:
        return 1.0 if scenario is None else scenario.load_scale[load_id]

    def der_scale(der_id: str) -> float:
        return 1.0 if scenario is None else scenario.der_scale[der_id]

    for load in net.loads.values():
        bus = net.buses[load.bus]
        s_loop = (load.kw + 1j * load.kvar) * 1e3 * load_scale(load.id)
        if load.connection == "wye":
            nodes_i = index.nodes(load.bus, load.phases)
            nodes_j = None
            v_nom = bus.v_base_ln
            loops = len(load.phases)
        else:
            pairs = _delta_pairs(load.phases)
            nodes_i = np.array([index.pos[(load.bus, p[0])] for p in pairs], dtype=np.intp)
            nodes_j = np.array([index.pos[(load.bus, p[1])] for p in pairs], dtype=np.intp)
            v_nom = bus.v_base_ln * math.sqrt(3.0)
            loops = len(pairs)
        s = np.full(loops, s_loop, dtype=complex)
        if load.model == "constant_z" or loads_as_z_at is not None:
            if loads_as_z_at is None:
                v_ref_i = np.full(loops, v_nom, dtype=complex)
            else:
                vi = loads_as_z_at[nodes_i]
                v_ref_i = vi if nodes_j is None else vi - loads_as_z_at[nodes_j]
            for k in range(loops):
                vmag2 = max(abs(v_ref_i[k]) ** 2, (0.05 * v_nom) ** 2)
                yk = np.conj(s[k]) / vmag2
                i = int(nodes_i[k])
                stamp(i, i, yk)
                if nodes_j is not None:
                    j = int(nodes_j[k])
                    stamp(j, j, yk)
                    stamp(i, j, -yk)
                    stamp(j, i, -yk)
        elif load.bus in energized:
            injectors.append(_Injector(load.id, nodes_i, nodes_j, s, load.model, v_nom, -1.0))

    for der in net.ders.values():
        bus = net.buses[der.bus]
        pf = options.der_power_factor
        p_total = der.rated_kva * 1e3 * der_scale(der.id) * pf
        q_total = p_total * math.tan(math.acos(min(abs(pf), 1.0)))
        if der.connection == "wye":
            nodes_i = index.nodes(der.bus, der.phases)
            nodes_j = None
            v_nom = bus.v_base_ln
            loops = len(der.phases)
        else:
            pairs = _delta_pairs(der.phases)
            nodes_i = np.array([index.pos[(der.bus, p[0])] for p in pairs], dtype=np.intp)
            nodes_j = np.array([index.pos[(der.bus, p[1])] for p in pairs], dtype=np.intp)
            v_nom = bus.v_base_ln * math.sqrt(3.0)
            loops = len(pairs)
        if der.bus not in energized:
            continue
        s = np.full(loops, (p_total + 1j * q_total) / loops, dtype=complex)
        injectors.append(_Injector(der.id, nodes_i, nodes_j, s, "constant_pq", v_nom, +1.0))

    # tiny blanket leak: references floating subspaces (all-delta circuits,
    # de-energized subtrees) without measurably loading grounded ones
    for i in range(n):
        stamp(i, i, options.ground_leak_s)

    y = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()
    return AdmittanceSystem(net, index, y, base_injection, injectors,
                            line_stamps, tx_stamps, options, open_branches)


def _injection_currents(sys: AdmittanceSystem, v: np.ndarray) -> np.ndarray:
    """Current injections of all nonlinear elements at voltages `v`."""
    out = np.zeros(len(v), dtype=complex)
    floor = sys.options.voltage_floor_pu
    for inj in sys.injectors:
        vi = v[inj.nodes_i]
        u = vi if inj.nodes_j is None else vi - v[inj.nodes_j]
        # band guard: loads/DERs drop out at collapsed or absurd voltages
        alive = (np.abs(u) > floor * inj.v_nom) & (np.abs(u) < 3.0 * inj.v_nom)
        if not np.any(alive):
            continue
        if inj.model == "constant_pq":
            i_loop = np.conj(inj.s_va / np.where(alive, u, 1.0))
        else:  # constant_i: magnitude at nominal, angle tracks the loop voltage
            i_mag = np.abs(inj.s_va) / inj.v_nom
            phi = np.angle(inj.s_va)
            i_loop = i_mag * np.exp(1j * (np.angle(np.where(alive, u, 1.0)) - phi))
        i_loop = np.where(alive, i_loop, 0.0) * inj.sign
        np.add.at(out, inj.nodes_i, i_loop)
        if inj.nodes_j is not None:
            np.add.at(out, inj.nodes_j, -i_loop)
    return out


@dataclass
class PowerFlowSolution:
    net: Network
    index: NodeIndex
    v: np.ndarray  # complex node voltages (volts, line-to-neutral)
    iterations: int
    max_mismatch_pu: float
    system: AdmittanceSystem
    _branch_cache: dict = field(default_factory=dict)

    def v_bus(self, bus: str) -> np.ndarray:
        """3-vector of phase voltages; absent phases are 0."""
        out = np.zeros(3, dtype=complex)
        for ph in self.net.buses[bus].phases:
            out["abc".index(ph)] = self.v[self.index.pos[(bus, ph)]]
        return out

    def v_pu(self, bus: str) -> np.ndarray:
        return np.abs(self.v_bus(bus)) / self.net.buses[bus].v_base_ln

    def branch_current(self, branch_id: str) -> tuple[np.ndarray, np.ndarray]:
        """(I_from, I_to) 3-vectors, both oriented into the branch; 0 on absent phases."""
        if branch_id in self._branch_cache:
            return self._branch_cache[branch_id]
        sys = self.system
        if branch_id in sys.line_stamps:
            ln = self.net.lines[branch_id]
            st = sys.line_stamps[branch_id]
            if ln.is_open or branch_id in sys.open_branches:
                i_f = np.zeros(len(st.nf), dtype=complex)
                i_t = np.zeros(len(st.nf), dtype=complex)
            else:
                vf, vt = self.v[st.nf], self.v[st.nt]
                i_f = st.y @ (vf - vt)
                i_t = -i_f
            idx = [("abc".index(p)) for p in ln.phases]
        elif branch_id in sys.tx_stamps:
            st = sys.tx_stamps[branch_id]
            vp, vs = self.v[st.np_], self.v[st.ns]
            i_f = st.ypp @ vp + st.yps @ vs
            i_t = st.ysp @ vp + st.yss @ vs
            idx = [0, 1, 2]
        else:
            raise KeyError(branch_id)
        out_f = np.zeros(3, dtype=complex)
        out_t = np.zeros(3, dtype=complex)
        for k, i3 in enumerate(idx):
            out_f[i3] = i_f[k]
            out_t[i3] = i_t[k]
        self._branch_cache[branch_id] = (out_f, out_t)
        return out_f, out_t

    def kcl_residual_amps(self) -> np.ndarray:
        """|Y v - i_inj| per node; series-only model, so ~0 for an exact solve."""
        total = self.system.base_injection + _injection_currents(self.system, self.v)
        return np.abs(self.system.y @ self.v - total)


def branch_currents(sol: PowerFlowSolution, branch_id: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-phase current phasors at both ends of a line or transformer."""
    return sol.branch_current(branch_id)


def solve_powerflow(
    net: Network,
    scenario=None,
    options: SolveOptions | None = None,
    *,
    open_branches: frozenset[str] = frozenset(),
    warm_start: np.ndarray | None = None,
    system: AdmittanceSystem | None = None,
) -> PowerFlowSolution:
    """Fixed-point current-injection power flow.

    Raises PowerFlowDivergence when the voltage update does not fall below
    tolerance within the iteration budget.
    """
    options = options or SolveOptions()
    sys = system if system is not None else assemble_admittance(
        net, scenario, options, open_branches=open_branches)
    lu = sys.lu()
    v = warm_start.copy() if warm_start is not None else sys.index.flat_start()
    dv = np.zeros(len(v))
    mismatch = math.inf
    for it in range(1, options.max_iterations + 1):
        rhs = sys.base_injection + _injection_currents(sys, v)
        v_new = lu.solve(rhs)
        dv = np.abs(v_new - v) / sys.index.v_base
        mismatch = float(dv.max()) if len(dv) else 0.0
        v = v_new
        if mismatch < options.tolerance_pu:
            return PowerFlowSolution(net, sys.index, v, it, mismatch, sys)
    worst = sys.index.order[int(np.argmax(dv))][0]
    raise PowerFlowDivergence(worst, mismatch, options.max_iterations)


def sequence_components(va: complex, vb: complex, vc: complex) -> tuple[complex, complex, complex]:
    """(zero, positive, negative) symmetrical components; missing phases pass 0."""
    v0 = (va + vb + vc) / 3.0
    v1 = (va + ALPHA * vb + ALPHA ** 2 * vc) / 3.0
    v2 = (va + ALPHA ** 2 * vb + ALPHA * vc) / 3.0
    return v0, v1, v2


def solution_to_csv(sol: PowerFlowSolution) -> str:
    """CSV export: bus voltage rows (pu) and line current rows (amps)."""
    buf = io.StringIO()
    buf.write("kind,id,phase,magnitude,angle_deg\n")
    for bus in sol.net.buses.values():
        v3 = sol.v_bus(bus.id)
        for ph in bus.phases:
            u = v3["abc".index(ph)]
            buf.write(f"bus,{bus.id},{ph},{abs(u) / bus.v_base_ln:.9f},"
                      f"{math.degrees(np.angle(u)):.6f}\n")
    for ln in sol.net.lines.values():
        i_f, i_t = sol.branch_current(ln.id)
        for end, vec in (("line_from", i_f), ("line_to", i_t)):
            for ph in ln.phases:
                u = vec["abc".index(ph)]
                buf.write(f"{end},{ln.id},{ph},{abs(u):.9f},"
                          f"{math.degrees(np.angle(u)):.6f}\n")
    return buf.getvalue()


def max_load_current(net: Network, profiles, device_id: str,
                     options: SolveOptions | None = None) -> np.ndarray:
    """Max per-phase |I| at a device over all profile hours, with DER at its minimum.

    The sizing convention for conventional pickups: largest load, least
    distributed generation.
    """
    from .scenario import scenario_at_hour  # local import to avoid a cycle

    options = options or SolveOptions()
    dev = net.device(device_id)
    if not len(profiles):
        raise ValueError("profile set is empty")
    worst = np.zeros(3)
    warm = None
    for hour in range(len(profiles)):
        scen = scenario_at_hour(net, profiles, hour, der_at_minimum=True)
        try:
            sol = solve_powerflow(net, scen, options, warm_start=warm)
        except PowerFlowDivergence as exc:
            raise PowerFlowError(f"hour {hour}: {exc}") from exc
        warm = sol.v
        i_f, i_t = sol.branch_current(dev.line)
        vec = i_f if dev.upstream_bus == net.lines[dev.line].from_bus else i_t
        worst = np.maximum(worst, np.abs(vec))
    return worst
