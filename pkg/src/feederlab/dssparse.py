"""Parser for the supported subset of the DSS circuit-description grammar.

Supported statements: ``New Circuit./Line./LineCode./Transformer./Load./
PVSystem./Generator./Capacitor./Relay./Recloser.`` with ``key=value``
properties, ``~`` continuation lines, ``!`` and ``//`` comments, and
``Set``/``Solve``/``Plot`` statements (recognized and ignored).  Keywords
are case-insensitive.  Anything outside the subset is skipped with a
warning, never silently.

Dialect notes (where DSS itself is loose):
  - transformer ``conns`` accepts ``wyeg`` (grounded), ``wye`` (ungrounded
    neutral) and ``delta``;
  - ``New Circuit`` takes ``grounded=yes|no`` for the source equivalent;
  - generators are treated as wind units, PVSystems as solar; both accept
    ``climit=`` (fault-current limit as a multiple of rated current);
  - ``kwph=``/``kvarph=`` give exact per-phase load values and win over
    the total ``kw=``/``kvar=``;
  - ``rpu=``/``xpu=`` give the exact per-unit transformer impedance and
    win over ``%loadloss``/``xhl``;
  - ``enabled=no`` on a line means normally open.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from .network import (
    Bus,
    DerSpec,
    DeviceLocation,
    Diagnostic,
    Line,
    LineCode,
    LoadSpec,
    Network,
    NetworkError,
    PhaseSet,
    Shunt,
    SourceSpec,
    Transformer,
    Winding,
)

_KM_PER_UNIT = {"km": 1.0, "m": 0.001, "ft": 0.0003048, "kft": 0.3048, "mi": 1.609344}

_IGNORED_VERBS = {"set", "solve", "plot"}

_PROP_RE = re.compile(r"([\w%]+)\s*=\s*(\([^)]*\)|\[[^\]]*\]|\S+)")


class DssSyntaxError(ValueError):
    def __init__(self, message: str, line: int, col: int = 0):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


@dataclass
class _Statement:
    verb: str
    cls: str
    name: str
    props: list[tuple[str, str, int]]  # (key, raw value, source line)
    line: int


class _Props:
    """key=value map for one statement, with typed accessors."""

    _MISSING = object()

    def __init__(self, stmt: _Statement):
        self.stmt = stmt
        self.d: dict[str, tuple[str, int]] = {}
        for key, raw, ln in stmt.props:
            self.d[key] = (raw, ln)

    def __contains__(self, key: str) -> bool:
        return key in self.d

    def raw(self, key: str) -> str:
        return self.d[key][0]

    def _get(self, key: str, conv, default):
        if key not in self.d:
            if default is self._MISSING:
                raise DssSyntaxError(
                    f"{self.stmt.cls} {self.stmt.name}: missing required {key!r}",
                    self.stmt.line)
            return default
        raw, ln = self.d[key]
        return conv(raw, key, ln)

    def f(self, key: str, default=_MISSING) -> float:
        return self._get(key, _float, default)

    def i(self, key: str, default=_MISSING) -> int:
        return self._get(key, _int, default)

    def b(self, key: str, default=_MISSING) -> bool:
        return self._get(key, _yesno, default)

    def s(self, key: str, default=_MISSING) -> str:
        return self._get(key, lambda raw, k, ln: raw.lower(), default)


@dataclass
class ParseResult:
    network: Network
    warnings: list[Diagnostic] = field(default_factory=list)


def _strip_comment(text: str) -> str:
    if text.lstrip().startswith("//"):
        return ""
    cut = text.find("!")
    return text if cut < 0 else text[:cut]


def _parse_props(text: str, lineno: int, stmt: _Statement):
    pos = 0
    for m in _PROP_RE.finditer(text):
        gap = text[pos:m.start()]
        if gap.strip(" ,\t"):
            raise DssSyntaxError(f"unexpected token {gap.strip()!r}", lineno, pos + 1)
        stmt.props.append((m.group(1).lower(), m.group(2), lineno))
        pos = m.end()
    if text[pos:].strip(" ,\t"):
        raise DssSyntaxError(f"unexpected token {text[pos:].strip()!r}", lineno, pos + 1)


def _statements(text: str) -> list[_Statement]:
    stmts: list[_Statement] = []
    current: _Statement | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("~"):
            if current is None:
                raise DssSyntaxError("continuation with no open statement", lineno)
            _parse_props(line[1:], lineno, current)
            continue
        verb = line.split(None, 1)[0].lower()
        if verb in _IGNORED_VERBS:
            current = None
            continue
        if verb == "new":
            m = re.match(r"(?i)new\s+([A-Za-z]+)\s*\.\s*(\S+)\s*(.*)", line)
            if not m:
                raise DssSyntaxError("malformed New statement", lineno)
            current = _Statement("new", m.group(1).lower(), m.group(2).lower(), [], lineno)
            stmts.append(current)
            _parse_props(m.group(3), lineno, current)
        else:
            stmts.append(_Statement("other", verb, "", [], lineno))
            current = None
    return stmts


def _float(raw: str, key: str, lineno: int) -> float:
    try:
        return float(raw)
    except ValueError:
        raise DssSyntaxError(f"{key}: expected a number, got {raw!r}", lineno) from None


def _int(raw: str, key: str, lineno: int) -> int:
    try:
        return int(raw)
    except ValueError:
        raise DssSyntaxError(f"{key}: expected an integer, got {raw!r}", lineno) from None


def _yesno(raw: str, key: str, lineno: int) -> bool:
    v = raw.lower()
    if v in ("yes", "y", "true", "1"):
        return True
    if v in ("no", "n", "false", "0"):
        return False
    raise DssSyntaxError(f"{key}: expected yes/no, got {raw!r}", lineno)


def _array(raw: str) -> list[str]:
    return raw.strip("()[]").replace(",", " ").split()


def _matrix(raw: str, n: int, key: str, lineno: int) -> tuple[tuple[float, ...], ...]:
    body = raw.strip("()[]")
    rows = [r.replace(",", " ").split() for r in body.split("|")]
    vals = [[_float(v, key, lineno) for v in row] for row in rows if row]
    if len(vals) == 1 and len(vals[0]) == n * n:
        flat = vals[0]
        vals = [flat[i * n:(i + 1) * n] for i in range(n)]
    if len(vals) != n:
        raise DssSyntaxError(f"{key}: expected {n} rows", lineno)
    m = [[0.0] * n for _ in range(n)]
    for i, row in enumerate(vals):
        if len(row) == i + 1:  # lower triangular
            for j, v in enumerate(row):
                m[i][j] = m[j][i] = v
        elif len(row) == n:
            for j, v in enumerate(row):
                m[i][j] = v
        else:
            raise DssSyntaxError(f"{key}: row {i + 1} has {len(row)} entries", lineno)
    return tuple(tuple(r) for r in m)


def _bus_ref(raw: str) -> tuple[str, PhaseSet | None]:
    parts = raw.lower().split(".")
    bus = parts[0]
    nodes = [int(p) for p in parts[1:] if p not in ("", "0")]
    if not nodes:
        return bus, None
    return bus, PhaseSet(tuple("abc"[n - 1] for n in sorted(set(nodes)) if 1 <= n <= 3))


_CONN_ALIASES = {
    "wyeg": "wye_grounded", "wye-g": "wye_grounded", "wye_grounded": "wye_grounded",
    "yg": "wye_grounded", "wye": "wye", "y": "wye", "ln": "wye",
    "delta": "delta", "d": "delta", "ll": "delta",
}


def _connection(raw: str, key: str, lineno: int) -> str:
    try:
        return _CONN_ALIASES[raw.lower()]
    except KeyError:
        raise DssSyntaxError(f"{key}: unknown connection {raw!r}", lineno) from None


_LOAD_MODELS = {"1": "constant_pq", "2": "constant_z", "5": "constant_i",
                "constant_pq": "constant_pq", "constant_z": "constant_z",
                "constant_i": "constant_i"}


def _default_phases(n: int, lineno: int) -> PhaseSet:
    if n in (1, 2, 3):
        return PhaseSet(("a", "b", "c")[:n])
    raise DssSyntaxError(f"phases must be 1..3, got {n}", lineno)


@dataclass(frozen=True)
class _PendingDevice:
    device_id: str
    line: str
    upstream_end: int  # 1 = bus1 side, 2 = bus2 side


class _Builder:
    """Accumulates parsed statements, then materializes and checks the Network."""

    def __init__(self):
        self.circuit: dict | None = None
        self.line_codes: dict[str, LineCode] = {}
        self.lines: dict[str, Line] = {}
        self.transformers: dict[str, Transformer] = {}
        self.loads: dict[str, LoadSpec] = {}
        self.ders: dict[str, DerSpec] = {}
        self.shunts: dict[str, Shunt] = {}
        self.devices: list[_PendingDevice] = []
        self.bus_phases: dict[str, set[str]] = {}
        self.warnings: list[Diagnostic] = []

    def warn(self, element: str, message: str):
        self.warnings.append(Diagnostic("warning", element, message))

    def touch_bus(self, bus: str, phases: PhaseSet | None):
        acc = self.bus_phases.setdefault(bus, set())
        acc.update(phases.phases if phases is not None else "abc")

    def check_new_id(self, table: dict, name: str, cls: str, lineno: int):
        if name in table:
            raise NetworkError(f"line {lineno}: duplicate {cls} id {name!r}")

    # --- per-class handlers ------------------------------------------

    def add_circuit(self, st: _Statement):
        if self.circuit is not None:
            raise NetworkError(f"line {st.line}: second New Circuit statement")
        p = _Props(st)
        bus = _bus_ref(p.s("bus1", "sourcebus"))[0]
        basekv = p.f("basekv", 12.47)
        if "r1" in p or "x1" in p:
            z1 = complex(p.f("r1", 0.0), p.f("x1", 0.0))
            z0 = complex(p.f("r0", z1.real), p.f("x0", z1.imag))
        else:
            x1 = basekv * basekv / p.f("mvasc3", 2000.0)
            x0 = 3 * basekv * basekv / p.f("mvasc1", 2100.0) - 2 * x1
            z1, z0 = complex(0.0, x1), complex(0.0, x0)
        self.circuit = dict(
            name=st.name, bus=bus, basekv=basekv,
            pu=p.f("pu", 1.0), angle=p.f("angle", 0.0), z1=z1, z0=z0,
            grounded=p.b("grounded", True),
        )
        self.touch_bus(bus, PhaseSet.abc())

    def add_linecode(self, st: _Statement):
        self.check_new_id(self.line_codes, st.name, "linecode", st.line)
        p = _Props(st)
        n = p.i("nphases", 3)
        unit = p.s("units", "km")
        if unit not in _KM_PER_UNIT:
            raise DssSyntaxError(f"unknown units {unit!r}", st.line)
        if "rmatrix" in p and "xmatrix" in p:
            r = _matrix(p.raw("rmatrix"), n, "rmatrix", st.line)
            x = _matrix(p.raw("xmatrix"), n, "xmatrix", st.line)
        elif "r1" in p and "x1" in p:
            z1 = complex(p.f("r1"), p.f("x1"))
            z0 = complex(p.f("r0", z1.real), p.f("x0", z1.imag))
            zs, zm = (z0 + 2 * z1) / 3, (z0 - z1) / 3
            if n == 1:
                zs, zm = z1, 0j
            r = tuple(tuple((zs.real if i == j else zm.real) for j in range(n)) for i in range(n))
            x = tuple(tuple((zs.imag if i == j else zm.imag) for j in range(n)) for i in range(n))
        else:
            raise DssSyntaxError("linecode needs rmatrix/xmatrix or r1/x1", st.line)
        if unit != "km":
            per_km = 1.0 / _KM_PER_UNIT[unit]
            r = tuple(tuple(v * per_km for v in row) for row in r)
            x = tuple(tuple(v * per_km for v in row) for row in x)
        self.line_codes[st.name] = LineCode(st.name, n, r, x)

    def add_line(self, st: _Statement):
        self.check_new_id(self.lines, st.name, "line", st.line)
        p = _Props(st)
        bus1, ph1 = _bus_ref(p.s("bus1"))
        bus2, ph2 = _bus_ref(p.s("bus2"))
        phases = ph1 or (_default_phases(p.i("phases"), st.line) if "phases" in p
                         else (ph2 or PhaseSet.abc()))
        if ph2 is not None and set(ph2.phases) != set(phases.phases):
            raise DssSyntaxError(f"line {st.name}: bus2 phases disagree with bus1", st.line)
        switch = p.b("switch", False)
        is_open = not p.b("enabled", True)
        unit = p.s("units", "km")
        if unit not in _KM_PER_UNIT:
            raise DssSyntaxError(f"unknown units {unit!r}", st.line)
        length_km = p.f("length", 0.0 if switch else 1.0) * _KM_PER_UNIT[unit]
        if switch:
            code = f"swz{len(phases)}"
            if code not in self.line_codes:
                zero = tuple(tuple(0.0 for _ in range(len(phases))) for _ in range(len(phases)))
                self.line_codes[code] = LineCode(code, len(phases), zero, zero)
        else:
            code = p.s("linecode")
            if code not in self.line_codes:
                raise NetworkError(f"line {st.line}: line {st.name} references "
                                   f"unresolved linecode {code!r}")
            if length_km <= 0:
                raise NetworkError(f"line {st.line}: line {st.name} has zero/negative length")
        self.lines[st.name] = Line(st.name, bus1, bus2, phases, length_km, code,
                                   switchable=switch, is_open=is_open)
        self.touch_bus(bus1, phases)
        self.touch_bus(bus2, phases)

    def add_transformer(self, st: _Statement):
        self.check_new_id(self.transformers, st.name, "transformer", st.line)
        buses: list[str] = ["", ""]
        conns = ["wye_grounded", "wye_grounded"]
        kvs = [0.0, 0.0]
        kvas = [0.0, 0.0]
        taps = [1.0, 1.0]
        r_pct, x_pct = 0.5, 8.0
        rpu = xpu = None
        wdg = 0
        for key, raw, ln in st.props:
            if key == "windings":
                if _int(raw, key, ln) != 2:
                    raise NetworkError(f"line {ln}: only 2-winding transformers supported")
            elif key == "wdg":
                wdg = _int(raw, key, ln) - 1
                if wdg not in (0, 1):
                    raise DssSyntaxError("wdg must be 1 or 2", ln)
            elif key == "bus":
                buses[wdg] = _bus_ref(raw)[0]
            elif key == "conn":
                conns[wdg] = _connection(raw, key, ln)
            elif key == "kv":
                kvs[wdg] = _float(raw, key, ln)
            elif key == "kva":
                kvas[wdg] = _float(raw, key, ln)
            elif key == "tap":
                taps[wdg] = _float(raw, key, ln)
            elif key == "buses":
                refs = _array(raw)
                if len(refs) != 2:
                    raise DssSyntaxError("buses array must have 2 entries", ln)
                buses = [_bus_ref(r)[0] for r in refs]
            elif key == "conns":
                conns = [_connection(r, key, ln) for r in _array(raw)]
            elif key == "kvs":
                kvs = [_float(r, key, ln) for r in _array(raw)]
            elif key == "kvas":
                kvas = [_float(r, key, ln) for r in _array(raw)]
            elif key == "taps":
                taps = [_float(r, key, ln) for r in _array(raw)]
            elif key == "xhl":
                x_pct = _float(raw, key, ln)
            elif key in ("r", "%loadloss"):
                r_pct = _float(raw, key, ln)
            elif key == "rpu":
                rpu = _float(raw, key, ln)
            elif key == "xpu":
                xpu = _float(raw, key, ln)
            elif key == "phases":
                pass  # only 3-phase units in this subset
            else:
                self.warn(st.name, f"ignored transformer property {key!r}")
        if not buses[0] or not buses[1]:
            raise DssSyntaxError(f"transformer {st.name}: two buses required", st.line)
        z = complex(rpu, xpu) if rpu is not None and xpu is not None \
            else complex(r_pct / 100.0, x_pct / 100.0)
        windings = (Winding(buses[0], conns[0], kvs[0], kvas[0], taps[0]),
                    Winding(buses[1], conns[1], kvs[1], kvas[1], taps[1]))
        self.transformers[st.name] = Transformer(st.name, windings, z)
        for b in buses:
            self.touch_bus(b, PhaseSet.abc())

    def add_load(self, st: _Statement):
        self.check_new_id(self.loads, st.name, "load", st.line)
        p = _Props(st)
        bus, ph = _bus_ref(p.s("bus1"))
        phases = ph or _default_phases(p.i("phases", 3), st.line)
        conn = _connection(p.s("conn", "wye"), "conn", st.line)
        if conn == "wye_grounded":
            conn = "wye"
        raw_model = p.s("model", "1")
        if raw_model not in _LOAD_MODELS:
            raise DssSyntaxError(f"unknown load model {raw_model!r}", st.line)
        n_loops = len(phases) if conn == "wye" else (3 if len(phases) == 3 else 1)
        kw_t = p.f("kw", 0.0)
        if "kvar" in p:
            kvar_t = p.f("kvar")
        elif "pf" in p and "kw" in p:
            pf = p.f("pf")
            kvar_t = kw_t * math.tan(math.acos(min(abs(pf), 1.0))) * (1 if pf >= 0 else -1)
        else:
            kvar_t = 0.0
        kw = p.f("kwph", kw_t / n_loops)
        kvar = p.f("kvarph", kvar_t / n_loops)
        self.loads[st.name] = LoadSpec(st.name, bus, phases, conn, kw, kvar,
                                       _LOAD_MODELS[raw_model])
        self.touch_bus(bus, phases)

    def add_der(self, st: _Statement, kind: str):
        self.check_new_id(self.ders, st.name, "der", st.line)
        p = _Props(st)
        bus, ph = _bus_ref(p.s("bus1"))
        phases = ph or _default_phases(p.i("phases", 3), st.line)
        conn = _connection(p.s("conn", "wye"), "conn", st.line)
        if conn == "wye_grounded":
            conn = "wye"
        kva = p.f("kva", p.f("pmpp", p.f("kw", 0.0)))
        if kva <= 0:
            raise DssSyntaxError(f"{kind} {st.name}: kva is required", st.line)
        self.ders[st.name] = DerSpec(st.name, bus, phases, kind, kva, conn,
                                     p.f("climit", 1.2))
        self.touch_bus(bus, phases)

    def add_capacitor(self, st: _Statement):
        self.check_new_id(self.shunts, st.name, "capacitor", st.line)
        p = _Props(st)
        bus, ph = _bus_ref(p.s("bus1"))
        phases = ph or _default_phases(p.i("phases", 3), st.line)
        self.shunts[st.name] = Shunt(st.name, bus, phases, p.f("kvar", 0.0))
        self.touch_bus(bus, phases)

    def add_device(self, st: _Statement):
        if any(d.device_id == st.name for d in self.devices):
            raise NetworkError(f"line {st.line}: duplicate device id {st.name!r}")
        p = _Props(st)
        obj = p.s("monitoredobj")
        line_id = obj.split(".", 1)[1] if "." in obj else obj
        end = p.i("end", 1)
        if end not in (1, 2):
            raise DssSyntaxError("end must be 1 or 2", st.line)
        self.devices.append(_PendingDevice(st.name, line_id, end))

    # --- materialization ---------------------------------------------

    def build(self) -> Network:
        if self.circuit is None:
            raise NetworkError("no New Circuit statement")
        base_kv = self._propagate_base_kv()
        buses = {
            b: Bus(b, PhaseSet(tuple(sorted(ph, key="abc".index))), base_kv[b])
            for b, ph in self.bus_phases.items()
        }
        devices = []
        for dev in sorted(self.devices, key=lambda d: d.device_id):
            if dev.line not in self.lines:
                raise NetworkError(f"device {dev.device_id} monitors unknown line {dev.line!r}")
            ln = self.lines[dev.line]
            upstream = ln.from_bus if dev.upstream_end == 1 else ln.to_bus
            devices.append(DeviceLocation(dev.device_id, dev.line, upstream))
        src = SourceSpec(
            bus=self.circuit["bus"], nominal_kv=self.circuit["basekv"],
            pu=self.circuit["pu"], angle_deg=self.circuit["angle"],
            z1_ohm=self.circuit["z1"], z0_ohm=self.circuit["z0"],
            grounded=self.circuit["grounded"],
        )
        return Network(
            name=self.circuit["name"], buses=buses, line_codes=self.line_codes,
            lines=self.lines, transformers=self.transformers, loads=self.loads,
            ders=self.ders, source=src, devices=tuple(devices), shunts=self.shunts,
        )

    def _propagate_base_kv(self) -> dict[str, float]:
        default = self.circuit["basekv"]
        kv: dict[str, float] = {self.circuit["bus"]: default}
        adj: dict[str, list[tuple[str, float | None]]] = {b: [] for b in self.bus_phases}
        for ln in self.lines.values():
            adj[ln.from_bus].append((ln.to_bus, None))
            adj[ln.to_bus].append((ln.from_bus, None))
        for tx in self.transformers.values():
            w1, w2 = tx.windings
            adj[w1.bus].append((w2.bus, w2.kv or None))
            adj[w2.bus].append((w1.bus, w1.kv or None))
        frontier = [self.circuit["bus"]]
        while frontier:
            u = frontier.pop()
            for v, far_kv in adj.get(u, ()):
                implied = far_kv if far_kv is not None else kv[u]
                if v in kv:
                    if abs(kv[v] - implied) > 1e-3 * max(kv[v], implied):
                        self.warn(v, f"conflicting base kv {kv[v]} vs {implied}; keeping first")
                    continue
                kv[v] = implied
                frontier.append(v)
        for b in self.bus_phases:
            if b not in kv:
                self.warn(b, f"could not infer base kv; defaulting to {default}")
                kv[b] = default
        return kv


def parse_dss_detailed(text: str) -> ParseResult:
    """Parse DSS text into a Network plus the warnings raised along the way."""
    builder = _Builder()
    handlers = {
        "circuit": builder.add_circuit,
        "linecode": builder.add_linecode,
        "line": builder.add_line,
        "transformer": builder.add_transformer,
        "load": builder.add_load,
        "capacitor": builder.add_capacitor,
        "pvsystem": lambda st: builder.add_der(st, "pv"),
        "generator": lambda st: builder.add_der(st, "wind"),
        "relay": builder.add_device,
        "recloser": builder.add_device,
    }
    for st in _statements(text):
        if st.verb == "other":
            builder.warn(f"line {st.line}", f"unsupported statement {st.cls!r} skipped")
            continue
        handler = handlers.get(st.cls)
        if handler is None:
            builder.warn(st.name or f"line {st.line}",
                         f"unknown element class {st.cls!r} skipped")
            continue
        handler(st)
    return ParseResult(builder.build(), builder.warnings)


def parse_dss(text: str) -> Network:
    """Parse DSS text into a Network (warnings dropped)."""
    return parse_dss_detailed(text).network
