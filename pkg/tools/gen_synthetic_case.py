#!/usr/bin/env python3
"""Regenerate the bundled large synthetic feeder and the profile CSV.

The feeder is a deterministic pseudo-random radial 12.47 kV network with
1417 buses and 1244 line elements (fuses and switches included) plus 172
service transformers.  Output goes to src/feederlab/cases/.
"""

from __future__ import annotations

import math
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parent.parent / "src" / "feederlab" / "cases"

N_PRIMARY = 1245  # primary buses incl. substation -> 1244 lines
N_XFMR = 172      # service transformers -> 172 secondary buses
TRUNK = 60


def gen_feeder() -> str:
    rng = np.random.Generator(np.random.Philox(20240917))
    out = [
        "! Large synthetic 12.47 kV feeder: 1417 buses, 1244 lines (incl. fuses",
        "! and switches), 172 service transformers.  Regenerate with",
        "! tools/gen_synthetic_case.py.",
        "",
        "New Circuit.synthetic_large bus1=sub basekv=12.47 pu=1.0 angle=0.0",
        "~ r1=0.15 x1=0.9 r0=0.3 x0=1.6 grounded=yes",
        "",
        "New LineCode.truck3 nphases=3 units=km",
        "~ rmatrix=(0.290 | 0.095 0.286 | 0.096 0.093 0.288)",
        "~ xmatrix=(0.660 | 0.300 0.672 | 0.260 0.240 0.666)",
        "New LineCode.lat3 nphases=3 units=km",
        "~ rmatrix=(0.740 | 0.110 0.734 | 0.111 0.108 0.738)",
        "~ xmatrix=(0.710 | 0.320 0.722 | 0.280 0.258 0.716)",
        "New LineCode.lat1 nphases=1 units=km rmatrix=(1.540) xmatrix=(0.980)",
    ]

    lines: list[str] = []
    loads: list[str] = []
    xfmrs: list[str] = []
    ders: list[str] = []

    bus_phase: dict[str, str] = {"sub": "abc"}
    lateral_heads: list[tuple[str, str]] = []  # (trunk bus, phases)

    # trunk
    prev = "sub"
    trunk_buses = []
    for i in range(1, TRUNK + 1):
        bus = f"t{i:03d}"
        length = float(rng.uniform(0.1, 0.4))
        sw = " switch=yes length=0" if i in (20, 40) else f" length={length:.3f} units=km linecode=truck3"
        lines.append(f"New Line.lt{i:03d} bus1={prev} bus2={bus} phases=3{sw}")
        bus_phase[bus] = "abc"
        trunk_buses.append(bus)
        prev = bus

    n_rest = N_PRIMARY - 1 - TRUNK  # primary buses still to place on laterals
    lat_idx = 0
    remaining = n_rest
    while remaining > 0:
        lat_idx += 1
        length = int(min(remaining, rng.integers(4, 29)))
        remaining -= length
        root = trunk_buses[int(rng.integers(0, TRUNK))]
        single = rng.random() < 0.35
        phase = ["a", "b", "c"][lat_idx % 3] if single else "abc"
        code = "lat1" if single else "lat3"
        nph = 1 if single else 3
        suffix = f".{'abc'.index(phase) + 1}" if single else ""
        prev_b = root
        for k in range(1, length + 1):
            bus = f"l{lat_idx:03d}_{k:02d}"
            bus_phase[bus] = phase if single else "abc"
            lid = f"ll{lat_idx:03d}_{k:02d}"
            if k == 1:
                # every lateral starts behind a fuse position
                lines.append(
                    f"New Line.{lid} bus1={prev_b}{suffix} bus2={bus}{suffix} "
                    f"phases={nph} switch=yes length=0")
            else:
                seg = float(rng.uniform(0.05, 0.45))
                lines.append(
                    f"New Line.{lid} bus1={prev_b}{suffix} bus2={bus}{suffix} "
                    f"phases={nph} length={seg:.3f} units=km linecode={code}")
            prev_b = bus
        lateral_heads.append((f"l{lat_idx:03d}_{length:02d}", phase))

    # service transformers at deterministic lateral buses
    primary_buses = [b for b in bus_phase if b.startswith("l") and bus_phase[b] == "abc"]
    primary_buses.sort()
    step = max(1, len(primary_buses) // N_XFMR)
    picked = primary_buses[::step][:N_XFMR]
    assert len(picked) == N_XFMR, len(picked)
    for i, pb in enumerate(picked, start=1):
        sec = f"s{i:03d}"
        bus_phase[sec] = "abc"
        kva = int(rng.choice([25, 50, 75, 150]))
        xfmrs.append(
            f"New Transformer.svc{i:03d} windings=2 buses=({pb} {sec}) "
            f"conns=(delta wyeg) kvs=(12.47 0.48) kvas=({kva} {kva}) r=1.2 xhl=3.0")
        kw = float(rng.uniform(0.15, 0.45)) * kva
        loads.append(
            f"New Load.ld{i:03d} bus1={sec} phases=3 conn=wye model=1 "
            f"kw={kw:.1f} kvar={kw * 0.4:.1f}")
    # a few single-phase primary loads
    singles = [b for b in bus_phase if b.startswith("l") and len(bus_phase[b]) == 1]
    singles.sort()
    for i, pb in enumerate(singles[::7][:60], start=1):
        ph = bus_phase[pb]
        node = "abc".index(ph) + 1
        kw = float(rng.uniform(5, 25))
        loads.append(
            f"New Load.lp{i:03d} bus1={pb}.{node} phases=1 conn=wye model=1 "
            f"kw={kw:.1f} kvar={kw * 0.35:.1f}")
    # rooftop-scale DERs sprinkled on the trunk
    for i, tb in enumerate(trunk_buses[10::12], start=1):
        ders.append(f"New PVSystem.pv{i:02d} bus1={tb} phases=3 conn=wye kva=250")

    out += [""] + lines + [""] + xfmrs + [""] + loads + [""] + ders
    out += ["", "New Relay.relay_sub monitoredobj=Line.lt001 end=1", ""]
    return "\n".join(out)


def gen_profiles(hours: int = 720, seed: int = 77) -> str:
    """Synthetic percent-of-base profiles: daily/seasonal shape plus noise."""
    rng = np.random.Generator(np.random.Philox(seed))
    rows = ["timestamp,load,pv,wind"]
    t0 = datetime(2030, 1, 1)
    for h in range(hours):
        hod = h % 24
        t = (t0 + timedelta(hours=h)).isoformat()
        load = 70 + 20 * math.sin(math.pi * (hod - 5) / 14) + rng.normal(0, 3)
        solar = max(0.0, 90 * math.sin(math.pi * (hod - 6) / 12)) if 6 <= hod <= 18 else 0.0
        solar *= float(rng.uniform(0.7, 1.0))
        wind = 45 + 25 * math.sin(2 * math.pi * (h % 73) / 73) + rng.normal(0, 6)
        rows.append(f"{t},{max(load, 5):.2f},{max(solar, 0):.2f},{max(wind, 0):.2f}")
    return "\n".join(rows) + "\n"


if __name__ == "__main__":
    (OUT / "synthetic_large.dss").write_text(gen_feeder())
    (OUT / "profiles.csv").write_text(gen_profiles())
    print("wrote", OUT / "synthetic_large.dss")
    print("wrote", OUT / "profiles.csv")
