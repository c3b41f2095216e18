import dataclasses

import pytest

from feederlab.network import (
    Bus,
    DeviceLocation,
    Line,
    LoadSpec,
    Network,
    NetworkError,
    PhaseSet,
    SourceSpec,
    Transformer,
    Winding,
    ground_path_exists,
    to_canonical_text,
    validate,
)
from feederlab.dssparse import parse_dss
from feederlab.cases import case_text, load_case

from netfactory import ABC, chain_net, code3, mixed_net


class TestPhaseSet:
    def test_order_independent(self):
        assert PhaseSet(("c", "a")) == PhaseSet(("a", "c"))
        assert PhaseSet.from_string("bca") == ABC

    def test_membership_and_indices(self):
        ps = PhaseSet(("b", "c"))
        assert "b" in ps and "a" not in ps
        assert ps.indices == (1, 2)
        assert len(ps) == 2

    def test_nonempty(self):
        with pytest.raises(NetworkError):
            PhaseSet(())

    def test_bad_phase(self):
        with pytest.raises(NetworkError):
            PhaseSet(("x",))


class TestValidate:
    def test_valid_net_is_clean(self):
        assert validate(chain_net(2)) == []

    def test_line_to_undeclared_bus(self):
        net = chain_net(3)
        bad = dataclasses.replace(net.lines["l2"], to_bus="ghost")
        net = dataclasses.replace(net, lines={**net.lines, "l2": bad})
        diags = [d for d in validate(net) if d.severity == "error"]
        assert any(d.element == "l2" and "ghost" in d.message for d in diags)

    def test_disconnected_island(self):
        net = chain_net(4)
        lines = dict(net.lines)
        del lines["l2"]
        net = dataclasses.replace(net, lines=lines)
        diags = [d for d in validate(net) if d.severity == "error"]
        assert any("unreachable" in d.message and "b3" in d.message and "b4" in d.message
                   for d in diags)

    def test_phase_mismatch_flagged(self):
        net = mixed_net(0)
        bad = LoadSpec("bad", "lat", PhaseSet(("a",)), "wye", 1.0, 0.0)
        net = dataclasses.replace(net, loads={**net.loads, "bad": bad})
        assert any(d.element == "bad" for d in validate(net) if d.severity == "error")

    def test_two_devices_same_line_end(self):
        net = chain_net(3, devices=(1,))
        extra = DeviceLocation("dup", "l1", "b1")
        net = dataclasses.replace(net, devices=net.devices + (extra,))
        assert any("already carries" in d.message for d in validate(net))

    def test_capacitor_warns(self):
        net = parse_dss(
            "New Circuit.c bus1=s basekv=4.16\n"
            "New LineCode.lc nphases=3 r1=0.2 x1=0.4 r0=0.5 x0=1.0\n"
            "New Line.l1 bus1=s bus2=b length=1 linecode=lc\n"
            "New Capacitor.cap1 bus1=b kvar=300\n")
        diags = validate(net)
        assert any(d.severity == "warning" and d.element == "cap1" for d in diags)
        assert not any(d.severity == "error" for d in diags)


class TestGroundPath:
    def test_all_delta_network_is_ungrounded(self):
        assert ground_path_exists(load_case("ieee37")) is False

    def test_one_grounded_winding_flips_it(self):
        net = load_case("ieee37")
        tx = net.transformers["xf1"]
        w1 = dataclasses.replace(tx.windings[0], connection="wye_grounded")
        grounded_tx = dataclasses.replace(tx, windings=(w1, tx.windings[1]))
        net2 = dataclasses.replace(net, transformers={"xf1": grounded_tx})
        assert ground_path_exists(net2) is True

    def test_grounded_source(self):
        net = load_case("ieee37")
        net2 = dataclasses.replace(
            net, source=dataclasses.replace(net.source, grounded=True))
        assert ground_path_exists(net2) is True

    def test_wye_load_implies_path(self):
        net = load_case("ieee37")
        wye = dataclasses.replace(net.loads["load_712"], connection="wye")
        net2 = dataclasses.replace(net, loads={**net.loads, "load_712": wye})
        assert ground_path_exists(net2) is True

    def test_monotone_under_grounding(self):
        # adding a grounded winding never flips True -> False
        for case in ("ieee34", "ieee37"):
            net = load_case(case)
            before = ground_path_exists(net)
            for tx_id, tx in net.transformers.items():
                w1 = dataclasses.replace(tx.windings[0], connection="wye_grounded")
                net2 = dataclasses.replace(
                    net, transformers={**net.transformers,
                                       tx_id: dataclasses.replace(tx, windings=(w1, tx.windings[1]))})
                assert ground_path_exists(net2) >= before


class TestCanonicalForm:
    @pytest.mark.parametrize("case", ["ieee34", "ieee37", "synthetic-large"])
    def test_round_trip_bundled(self, case):
        net1 = parse_dss(case_text(case))
        text = to_canonical_text(net1)
        net2 = parse_dss(text)
        assert net1 == net2

    def test_canonical_is_idempotent(self):
        net1 = load_case("ieee34")
        text = to_canonical_text(net1)
        assert to_canonical_text(parse_dss(text)) == text

    def test_round_trip_preserves_exact_floats(self):
        net1 = load_case("ieee34")
        net2 = parse_dss(to_canonical_text(net1))
        for lid, ln in net1.lines.items():
            assert net2.lines[lid].length_km == ln.length_km  # bitwise
        for tid, tx in net1.transformers.items():
            assert net2.transformers[tid].series_impedance == tx.series_impedance
