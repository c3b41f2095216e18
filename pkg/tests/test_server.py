import json

import pytest

from feederlab.episode import CHANNELS, EpisodeConfig
from feederlab.scenario import FaultConfig, synthetic_profiles
from feederlab.server import EnvServer, Session, connect_lines

from netfactory import chain_net

PROFILES = synthetic_profiles(60, seed=2)
CFG = EpisodeConfig(steps_per_episode=30)
FC = FaultConfig(fault_probability=1.0, onset_step_range=(5, 10),
                 location_buses=("b2", "b3"))


def make_session(**kwargs):
    net = chain_net(3, devices=(1, 2))
    return Session(net, PROFILES, cfg=kwargs.pop("cfg", CFG),
                   fault_cfg=kwargs.pop("fault_cfg", FC), **kwargs)


def rpc(session, **msg):
    return session.handle(json.dumps({"v": 1, **msg}))


class TestSession:
    def test_spec_describes_spaces(self):
        reply = rpc(make_session(), cmd="spec")
        spec = reply["spec"]
        assert spec["devices"] == ["d1", "d2"]
        assert spec["channels"] == list(CHANNELS)
        assert spec["window"] == 10
        assert spec["actions"] == [0, 1]

    def test_reset_deterministic_for_seed(self):
        a = rpc(make_session(), cmd="reset", seed=7)
        b = rpc(make_session(), cmd="reset", seed=7)
        assert a == b
        c = rpc(make_session(), cmd="reset", seed=8)
        assert c != a

    def test_step_reply_shape(self):
        s = make_session()
        rpc(s, cmd="reset", seed=7)
        reply = rpc(s, cmd="step", actions={"d1": 0, "d2": 0})
        assert set(reply) == {"v", "obs", "reward", "done", "info"}
        assert set(reply["obs"]) == {"d1", "d2"}
        assert len(reply["obs"]["d1"]["i1_mag"]) == 10
        assert reply["reward"] == {"d1": 0.0, "d2": 0.0}

    def test_episode_to_completion_includes_record(self):
        s = make_session()
        rpc(s, cmd="reset", seed=7)
        done = False
        while not done:
            reply = rpc(s, cmd="step", actions={})
            assert "error" not in reply
            done = reply["done"]
        info = reply["info"]
        assert info["outcome"] == "false_negative"  # nobody tripped
        assert info["record"]["v"] == 1
        assert info["record"]["outcome"] == "false_negative"

    def test_malformed_message_preserves_session(self):
        s = make_session()
        assert rpc(s, cmd="reset", seed=1)["obs"]
        assert s.handle("not json")["error"]["code"] == "bad_json"
        assert s.handle(json.dumps({"v": 9}))["error"]["code"] == "version"
        reply = rpc(s, cmd="step", actions={})
        assert "obs" in reply  # the episode survived the garbage

    def test_step_before_reset_is_protocol_error(self):
        reply = rpc(make_session(), cmd="step", actions={})
        assert reply["error"]["code"] == "protocol"

    def test_unknown_device_action(self):
        s = make_session()
        rpc(s, cmd="reset", seed=1)
        reply = rpc(s, cmd="step", actions={"ghost": 1})
        assert reply["error"]["code"] == "protocol"
        assert "obs" in rpc(s, cmd="step", actions={})

    def test_unknown_fields_ignored(self):
        s = make_session()
        reply = rpc(s, cmd="reset", seed=1, extra="whatever", more=[1, 2])
        assert "obs" in reply

    def test_reset_requires_seed(self):
        reply = rpc(make_session(), cmd="reset")
        assert reply["error"]["code"] == "protocol"

    def test_debug_mode_exposes_expectations(self):
        s = make_session(debug=True)
        reply = rpc(s, cmd="reset", seed=3)
        exp = reply["info"]["expectations"]
        assert set(exp["roles"]) == {"d1", "d2"}
        assert reply["info"]["fault"] is not None

    def test_close(self):
        s = make_session()
        assert rpc(s, cmd="close") == {"v": 1, "ok": True}
        assert s.closed


class TestTcpServer:
    def test_sessions_are_independent(self):
        net = chain_net(3, devices=(1, 2))
        server = EnvServer(net, PROFILES, cfg=CFG, fault_cfg=FC)
        server.start_background()
        try:
            send_a, close_a = connect_lines("127.0.0.1", server.port)
            send_b, close_b = connect_lines("127.0.0.1", server.port)
            ra = send_a({"v": 1, "cmd": "reset", "seed": 5})
            rb = send_b({"v": 1, "cmd": "reset", "seed": 6})
            assert ra["obs"] != rb["obs"] or ra["info"] != rb["info"]
            # stepping one session does not disturb the other
            sa = send_a({"v": 1, "cmd": "step", "actions": {"d1": 0}})
            rb2 = send_b({"v": 1, "cmd": "step", "actions": {}})
            assert "obs" in sa and "obs" in rb2
            close_a()
            close_b()
        finally:
            server.shutdown()

    def test_scripted_episode_over_socket(self):
        net = chain_net(3, devices=(1, 2))
        server = EnvServer(net, PROFILES, cfg=CFG, fault_cfg=FC, debug=True)
        server.start_background()
        try:
            send, close = connect_lines("127.0.0.1", server.port)
            r = send({"v": 1, "cmd": "reset", "seed": 11})
            exp = r["info"]["expectations"]
            primary = exp["chain"][0]
            onset = exp["onset_step"]
            done = False
            step = -1
            while not done:
                step += 1
                actions = {primary: 1} if step >= onset + 1 else {}
                r = send({"v": 1, "cmd": "step", "actions": actions})
                done = r["done"]
            assert r["info"]["outcome"] == "correct"
            close()
        finally:
            server.shutdown()
