"""Command-line entry point.

Subcommands: validate a case file, run an episode batch, map under-reach,
export a labeled dataset, or serve the environment over NDJSON.

Exit codes: 0 success, 1 input error, 2 runtime divergence, 3 protocol
error.  Every command takes --seed explicitly; there is no wall-clock
default, so reruns of the same invocation are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import cases
from .analytics import build_dataset, underreach_map
from .dssparse import DssSyntaxError, parse_dss_detailed
from .episode import EpisodeConfig, RewardTable, run_batch
from .network import NetworkError, ground_path_exists, to_canonical_text
from .powerflow import PowerFlowError
from .relays import (
    AgentSpec,
    SettingsError,
    make_conventional_agents,
    settings_from_json,
    settings_to_json,
)
from .scenario import FaultConfig, ProfileError, load_profiles, synthetic_profiles
from .server import EnvServer, serve_stdio
from .topology import build_topology

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_DIVERGENCE = 2
EXIT_PROTOCOL = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def load_network(ref: str):
    """A .dss path, or case:<name> for a bundled feeder."""
    if ref.startswith("case:"):
        name = ref.split(":", 1)[1]
        try:
            text = cases.case_text(name)
        except KeyError as exc:
            raise CliError(str(exc)) from exc
    else:
        path = Path(ref)
        if not path.exists():
            raise CliError(f"network file not found: {ref}")
        text = path.read_text()
    try:
        result = parse_dss_detailed(text)
    except (DssSyntaxError, NetworkError) as exc:
        raise CliError(f"{ref}: {exc}") from exc
    return result


def load_profile_set(ref: str):
    """A CSV path, bundled (the packaged 30-day set), or synthetic[:hours[:seed]]."""
    if ref == "bundled":
        return load_profiles(cases.profiles_text())
    if ref.startswith("synthetic"):
        parts = ref.split(":")
        hours = int(parts[1]) if len(parts) > 1 else 8760
        seed = int(parts[2]) if len(parts) > 2 else 7
        return synthetic_profiles(hours=hours, seed=seed)
    path = Path(ref)
    if not path.exists():
        raise CliError(f"profile file not found: {ref}")
    try:
        return load_profiles(str(path))
    except ProfileError as exc:
        raise CliError(f"{ref}: {exc}") from exc


def load_agent_specs(ref: str, net, profiles) -> list[AgentSpec]:
    """A settings-file path, or one of the reserved names auto/oracle/hold."""
    if ref == "auto":
        specs, warnings = make_conventional_agents(net, profiles)
        for w in warnings:
            print(f"warning: {w}", file=sys.stderr)
        return specs
    if ref in ("oracle", "hold"):
        return [AgentSpec.of(d.device_id, ref) for d in net.devices]
    path = Path(ref)
    if not path.exists():
        raise CliError(f"agent settings file not found: {ref}")
    try:
        return settings_from_json(path.read_text(), net)
    except SettingsError as exc:
        raise CliError(f"{ref}: {exc}") from exc


def episode_config(args) -> EpisodeConfig:
    kwargs = {}
    if getattr(args, "steps", None) is not None:
        kwargs["steps_per_episode"] = args.steps
    if getattr(args, "reward_preset", None):
        kwargs["rewards"] = RewardTable.preset(args.reward_preset)
    if getattr(args, "record_detail", None):
        kwargs["record_detail"] = args.record_detail
    return EpisodeConfig(**kwargs)


def fault_config(args) -> FaultConfig:
    kwargs = {}
    if getattr(args, "fault_prob", None) is not None:
        kwargs["fault_probability"] = args.fault_prob
    if getattr(args, "zf_range", None):
        lo, hi = (float(x) for x in args.zf_range.split(","))
        kwargs["zf_range_ohm"] = (lo, hi)
    if getattr(args, "onset_range", None):
        lo, hi = (int(x) for x in args.onset_range.split(","))
        kwargs["onset_step_range"] = (lo, hi)
    return FaultConfig(**kwargs)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_validate(args) -> int:
    result = load_network(args.network)
    net = result.network
    diags = list(result.warnings)
    from .network import validate as validate_net

    diags += validate_net(net)
    for d in diags:
        print(str(d))
    errors = [d for d in diags if d.severity == "error"]
    if errors:
        print(f"{len(errors)} error(s)")
        return EXIT_INPUT
    topo = build_topology(net)
    grounded = ground_path_exists(net)
    print(f"buses: {len(net.buses)}  lines: {len(net.lines)}  "
          f"transformers: {len(net.transformers)}  devices: {len(net.devices)}")
    print(f"tree edges: {len(topo.edges)}  back edges: {len(topo.back_edges)}")
    if grounded:
        print("ground path: yes")
    else:
        print("ground path: no; SLG faults disabled")
    if args.canonical:
        Path(args.canonical).write_text(to_canonical_text(net))
        print(f"canonical form written to {args.canonical}")
    return EXIT_OK


def cmd_run(args) -> int:
    net = load_network(args.network).network
    profiles = load_profile_set(args.profiles)
    specs = load_agent_specs(args.agents, net, profiles)
    cfg = episode_config(args)
    fc = fault_config(args)
    out = _out_dir(args)
    try:
        summary, records = run_batch(net, profiles, specs, args.episodes,
                                     seed=args.seed, cfg=cfg, fault_cfg=fc,
                                     workers=args.workers)
    except PowerFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    (out / "records.jsonl").write_text(
        "".join(rec.to_json_line() + "\n" for rec in records))
    label = Path(args.agents).stem if Path(args.agents).exists() else args.agents
    (out / "summary.csv").write_text(summary.to_csv(label))
    report = [
        f"episodes: {summary.episodes}  aborted: {summary.aborted}",
        "agent            FP      FN   coord.   success",
        f"{label:<14} {summary.counts['false_positive']:>4} "
        f"{summary.counts['false_negative']:>7} "
        f"{summary.counts['coordination_failure']:>8} "
        f"{100 * summary.success_rate:>8.2f}%",
    ]
    (out / "report.txt").write_text("\n".join(report) + "\n")
    print("\n".join(report))
    print(f"records: {out / 'records.jsonl'}")
    return EXIT_OK


def cmd_underreach(args) -> int:
    net = load_network(args.network).network
    profiles = load_profile_set(args.profiles)
    specs = load_agent_specs(args.agents, net, profiles)
    cfg = episode_config(args)
    out = _out_dir(args)
    umap = underreach_map(
        net, profiles, specs, zf_ohm=args.zf, kinds=tuple(args.kinds.split(",")),
        scenarios_per_bus=args.scenarios_per_bus, seed=args.seed, cfg=cfg)
    (out / "underreach.csv").write_text(umap.to_csv())
    (out / "underreach.dot").write_text(umap.to_dot(net))
    missed = sorted(umap.missed_buses)
    print(f"tested {sum(umap.tested.values())} faults over {len(umap.tested)} buses")
    print(f"buses with undetected faults: {len(missed)}")
    for bus in missed:
        print(f"  {bus}: {umap.undetected[bus]}/{umap.tested[bus]} undetected")
    print(f"map: {out / 'underreach.csv'}  dot: {out / 'underreach.dot'}")
    return EXIT_OK


def cmd_dataset(args) -> int:
    net = load_network(args.network).network
    profiles = load_profile_set(args.profiles)
    cfg = episode_config(args)
    fc = fault_config(args)
    out = _out_dir(args)
    channels = tuple(args.channels.split(","))
    writer = build_dataset(net, profiles, args.episodes, seed=args.seed,
                           cfg=cfg, fault_cfg=fc, channels=channels,
                           granularity=args.granularity)
    (out / "dataset.csv").write_text(writer.to_csv())
    (out / "dataset.summary.json").write_text(writer.summary_json())
    print(f"rows: {len(writer.rows)}  counts: {writer.counts}")
    print(f"dataset: {out / 'dataset.csv'}")
    return EXIT_OK


def cmd_serve(args) -> int:
    net = load_network(args.network).network
    profiles = load_profile_set(args.profiles)
    cfg = episode_config(args)
    fc = fault_config(args)
    if args.stdio:
        serve_stdio(net, profiles, cfg=cfg, fault_cfg=fc, debug=args.debug)
        return EXIT_OK
    server = EnvServer(net, profiles, port=args.port, cfg=cfg, fault_cfg=fc,
                       debug=args.debug)
    print(f"serving on 127.0.0.1:{server.port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return EXIT_OK


def cmd_make_settings(args) -> int:
    net = load_network(args.network).network
    profiles = load_profile_set(args.profiles)
    specs, warnings = make_conventional_agents(net, profiles)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    text = settings_to_json(specs)
    if args.out_file:
        Path(args.out_file).write_text(text)
        print(f"settings written to {args.out_file}")
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feederlab",
        description="Distribution-feeder protection testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, profiles=True, agents=False, seed=True, out=False):
        p.add_argument("--network", required=True,
                       help=".dss path or case:<ieee34|ieee37|synthetic-large>")
        if profiles:
            p.add_argument("--profiles", default="bundled",
                           help="CSV path, 'bundled', or 'synthetic[:hours[:seed]]'")
        if agents:
            p.add_argument("--agents", required=True,
                           help="settings JSON path or auto|oracle|hold")
        if seed:
            p.add_argument("--seed", type=int, required=True,
                           help="base seed (required for reproducibility)")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--steps", type=int, default=None,
                       help="steps per episode (default 180)")

    p = sub.add_parser("validate", help="parse and check a case file")
    p.add_argument("--network", required=True)
    p.add_argument("--canonical", default=None,
                   help="also write the canonical text form here")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("run", help="run an episode batch and write records")
    common(p, agents=True, out=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--fault-prob", type=float, default=None, dest="fault_prob")
    p.add_argument("--zf-range", default=None, dest="zf_range",
                   help="ohms, e.g. 6,15")
    p.add_argument("--onset-range", default=None, dest="onset_range",
                   help="steps, e.g. 10,60")
    p.add_argument("--reward-preset", default=None, dest="reward_preset")
    p.add_argument("--record-detail", default=None, dest="record_detail",
                   choices=["none", "seq", "full"])
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("underreach", help="per-bus fault detection map")
    common(p, agents=True, out=True)
    p.add_argument("--zf", type=float, default=0.0, help="fault impedance, ohms")
    p.add_argument("--kinds", default="3ph,slg,ll")
    p.add_argument("--scenarios-per-bus", type=int, default=3,
                   dest="scenarios_per_bus")
    p.set_defaults(fn=cmd_underreach)

    p = sub.add_parser("dataset", help="export a labeled feature dataset")
    common(p, out=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--granularity", choices=["step", "episode"], default="step")
    p.add_argument("--channels", default="v1_mag,i1_mag")
    p.add_argument("--fault-prob", type=float, default=None, dest="fault_prob")
    p.add_argument("--zf-range", default=None, dest="zf_range")
    p.add_argument("--onset-range", default=None, dest="onset_range")
    p.set_defaults(fn=cmd_dataset)

    p = sub.add_parser("serve", help="serve the environment over NDJSON")
    common(p, seed=False)
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--stdio", action="store_true")
    p.add_argument("--debug", action="store_true",
                   help="expose expectations in reset info")
    p.add_argument("--fault-prob", type=float, default=None, dest="fault_prob")
    p.add_argument("--zf-range", default=None, dest="zf_range")
    p.add_argument("--onset-range", default=None, dest="onset_range")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("make-settings",
                       help="generate conventional OC settings from profiles")
    common(p)
    p.add_argument("--out-file", default=None, dest="out_file")
    p.set_defaults(fn=cmd_make_settings)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (NetworkError, DssSyntaxError, ProfileError, SettingsError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PowerFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
