"""Directed-graph view of a feeder, oriented away from the source.

Used for relay coordination (which devices back each other up) and for
zone/under-reach analysis.  Works for radial feeders; meshed circuits get
a BFS spanning orientation with the extra edges flagged as back-edges.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .network import DeviceLocation, Network, NetworkError


@dataclass(frozen=True)
class TopoEdge:
    branch_id: str
    kind: str  # "line" | "transformer"
    up_bus: str
    down_bus: str
    devices: tuple[DeviceLocation, ...] = ()  # devices mounted on this branch


@dataclass
class DirectedTopology:
    source_bus: str
    parent: dict[str, str | None]  # bus -> upstream bus
    parent_edge: dict[str, TopoEdge]  # bus -> edge toward its parent
    children: dict[str, list[str]]
    edges: dict[str, TopoEdge]  # branch id -> oriented edge (tree edges)
    back_edges: tuple[str, ...] = ()  # branch ids closing loops / open ties
    order: tuple[str, ...] = ()  # buses in BFS order from the source

    def subtree(self, bus: str) -> set[str]:
        """All buses at or below `bus`."""
        seen = {bus}
        stack = [bus]
        while stack:
            u = stack.pop()
            for v in self.children.get(u, ()):
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return seen

    def path_to_source(self, bus: str) -> list[TopoEdge]:
        """Tree edges from `bus` up to the source, nearest first."""
        path = []
        u = bus
        while self.parent[u] is not None:
            path.append(self.parent_edge[u])
            u = self.parent[u]
        return path


def build_topology(net: Network) -> DirectedTopology:
    """Breadth-first orientation of every line/transformer away from the source."""
    devices_by_branch: dict[str, list[DeviceLocation]] = {}
    for dev in net.devices:
        devices_by_branch.setdefault(dev.line, []).append(dev)

    adj: dict[str, list[tuple[str, str, str]]] = {b: [] for b in net.buses}
    for ln in net.lines.values():
        adj[ln.from_bus].append((ln.to_bus, ln.id, "line"))
        adj[ln.to_bus].append((ln.from_bus, ln.id, "line"))
    for tx in net.transformers.values():
        a, b = tx.windings[0].bus, tx.windings[1].bus
        adj[a].append((b, tx.id, "transformer"))
        adj[b].append((a, tx.id, "transformer"))

    src = net.source.bus
    parent: dict[str, str | None] = {src: None}
    parent_edge: dict[str, TopoEdge] = {}
    children: dict[str, list[str]] = {b: [] for b in net.buses}
    edges: dict[str, TopoEdge] = {}
    order = [src]
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v, branch, kind in adj[u]:
            if v in parent or branch in edges:
                continue
            edge = TopoEdge(branch, kind, u, v,
                            tuple(devices_by_branch.get(branch, ())))
            parent[v] = u
            parent_edge[v] = edge
            edges[branch] = edge
            children[u].append(v)
            order.append(v)
            queue.append(v)

    unreached = set(net.buses) - set(parent)
    if unreached:
        raise NetworkError("disconnected network; unreachable buses: "
                           + ", ".join(sorted(unreached)))
    back = tuple(sorted((set(net.lines) | set(net.transformers)) - set(edges)))
    return DirectedTopology(src, parent, parent_edge, children, edges, back,
                            tuple(order))


def coordination_chain(topo: DirectedTopology, fault_bus: str) -> list[str]:
    """Devices on the path from the fault to the source, nearest first.

    Element 0 is the primary device; the rest are backups in escalation
    order.  Only devices facing the fault (their declared upstream end on
    the source side of the edge) participate.
    """
    if fault_bus not in topo.parent:
        raise KeyError(fault_bus)
    chain = []
    for edge in topo.path_to_source(fault_bus):
        for dev in edge.devices:
            if dev.upstream_bus == edge.up_bus:
                chain.append(dev.device_id)
    return chain


def protection_region(topo: DirectedTopology, net: Network, device_id: str) -> set[str]:
    """Buses downstream of the device's monitored line (through it, toward leaves)."""
    dev = net.device(device_id)
    edge = topo.edges.get(dev.line)
    if edge is None:
        return set()
    if dev.upstream_bus == edge.up_bus:
        return topo.subtree(edge.down_bus)
    # device facing upstream: its zone is everything on the source side
    return set(topo.parent) - topo.subtree(edge.down_bus)


def to_dot(net: Network, topo: DirectedTopology,
           node_colors: dict[str, str] | None = None) -> str:
    """DOT digraph: one node per bus, one edge per branch, devices as labels."""
    colors = node_colors or {}
    out = ["digraph feeder {", "  rankdir=LR;", "  node [shape=circle fontsize=9];"]
    for bus in topo.order:
        attrs = [f'label="{bus}"']
        if bus in colors:
            attrs.append(f'style=filled fillcolor="{colors[bus]}"')
        out.append(f'  "{bus}" [{" ".join(attrs)}];')
    for edge in topo.edges.values():
        attrs = []
        if edge.devices:
            names = ",".join(d.device_id for d in edge.devices)
            attrs.append(f'label="{names}"')
        if edge.kind == "transformer":
            attrs.append("style=dashed")
        suffix = f' [{" ".join(attrs)}]' if attrs else ""
        out.append(f'  "{edge.up_bus}" -> "{edge.down_bus}"{suffix};')
    for branch in topo.back_edges:
        a, b = net.branch_endpoints(branch)
        out.append(f'  "{a}" -> "{b}" [style=dotted constraint=false];')
    out.append("}")
    return "\n".join(out) + "\n"
