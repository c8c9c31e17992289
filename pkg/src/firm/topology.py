"""Fat-tree network model and the controller's per-service flow tables."""

from __future__ import annotations

import ipaddress
import threading
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .errors import NotBlacklistedError, UnknownServiceError, ValidationError
from .registry import DeploymentRef, Registry


class Host(NamedTuple):
    id: str
    pod: int
    edge: int  # edge switch index within the pod
    index: int  # global host ordinal, the structural tie-breaker


class PathMetric(NamedTuple):
    hop_count: int
    inter_rack: bool
    inter_pod: bool


@dataclass
class Topology:
    k: int
    core: list[str]
    aggregation: list[str]
    edge: list[str]
    hosts: list[Host]
    links: list[tuple[str, str]]
    _by_id: dict[str, Host] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._by_id = {h.id: h for h in self.hosts}

    @property
    def switches(self) -> list[str]:
        return self.core + self.aggregation + self.edge

    def host(self, host_id: str) -> Host:
        try:
            return self._by_id[host_id]
        except KeyError:
            raise ValidationError(f"unknown host {host_id!r}") from None

    def host_for_address(self, address: str) -> Host:
        """Deterministic placement: the address as an integer, modulo host count."""
        ip = int(ipaddress.IPv4Address(address.partition(":")[0]))
        return self.hosts[ip % len(self.hosts)]

    def adjacency(self) -> dict[str, list[str]]:
        adj: dict[str, list[str]] = {n: [] for n in self.switches + [h.id for h in self.hosts]}
        for a, b in self.links:
            adj[a].append(b)
            adj[b].append(a)
        return adj

    def export(self) -> dict:
        tiers = [(s, "core", None) for s in self.core]
        tiers += [(s, "aggregation", int(s[1:].split("_")[0])) for s in self.aggregation]
        tiers += [(s, "edge", int(s[1:].split("_")[0])) for s in self.edge]
        nodes = [{"id": n, "tier": t, "pod": p} for n, t, p in tiers]
        nodes += [{"id": h.id, "tier": "host", "pod": h.pod} for h in self.hosts]
        return {"k": self.k, "nodes": nodes, "links": [{"a": a, "b": b} for a, b in self.links]}


def build_fat_tree(k: int) -> Topology:
    """Three-tier fat tree of arity ``k``: (k/2)^2 cores, k pods, k/2 hosts per edge switch."""
    if not isinstance(k, int) or k < 2 or k % 2:
        raise ValidationError(f"fat-tree arity must be an even integer >= 2, got {k!r}")
    half = k // 2
    core = [f"c{i}" for i in range(half * half)]
    aggregation, edge, hosts, links = [], [], [], []
    for pod in range(k):
        aggs = [f"a{pod}_{j}" for j in range(half)]
        edges = [f"e{pod}_{j}" for j in range(half)]
        aggregation += aggs
        edge += edges
        for j, agg in enumerate(aggs):
            # aggregation switch j reaches core group j
            for c in range(half):
                links.append((core[j * half + c], agg))
            for e in edges:
                links.append((agg, e))
        for j, e in enumerate(edges):
            for i in range(half):
                host = Host(f"h{pod}_{j}_{i}", pod, j, len(hosts))
                hosts.append(host)
                links.append((e, host.id))
    return Topology(k, core, aggregation, edge, hosts, links)


def shortest_path(topo: Topology, a: str, b: str) -> PathMetric:
    ha, hb = topo.host(a), topo.host(b)
    if ha.id == hb.id:
        return PathMetric(0, False, False)
    if ha.pod != hb.pod:
        return PathMetric(6, True, True)
    if ha.edge != hb.edge:
        return PathMetric(4, True, False)
    return PathMetric(2, False, False)


def proximity_rank(topo: Topology, anchors: Iterable[str], candidates: list[str]) -> list[str]:
    """Candidates ordered by total hops to all anchors, then by (pod, host index)."""
    anchors = list(anchors)

    def key(host_id):
        h = topo.host(host_id)
        return (sum(shortest_path(topo, host_id, a).hop_count for a in anchors), h.pod, h.index)

    return sorted(candidates, key=key)


# --------------------------------------------------------------------------
# flow tables


@dataclass
class FlowTable:
    """Per-service routing preference plus the blacklist of demoted deployments.

    Every deployment of a service sits in exactly one of the active list and
    the blacklist. Blacklist entries keep their demotion time, in insertion
    order, so a random pick over them is reproducible.
    """

    active: dict[str, list[DeploymentRef]] = field(default_factory=dict)
    blacklist: dict[DeploymentRef, float] = field(default_factory=dict)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)

    @classmethod
    def from_registry(cls, registry: Registry) -> FlowTable:
        return cls({name: list(entry.refs()) for name, entry in registry.services.items()})

    def services(self) -> list[str]:
        return list(self.active)

    def active_for(self, service: str) -> list[DeploymentRef]:
        try:
            return list(self.active[service])
        except KeyError:
            raise UnknownServiceError(f"flow table has no service {service!r}") from None

    def is_blacklisted(self, ref: DeploymentRef) -> bool:
        return ref in self.blacklist

    def blacklisted(self) -> list[DeploymentRef]:
        return list(self.blacklist)

    def snapshot(self) -> FlowTable:
        with self._lock:
            return FlowTable({s: list(v) for s, v in self.active.items()}, dict(self.blacklist))


def update_flow_table(ft: FlowTable, service: str, offenders: Iterable[DeploymentRef], now: float = 0.0) -> list[tuple[DeploymentRef, str]]:
    """Demote offenders of ``service``; returns what happened to each.

    An offender is blacklisted unless it is the service's last active
    deployment, in which case it only moves to the back of the active list
    (reported as ``"deprioritized"``). Offenders already blacklisted are
    skipped.
    """
    changes = []
    with ft._lock:
        active = ft.active.get(service)
        if active is None:
            raise UnknownServiceError(f"flow table has no service {service!r}")
        offenders = list(offenders)
        for ref in offenders:
            if ref.service != service:
                raise ValidationError(f"{ref} does not belong to service {service!r}")
            if ref not in active and ref not in ft.blacklist:
                raise ValidationError(f"{ref} is not a deployment of {service!r}")
        for ref in offenders:
            if ref in ft.blacklist:
                continue
            active.remove(ref)
            if active:
                ft.blacklist[ref] = now
                changes.append((ref, "blacklisted"))
            else:
                active.append(ref)
                changes.append((ref, "deprioritized"))
    return changes


def promote(ft: FlowTable, service: str, ref: DeploymentRef) -> FlowTable:
    """Move a blacklisted deployment back to the end of its service's active list."""
    with ft._lock:
        if service not in ft.active:
            raise UnknownServiceError(f"flow table has no service {service!r}")
        if ref not in ft.blacklist or ref.service != service:
            raise NotBlacklistedError(f"{ref} is not blacklisted")
        del ft.blacklist[ref]
        ft.active[service].append(ref)
    return ft
