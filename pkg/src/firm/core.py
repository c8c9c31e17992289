"""The Find / Invoke / Return / Manage control loop and the promoter.

:class:`Firm` owns the control store (registry, flow tables, affinity table)
and drives composition workflows on an :class:`~firm.events.EventLoop`.
Three modes select how much of the machinery is switched on:

``base``
    no affinity, no proximity, no triggers; each service round-robins over
    its deployments.
``affinity``
    clients stick to the deployment that first served them; engine health
    reports re-sort the registry but never touch the flow table.
``firm``
    affinity, proximity-ranked deployment choice, congestion triggers that
    blacklist deployments, and the random promoter that brings them back.
"""

from __future__ import annotations

import logging
import random
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

from . import events as ev
from .composition import (
    CompositionRequest,
    InvocationNode,
    MemoTable,
    ResultToken,
    consolidate,
    link,
    memo_lookup,
    memo_store,
    parse_request,
    ready_set,
    simulated_result,
)
from .engine import FAILED, OK, EngineParams, EngineReport, EngineState, admit, complete, health_report
from .errors import InvariantViolation, UnknownServiceError, ValidationError
from .registry import ACTIVE, BLACKLISTED, DeploymentRef, Registry, health_key, lookup_endpoints, set_status, update_registry
from .topology import FlowTable, Topology, promote, proximity_rank, shortest_path, update_flow_table

log = logging.getLogger(__name__)

BASE, AFFINITY, FIRM = "base", "affinity", "firm"
MODES = (BASE, AFFINITY, FIRM)


# --------------------------------------------------------------------------
# data carried between the procedures


@dataclass(eq=False)
class EndpointBinding:
    node: InvocationNode
    service: str
    properties: dict = field(default_factory=dict)
    params: list = field(default_factory=list)
    chosen_deployment: DeploymentRef | None = None

    @property
    def out(self) -> ResultToken | None:
        return self.node.out


@dataclass
class ServiceProperties:
    service: str
    offenders: list[DeploymentRef]
    reports: list[EngineReport]


@dataclass
class UpdateTrigger:
    sc: str | None
    service_properties: list[ServiceProperties]

    def offenders(self) -> list[DeploymentRef]:
        return [ref for sp in self.service_properties for ref in sp.offenders]


@dataclass
class PromoterState:
    frequency: float
    rng: random.Random
    flag: bool = False
    pending_service_id: DeploymentRef | None = None


def promoter_tick(state: PromoterState, blacklist: list) -> object | None:
    """One wake-up of the promoter, after its sleep.

    The flag is cleared, a fair coin is flipped, and on heads one blacklist
    entry is drawn uniformly at random. Returns the entry to promote, or
    None. An empty blacklist just idles.
    """
    state.flag = False
    state.pending_service_id = None
    state.flag = state.rng.random() < 0.5
    if state.flag and blacklist:
        state.pending_service_id = blacklist[state.rng.randrange(len(blacklist))]
    return state.pending_service_id


@dataclass
class MetricsRecord:
    composition_id: int
    client: int
    mode: str
    arrival: float
    finish: float
    completion_time: float
    node_durations: dict[str, float]
    inter_rack_hops: int
    admissions: int

    def row(self) -> dict:
        return {
            "composition_id": self.composition_id,
            "client": self.client,
            "mode": self.mode,
            "arrival": round(self.arrival, 9),
            "finish": round(self.finish, 9),
            "completion_time": round(self.completion_time, 9),
            "inter_rack_hops": self.inter_rack_hops,
            "admissions": self.admissions,
            "nodes": len(self.node_durations),
        }


@dataclass
class ExecutionResult:
    composition_id: int
    value: ResultToken | None
    record: MetricsRecord | None = None
    failed_node: str | None = None

    @property
    def ok(self) -> bool:
        return self.failed_node is None


@dataclass(eq=False)
class CompositionInstance:
    id: int
    request: CompositionRequest
    client: int
    arrival: float
    bindings: dict[int, EndpointBinding] = field(default_factory=dict)
    memo: MemoTable = field(default_factory=MemoTable)
    # (service, fingerprint) -> nodes waiting on an identical in-flight call
    waiting: dict[tuple[str, str], list[InvocationNode]] = field(default_factory=dict)
    anchors: list[str] = field(default_factory=list)
    admissions: int = 0
    failed_node: str | None = None
    finished: bool = False


@dataclass
class FirmConfig:
    registry: Registry
    topology: Topology
    mode: str = FIRM
    engine_params: Callable[[DeploymentRef], EngineParams] | dict | None = None
    frequency: float = 50.0
    threshold: float | None = None  # None: twice each engine's unloaded service time
    window: float = 100.0
    seed: int = 0
    memoize: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, not {self.mode!r}")
        if self.frequency <= 0 or self.window <= 0:
            raise ValidationError("frequency and window must be positive")
        if self.threshold is not None and self.threshold <= 0:
            raise ValidationError("threshold must be positive")

    def params_for(self, ref: DeploymentRef) -> EngineParams:
        source = self.engine_params
        if source is None:
            return EngineParams()
        if callable(source):
            return source(ref)
        return source.get(ref, EngineParams())


class Firm:
    """Control handle: call :meth:`manage` once, then submit or execute requests."""

    def __init__(self, config: FirmConfig, loop: ev.EventLoop | None = None):
        self.config = config
        self.mode = config.mode
        self.registry = config.registry
        self.topology = config.topology
        self.loop = loop or ev.EventLoop()
        self.flow_table = FlowTable()
        self.affinity: dict[tuple[int, str], DeploymentRef] = {}
        self.engines: dict[DeploymentRef, EngineState] = {}
        self.promoter = PromoterState(config.frequency, random.Random(config.seed * 7919 + 1))
        self._failure_rng = random.Random(config.seed * 7919 + 2)
        self._round_robin: dict[str, int] = {}
        self._pending_trigger: UpdateTrigger | None = None
        self._lock = threading.RLock()
        self._ids = 0
        self.instances: dict[int, CompositionInstance] = {}
        self.results: list[ExecutionResult] = []
        self.records: list[MetricsRecord] = []
        self.arrivals = 0
        self.rejected = 0
        self.aborted = False
        self.started = False
        self._on_finish: list[Callable[[CompositionInstance], None]] = []

    # ---------------------------------------------------------------- manage

    def manage(self) -> Firm:
        """Initialize controller, registry and engines, then start the promoter.

        The trigger loop itself is event driven: :meth:`on_engine_report`
        schedules trigger delivery and :meth:`handle_trigger` is its body.
        """
        if self.started:
            return self
        with self._lock:
            self.flow_table = FlowTable.from_registry(self.registry)
            initial = []
            for ref in list(self.registry.refs()):
                params = self.config.params_for(ref)
                address = self.registry.deployment(ref).address
                host = self.topology.host(params.host).id if params.host else self.topology.host_for_address(address).id
                engine = EngineState(ref, host, params)
                self.engines[ref] = engine
                initial.append(health_report(engine, self.config.window, self._threshold(engine), 0.0))
            update_registry(self.registry, initial)
        self.started = True
        self.loop.record("manage-init", deployments=len(self.engines), mode=self.mode)
        if self.mode == FIRM:
            self.loop.schedule(self.loop.now + self.promoter.frequency, ev.TICK, self._on_tick)
        return self

    def _threshold(self, engine: EngineState) -> float:
        return self.config.threshold if self.config.threshold is not None else 2.0 * engine.unloaded_time

    def abort(self) -> None:
        """Stop accepting requests; in-flight work still completes."""
        if not self.aborted:
            self.aborted = True
            self.loop.record("abort")

    def handle_trigger(self, trigger: UpdateTrigger) -> None:
        """Apply one trigger: demote offenders in the flow table, then re-sort the registry."""
        changed = []
        with self._lock:
            for sp in trigger.service_properties:
                if sp.service not in self.flow_table.active:
                    log.warning("trigger for unknown service %r rejected", sp.service)
                    self.loop.record("trigger-rejected", service=sp.service)
                    continue
                try:
                    changes = update_flow_table(self.flow_table, sp.service, sp.offenders, self.loop.now)
                    update_registry(self.registry, sp.reports)
                except ValidationError as exc:
                    log.warning("trigger rejected: %s", exc)
                    self.loop.record("trigger-rejected", service=sp.service, reason=str(exc))
                    continue
                for ref, what in changes:
                    remaining = len(self.flow_table.active[sp.service])
                    if what == "blacklisted":
                        set_status(self.registry, ref, BLACKLISTED)
                        evicted = [key for key, dep in self.affinity.items() if dep == ref]
                        for key in evicted:
                            del self.affinity[key]
                        self.loop.record(ev.DEMOTION, service=sp.service, deployment=str(ref),
                                         active_remaining=remaining, evicted=len(evicted))
                    else:
                        self.loop.record("deprioritized", service=sp.service, deployment=str(ref),
                                         active_remaining=remaining)
                    if remaining < 1:
                        raise InvariantViolation(f"service {sp.service} has no active deployment")
                    changed.append(str(ref))
        self.loop.record(ev.TRIGGER, sc=trigger.sc, offenders=[str(r) for r in trigger.offenders()],
                         applied=changed)

    def on_engine_report(self, report: EngineReport, sc: str | None = None) -> UpdateTrigger | None:
        """Route an engine health report.

        In firm mode an over-threshold report joins the trigger being
        batched for the current instant (delivered once, after every other
        event at this time); healthy reports, and all reports in affinity
        mode, only re-sort the registry.
        """
        if self.mode == BASE:
            return None
        if self.mode == AFFINITY or not report.over_threshold:
            with self._lock:
                update_registry(self.registry, report)
            return None
        if self.flow_table.is_blacklisted(report.ref):
            return None  # already demoted; it is draining
        if self._pending_trigger is None:
            self._pending_trigger = UpdateTrigger(sc, [])
            self.loop.schedule(self.loop.now, ev.TRIGGER, self._deliver_trigger)
        trigger = self._pending_trigger
        for sp in trigger.service_properties:
            if sp.service == report.ref.service:
                if report.ref in sp.offenders:
                    sp.reports[sp.offenders.index(report.ref)] = report
                else:
                    sp.offenders.append(report.ref)
                    sp.reports.append(report)
                break
        else:
            trigger.service_properties.append(ServiceProperties(report.ref.service, [report.ref], [report]))
        return trigger

    def _deliver_trigger(self, event):
        trigger, self._pending_trigger = self._pending_trigger, None
        if trigger is not None:
            self.handle_trigger(trigger)

    def _on_tick(self, event):
        choice = promoter_tick(self.promoter, self.flow_table.blacklisted())
        self.loop.record(ev.TICK, flag=self.promoter.flag)
        if choice is not None:
            with self._lock:
                promote(self.flow_table, choice.service, choice)
                set_status(self.registry, choice, ACTIVE)
            self.loop.record(ev.PROMOTION, service=choice.service, deployment=str(choice),
                             active_remaining=len(self.flow_table.active[choice.service]))
        if not (self.aborted and self.idle()):
            self.loop.schedule(self.loop.now + self.promoter.frequency, ev.TICK, self._on_tick)

    def idle(self) -> bool:
        return all(inst.finished for inst in self.instances.values()) and all(
            e.in_flight == 0 for e in self.engines.values())

    # ------------------------------------------------------------------ find

    def find(self, sc: CompositionRequest) -> list[EndpointBinding]:
        """One binding per invocation, in dependency order.

        Deployments are not chosen here; :meth:`resolve_deployment` picks
        them against the flow table when each call is actually made.
        """
        link(sc, self.registry)
        bindings = []
        for node in sc.invocations():
            entry = self.registry.service(node.service)
            if not entry.total_deployments():
                raise InvariantViolation(f"service {node.service} has no deployments")
            bindings.append(EndpointBinding(
                node, node.service,
                {"order": node.order, "serialized": node.serialized,
                 "depends_on": [d.node_id for d in node.dependencies()]},
            ))
        return bindings

    def resolve_deployment(self, binding: EndpointBinding, client: int, anchors: Iterable[str] = ()) -> DeploymentRef:
        service = binding.service
        with self._lock:
            if self.mode == BASE:
                pairs = lookup_endpoints(self.registry, service)
                i = self._round_robin.get(service, 0)
                self._round_robin[service] = i + 1
                impl, dep = pairs[i % len(pairs)]
                ref = DeploymentRef(service, impl.impl_name, dep.alias)
            else:
                ref = self.affinity.get((client, service))
                if ref is None or self.flow_table.is_blacklisted(ref):
                    ref = self._fresh_choice(service, anchors)
                    self.affinity[(client, service)] = ref
        binding.chosen_deployment = ref
        return ref

    def _provisional_anchors(self, inst: CompositionInstance, node: InvocationNode) -> list[str]:
        """Where the rest of this composition is likely to run, before anything is placed.

        For each other service in the request: the host the client is already
        bound to, or else the hosts of that service's preferred active
        deployments. Used only in firm mode, only for the first placement.
        """
        if self.mode != FIRM:
            return []
        hosts: list[str] = []
        for service in dict.fromkeys(n.service for n in inst.request.invocations()):
            if service == node.service:
                continue
            bound = self.affinity.get((inst.client, service))
            if bound is not None and not self.flow_table.is_blacklisted(bound):
                hosts.append(self.engines[bound].host)
                continue
            active = self.flow_table.active_for(service)
            for impl in self.registry.service(service).implementations:
                preferred = [r for r in active if r.impl == impl.impl_name]
                if preferred:
                    hosts.extend(self.engines[r].host for r in preferred)
                    break
        return hosts

    def _fresh_choice(self, service: str, anchors: Iterable[str]) -> DeploymentRef:
        if self.mode == AFFINITY:
            impl, dep = lookup_endpoints(self.registry, service)[0]
            return DeploymentRef(service, impl.impl_name, dep.alias)
        active = self.flow_table.active_for(service)
        if not active:
            raise InvariantViolation(f"service {service} has no active deployment")
        for impl in self.registry.service(service).implementations:
            candidates = [r for r in active if r.impl == impl.impl_name]
            if candidates:
                break
        # least loaded first; proximity only separates equally loaded deployments
        load = {r: health_key(self.registry, r)[:3] for r in candidates}
        lightest = min(load.values())
        candidates = [r for r in candidates if load[r] == lightest]
        hosts = list(dict.fromkeys(self.engines[r].host for r in candidates))
        best = proximity_rank(self.topology, list(anchors), hosts)[0]
        return next(r for r in candidates if self.engines[r].host == best)

    # ---------------------------------------------------------------- invoke

    def submit(self, request, client: int = 0, at: float | None = None) -> int:
        """Schedule a composition request to arrive; returns its id."""
        if isinstance(request, str):
            request = parse_request(request)
        self._ids += 1
        cid = self._ids
        self.loop.schedule(self.loop.now if at is None else at, ev.ARRIVAL, self._on_arrival,
                           composition=cid, request=request, client=client)
        return cid

    def _on_arrival(self, event):
        cid, request, client = event.payload["composition"], event.payload["request"], event.payload["client"]
        if self.aborted:
            self.rejected += 1
            self.loop.record("rejected", composition=cid)
            return
        self.arrivals += 1
        self.loop.record(ev.ARRIVAL, composition=cid, client=client)
        inst = CompositionInstance(cid, request, client, self.loop.now)
        self.instances[cid] = inst
        for binding in self.find(request):
            inst.bindings[id(binding.node)] = binding
        self._dispatch(inst)

    def _dispatch(self, inst: CompositionInstance) -> None:
        progressed = True
        while progressed and not inst.finished:
            progressed = False
            for node in ready_set(inst.request):
                node.started = True
                if node.is_composition:
                    self._finish_node(inst, node, simulated_result(node.service, node.fingerprint()))
                    progressed = True
                else:
                    self.invoke(inst.bindings[id(node)], inst)
                    progressed = progressed or node.done
        if inst.request.root.done and not inst.finished:
            self.return_(inst)

    def invoke(self, binding: EndpointBinding, inst: CompositionInstance) -> None:
        """Call one service once all of its dependencies have produced output."""
        node = binding.node
        deps = node.dependencies()
        if any(d.failed for d in deps):
            self._fail(inst, node, "dependency failed")
            return
        if not all(d.done for d in deps):
            raise InvariantViolation(f"{node.node_id} invoked before its dependencies completed")
        binding.params = [i for i in node.inputs if isinstance(i, str)] + [d.out for d in deps]
        fp = node.fingerprint()
        key = (node.service, fp)
        if self.config.memoize:
            hit = memo_lookup(inst.memo, node.service, fp)
            if hit is not None:
                node.start_time = self.loop.now
                self.loop.record("memo-hit", composition=inst.id, node=node.node_id, service=node.service)
                self._finish_node(inst, node, hit)
                return
            if key in inst.waiting:
                inst.waiting[key].append(node)
                node.start_time = self.loop.now
                return
            inst.waiting[key] = []
        ref = self.resolve_deployment(binding, inst.client, inst.anchors or self._provisional_anchors(inst, node))
        engine = self.engines[ref]
        if self.flow_table.is_blacklisted(ref) and self.mode == FIRM:
            raise InvariantViolation(f"admission to blacklisted deployment {ref}")
        _, finish = admit(engine, self.loop.now)
        engine.check()
        inst.admissions += 1
        inst.anchors.append(engine.host)
        node.deployment, node.host, node.start_time = str(ref), engine.host, self.loop.now
        self.loop.record(ev.ADMISSION, composition=inst.id, node=node.node_id, service=node.service,
                         deployment=str(ref), client=inst.client, host=engine.host, in_flight=engine.in_flight)
        self.loop.schedule(finish, ev.COMPLETION, self._on_completion, composition=inst.id, node=node,
                           deployment=ref, fingerprint=fp)
        # engines report health when they finish work, not when they accept it

    def _on_completion(self, event):
        inst = self.instances[event.payload["composition"]]
        node: InvocationNode = event.payload["node"]
        ref: DeploymentRef = event.payload["deployment"]
        engine = self.engines[ref]
        p = engine.params.failure_probability
        outcome = FAILED if p > 0 and self._failure_rng.random() < p else OK
        complete(engine, outcome, self.loop.now, self.loop.now - node.start_time)
        engine.check()
        self.loop.record(ev.COMPLETION, composition=inst.id, node=node.node_id, service=node.service,
                         deployment=str(ref), outcome=outcome)
        self.on_engine_report(
            health_report(engine, self.config.window, self._threshold(engine), self.loop.now), str(inst.id))
        if outcome == FAILED:
            self._fail(inst, node, "engine failure")
            for waiter in inst.waiting.pop((node.service, event.payload["fingerprint"]), []):
                waiter.failed = True
            return
        result = simulated_result(node.service, event.payload["fingerprint"], str(ref), self.loop.now)
        if self.config.memoize:
            memo_store(inst.memo, node.service, event.payload["fingerprint"], result)
        self._finish_node(inst, node, result)
        for waiter in inst.waiting.pop((node.service, event.payload["fingerprint"]), []):
            waiter.deployment, waiter.host = node.deployment, node.host
            self.loop.record("memo-hit", composition=inst.id, node=waiter.node_id, service=waiter.service)
            self._finish_node(inst, waiter, result)
        self._dispatch(inst)

    def _finish_node(self, inst, node, result):
        node.out = result
        node.end_time = self.loop.now
        if node.start_time is None:
            node.start_time = self.loop.now

    def _fail(self, inst: CompositionInstance, node: InvocationNode, reason: str):
        node.failed = True
        if inst.finished:
            return
        inst.failed_node = node.node_id
        inst.finished = True
        self.loop.record("failure", composition=inst.id, node=node.node_id, service=node.service, reason=reason)
        result = ExecutionResult(inst.id, None, None, node.node_id)
        self.results.append(result)
        self._notify(inst)

    # ---------------------------------------------------------------- return

    def return_(self, inst: CompositionInstance) -> ResultToken:
        value = consolidate(inst.request)
        inst.finished = True
        nodes = inst.request.invocations()
        record = MetricsRecord(
            composition_id=inst.id,
            client=inst.client,
            mode=self.mode,
            arrival=inst.arrival,
            finish=self.loop.now,
            completion_time=self.loop.now - inst.arrival,
            node_durations={n.node_id: n.end_time - n.start_time for n in nodes},
            inter_rack_hops=self._inter_rack_hops(inst.request),
            admissions=inst.admissions,
        )
        self.records.append(record)
        self.results.append(ExecutionResult(inst.id, value, record))
        self.loop.record("return", composition=inst.id, completion_time=record.completion_time,
                         inter_rack_hops=record.inter_rack_hops)
        self._notify(inst)
        return value

    def _inter_rack_hops(self, request: CompositionRequest) -> int:
        def where(node):
            if node.is_composition:
                return where(node.members[-1]) if node.members else None
            return node.host

        total = 0
        for node in request.invocations():
            for dep in node.dependencies():
                a, b = where(dep), where(node)
                if a and b:
                    metric = shortest_path(self.topology, a, b)
                    if metric.inter_rack:
                        total += metric.hop_count
        return total

    def _notify(self, inst):
        for callback in self._on_finish:
            callback(inst)
        if self.aborted and self.idle():
            self.loop.record("shutdown")

    def on_finish(self, callback: Callable[[CompositionInstance], None]) -> None:
        self._on_finish.append(callback)

    # --------------------------------------------------------------- execute

    def execute(self, requests: Iterable, client: int = 0, spacing: float = 0.0) -> Iterator[ExecutionResult]:
        """Run requests to completion, yielding each outcome as it finishes.

        Requests are submitted ``spacing`` time units apart. Closing the
        generator early aborts: queued arrivals are rejected, calls already
        running finish.
        """
        self.manage()
        start = self.loop.now
        submitted = 0
        for i, req in enumerate(requests):
            self.submit(req, client=client, at=start + i * spacing)
            submitted += 1
        emitted = len(self.results)
        try:
            while True:
                while emitted < len(self.results):
                    emitted += 1
                    yield self.results[emitted - 1]
                if self.arrivals + self.rejected >= submitted and self.idle():
                    break
                if self.loop.step() is None:
                    break
        finally:
            self.abort()
            self._drain()

    def _drain(self):
        """Run until no workflow work remains, ignoring further promoter ticks."""
        while not self.idle() or any(e.kind == ev.ARRIVAL for e in self.loop._queue):
            if self.loop.step() is None:
                break
