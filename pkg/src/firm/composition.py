"""Composition requests: tuple syntax, dependency DAG, memoized results.

A request is written ``<Service3,(<Service1, Input1>,<Service2, Input2>)>``:
each ``<name, inputs>`` tuple is one invocation whose inputs are literals or
nested invocations. Nesting is a data dependency. A node naming a registry
composition expands into its member services, which additionally get the
control dependencies implied by their ``order``/``serialized`` settings.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Union

from .errors import (
    ConfigurationError,
    IncompleteCompositionError,
    RequestSyntaxError,
    UnknownServiceError,
)
from .registry import IDENT_RE, Registry


@dataclass(frozen=True)
class ResultToken:
    """Opaque simulated result; equality looks only at ``value``."""

    value: str
    service: str
    fingerprint: str
    deployment: str | None = field(default=None, compare=False)
    time: float | None = field(default=None, compare=False)


def _digest(*parts) -> str:
    return hashlib.sha256(repr(parts).encode()).hexdigest()[:16]


def simulated_result(service: str, fingerprint: str, deployment=None, time=None) -> ResultToken:
    """Pure result function: the value depends on service and inputs only."""
    return ResultToken(_digest("result", service, fingerprint), service, fingerprint, deployment, time)


Item = Union[str, "InvocationNode"]


@dataclass(eq=False)
class InvocationNode:
    service: str
    inputs: list[Item]
    node_id: str
    out: ResultToken | None = None
    # composition-member metadata; defaults describe a free-standing invocation
    order: int = 1
    serialized: bool = True
    control_deps: list[InvocationNode] = field(default_factory=list)
    members: list[InvocationNode] = field(default_factory=list)
    group: InvocationNode | None = None
    is_composition: bool = False
    started: bool = False
    failed: bool = False
    deployment: str | None = None
    host: str | None = None
    start_time: float | None = None
    end_time: float | None = None

    def __repr__(self):
        return f"InvocationNode({self.node_id}:{self.service})"

    def children(self) -> list[InvocationNode]:
        return [i for i in self.inputs if isinstance(i, InvocationNode)]

    def dependencies(self) -> list[InvocationNode]:
        """Everything whose output this node waits for, data dependencies first."""
        deps = self.children() + [d for d in self.control_deps if d not in self.children()]
        if self.is_composition:
            deps += self.members
        return deps

    @property
    def done(self) -> bool:
        return self.out is not None

    def fingerprint(self) -> str:
        """Structural hash of literal inputs and dependency result values."""
        parts = []
        for item in self.inputs:
            if isinstance(item, InvocationNode):
                parts.append(("out", item.out.value if item.out else None))
            else:
                parts.append(("lit", item))
        for dep in self.control_deps:
            if dep not in self.children():
                parts.append(("after", dep.out.value if dep.out else None))
        for m in self.members:
            parts.append(("member", m.out.value if m.out else None))
        return _digest(*parts)


@dataclass(eq=False)
class CompositionRequest:
    root: InvocationNode
    text: str = ""
    linked: bool = False
    _acyclic: bool | None = field(default=None, repr=False)

    def nodes(self) -> list[InvocationNode]:
        """All nodes, each once, dependencies before dependents."""
        seen: set[int] = set()
        order: list[InvocationNode] = []

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for dep in node.dependencies():
                visit(dep)
            order.append(node)

        visit(self.root)
        return order

    def invocations(self) -> list[InvocationNode]:
        return [n for n in self.nodes() if not n.is_composition]

    def check_acyclic(self):
        if self._acyclic:
            return
        color: dict[int, int] = {}

        def visit(node, path):
            c = color.get(id(node))
            if c == 2:
                return
            if c == 1:
                raise ConfigurationError("dependency cycle: " + " -> ".join(n.node_id for n in path + [node]))
            color[id(node)] = 1
            for dep in node.dependencies():
                visit(dep, path + [node])
            color[id(node)] = 2

        visit(self.root, [])
        self._acyclic = True

    def reset(self):
        for n in self.nodes():
            n.out = None
            n.started = n.failed = False
            n.deployment = n.host = None
            n.start_time = n.end_time = None

    def trace(self) -> list[dict]:
        """Per-invocation provenance: node, service, deployment, start, end."""
        return [
            {"node": n.node_id, "service": n.service, "deployment": n.deployment,
             "start": n.start_time, "end": n.end_time}
            for n in self.invocations()
        ]


# --------------------------------------------------------------------------
# parsing


class _RequestParser:
    def __init__(self, text):
        self.text = text
        self.pos = 0
        self.count = 0

    def skip(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self):
        self.skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch):
        if self.peek() != ch:
            found = self.peek() or "end of input"
            raise RequestSyntaxError(f"expected {ch!r}, found {found!r}", self.pos)
        self.pos += 1

    def parse(self) -> InvocationNode:
        node = self.request()
        if self.peek():
            raise RequestSyntaxError(f"trailing text {self.text[self.pos:]!r}", self.pos)
        return node

    def request(self) -> InvocationNode:
        self.expect("<")
        node = InvocationNode("", [], f"n{self.count}")
        self.count += 1
        start = self.pos
        name = self.literal()
        if not name:
            raise RequestSyntaxError("empty service name", start)
        if not IDENT_RE.match(name):
            raise RequestSyntaxError(f"invalid service name {name!r}", start)
        node.service = name
        self.expect(",")
        if self.peek() == "(":
            self.pos += 1
            node.inputs.append(self.item())
            while self.peek() == ",":
                self.pos += 1
                node.inputs.append(self.item())
            self.expect(")")
        else:
            node.inputs.append(self.item(nested=False))
        self.expect(">")
        return node

    def item(self, nested=True) -> Item:
        if nested and self.peek() == "<":
            return self.request()
        start = self.pos
        lit = self.literal()
        if not lit:
            raise RequestSyntaxError("empty input", start)
        return lit

    def literal(self) -> str:
        self.skip()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in "<>(),":
            self.pos += 1
        return self.text[start:self.pos].strip()


def parse_request(text: str) -> CompositionRequest:
    return CompositionRequest(_RequestParser(text).parse(), text)


def format_request(node: InvocationNode) -> str:
    def item(i):
        return format_request(i) if isinstance(i, InvocationNode) else i

    if len(node.inputs) == 1 and not isinstance(node.inputs[0], InvocationNode):
        return f"<{node.service}, {node.inputs[0]}>"
    return f"<{node.service},({', '.join(item(i) for i in node.inputs)})>"


def link(request: CompositionRequest, registry: Registry) -> CompositionRequest:
    """Resolve names against the registry and expand composition nodes.

    A composition node gets one member node per member service; every member
    receives the composition node's inputs, and a serialized member also
    waits for all members of strictly lower order.
    """
    if request.linked:
        return request

    def expand(node: InvocationNode, stack: tuple[str, ...]):
        for child in node.children():
            expand(child, stack)
        if node.service in registry.compositions:
            if node.service in stack:
                raise ConfigurationError(f"composition {node.service!r} contains itself")
            comp = registry.compositions[node.service]
            node.is_composition = True
            members = []
            for m in sorted(comp.members, key=lambda m: m.order):
                member = InvocationNode(m.service, list(node.inputs), f"{node.node_id}.{m.service}",
                                        order=m.order, serialized=m.serialized, group=node)
                expand(member, stack + (node.service,))
                members.append(member)
            for member in members:
                if member.serialized:
                    member.control_deps = [p for p in members if p.order < member.order]
            node.members = members
        elif node.service not in registry.services:
            raise UnknownServiceError(f"unknown service {node.service!r} in request")

    expand(request.root, ())
    request.linked = True
    request.check_acyclic()
    return request


# --------------------------------------------------------------------------
# scheduling helpers


def ready_set(request: CompositionRequest) -> list[InvocationNode]:
    """Unstarted nodes whose every dependency has produced output, in dependency order."""
    request.check_acyclic()
    return [
        n for n in request.nodes()
        if not n.started and not n.done and all(d.done for d in n.dependencies())
    ]


class MemoTable(dict):
    """(service, input fingerprint) -> ResultToken, scoped to one execution."""


def memo_lookup(table: MemoTable, service: str, fingerprint: str) -> ResultToken | None:
    return table.get((service, fingerprint))


def memo_store(table: MemoTable, service: str, fingerprint: str, result: ResultToken) -> None:
    table[(service, fingerprint)] = result


def consolidate(request: CompositionRequest) -> ResultToken:
    """The root's result, once every node has one."""
    missing = [n.node_id for n in request.nodes() if not n.done]
    if missing:
        raise IncompleteCompositionError(f"nodes without output: {', '.join(missing)}")
    return request.root.out


def walk(node: InvocationNode) -> Iterator[InvocationNode]:
    """Pre-order over the tuple structure (not the expanded members)."""
    yield node
    for child in node.children():
        yield from walk(child)
