"""Service registry: the nginx-style catalog dialect and the preference lists.

A registry document looks like::

    services {
        service instance_count {
            type simple;
            impl axis2 {
                axa 192.168.0.104;
                axb 192.168.0.105;
            }
            impl cxf {
                type jaxws_ver_2 {
                    update true;
                    cxb 192.168.0.131;
                }
            }
        }
        service weather {
            type composition;
            entry_point 192.168.0.164;
            description {predicts the weather based on statistical models};
            services {
                instance_count { order 1; }
                adder { order 2; serialized false; }
            }
        }
    }

Inside an ``impl`` block, a two-word statement whose value is a dotted-quad
address is a deployment; anything else is a property.
"""

from __future__ import annotations

import csv
import io
import ipaddress
import re
import threading
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterator, NamedTuple

from .errors import (
    ConfigurationError,
    DuplicateServiceError,
    MissingEntryPointError,
    RegistrySyntaxError,
    UnknownCompositionError,
    UnknownDeploymentError,
    UnknownServiceError,
    ValidationError,
)

if TYPE_CHECKING:
    from .engine import EngineReport

IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")

ACTIVE = "active"
DEMOTED = "demoted"
BLACKLISTED = "blacklisted"
STATUS_RANK = {ACTIVE: 0, DEMOTED: 1, BLACKLISTED: 2}


class DeploymentRef(NamedTuple):
    """Registry-wide key of one deployment."""

    service: str
    impl: str
    alias: str

    def __str__(self):
        return f"{self.service}/{self.impl}/{self.alias}"

    @classmethod
    def parse(cls, text: str) -> DeploymentRef:
        parts = text.split("/")
        if len(parts) != 3:
            raise ValidationError(f"deployment reference must be service/impl/alias: {text!r}")
        return cls(*parts)


def parse_address(text: str) -> str:
    """Validate a dotted-quad endpoint, optionally with ``:port``."""
    host, _, port = text.partition(":")
    try:
        ipaddress.IPv4Address(host)
    except ValueError:
        raise ValidationError(f"not a dotted-quad address: {text!r}") from None
    if port and not (port.isdigit() and 0 < int(port) < 65536):
        raise ValidationError(f"bad port in address: {text!r}")
    return text


def is_address(text: str) -> bool:
    try:
        parse_address(text)
    except ValidationError:
        return False
    return True


@dataclass
class Deployment:
    alias: str
    address: str
    status: str = ACTIVE
    variant: str | None = None


@dataclass
class Implementation:
    impl_name: str
    deployments: list[Deployment] = field(default_factory=list)
    extra_properties: dict[str, str] = field(default_factory=dict)
    # variant name -> properties declared inside that variant block
    variants: dict[str, dict[str, str]] = field(default_factory=dict)

    @property
    def variant(self) -> str | None:
        """The variant name when the implementation declares exactly one."""
        return next(iter(self.variants)) if len(self.variants) == 1 else None

    def deployment(self, alias: str) -> Deployment:
        for dep in self.deployments:
            if dep.alias == alias:
                return dep
        raise UnknownDeploymentError(f"no deployment {alias!r} in implementation {self.impl_name!r}")


@dataclass
class ServiceEntry:
    name: str
    implementations: list[Implementation] = field(default_factory=list)
    kind: str = "simple"
    description: str = ""
    properties: dict[str, str] = field(default_factory=dict)

    def refs(self) -> Iterator[DeploymentRef]:
        for impl in self.implementations:
            for dep in impl.deployments:
                yield DeploymentRef(self.name, impl.impl_name, dep.alias)

    def total_deployments(self) -> int:
        return sum(len(impl.deployments) for impl in self.implementations)

    def implementation(self, name: str) -> Implementation:
        for impl in self.implementations:
            if impl.impl_name == name:
                return impl
        raise UnknownDeploymentError(f"service {self.name!r} has no implementation {name!r}")


@dataclass
class Member:
    service: str
    order: int
    serialized: bool = True
    properties: dict[str, str] = field(default_factory=dict)


@dataclass
class CompositionDef:
    name: str
    entry_point: str
    members: list[Member] = field(default_factory=list)
    description: str = ""
    properties: dict[str, str] = field(default_factory=dict)


@dataclass
class Registry:
    services: dict[str, ServiceEntry] = field(default_factory=dict)
    compositions: dict[str, CompositionDef] = field(default_factory=dict)
    # last report per deployment; runtime state, not part of equality
    health: dict[DeploymentRef, EngineReport] = field(default_factory=dict, compare=False, repr=False)
    _lock: threading.RLock = field(default_factory=threading.RLock, compare=False, repr=False)

    def __len__(self):
        return len(self.services) + len(self.compositions)

    def __deepcopy__(self, memo):
        from copy import deepcopy

        return Registry(
            deepcopy(self.services, memo),
            deepcopy(self.compositions, memo),
            dict(self.health),
        )

    def service(self, name: str) -> ServiceEntry:
        try:
            return self.services[name]
        except KeyError:
            raise UnknownServiceError(f"unknown service {name!r}") from None

    def composition(self, name: str) -> CompositionDef:
        try:
            return self.compositions[name]
        except KeyError:
            raise UnknownCompositionError(f"unknown composition {name!r}") from None

    def deployment(self, ref: DeploymentRef) -> Deployment:
        if ref.service not in self.services:
            raise UnknownDeploymentError(f"unknown deployment {ref}")
        return self.services[ref.service].implementation(ref.impl).deployment(ref.alias)

    def refs(self) -> Iterator[DeploymentRef]:
        for entry in self.services.values():
            yield from entry.refs()

    def unresolved_members(self) -> list[tuple[str, str]]:
        """(composition, member) pairs whose member names nothing in the registry."""
        return [
            (comp.name, m.service)
            for comp in self.compositions.values()
            for m in comp.members
            if m.service not in self.services and m.service not in self.compositions
        ]


# --------------------------------------------------------------------------
# lexer / generic block parser


class _Token(NamedTuple):
    kind: str  # word, string, raw, "{", "}", ";", eof
    value: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    i, line, col = 0, 1, 1
    n = len(text)

    def advance(count):
        nonlocal i, line, col
        for ch in text[i:i + count]:
            if ch == "\n":
                line, col = line + 1, 1
            else:
                col += 1
        i += count

    while i < n:
        ch = text[i]
        if ch.isspace():
            advance(1)
        elif ch == "#":
            end = text.find("\n", i)
            advance((n if end < 0 else end) - i)
        elif ch in "{};":
            # description {free text}; -- capture the braces verbatim
            if ch == "{" and tokens and tokens[-1].kind == "word" and tokens[-1].value == "description" \
                    and (len(tokens) < 2 or tokens[-2].kind in "{};"):
                start_line, start_col = line, col
                depth, j = 0, i
                while j < n:
                    if text[j] == "{":
                        depth += 1
                    elif text[j] == "}":
                        depth -= 1
                        if depth == 0:
                            break
                    j += 1
                if j >= n:
                    raise RegistrySyntaxError("unterminated description block", start_line, start_col)
                tokens.append(_Token("raw", " ".join(text[i + 1:j].split()), start_line, start_col))
                advance(j + 1 - i)
            else:
                tokens.append(_Token(ch, ch, line, col))
                advance(1)
        elif ch == '"':
            start_line, start_col = line, col
            j = i + 1
            buf = []
            while j < n and text[j] != '"':
                if text[j] == "\\" and j + 1 < n:
                    j += 1
                buf.append(text[j])
                j += 1
            if j >= n:
                raise RegistrySyntaxError("unterminated string", start_line, start_col)
            tokens.append(_Token("string", "".join(buf), start_line, start_col))
            advance(j + 1 - i)
        else:
            m = re.compile(r'[^\s{};"#]+').match(text, i)
            tokens.append(_Token("word", m.group(), line, col))
            advance(m.end() - i)
    tokens.append(_Token("eof", "", line, col))
    return tokens


@dataclass
class _Directive:
    name: str
    args: list[str]
    block: list[_Directive] | None
    line: int
    col: int


class _BlockParser:
    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def take(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def error(self, message, tok=None):
        tok = tok or self.peek()
        return RegistrySyntaxError(message, tok.line, tok.col)

    def parse(self) -> list[_Directive]:
        out = self.statements()
        if self.peek().kind != "eof":
            raise self.error(f"unexpected {self.peek().value!r}")
        return out

    def statements(self) -> list[_Directive]:
        out = []
        while self.peek().kind not in ("}", "eof"):
            out.append(self.statement())
        return out

    def statement(self) -> _Directive:
        head = self.take()
        if head.kind != "word":
            raise self.error(f"expected a name, found {head.value!r}", head)
        args = []
        while self.peek().kind in ("word", "string", "raw"):
            args.append(self.take().value)
        tok = self.take()
        if tok.kind == ";":
            return _Directive(head.value, args, None, head.line, head.col)
        if tok.kind == "{":
            body = self.statements()
            close = self.take()
            if close.kind != "}":
                raise self.error("missing '}'", close)
            if self.peek().kind == ";":
                self.take()
            return _Directive(head.value, args, body, head.line, head.col)
        if tok.kind == "eof":
            raise self.error("unexpected end of input, expected ';' or '{'", tok)
        raise self.error(f"expected ';' or '{{', found {tok.value!r}", tok)


# --------------------------------------------------------------------------
# semantic layer


def _ident(d: _Directive, value: str, what: str) -> str:
    if not IDENT_RE.match(value):
        raise RegistrySyntaxError(f"invalid {what} {value!r}", d.line, d.col)
    return value


def _single_arg(d: _Directive) -> str:
    if len(d.args) != 1:
        raise RegistrySyntaxError(f"'{d.name}' takes exactly one value", d.line, d.col)
    return d.args[0]


def _bool(d: _Directive) -> bool:
    value = _single_arg(d).lower()
    if value not in ("true", "false"):
        raise RegistrySyntaxError(f"'{d.name}' must be true or false", d.line, d.col)
    return value == "true"


def _impl_body(impl: Implementation, body: list[_Directive], variant: str | None):
    props = impl.variants.setdefault(variant, {}) if variant else impl.extra_properties
    for d in body:
        if d.block is not None:
            if d.name != "type" or variant is not None:
                raise RegistrySyntaxError(f"unexpected block '{d.name}' in impl {impl.impl_name}", d.line, d.col)
            _impl_body(impl, d.block, _ident(d, _single_arg(d), "variant name"))
        elif len(d.args) == 1 and is_address(d.args[0]):
            alias = _ident(d, d.name, "deployment alias")
            if any(dep.alias == alias for dep in impl.deployments):
                raise RegistrySyntaxError(f"duplicate deployment alias {alias!r}", d.line, d.col)
            impl.deployments.append(Deployment(alias, d.args[0], variant=variant))
        else:
            props[d.name] = " ".join(d.args)


def _service(d: _Directive) -> ServiceEntry | CompositionDef:
    name = _ident(d, _single_arg(d), "service name")
    body = d.block
    declared = next((_single_arg(x) for x in body if x.name == "type" and x.block is None), None)
    has_members = any(x.name == "services" and x.block is not None for x in body)
    kind = declared or ("composition" if has_members else "simple")
    description = ""
    props: dict[str, str] = {}

    if kind == "composition":
        entry_point = None
        members: list[Member] = []
        for x in body:
            if x.name == "type" and x.block is None:
                continue
            if x.name == "entry_point":
                entry_point = parse_address(_single_arg(x))
            elif x.name == "description":
                description = " ".join(x.args)
            elif x.name == "services" and x.block is not None:
                for m in x.block:
                    if m.block is None or m.args:
                        raise RegistrySyntaxError("composition member must be 'name { ... }'", m.line, m.col)
                    member = Member(_ident(m, m.name, "member name"), order=0)
                    for p in m.block:
                        if p.name == "order":
                            raw = _single_arg(p)
                            if not raw.isdigit() or int(raw) < 1:
                                raise RegistrySyntaxError("order must be a positive integer", p.line, p.col)
                            member.order = int(raw)
                        elif p.name == "serialized":
                            member.serialized = _bool(p)
                        else:
                            member.properties[p.name] = " ".join(p.args)
                    if member.order == 0:
                        raise RegistrySyntaxError(f"member {member.service!r} lacks an order", m.line, m.col)
                    members.append(member)
            elif x.block is None:
                props[x.name] = " ".join(x.args)
            else:
                raise RegistrySyntaxError(f"unexpected block '{x.name}' in composition", x.line, x.col)
        if entry_point is None:
            raise MissingEntryPointError(f"composition {name!r} has no entry_point (line {d.line})")
        if not members:
            raise ConfigurationError(f"composition {name!r} has no member services")
        return CompositionDef(name, entry_point, members, description, props)

    if kind != "simple":
        raise RegistrySyntaxError(f"unknown service type {kind!r}", d.line, d.col)
    entry = ServiceEntry(name, kind=kind)
    for x in body:
        if x.name == "type" and x.block is None:
            continue
        if x.name == "impl" and x.block is not None:
            impl = Implementation(_ident(x, _single_arg(x), "implementation name"))
            if any(i.impl_name == impl.impl_name for i in entry.implementations):
                raise RegistrySyntaxError(f"duplicate implementation {impl.impl_name!r}", x.line, x.col)
            _impl_body(impl, x.block, None)
            if not impl.deployments:
                raise ConfigurationError(f"implementation {name}/{impl.impl_name} has no deployments")
            entry.implementations.append(impl)
        elif x.name == "description":
            entry.description = " ".join(x.args)
        elif x.block is None:
            entry.properties[x.name] = " ".join(x.args)
        else:
            raise RegistrySyntaxError(f"unexpected block '{x.name}' in service {name}", x.line, x.col)
    if not entry.implementations:
        raise ConfigurationError(f"simple service {name!r} has no implementations")
    return entry


def _check_composition_cycles(registry: Registry):
    state: dict[str, int] = {}

    def visit(name, path):
        if state.get(name) == 2:
            return
        if state.get(name) == 1:
            raise ConfigurationError("composition cycle: " + " -> ".join(path + [name]))
        state[name] = 1
        for m in registry.compositions[name].members:
            if m.service in registry.compositions:
                visit(m.service, path + [name])
        state[name] = 2

    for name in registry.compositions:
        visit(name, [])


def parse_registry(text: str, strict: bool = True) -> Registry:
    """Parse a registry document.

    With ``strict`` (the default), a composition member that names neither a
    service nor a composition is an error. ``strict=False`` accepts such
    documents, e.g. a catalog fragment whose member services live elsewhere;
    :meth:`Registry.unresolved_members` lists what is missing.
    """
    top = _BlockParser(text).parse()
    registry = Registry()
    for d in top:
        if d.name != "services" or d.block is None or d.args:
            raise RegistrySyntaxError("expected top-level 'services { ... }'", d.line, d.col)
        for s in d.block:
            if s.name != "service" or s.block is None:
                raise RegistrySyntaxError(f"expected 'service <name> {{ ... }}', found '{s.name}'", s.line, s.col)
            item = _service(s)
            if item.name in registry.services or item.name in registry.compositions:
                raise DuplicateServiceError(f"duplicate service name {item.name!r} (line {s.line})")
            if isinstance(item, CompositionDef):
                registry.compositions[item.name] = item
            else:
                registry.services[item.name] = item
    if strict:
        missing = registry.unresolved_members()
        if missing:
            comp, member = missing[0]
            raise UnknownServiceError(f"composition {comp!r} references unknown service {member!r}")
    _check_composition_cycles(registry)
    return registry


def load_registry(path, strict: bool = True) -> Registry:
    with open(path, encoding="utf-8") as fh:
        return parse_registry(fh.read(), strict=strict)


def _fmt(value: str) -> str:
    if value and re.fullmatch(r'[^\s{};"#]+', value):
        return value
    return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'


def serialize_registry(registry: Registry) -> str:
    """Canonical text form; reparses to an equal registry."""
    out = ["services {"]

    def emit(depth, line):
        out.append("    " * depth + line)

    for entry in registry.services.values():
        emit(1, f"service {entry.name} {{")
        emit(2, "type simple;")
        if entry.description:
            emit(2, f"description {{{entry.description}}};")
        for key, value in entry.properties.items():
            emit(2, f"{key} {_fmt(value)};")
        for impl in entry.implementations:
            emit(2, f"impl {impl.impl_name} {{")
            for key, value in impl.extra_properties.items():
                emit(3, f"{key} {_fmt(value)};")
            # consecutive deployments sharing a variant go in one block
            emitted_props: set[str] = set()
            run: list[Deployment] = []

            def flush():
                if not run:
                    return
                variant = run[0].variant
                if variant is None:
                    for dep in run:
                        emit(3, f"{dep.alias} {dep.address};")
                else:
                    emit(3, f"type {variant} {{")
                    if variant not in emitted_props:
                        for key, value in impl.variants.get(variant, {}).items():
                            emit(4, f"{key} {_fmt(value)};")
                        emitted_props.add(variant)
                    for dep in run:
                        emit(4, f"{dep.alias} {dep.address};")
                    emit(3, "}")
                run.clear()

            for dep in impl.deployments:
                if run and run[0].variant != dep.variant:
                    flush()
                run.append(dep)
            flush()
            for variant, props in impl.variants.items():
                if variant not in emitted_props:
                    emit(3, f"type {variant} {{")
                    for key, value in props.items():
                        emit(4, f"{key} {_fmt(value)};")
                    emit(3, "}")
            emit(2, "}")
        emit(1, "}")
    for comp in registry.compositions.values():
        emit(1, f"service {comp.name} {{")
        emit(2, "type composition;")
        emit(2, f"entry_point {comp.entry_point};")
        if comp.description:
            emit(2, f"description {{{comp.description}}};")
        for key, value in comp.properties.items():
            emit(2, f"{key} {_fmt(value)};")
        emit(2, "services {")
        for m in comp.members:
            emit(3, f"{m.service} {{")
            emit(4, f"order {m.order};")
            emit(4, f"serialized {'true' if m.serialized else 'false'};")
            for key, value in m.properties.items():
                emit(4, f"{key} {_fmt(value)};")
            emit(3, "}")
        emit(2, "}")
        emit(1, "}")
    out.append("}")
    return "\n".join(out) + "\n"


def catalog_records(registry: Registry) -> list[dict]:
    """One record per deployment, preference index counted per service."""
    rows = []
    for entry in registry.services.values():
        for index, ref in enumerate(entry.refs()):
            dep = registry.deployment(ref)
            rows.append({
                "service": ref.service,
                "impl": ref.impl,
                "alias": ref.alias,
                "address": dep.address,
                "status": dep.status,
                "preference": index,
            })
    return rows


def catalog_csv(registry: Registry) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, ["service", "impl", "alias", "address", "status", "preference"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(catalog_records(registry))
    return buf.getvalue()


# --------------------------------------------------------------------------
# operations


def lookup_endpoints(registry: Registry, service: str) -> list[tuple[Implementation, Deployment]]:
    """Non-blacklisted (implementation, deployment) pairs in preference order."""
    with registry._lock:
        entry = registry.service(service)
        return [
            (impl, dep)
            for impl in entry.implementations
            for dep in impl.deployments
            if dep.status != BLACKLISTED
        ]


def alternative_path_bound(registry: Registry, composition: str) -> int:
    """Lower bound on distinct end-to-end execution paths of a composition.

    Each member service offers one alternative per deployment across all its
    implementations, so the scarcest member limits the composition. Nested
    compositions contribute their own bound.
    """
    comp = registry.composition(composition)

    def total(name, seen):
        if name in registry.compositions:
            if name in seen:
                raise ConfigurationError(f"composition cycle through {name!r}")
            return min(total(m.service, seen | {name}) for m in registry.compositions[name].members)
        count = registry.service(name).total_deployments()
        if count == 0:
            raise ConfigurationError(f"service {name!r} has no deployments")
        return count

    return min(total(m.service, {comp.name}) for m in comp.members)


def health_key(registry: Registry, ref: DeploymentRef) -> tuple:
    """(status rank, over threshold, in-flight, mean recent service time); smaller is healthier."""
    return _health_key(registry, ref, registry.deployment(ref))


def _health_key(registry: Registry, ref: DeploymentRef, dep: Deployment) -> tuple:
    report = registry.health.get(ref)
    if report is None:
        return (STATUS_RANK[dep.status], False, 0, 0.0)
    return (STATUS_RANK[dep.status], report.over_threshold, report.in_flight, report.mean_service_time)


def update_registry(registry: Registry, reports) -> Registry:
    """Record health reports and re-sort each reporting implementation's list.

    ``reports`` is one EngineReport or an iterable of them. The sort key is
    :func:`health_key`; the sort is stable, so deployments with equal health
    keep their relative order. An
    over-threshold report demotes an active deployment; a healthy report
    restores a demoted one. Blacklisting is left to the flow table.
    """
    if reports is None:
        return registry
    if hasattr(reports, "over_threshold"):
        reports = [reports]
    reports = list(reports)
    with registry._lock:
        for report in reports:  # validate everything before mutating anything
            registry.deployment(report.ref)
        touched: dict[tuple[str, str], None] = {}
        for report in reports:
            ref = report.ref
            dep = registry.deployment(ref)
            registry.health[ref] = report
            if report.over_threshold and dep.status == ACTIVE:
                dep.status = DEMOTED
            elif not report.over_threshold and dep.status == DEMOTED:
                dep.status = ACTIVE
            touched[(ref.service, ref.impl)] = None
        for service, impl_name in touched:
            impl = registry.services[service].implementation(impl_name)
            impl.deployments.sort(
                key=lambda d: _health_key(registry, DeploymentRef(service, impl_name, d.alias), d)
            )
    return registry


def set_status(registry: Registry, ref: DeploymentRef, status: str) -> None:
    if status not in STATUS_RANK:
        raise ValidationError(f"unknown status {status!r}")
    with registry._lock:
        registry.deployment(ref).status = status
