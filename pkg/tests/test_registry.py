import copy
import string

import pytest
from hypothesis import given, settings, strategies as st

from firm.engine import EngineReport
from firm.errors import (
    ConfigurationError,
    DuplicateServiceError,
    MissingEntryPointError,
    RegistrySyntaxError,
    UnknownCompositionError,
    UnknownDeploymentError,
    UnknownServiceError,
)
from firm.registry import (
    BLACKLISTED,
    DEMOTED,
    DeploymentRef,
    alternative_path_bound,
    catalog_csv,
    catalog_records,
    lookup_endpoints,
    parse_registry,
    serialize_registry,
    set_status,
    update_registry,
)

from conftest import numbered, simple_service


def test_catalog_structure(catalog_registry):
    assert len(catalog_registry) == 2
    ic = catalog_registry.services["instance_count"]
    assert [i.impl_name for i in ic.implementations] == ["axis2", "cxf", "mapreduce"]
    # hand count of the expanded catalog: axa..axz, cxa..cxc, mra..mry
    assert [len(i.deployments) for i in ic.implementations] == [26, 3, 25]
    weather = catalog_registry.compositions["weather"]
    assert weather.entry_point == "192.168.0.164"
    assert weather.description == "predicts the weather based on statistical models"
    assert [(m.service, m.order, m.serialized) for m in weather.members] == [
        ("instance_count", 1, True), ("adder", 2, False), ("mean", 3, True)]


def test_catalog_addresses_and_variants(catalog_registry):
    ic = catalog_registry.services["instance_count"]
    axis2, cxf, mapreduce = ic.implementations
    assert (axis2.deployments[0].alias, axis2.deployments[0].address) == ("axa", "192.168.0.104")
    assert (axis2.deployments[-1].alias, axis2.deployments[-1].address) == ("axz", "192.168.0.129")
    assert (mapreduce.deployments[-1].alias, mapreduce.deployments[-1].address) == ("mry", "192.168.0.157")
    assert [d.variant for d in cxf.deployments] == ["jaxws_preliminary_ver", "jaxws_ver_2", "jaxrs"]
    assert cxf.variants["jaxws_ver_2"] == {"update": "true"}
    assert axis2.variant is None


def test_catalog_strict_reports_missing_members(catalog_text):
    with pytest.raises(UnknownServiceError, match="adder"):
        parse_registry(catalog_text)
    assert parse_registry(catalog_text, strict=False).unresolved_members() == [("weather", "adder"), ("weather", "mean")]


def test_empty_document():
    r = parse_registry("services { }")
    assert len(r.services) == 0 and len(r.compositions) == 0


def test_ellipsis_is_not_grammar():
    with pytest.raises(RegistrySyntaxError):
        parse_registry("services { service s { impl a { x 10.0.0.1; ... } } }")


@pytest.mark.parametrize("text, line, col", [
    ("services {\n  service s {\n    impl a { x 10.0.0.1 }\n  }\n}", 3, 25),
    ("services {\n  service s {\n", 3, 1),
    ("services { service s { impl a { x 10.0.0.1; } } } }", 1, 51),
])
def test_syntax_errors_carry_position(text, line, col):
    with pytest.raises(RegistrySyntaxError) as info:
        parse_registry(text)
    assert (info.value.line, info.value.column) == (line, col)


def test_duplicate_service_name():
    text = "services {" + simple_service("s", [("a", [("x", "10.0.0.1")])]) * 2 + "}"
    with pytest.raises(DuplicateServiceError):
        parse_registry(text)


def test_composition_errors():
    member = "services { s { order 1; } }"
    s = simple_service("s", [("a", [("x", "10.0.0.1")])])
    with pytest.raises(MissingEntryPointError):
        parse_registry("services {" + s + "service c { type composition; " + member + " } }")
    with pytest.raises(UnknownServiceError):
        parse_registry("services { service c { type composition; entry_point 10.0.0.9; "
                       "services { nope { order 1; } } } }")
    with pytest.raises(RegistrySyntaxError):
        parse_registry("services {" + s + "service c { entry_point 10.0.0.9; services { s { order 0; } } } }")


def test_composition_cycle_rejected():
    s = simple_service("s", [("a", [("x", "10.0.0.1")])])
    text = ("services {" + s +
            "service c1 { entry_point 10.0.0.9; services { c2 { order 1; } } }"
            "service c2 { entry_point 10.0.0.9; services { c1 { order 1; } s { order 2; } } } }")
    with pytest.raises(ConfigurationError, match="cycle"):
        parse_registry(text)


def test_nested_composition_and_quoted_text():
    s = simple_service("s", [("a", [("x", "10.0.0.1")])])
    text = ("services {" + s +
            'service inner { entry_point 10.0.0.9; description "a {braced} note"; services { s { order 1; } } }'
            "service outer { entry_point 10.0.0.10; services { inner { order 1; } s { order 2; } } } }")
    r = parse_registry(text)
    assert r.compositions["inner"].description == "a {braced} note"
    assert alternative_path_bound(r, "outer") == 1
    assert parse_registry(serialize_registry(r)) == r


def test_unknown_keys_preserved(catalog_registry):
    text = ("services { service s { type simple; owner ops; impl a { tier gold; "
            "type v1 { region eu; x 10.0.0.1; } } } }")
    r = parse_registry(text)
    entry = r.services["s"]
    assert entry.properties == {"owner": "ops"}
    assert entry.implementations[0].extra_properties == {"tier": "gold"}
    assert entry.implementations[0].variants == {"v1": {"region": "eu"}}
    assert parse_registry(serialize_registry(r)) == r


def test_round_trip_catalog(catalog_registry):
    again = parse_registry(serialize_registry(catalog_registry), strict=False)
    assert again == catalog_registry
    assert serialize_registry(again) == serialize_registry(catalog_registry)


def test_catalog_dump(catalog_registry):
    rows = catalog_records(catalog_registry)
    assert len(rows) == 54
    assert rows[0] == {"service": "instance_count", "impl": "axis2", "alias": "axa",
                       "address": "192.168.0.104", "status": "active", "preference": 0}
    assert rows[-1]["preference"] == 53
    text = catalog_csv(catalog_registry)
    assert text.splitlines()[0] == "service,impl,alias,address,status,preference"
    assert len(text.splitlines()) == 55


# --- lookup_endpoints

def test_lookup_all_active(catalog_registry):
    pairs = lookup_endpoints(catalog_registry, "instance_count")
    assert len(pairs) == 26 + 3 + 25
    assert all(impl.impl_name == "axis2" for impl, _ in pairs[:26])


def test_lookup_excludes_blacklisted(catalog_registry):
    for ref in list(catalog_registry.refs()):
        if ref.impl == "mapreduce":
            set_status(catalog_registry, ref, BLACKLISTED)
    pairs = lookup_endpoints(catalog_registry, "instance_count")
    assert len(pairs) == 54 - 25
    assert all(dep.status != BLACKLISTED for _, dep in pairs)


def test_lookup_unknown(catalog_registry):
    with pytest.raises(UnknownServiceError):
        lookup_endpoints(catalog_registry, "frobnicate")


# --- alternative_path_bound

def _bound_registry(totals):
    parts, members = [], []
    for i, total in enumerate(totals):
        parts.append(simple_service(f"s{i}", [("impl", numbered("d", total, subnet=i))]))
        members.append(f"s{i} {{ order {i + 1}; }}")
    return parse_registry("services {" + "".join(parts) +
                          "service c { entry_point 10.0.0.200; services {" + "".join(members) + "} } }")


def test_bound_minimum_of_totals():
    assert alternative_path_bound(_bound_registry([54, 4, 2]), "c") == 2


def test_bound_single_deployment():
    assert alternative_path_bound(_bound_registry([1]), "c") == 1


def test_bound_weather_with_ten_each(weather_registry):
    # adder and mean carry 8 axis2 + 2 cxf deployments; instance_count keeps 54
    totals = {s: weather_registry.services[s].total_deployments() for s in ("instance_count", "adder", "mean")}
    assert totals == {"instance_count": 54, "adder": 10, "mean": 10}
    assert alternative_path_bound(weather_registry, "weather") == min(totals.values()) == 10


def test_bound_unknown_composition(weather_registry):
    with pytest.raises(UnknownCompositionError):
        alternative_path_bound(weather_registry, "nope")


@given(st.lists(st.integers(1, 30), min_size=1, max_size=5))
@settings(max_examples=30, deadline=None)
def test_bound_never_exceeds_member_totals(totals):
    r = _bound_registry(totals)
    bound = alternative_path_bound(r, "c")
    assert bound == min(totals)
    assert all(bound <= r.services[m.service].total_deployments() for m in r.compositions["c"].members)


# --- update_registry

def _report(ref, mean=10.0, in_flight=0, over=False):
    return EngineReport(ref, mean, in_flight, over)


def test_update_moves_slow_deployment_back(catalog_registry):
    axis2 = catalog_registry.services["instance_count"].implementations[0]
    before = [d.alias for d in axis2.deployments]
    update_registry(catalog_registry, _report(DeploymentRef("instance_count", "axis2", "axa"), 50.0, 9, True))
    after = [d.alias for d in axis2.deployments]
    # manual reorder: axa to the end, everything else in its old order
    assert after == before[1:] + ["axa"]
    assert axis2.deployments[-1].status == DEMOTED


def test_update_empty_report_is_identity(catalog_registry):
    snapshot = copy.deepcopy(catalog_registry)
    update_registry(catalog_registry, [])
    update_registry(catalog_registry, None)
    assert catalog_registry == snapshot


def test_update_unknown_alias_rejected(catalog_registry):
    snapshot = copy.deepcopy(catalog_registry)
    good = _report(DeploymentRef("instance_count", "axis2", "axa"), 50.0, 9, True)
    with pytest.raises(UnknownDeploymentError):
        update_registry(catalog_registry, [good, _report(DeploymentRef("instance_count", "axis2", "zzz"))])
    assert catalog_registry == snapshot


def test_update_healthy_report_restores_demoted(catalog_registry):
    ref = DeploymentRef("instance_count", "axis2", "axa")
    update_registry(catalog_registry, _report(ref, 50.0, 9, True))
    update_registry(catalog_registry, _report(ref, 10.0, 0, False))
    assert catalog_registry.deployment(ref).status == "active"


@given(st.lists(st.tuples(st.integers(0, 25), st.floats(1, 100), st.integers(0, 9), st.booleans()), max_size=30))
@settings(max_examples=40, deadline=None)
def test_update_is_a_permutation(reports):
    from firm.sim import bundled_registry_text

    r = parse_registry(bundled_registry_text("catalog.conf"), strict=False)
    before = sorted((str(ref), r.deployment(ref).address) for ref in r.refs())
    for idx, mean, in_flight, over in reports:
        alias = "ax" + string.ascii_lowercase[idx]
        update_registry(r, _report(DeploymentRef("instance_count", "axis2", alias), mean, in_flight, over))
    after = sorted((str(ref), r.deployment(ref).address) for ref in r.refs())
    assert before == after
    statuses = [d.status for d in r.services["instance_count"].implementations[0].deployments]
    # demoted entries sit behind every active one
    assert statuses == sorted(statuses, key=lambda s: s != "active")


# --- round trip property

_ident = st.text(string.ascii_lowercase, min_size=1, max_size=6)


@st.composite
def registries(draw):
    names = draw(st.lists(_ident, min_size=1, max_size=4, unique=True))
    parts, octet = [], 1
    for name in names:
        impls = draw(st.lists(_ident, min_size=1, max_size=3, unique=True))
        chunk = []
        for impl in impls:
            aliases = draw(st.lists(_ident, min_size=1, max_size=4, unique=True))
            deps = []
            for alias in aliases:
                deps.append((alias, f"10.1.{octet // 250}.{octet % 250 + 1}"))
                octet += 1
            chunk.append((impl, deps))
        parts.append(simple_service(name, chunk))
    comp = ""
    if draw(st.booleans()):
        members = " ".join(f"{n} {{ order {i + 1}; serialized {draw(st.sampled_from(['true', 'false']))}; }}"
                           for i, n in enumerate(names))
        comp = f"service zcomp {{ entry_point 10.9.9.9; description {{generated}}; services {{ {members} }} }}"
    return "services {" + "\n".join(parts) + comp + "}"


@given(registries())
@settings(max_examples=60, deadline=None)
def test_round_trip_property(text):
    r = parse_registry(text)
    assert parse_registry(serialize_registry(r)) == r
