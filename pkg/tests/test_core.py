import random

import pytest

from firm import events as ev
from firm.composition import parse_request
from firm.core import AFFINITY, BASE, FIRM, Firm, FirmConfig, PromoterState, ServiceProperties, UpdateTrigger, promoter_tick
from firm.engine import EngineParams, EngineReport
from firm.errors import UnknownServiceError, ValidationError
from firm.registry import DeploymentRef, parse_registry
from firm.topology import build_fat_tree

from conftest import simple_service


def registry_text(*services):
    return "services {\n" + "\n".join(simple_service(name, impls) for name, impls in services) + "\n}"


def make_firm(registry, mode=FIRM, params=None, **config):
    if isinstance(registry, str):
        registry = parse_registry(registry)
    params = params or {}

    def lookup(ref):
        return EngineParams(**params.get(str(ref), {}))

    return Firm(FirmConfig(registry, build_fat_tree(4), mode=mode, engine_params=lookup, **config))


def one_service(name="S", count=1):
    return registry_text((name, [("i", [(f"d{k + 1}", f"10.0.0.{k + 1}") for k in range(count)])]))


def kinds(firm, *wanted):
    return [e for e in firm.loop.log if e["kind"] in wanted]


# -------------------------------------------------------------- execute


def test_execute_single_request():
    firm = make_firm(one_service())
    results = list(firm.execute(["<S, x>"]))
    assert len(results) == 1 and results[0].ok
    assert len(kinds(firm, ev.ADMISSION)) == 1


def test_execute_two_then_one_waits_for_both():
    reg = registry_text(*[(f"Service{i}", [("i", [("d", f"10.0.0.{i}")])]) for i in (1, 2, 3)])
    params = {"Service1/i/d": dict(base_service_time=5), "Service2/i/d": dict(base_service_time=8),
              "Service3/i/d": dict(base_service_time=3)}
    firm = make_firm(reg, params=params)
    (result,) = firm.execute(["<Service3,(<Service1, Input1>,<Service2, Input2>)>"])
    admissions = {e["service"]: e["time"] for e in kinds(firm, ev.ADMISSION)}
    assert admissions["Service1"] == admissions["Service2"] == 0
    assert admissions["Service3"] == 8
    assert result.record.completion_time == 11


def test_execute_zero_requests():
    firm = make_firm(one_service())
    assert list(firm.execute([])) == []
    assert firm.aborted and firm.idle()


def test_abort_rejects_new_arrivals():
    firm = make_firm(one_service(), mode=BASE)
    gen = firm.execute(["<S, a>", "<S, b>", "<S, c>"], spacing=100)
    first = next(gen)
    gen.close()
    assert first.ok
    assert len(kinds(firm, "rejected")) == 2
    assert firm.idle()


# ----------------------------------------------------------------- find


def test_find_weather_order(weather_registry):
    firm = make_firm(weather_registry).manage()
    bindings = firm.find(parse_request("<weather, city>"))
    assert [b.service for b in bindings] == ["instance_count", "adder", "mean"]
    assert [b.properties["order"] for b in bindings] == [1, 2, 3]


def test_find_single_and_unknown():
    firm = make_firm(one_service()).manage()
    assert len(firm.find(parse_request("<S, x>"))) == 1
    with pytest.raises(UnknownServiceError):
        firm.find(parse_request("<T, x>"))


# -------------------------------------------------------------- resolve


def test_affinity_hit():
    firm = make_firm(one_service(count=3)).manage()
    (binding,) = firm.find(parse_request("<S, x>"))
    first = firm.resolve_deployment(binding, client=1)
    for _ in range(5):
        assert firm.resolve_deployment(binding, client=1) == first


def test_proximity_prefers_rack_local():
    reg = registry_text(("S", [("i", [("far", "10.0.0.1"), ("near", "10.0.0.2")])]))
    params = {"S/i/far": dict(host="h3_1_1"), "S/i/near": dict(host="h0_0_1")}
    firm = make_firm(reg, params=params).manage()
    (binding,) = firm.find(parse_request("<S, x>"))
    assert firm.resolve_deployment(binding, client=7, anchors=["h0_0_0"]).alias == "near"


def test_single_deployment_resolves():
    firm = make_firm(one_service()).manage()
    (binding,) = firm.find(parse_request("<S, x>"))
    assert firm.resolve_deployment(binding, client=3) == DeploymentRef("S", "i", "d1")


def test_base_round_robin():
    firm = make_firm(one_service(count=3), mode=BASE).manage()
    (binding,) = firm.find(parse_request("<S, x>"))
    picks = [firm.resolve_deployment(binding, client=1).alias for _ in range(6)]
    assert picks == ["d1", "d2", "d3", "d1", "d2", "d3"]


def test_blacklist_evicts_affinity():
    firm = make_firm(one_service(count=3)).manage()
    (binding,) = firm.find(parse_request("<S, x>"))
    first = firm.resolve_deployment(binding, client=1)
    firm.handle_trigger(UpdateTrigger("t", [ServiceProperties("S", [first], [])]))
    assert (1, "S") not in firm.affinity
    assert firm.resolve_deployment(binding, client=1) != first


# --------------------------------------------------------------- invoke


def test_engine_failure_fails_fast():
    reg = registry_text(("A", [("i", [("d", "10.0.0.1")])]), ("B", [("i", [("d", "10.0.0.2")])]))
    firm = make_firm(reg, params={"A/i/d": dict(failure_probability=1.0)})
    (result,) = firm.execute(["<B,(<A, x>)>"])
    assert not result.ok and result.failed_node == "n1"
    assert [e["service"] for e in kinds(firm, ev.ADMISSION)] == ["A"]
    assert kinds(firm, "failure")[0]["node"] == "n1"


def test_dependency_blocks_until_all_done():
    reg = registry_text(*[(s, [("i", [("d", f"10.0.0.{k}")])]) for k, s in enumerate("ABC", 1)])
    firm = make_firm(reg, params={"A/i/d": dict(base_service_time=2), "B/i/d": dict(base_service_time=9)})
    list(firm.execute(["<C,(<A, x>,<B, y>)>"]))
    log = firm.loop.log
    c_admit = next(i for i, e in enumerate(log) if e["kind"] == ev.ADMISSION and e["service"] == "C")
    b_done = next(i for i, e in enumerate(log) if e["kind"] == ev.COMPLETION and e["service"] == "B")
    assert b_done < c_admit


# --------------------------------------------------------------- manage


def test_manage_catalog_registry(catalog_registry):
    firm = make_firm(catalog_registry).manage()
    assert len(firm.flow_table.active_for("instance_count")) == 54
    assert not firm.flow_table.blacklist


def test_trigger_blacklists_offender():
    firm = make_firm(one_service(count=3)).manage()
    d2 = DeploymentRef("S", "i", "d2")
    firm.handle_trigger(UpdateTrigger("t", [ServiceProperties("S", [d2], [])]))
    assert firm.flow_table.is_blacklisted(d2)
    assert [r.alias for r in firm.flow_table.active_for("S")] == ["d1", "d3"]


def test_trigger_unknown_service_rejected():
    firm = make_firm(one_service()).manage()
    firm.handle_trigger(UpdateTrigger("t", [ServiceProperties("Nope", [DeploymentRef("Nope", "i", "d")], [])]))
    assert kinds(firm, "trigger-rejected")
    assert not firm.flow_table.blacklist


def test_abort_before_trigger_leaves_tables():
    firm = make_firm(one_service(count=3)).manage()
    before = firm.flow_table.snapshot()
    firm.abort()
    firm.loop.run()
    assert firm.flow_table.snapshot() == before


# -------------------------------------------------------------- promoter


def test_promoter_examples():
    class Heads(random.Random):
        def random(self):
            return 0.0

    state = PromoterState(10, Heads(1))
    assert promoter_tick(state, []) is None and state.flag
    entry = DeploymentRef("S", "i", "d2")
    assert promoter_tick(state, [entry]) == entry


def test_promoter_rate():
    state = PromoterState(1, random.Random(42))
    hits = sum(promoter_tick(state, ["x"]) is not None for _ in range(10_000))
    assert 4700 <= hits <= 5300


def test_promoter_flag_reset_each_tick():
    state = PromoterState(1, random.Random(3))
    state.flag = True
    promoter_tick(state, [])
    # whatever the coin said, the result reflects this tick only
    assert state.pending_service_id is None


# ------------------------------------------------------- engine reports


def report(alias, over, in_flight=0):
    return EngineReport(DeploymentRef("S", "i", alias), 10.0, in_flight, over)


def test_over_threshold_report_triggers():
    firm = make_firm(one_service(count=3)).manage()
    trigger = firm.on_engine_report(report("d2", True))
    assert trigger.offenders() == [DeploymentRef("S", "i", "d2")]
    firm.loop.run(until=0)
    assert firm.flow_table.is_blacklisted(DeploymentRef("S", "i", "d2"))


def test_healthy_report_resorts_registry():
    firm = make_firm(one_service(count=3)).manage()
    assert firm.on_engine_report(report("d1", False, in_flight=3)) is None
    impl = firm.registry.service("S").implementations[0]
    assert [d.alias for d in impl.deployments] == ["d2", "d3", "d1"]


def test_simultaneous_reports_batch():
    firm = make_firm(one_service(count=3)).manage()
    t1 = firm.on_engine_report(report("d1", True))
    t2 = firm.on_engine_report(report("d3", True))
    assert t1 is t2
    firm.loop.run(until=0)
    (trigger,) = kinds(firm, ev.TRIGGER)
    assert trigger["offenders"] == ["S/i/d1", "S/i/d3"]


def test_affinity_mode_never_blacklists():
    firm = make_firm(one_service(count=3), mode=AFFINITY).manage()
    assert firm.on_engine_report(report("d1", True)) is None
    assert not firm.flow_table.blacklist


def test_config_validation():
    with pytest.raises(ValidationError):
        make_firm(one_service(), mode="nope")
    with pytest.raises(ValidationError):
        make_firm(one_service(), frequency=0)


def test_first_placement_leans_toward_later_members():
    reg = registry_text(("A", [("i", [("west", "10.0.0.1"), ("east", "10.0.0.2")])]),
                        ("B", [("i", [("only", "10.0.0.3")])]))
    params = {"A/i/west": dict(host="h0_0_0"), "A/i/east": dict(host="h3_1_1"), "B/i/only": dict(host="h3_1_0")}
    firm = make_firm(reg, params=params)
    list(firm.execute(["<B,(<A, x>)>"]))
    a = next(e for e in kinds(firm, ev.ADMISSION) if e["service"] == "A")
    assert a["deployment"] == "A/i/east"
    # without the later member pulling it, the lowest host wins the tie
    firm = make_firm(reg, params=params)
    list(firm.execute(["<A, x>"]))
    assert kinds(firm, ev.ADMISSION)[0]["deployment"] == "A/i/west"
