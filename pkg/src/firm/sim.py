"""Scenario runner: workload generation, the three evaluation modes, metrics."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import fnmatch
import io
import json
import random
import statistics
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .core import MODES, Firm, FirmConfig, MetricsRecord
from .engine import MAPREDUCE, SIMPLE, EngineParams
from .errors import ValidationError
from .registry import DeploymentRef, Registry, parse_registry
from .topology import build_fat_tree

ENGINE_KEYS = ("capacity", "base_service_time", "engine_kind", "job_size_factor", "failure_probability", "host")


def bundled_registry_text(name: str = "weather.conf") -> str:
    return resources.files("firm").joinpath("data", name).read_text(encoding="utf-8")


@dataclass
class Scenario:
    mode: str = "firm"
    k: int = 4
    requests: int = 50
    arrival: str = "poisson"  # or "closed"
    rate: float | None = None  # poisson rate; None spreads requests over `duration`
    duration: float = 1000.0
    clients: int = 20
    seed: int = 0
    frequency: float = 50.0
    threshold: float | None = None
    window: float = 100.0
    memoize: bool = True
    request: str = "<weather, city{n}>"
    registry_text: str | None = None  # None: the bundled weather registry
    engine_defaults: dict = field(default_factory=dict)
    # (glob over "service/impl/alias", settings) applied in order, later wins
    engine_overrides: list[tuple[str, dict]] = field(default_factory=list)
    horizon: float | None = None

    def validate(self) -> Scenario:
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {', '.join(MODES)}")
        if not isinstance(self.k, int) or self.k < 2 or self.k % 2:
            raise ValidationError("k must be an even integer >= 2")
        if self.requests < 1 or self.clients < 1:
            raise ValidationError("requests and clients must be positive")
        if self.arrival not in ("poisson", "closed"):
            raise ValidationError("arrival must be poisson or closed")
        if self.rate is not None and self.rate <= 0:
            raise ValidationError("rate must be positive")
        if self.duration <= 0 or self.frequency <= 0 or self.window <= 0:
            raise ValidationError("duration, frequency and window must be positive")
        if self.threshold is not None and self.threshold <= 0:
            raise ValidationError("threshold must be positive")
        for key in list(self.engine_defaults) + [k for _, o in self.engine_overrides for k in o]:
            if key not in ENGINE_KEYS:
                raise ValidationError(f"unknown engine parameter {key!r}")
        return self

    def replace(self, **changes) -> Scenario:
        return dataclasses.replace(self, **changes)

    def registry(self) -> Registry:
        return parse_registry(self.registry_text or bundled_registry_text())

    def engine_params(self, ref: DeploymentRef) -> EngineParams:
        settings = {"engine_kind": MAPREDUCE if ref.impl == MAPREDUCE else SIMPLE}
        settings.update(self.engine_defaults)
        name = str(ref)
        for pattern, values in self.engine_overrides:
            if fnmatch.fnmatchcase(name, pattern):
                settings.update(values)
        return EngineParams(**settings)


def _convert(key: str, value: str):
    if key in ("capacity", "k", "requests", "clients", "seed"):
        try:
            return int(value)
        except ValueError:
            raise ValidationError(f"{key} must be an integer, not {value!r}") from None
    if key in ("engine_kind", "host", "mode", "arrival", "request", "registry"):
        return value
    if key == "memoize":
        return value.strip().lower() in ("1", "true", "yes", "on")
    if key in ("threshold", "rate", "horizon") and value.strip().lower() in ("", "none", "default"):
        return None
    try:
        return float(value)
    except ValueError:
        raise ValidationError(f"{key} must be a number, not {value!r}") from None


def parse_scenario(text: str, base_dir: Path | str | None = None) -> Scenario:
    """Read the INI-style scenario format.

    ``[scenario]`` holds run-wide keys; ``[engine PATTERN]`` sections set
    per-deployment engine parameters for deployments whose
    ``service/impl/alias`` matches the glob, later sections winning.
    """
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=", ":"), inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"bad scenario file: {exc}") from None
    scenario = Scenario()
    names = {f.name for f in dataclasses.fields(Scenario)}
    for section in parser.sections():
        items = {k: _convert(k, v) for k, v in parser.items(section)}
        if section == "scenario":
            for key, value in items.items():
                if key == "registry":
                    path = Path(value)
                    if base_dir is not None and not path.is_absolute():
                        path = Path(base_dir) / path
                    scenario.registry_text = path.read_text(encoding="utf-8")
                elif key in names and key not in ("engine_defaults", "engine_overrides", "registry_text"):
                    setattr(scenario, key, value)
                else:
                    raise ValidationError(f"unknown scenario key {key!r}")
        elif section.startswith("engine"):
            pattern = section[len("engine"):].strip() or "*"
            if pattern == "*":
                scenario.engine_defaults.update(items)
            else:
                scenario.engine_overrides.append((pattern, items))
        else:
            raise ValidationError(f"unknown scenario section [{section}]")
    return scenario.validate()


def load_scenario(path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), path.parent)


def desk_scenario() -> Scenario:
    """The bundled saturating comparison scenario (weather registry, k=4)."""
    return parse_scenario(bundled_registry_text("desk.ini"))


@dataclass
class RunResult:
    scenario: Scenario
    events: list[dict]
    records: list[MetricsRecord]
    firm: Firm

    def __iter__(self):
        return iter((self.events, self.records))

    def event_log(self) -> str:
        return self.firm.loop.dumps()

    @property
    def failures(self) -> int:
        return sum(1 for r in self.firm.results if not r.ok)

    def summary(self) -> dict:
        times = [r.completion_time for r in self.records]
        counts: dict[str, int] = {}
        for e in self.events:
            counts[e["kind"]] = counts.get(e["kind"], 0) + 1
        return {
            "mode": self.scenario.mode,
            "k": self.scenario.k,
            "seed": self.scenario.seed,
            "requests": self.scenario.requests,
            "arrivals": self.firm.arrivals,
            "completed": len(self.records),
            "failed": self.failures,
            "in_flight_at_end": self.firm.arrivals - len(self.records) - self.failures,
            "mean_completion_time": statistics.fmean(times) if times else None,
            "deviation_pct": deviation(self.records) if len(self.records) >= 2 else None,
            "inter_rack_hops": sum(r.inter_rack_hops for r in self.records),
            "admissions": sum(r.admissions for r in self.records),
            "event_counts": dict(sorted(counts.items())),
        }

    def metrics_csv(self) -> str:
        return records_csv(self.records)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, ["composition", "node", "service", "deployment", "start", "end"],
                                lineterminator="\n")
        writer.writeheader()
        for inst in self.firm.instances.values():
            for row in inst.request.trace():
                writer.writerow({"composition": inst.id, **row})
        return buf.getvalue()


def records_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    fields = ["composition_id", "client", "mode", "arrival", "finish", "completion_time",
              "inter_rack_hops", "admissions", "nodes"]
    writer = csv.DictWriter(buf, fields, lineterminator="\n")
    writer.writeheader()
    for r in records:
        writer.writerow(r.row())
    return buf.getvalue()


def build(scenario: Scenario) -> Firm:
    scenario.validate()
    config = FirmConfig(
        registry=scenario.registry(),
        topology=build_fat_tree(scenario.k),
        mode=scenario.mode,
        engine_params=scenario.engine_params,
        frequency=scenario.frequency,
        threshold=scenario.threshold,
        window=scenario.window,
        seed=scenario.seed,
        memoize=scenario.memoize,
    )
    return Firm(config)


def run(scenario: Scenario) -> RunResult:
    """Execute one scenario; the event log is a pure function of the scenario."""
    firm = build(scenario)
    loop = firm.loop
    firm.manage()
    rng = random.Random(scenario.seed)

    def request_text(n, client):
        return scenario.request.replace("{n}", str(n)).replace("{client}", str(client))

    if scenario.arrival == "poisson":
        rate = scenario.rate or scenario.requests / scenario.duration
        t = 0.0
        for n in range(scenario.requests):
            t += rng.expovariate(rate)
            client = rng.randrange(scenario.clients)
            firm.submit(request_text(n, client), client=client, at=t)
    else:
        issued = 0
        client_of: dict[int, int] = {}

        def issue(client):
            nonlocal issued
            if issued < scenario.requests:
                client_of[firm.submit(request_text(issued, client), client=client)] = client
                issued += 1

        firm.on_finish(lambda inst: issue(client_of[inst.id]))
        for c in range(min(scenario.clients, scenario.requests)):
            issue(c)

    submitted = scenario.requests

    def workload_done():
        return firm.arrivals + firm.rejected >= submitted and firm.idle()

    while loop.peek_time() is not None:
        if scenario.horizon is not None and loop.peek_time() > scenario.horizon:
            loop.now = scenario.horizon
            break
        loop.step()
        if not firm.aborted and workload_done():
            firm.abort()
    if not firm.aborted:
        firm.abort()
    return RunResult(scenario, loop.log, firm.records, firm)


def deviation(records) -> float:
    """Sample standard deviation of completion times as a percentage of their mean."""
    times = [r.completion_time if isinstance(r, MetricsRecord) else float(r) for r in records]
    if len(times) < 2:
        raise ValidationError("deviation needs at least two records")
    return statistics.stdev(times) / statistics.fmean(times) * 100.0


def compare_modes(template: Scenario, counts, seeds=None) -> list[dict]:
    """Every mode at every request count, matched seeds; one row per (mode, count, seed)."""
    seeds = [template.seed] if seeds is None else list(seeds)
    rows = []
    for seed in seeds:
        for count in counts:
            for mode in MODES:
                result = run(template.replace(mode=mode, requests=int(count), seed=seed))
                s = result.summary()
                rows.append({
                    "mode": mode,
                    "requests": int(count),
                    "seed": seed,
                    "completed": s["completed"],
                    "failed": s["failed"],
                    "mean_completion_time": s["mean_completion_time"],
                    "deviation_pct": s["deviation_pct"],
                    "inter_rack_hops": s["inter_rack_hops"],
                })
    return rows


def rows_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def write_outputs(result: RunResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "events.jsonl").write_text(result.event_log(), encoding="utf-8")
    (out / "metrics.csv").write_text(result.metrics_csv(), encoding="utf-8")
    (out / "trace.csv").write_text(result.trace_csv(), encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(result.summary(), indent=2) + "\n", encoding="utf-8")


__all__ = [
    "Scenario", "RunResult", "run", "desk_scenario", "deviation", "compare_modes", "parse_scenario", "load_scenario",
    "records_csv", "rows_csv", "write_outputs", "bundled_registry_text",
]
