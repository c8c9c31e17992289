"""Command-line entry point: ``firm run | compare | validate-registry | bound | topology``."""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
from pathlib import Path

from .errors import FirmError, InvariantViolation, ValidationError
from .registry import alternative_path_bound, catalog_csv, load_registry
from .sim import Scenario, compare_modes, load_scenario, rows_csv, run, write_outputs
from .topology import build_fat_tree

EXIT_OK, EXIT_INVALID, EXIT_INVARIANT = 0, 1, 2


def _scenario_flags(p: argparse.ArgumentParser, requests_type=int):
    p.add_argument("--scenario", type=Path, help="INI scenario file; flags below override it")
    p.add_argument("--registry", type=Path, help="registry file (default: bundled weather catalog)")
    p.add_argument("--mode", choices=["base", "affinity", "firm"])
    p.add_argument("--k", type=int, help="fat-tree arity (even)")
    p.add_argument("--requests", type=requests_type)
    p.add_argument("--seed", type=int)
    p.add_argument("--frequency", type=float, help="promoter tick spacing")
    p.add_argument("--threshold", type=float, help="delay threshold (default 2x unloaded time)")
    p.add_argument("--out", type=Path, help="directory for output files")
    p.add_argument("--format", choices=["csv", "summary"], default="summary")


def _comma_ints(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("no request counts given")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="firm", description="Flow-table service composition simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings and info to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one scenario")
    _scenario_flags(p)

    p = sub.add_parser("compare", help="all three modes over a request sweep")
    _scenario_flags(p, requests_type=_comma_ints)
    p.add_argument("--seeds", type=int, default=1, help="number of matched seeds, starting at --seed")

    p = sub.add_parser("validate-registry", help="parse a registry file and report its contents")
    p.add_argument("registry_file", nargs="?", type=Path)
    p.add_argument("--registry", type=Path, dest="registry_opt")
    p.add_argument("--lenient", action="store_true", help="allow composition members with no definition")
    p.add_argument("--format", choices=["csv", "summary"], default="summary")

    p = sub.add_parser("bound", help="alternative-path bound of a composition")
    p.add_argument("composition", nargs="?", help="composition name (default: all)")
    p.add_argument("--registry", type=Path)
    p.add_argument("--lenient", action="store_true")

    p = sub.add_parser("topology", help="export a fat tree as JSON")
    p.add_argument("--k", type=int, default=4)
    return parser


def _scenario(args) -> Scenario:
    scenario = load_scenario(args.scenario) if args.scenario else Scenario()
    changes = {}
    for name in ("mode", "k", "seed", "frequency", "threshold"):
        value = getattr(args, name)
        if value is not None:
            changes[name] = value
    if args.registry:
        changes["registry_text"] = args.registry.read_text(encoding="utf-8")
    return scenario.replace(**changes)


def _cmd_run(args, out) -> None:
    scenario = _scenario(args)
    if args.requests is not None:
        scenario = scenario.replace(requests=args.requests)
    result = run(scenario.validate())
    if args.out:
        write_outputs(result, args.out)
    if args.format == "csv":
        out.write(result.metrics_csv())
    else:
        out.write(json.dumps(result.summary(), indent=2) + "\n")


def _cmd_compare(args, out) -> None:
    scenario = _scenario(args).validate()
    counts = args.requests or [50, 200, 800]
    if args.seeds < 1:
        raise ValidationError("--seeds must be positive")
    rows = compare_modes(scenario, counts, range(scenario.seed, scenario.seed + args.seeds))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "compare.csv").write_text(rows_csv(rows), encoding="utf-8")
    if args.format == "csv":
        out.write(rows_csv(rows))
        return
    # one line per (mode, count), averaged over seeds
    out.write(f"{'mode':<9}{'requests':>9}{'mean_time':>12}{'deviation%':>12}{'inter_rack':>12}{'failed':>8}\n")
    for count in counts:
        for mode in ("base", "affinity", "firm"):
            group = [r for r in rows if r["mode"] == mode and r["requests"] == count]
            means = [r["mean_completion_time"] for r in group if r["mean_completion_time"] is not None]
            devs = [r["deviation_pct"] for r in group if r["deviation_pct"] is not None]
            out.write(f"{mode:<9}{count:>9}"
                      f"{statistics.fmean(means) if means else float('nan'):>12.2f}"
                      f"{statistics.fmean(devs) if devs else float('nan'):>12.2f}"
                      f"{statistics.fmean(r['inter_rack_hops'] for r in group):>12.1f}"
                      f"{sum(r['failed'] for r in group):>8}\n")


def _registry_arg(args):
    path = getattr(args, "registry_file", None) or getattr(args, "registry_opt", None) or args.registry
    if path is None:
        raise ValidationError("no registry file given")
    return load_registry(path, strict=not args.lenient)


def _cmd_validate(args, out) -> None:
    args.registry = None
    registry = _registry_arg(args)
    if args.format == "csv":
        out.write(catalog_csv(registry))
        return
    for name, entry in registry.services.items():
        impls = ", ".join(f"{i.impl_name}={len(i.deployments)}" for i in entry.implementations)
        out.write(f"service {name}: {entry.total_deployments()} deployments ({impls})\n")
    for name, comp in registry.compositions.items():
        members = ", ".join(f"{m.service}@{m.order}" for m in comp.members)
        out.write(f"composition {name}: {members}\n")
    missing = registry.unresolved_members()
    if missing:
        out.write("unresolved members: " + ", ".join(f"{c}/{m}" for c, m in missing) + "\n")
    out.write("ok\n")


def _cmd_bound(args, out) -> None:
    registry = _registry_arg(args)
    names = [args.composition] if args.composition else list(registry.compositions)
    if not names:
        raise ValidationError("registry defines no compositions")
    for name in names:
        out.write(f"{name}\t{alternative_path_bound(registry, name)}\n")


def _cmd_topology(args, out) -> None:
    out.write(json.dumps(build_fat_tree(args.k).export(), indent=1) + "\n")


COMMANDS = {
    "run": _cmd_run,
    "compare": _cmd_compare,
    "validate-registry": _cmd_validate,
    "bound": _cmd_bound,
    "topology": _cmd_topology,
}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse reports usage errors itself; map them onto the validation code
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args, out)
    except InvariantViolation as exc:
        print(f"firm: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ValidationError, OSError) as exc:
        print(f"firm: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FirmError as exc:
        print(f"firm: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
