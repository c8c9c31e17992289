"""Software-defined service composition over a simulated fat-tree data center."""

from .composition import parse_request, ready_set, consolidate, MemoTable, memo_lookup
from .core import Firm, FirmConfig, MetricsRecord, promoter_tick
from .engine import EngineParams, EngineReport, EngineState, admit, complete, health_report
from .registry import (
    DeploymentRef,
    Registry,
    alternative_path_bound,
    lookup_endpoints,
    parse_registry,
    serialize_registry,
    update_registry,
)
from .sim import Scenario, compare_modes, deviation, run
from .topology import build_fat_tree, promote, proximity_rank, shortest_path, update_flow_table

__version__ = "0.1.0"
