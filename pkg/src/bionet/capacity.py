"""Worst-case capacity arithmetic for the network.

Worst case means every transaction scans its shard's full template
population: a server sustaining m template comparisons per second over a
population of D templates, split across a cluster of c members, authorizes
S * c * m / D transactions per second network-wide. All arithmetic is exact
(rational); integer inputs with an integral result come back as an int.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Union


@dataclass(frozen=True)
class CapacityInputs:
    servers: int                 # shard servers in the network
    matches_per_second: int      # per-server template comparison rate
    templates_per_server: int    # population each shard must scan
    cluster_size: int = 1        # members sharing one shard's population

    def __post_init__(self):
        for name in ("servers", "matches_per_second", "templates_per_server", "cluster_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class CapacityReport:
    tps: Union[int, float]       # worst-case transactions per second
    total_templates: int


def capacity_model(inp: CapacityInputs) -> CapacityReport:
    tps = Fraction(inp.servers * inp.cluster_size * inp.matches_per_second,
                   inp.templates_per_server)
    return CapacityReport(
        tps=int(tps) if tps.denominator == 1 else float(tps),
        total_templates=inp.servers * inp.templates_per_server,
    )
