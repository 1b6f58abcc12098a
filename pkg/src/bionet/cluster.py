"""Scatter-gather identification across the members of one PIN shard.

Each member holds a static partition of the shard's templates (identity id
modulo member count) and reports only its two best (identity, score)
candidates plus its scan count. Returning each member's top two preserves
the global decision exactly: the global best identity is its own member's
best, and the global runner-up can be beaten only by the global best inside
its member, so both always reach the coordinator (see docs/cluster-merge.md).

Any unreachable member fails the whole identification closed: a missing
partition could hide the true best match.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional, Sequence

from .errors import MemberUnreachable
from .matcher import (
    CylinderSet,
    GalleryBlock,
    IdentificationResult,
    MatcherParams,
    decide,
    score_block,
)

# one member's contribution: ((identity, score) pairs, scanned count)
MemberReport = tuple[list[tuple[bytes, float]], int]
MemberCall = Callable[[], MemberReport]


def partition(identity_id: bytes, members: int) -> int:
    """Stable member assignment: first 8 bytes as a big-endian int, mod c."""
    if members < 1:
        raise ValueError("members must be >= 1")
    return int.from_bytes(identity_id[:8], "big") % members


def top_two(candidates: Sequence[tuple[bytes, float]]) -> list[tuple[bytes, float]]:
    """Two best candidates by (score desc, identity asc); ids must be unique."""
    return sorted(candidates, key=lambda c: (-c[1], c[0]))[:2]


def scan_partition(probe: CylinderSet, block: GalleryBlock, ids: Sequence[bytes],
                   p: MatcherParams) -> MemberReport:
    """One member's work: scan its partition and keep the top two."""
    scores = score_block(probe, block, p)
    candidates = [(ids[i], s) for i, s in enumerate(scores) if s is not None]
    return top_two(candidates), len(ids)


def scatter_identify(member_calls: Sequence[MemberCall], p: MatcherParams,
                     parallel: bool = True) -> IdentificationResult:
    """Fan a probe out to every member and merge with the global decision rule.

    The merge is order-independent, so concurrent member completion cannot
    change the result; it is bit-identical to a single linear scan over the
    union of the partitions.
    """
    reports: list[Optional[MemberReport]] = [None] * len(member_calls)

    def run(i: int) -> None:
        try:
            reports[i] = member_calls[i]()
        except Exception as exc:
            raise MemberUnreachable(f"member {i}: {exc}") from exc

    if parallel and len(member_calls) > 1:
        with ThreadPoolExecutor(max_workers=len(member_calls)) as pool:
            for future in [pool.submit(run, i) for i in range(len(member_calls))]:
                future.result()
    else:
        for i in range(len(member_calls)):
            run(i)

    candidates: list[tuple[bytes, float]] = []
    scanned = 0
    for report in reports:
        assert report is not None
        candidates.extend(report[0])
        scanned += report[1]
    return decide(candidates, scanned, p)
