"""Cylinder-code minutiae matcher.

Each minutia gets a local descriptor: a cylinder of NS x NS x ND cells
(spatial grid rotated to the minutia direction, ND angular sections). A cell
accumulates Gaussian contributions from neighboring minutiae in space and in
relative direction, then is binarized. Two cylinders compare by an XOR
popcount similarity over their mutually valid cells; two templates compare by
the mean of the top-scoring cylinder pairs (local similarity sort); a probe
identifies against a gallery by best score with a decision threshold and an
ambiguity margin that fails closed on near-ties.

Cylinders are stored packed, 64 cells per word, and every scoring path runs
through one vectorized popcount kernel, so sequential, thread-parallel and
scatter-gathered evaluations of the same data are bit-identical.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import InsufficientMinutiae
from .templates import Minutia, Template, wrap_diff

_WORD_BITS = 64


@dataclass(frozen=True)
class MatcherParams:
    radius: float = 70.0              # px, descriptor support
    cells_per_axis: int = 8           # NS
    sections: int = 6                 # ND, angular cells
    sigma_spatial: float = 9.0        # px
    sigma_direction: float = math.pi / 9.0
    bin_threshold: float = 0.01       # min accumulated value for a set bit
    min_neighbors: int = 2            # neighbors required for a valid cylinder
    max_direction_diff: float = math.pi / 2.0
    top_pairs_cap: int = 10
    match_threshold: float = 0.60
    ambiguity_margin: float = 0.05
    min_valid_cylinders: int = 4

    def __post_init__(self):
        if self.cells_per_axis < 2 or self.sections < 2:
            raise ValueError("cells_per_axis and sections must be >= 2")
        if min(self.radius, self.sigma_spatial, self.sigma_direction) <= 0:
            raise ValueError("radius and sigmas must be positive")
        if not (0.0 < self.match_threshold < 1.0):
            raise ValueError("match_threshold must be in (0, 1)")
        if self.ambiguity_margin < 0.0:
            raise ValueError("ambiguity_margin must be >= 0")

    @property
    def cell_count(self) -> int:
        return self.cells_per_axis * self.cells_per_axis * self.sections

    @classmethod
    def from_dict(cls, d: dict) -> "MatcherParams":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class CylinderCode:
    """Binary descriptor for one minutia; packed 64 cells per uint64 word."""

    center: Minutia
    valid: bool
    cell_count: int
    bits_words: np.ndarray        # (words,) uint64
    valid_words: np.ndarray       # (words,) uint64

    @property
    def bits(self) -> np.ndarray:
        return _unpack(self.bits_words, self.cell_count)

    @property
    def cell_valid(self) -> np.ndarray:
        return _unpack(self.valid_words, self.cell_count)


@dataclass(frozen=True, eq=False)
class CylinderSet:
    template: Template
    cylinders: tuple[CylinderCode, ...]
    # valid cylinders only, stacked for the scoring kernel
    _bits: np.ndarray = field(repr=False)     # (n_valid, words) uint64
    _valids: np.ndarray = field(repr=False)   # (n_valid, words) uint64
    _angles: np.ndarray = field(repr=False)   # (n_valid,) float64

    @property
    def n_valid(self) -> int:
        return self._bits.shape[0]


def _pack(cells: np.ndarray) -> np.ndarray:
    """Pack a (n, cell_count) bool array into (n, words) uint64."""
    packed = np.packbits(cells, axis=1)
    words = -(-cells.shape[1] // _WORD_BITS)
    padded = np.zeros((cells.shape[0], words * 8), dtype=np.uint8)
    padded[:, : packed.shape[1]] = packed
    return padded.view(np.uint64)


def _unpack(words: np.ndarray, cell_count: int) -> np.ndarray:
    return np.unpackbits(words.view(np.uint8), count=cell_count).astype(bool)


def build_cylinders(t: Template, p: MatcherParams) -> CylinderSet:
    """Compute every minutia's descriptor. A template may yield zero valid ones."""
    n = len(t.minutiae)
    ns, nd = p.cells_per_axis, p.sections
    pos = np.array([[m.x, m.y] for m in t.minutiae])
    ang = np.array([m.angle for m in t.minutiae])

    # cell offsets in the minutia frame; distance from center is rotation-invariant
    step = 2.0 * p.radius / ns
    axis = (np.arange(ns) - (ns - 1) / 2.0) * step
    off_x, off_y = np.meshgrid(axis, axis, indexing="ij")
    in_radius = np.hypot(off_x, off_y) <= p.radius          # (ns, ns)

    cos_a, sin_a = np.cos(ang), np.sin(ang)
    cell_x = pos[:, 0, None, None] + off_x[None] * cos_a[:, None, None] - off_y[None] * sin_a[:, None, None]
    cell_y = pos[:, 1, None, None] + off_x[None] * sin_a[:, None, None] + off_y[None] * cos_a[:, None, None]
    inside = (cell_x >= 0) & (cell_x < t.width) & (cell_y >= 0) & (cell_y < t.height)
    cell_ok = in_radius[None] & inside                      # (n, ns, ns)

    # spatial contribution of every other minutia to every cell
    d2 = (cell_x[..., None] - pos[None, None, None, :, 0]) ** 2 \
        + (cell_y[..., None] - pos[None, None, None, :, 1]) ** 2
    reach = 3.0 * p.sigma_spatial
    gs = np.exp(-d2 / (2.0 * p.sigma_spatial ** 2))
    gs *= d2 <= reach * reach
    gs[np.arange(n), :, :, np.arange(n)] = 0.0              # exclude self

    # directional contribution per section
    section = -math.pi + (np.arange(nd) + 0.5) * 2.0 * math.pi / nd
    delta = _wrap(ang[:, None] - ang[None, :])              # (n, n)
    dphi = _wrap(section[:, None, None] - delta[None])      # (nd, n, n)
    gd = np.exp(-dphi ** 2 / (2.0 * p.sigma_direction ** 2))

    value = np.einsum("mijt,kmt->mijk", gs, gd)             # (n, ns, ns, nd)
    bits = (value >= p.bin_threshold) & cell_ok[..., None]
    cell_valid = np.broadcast_to(cell_ok[..., None], bits.shape)

    center_d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(center_d2, np.inf)
    neighbor_reach = p.radius + reach
    cyl_valid = (center_d2 <= neighbor_reach * neighbor_reach).sum(1) >= p.min_neighbors

    flat_bits = bits.reshape(n, -1)
    flat_valid = cell_valid.reshape(n, -1)
    bw = _pack(flat_bits)
    vw = _pack(flat_valid)
    cylinders = tuple(
        CylinderCode(center=t.minutiae[i], valid=bool(cyl_valid[i]),
                     cell_count=p.cell_count, bits_words=bw[i], valid_words=vw[i])
        for i in range(n)
    )
    keep = np.flatnonzero(cyl_valid)
    return CylinderSet(template=t, cylinders=cylinders,
                       _bits=np.ascontiguousarray(bw[keep]),
                       _valids=np.ascontiguousarray(vw[keep]),
                       _angles=np.ascontiguousarray(ang[keep]))


def _wrap(a: np.ndarray) -> np.ndarray:
    """Vectorized wrap into [-pi, pi)."""
    return np.mod(a + math.pi, 2.0 * math.pi) - math.pi


def local_similarity(a: CylinderCode, b: CylinderCode, p: MatcherParams) -> float:
    """XOR-popcount similarity over cells valid in both cylinders."""
    if not (a.valid and b.valid):
        raise ValueError("local_similarity requires two valid cylinders")
    xa = a.bits_words & b.valid_words
    xb = b.bits_words & a.valid_words
    pa = float(np.bitwise_count(xa).sum())
    pb = float(np.bitwise_count(xb).sum())
    if pa + pb == 0.0:
        return 0.0
    px = float(np.bitwise_count(xa ^ xb).sum())
    return 1.0 - math.sqrt(px) / (math.sqrt(pa) + math.sqrt(pb))


def _pair_similarities(probe: CylinderSet, bits: np.ndarray, valids: np.ndarray,
                       angles: np.ndarray, p: MatcherParams) -> tuple[np.ndarray, np.ndarray]:
    """Similarity matrix and direction-compatibility mask.

    `bits`/`valids`/`angles` hold the stacked valid cylinders of one or more
    gallery templates; per-pair values do not depend on the stacking, which is
    what makes chunked and scatter-gathered scoring bit-identical.

    The XOR popcount is recovered as pa + pb - 2*pop(bitsA & bitsB), exact in
    float64 (counts are small integers), saving a third broadcast pass.
    """
    pa = _pop_and(probe._bits, valids)
    pb = _pop_and(probe._valids, bits)
    common = _pop_and(probe._bits, bits)
    px = pa + pb - 2.0 * common
    denom = np.sqrt(pa) + np.sqrt(pb)
    sims = np.zeros_like(denom)
    np.divide(np.sqrt(px), denom, out=sims, where=denom > 0.0)
    sims = np.where(denom > 0.0, 1.0 - sims, 0.0)
    compat = np.abs(_wrap(probe._angles[:, None] - angles[None, :])) <= p.max_direction_diff
    return sims, compat


def _pop_and(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise popcount of AND between (n, words) and (m, words) bit rows."""
    return np.bitwise_count(a[:, None, :] & b[None, :, :]) \
        .sum(2, dtype=np.uint16).astype(np.float64)


def _consensus(sims: np.ndarray, compat: np.ndarray, n_a: int, n_b: int,
               p: MatcherParams) -> float:
    """Mean of the top pair similarities (missing pairs count as zero)."""
    vals = sims[compat]
    k = min(p.top_pairs_cap, n_a, n_b)
    if k <= 0:
        return 0.0
    if vals.size > k:
        vals = vals[np.argpartition(vals, vals.size - k)[vals.size - k:]]
    top = np.sort(vals)[::-1]
    return float(top.sum() / k)


def match_score(a: CylinderSet, b: CylinderSet, p: MatcherParams) -> float:
    """Template-level score in [0, 1]; symmetric and deterministic."""
    if a.n_valid < p.min_valid_cylinders or b.n_valid < p.min_valid_cylinders:
        raise InsufficientMinutiae(
            f"need {p.min_valid_cylinders} valid cylinders, have {a.n_valid} and {b.n_valid}")
    sims, compat = _pair_similarities(a, b._bits, b._valids, b._angles, p)
    return _consensus(sims, compat, a.n_valid, b.n_valid, p)


@dataclass(eq=False)
class GalleryBlock:
    """Stacked cylinder arrays for many templates, built once per store.

    Templates below the valid-cylinder floor contribute no columns (their
    offset range is empty) and always score None.
    """

    bits: np.ndarray      # (total_cylinders, words) uint64
    valids: np.ndarray
    angles: np.ndarray    # (total_cylinders,)
    offsets: np.ndarray   # (templates + 1,) column ranges per template
    n_valid: np.ndarray   # (templates,)

    @classmethod
    def build(cls, sets: Sequence[CylinderSet], min_valid: int) -> "GalleryBlock":
        bits, valids, angles = [], [], []
        offsets = np.zeros(len(sets) + 1, dtype=np.int64)
        n_valid = np.zeros(len(sets), dtype=np.int64)
        total = 0
        for i, cs in enumerate(sets):
            n_valid[i] = cs.n_valid
            if cs.n_valid >= min_valid:
                bits.append(cs._bits)
                valids.append(cs._valids)
                angles.append(cs._angles)
                total += cs.n_valid
            offsets[i + 1] = total
        words = sets[0]._bits.shape[1] if sets else 1
        empty = np.zeros((0, words), dtype=np.uint64)
        return cls(bits=np.concatenate(bits) if bits else empty,
                   valids=np.concatenate(valids) if valids else empty,
                   angles=np.concatenate(angles) if angles else np.zeros(0),
                   offsets=offsets, n_valid=n_valid)

    def __len__(self) -> int:
        return len(self.n_valid)


def score_block(probe: CylinderSet, block: GalleryBlock, p: MatcherParams,
                chunk_cylinders: int = 1024) -> list[Optional[float]]:
    """Score the probe against every template in the block.

    Returns one score per entry; None marks entries below the valid-cylinder
    floor (skipped, but still counted by callers). Scores are bit-identical
    to per-entry `match_score` calls regardless of chunking.
    """
    if probe.n_valid < p.min_valid_cylinders:
        raise InsufficientMinutiae(f"probe has {probe.n_valid} valid cylinders")
    scores: list[Optional[float]] = [None] * len(block)
    t = 0
    while t < len(block):
        start = block.offsets[t]
        end_t = t
        while end_t < len(block) and block.offsets[end_t + 1] - start < chunk_cylinders:
            end_t += 1
        end_t = max(end_t, t + 1)
        end = block.offsets[end_t]
        if end > start:
            sims, compat = _pair_similarities(
                probe, block.bits[start:end], block.valids[start:end],
                block.angles[start:end], p)
            for g in range(t, end_t):
                lo, hi = block.offsets[g] - start, block.offsets[g + 1] - start
                if hi > lo:
                    scores[g] = _consensus(sims[:, lo:hi], compat[:, lo:hi],
                                           probe.n_valid, int(block.n_valid[g]), p)
        t = end_t
    return scores


def score_gallery(probe: CylinderSet, gallery: Sequence[CylinderSet],
                  p: MatcherParams) -> list[Optional[float]]:
    """Convenience wrapper: stack the gallery and score it in one pass."""
    return score_block(probe, GalleryBlock.build(gallery, p.min_valid_cylinders), p)


class Outcome(Enum):
    MATCH = "match"
    NO_MATCH = "no_match"
    AMBIGUOUS = "ambiguous"


@dataclass(frozen=True)
class IdentificationResult:
    outcome: Outcome
    identity_id: Optional[bytes]          # best identity (match/ambiguous)
    score: float                          # best score (0.0 when nothing scored)
    second_identity_id: Optional[bytes]
    second_score: Optional[float]
    scanned: int

    @classmethod
    def no_match(cls, best_score: float, scanned: int) -> "IdentificationResult":
        return cls(Outcome.NO_MATCH, None, best_score, None, None, scanned)


def decide(candidates: Sequence[tuple[bytes, float]], scanned: int,
           p: MatcherParams) -> IdentificationResult:
    """Apply the global decision rule to (identity, score) candidates.

    Used identically by the linear scan and the cluster merge. An identity
    appearing more than once is reduced to its best score. A runner-up at or
    above the threshold and within the ambiguity margin fails the decision
    closed (ambiguous) rather than guessing.
    """
    best_by_id: dict[bytes, float] = {}
    for identity, score in candidates:
        prev = best_by_id.get(identity)
        if prev is None or score > prev:
            best_by_id[identity] = score
    if not best_by_id:
        return IdentificationResult.no_match(0.0, scanned)

    ranked = sorted(best_by_id.items(), key=lambda kv: (-kv[1], kv[0]))
    best_id, best = ranked[0]
    if best < p.match_threshold:
        return IdentificationResult.no_match(best, scanned)
    if len(ranked) > 1:
        second_id, second = ranked[1]
        if second >= p.match_threshold and best - second < p.ambiguity_margin:
            return IdentificationResult(Outcome.AMBIGUOUS, best_id, best,
                                        second_id, second, scanned)
    return IdentificationResult(Outcome.MATCH, best_id, best, None, None, scanned)


def identify(probe: CylinderSet, gallery: Sequence[tuple[bytes, CylinderSet]],
             p: MatcherParams, workers: int = 1) -> IdentificationResult:
    """1:N search. Gallery entries below the cylinder floor are skipped but
    counted in `scanned`. Worker count never changes the result."""
    sets = [cs for _, cs in gallery]
    if workers <= 1 or len(gallery) < 2 * workers:
        scores = score_gallery(probe, sets, p)
    else:
        bounds = [(len(sets) * w // workers, len(sets) * (w + 1) // workers)
                  for w in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda se: score_gallery(probe, sets[se[0]:se[1]], p), bounds))
        scores = [s for part in parts for s in part]
    candidates = [(gallery[i][0], s) for i, s in enumerate(scores) if s is not None]
    return decide(candidates, len(gallery), p)


@dataclass(frozen=True)
class CalibrationResult:
    threshold: float
    fmr: float
    fnmr: float


def calibrate_threshold(genuine: Sequence[float], impostor: Sequence[float],
                        target_fmr: float) -> CalibrationResult:
    """Pick the decision threshold minimizing FNMR subject to FMR <= target.

    Candidates are the distinct observed scores plus 1.0; ties prefer the
    larger threshold. Always satisfiable: a threshold above every impostor
    score has FMR 0.
    """
    if not len(genuine) or not len(impostor):
        raise ValueError("genuine and impostor score lists must be non-empty")
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    candidates = np.unique(np.concatenate([g, imp, [1.0]]))
    if imp[-1] >= candidates[-1]:
        candidates = np.append(candidates, np.nextafter(candidates[-1], 2.0))

    best: Optional[CalibrationResult] = None
    for theta in candidates:
        fmr = float(imp.size - np.searchsorted(imp, theta, side="left")) / imp.size
        if fmr > target_fmr:
            continue
        fnmr = float(np.searchsorted(g, theta, side="left")) / g.size
        if best is None or fnmr <= best.fnmr:
            best = CalibrationResult(float(theta), fmr, fnmr)
    assert best is not None  # the appended top candidate always has FMR 0
    return best
