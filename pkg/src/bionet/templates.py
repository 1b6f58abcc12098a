"""Fingerprint template data model, synthetic generation and the .biot format.

A template is a set of minutiae (position, direction, type, quality) in a
fixed pixel coordinate space. Real capture hardware is out of scope: galleries
and probes are produced by `generate_template` and `perturb`, both driven by
stdlib `random.Random` so that equal (inputs, seed) give bit-identical output.

Binary format (.biot), all integers big-endian:

    magic   4 bytes  "BIOT"
    version 1 byte   0x01
    width   u16
    height  u16
    count   u16
    then per minutia:
        x       u16  (rounded pixel)
        y       u16
        angle   u16  in units of 2*pi/65536
        kind    u8   0 = ridge ending, 1 = bifurcation
        quality u8   0..255

Positions are sampled at least half a pixel away from the image edge so the
rounded on-disk coordinate never moves a point by more than 0.5 px.
"""

from __future__ import annotations

import math
import random
import struct
from dataclasses import dataclass
from enum import IntEnum

from .errors import BadMagic, BadTemplateVersion, OutOfBounds, SpacingInfeasible, Truncated

TWO_PI = 2.0 * math.pi

MAGIC = b"BIOT"
FORMAT_VERSION = 0x01
MAX_MINUTIAE = 256
DEFAULT_MIN_SPACING = 8.0
# Kept clear of the image edge so u16 rounding stays within 0.5 px.
EDGE_MARGIN = 0.5

_HEADER = struct.Struct(">4sBHHH")
_MINUTIA = struct.Struct(">HHHBB")


class MinutiaKind(IntEnum):
    RIDGE_ENDING = 0
    BIFURCATION = 1


def wrap_angle(a: float) -> float:
    """Normalize an angle into [0, 2*pi)."""
    a = math.fmod(a, TWO_PI)
    if a < 0.0:
        a += TWO_PI
    if a >= TWO_PI:  # fmod can land exactly on 2*pi after the += above
        a -= TWO_PI
    return a


def wrap_diff(a: float) -> float:
    """Wrap an angle difference into [-pi, pi)."""
    a = math.fmod(a + math.pi, TWO_PI)
    if a < 0.0:
        a += TWO_PI
    return a - math.pi


@dataclass(frozen=True)
class Minutia:
    x: float
    y: float
    angle: float  # radians, [0, 2*pi)
    kind: MinutiaKind = MinutiaKind.RIDGE_ENDING
    quality: float = 1.0


@dataclass(frozen=True)
class Template:
    width: int
    height: int
    minutiae: tuple[Minutia, ...]

    def __post_init__(self):
        if not (1 <= len(self.minutiae) <= MAX_MINUTIAE):
            raise ValueError(f"minutia count {len(self.minutiae)} outside 1..{MAX_MINUTIAE}")
        for m in self.minutiae:
            if not (0.0 <= m.x < self.width and 0.0 <= m.y < self.height):
                raise ValueError(f"minutia ({m.x}, {m.y}) outside {self.width}x{self.height}")
            if not (0.0 <= m.angle < TWO_PI):
                raise ValueError(f"angle {m.angle} not normalized to [0, 2*pi)")
            if not (0.0 <= m.quality <= 1.0):
                raise ValueError(f"quality {m.quality} outside [0, 1]")


@dataclass(frozen=True)
class PerturbationParams:
    """Capture-to-capture variability model for genuine probe synthesis."""

    pos_sigma: float = 0.0        # px
    angle_sigma: float = 0.0      # radians
    dropout_prob: float = 0.0
    spurious_count: int = 0
    global_rotation_max: float = 0.0  # radians
    global_shift_max: float = 0.0     # px

    def __post_init__(self):
        if min(self.pos_sigma, self.angle_sigma, self.dropout_prob,
               self.spurious_count, self.global_rotation_max, self.global_shift_max) < 0:
            raise ValueError("perturbation parameters must be non-negative")
        if self.dropout_prob >= 1.0:
            raise ValueError("dropout_prob must be < 1")

    def is_identity(self) -> bool:
        return (self.pos_sigma == 0.0 and self.angle_sigma == 0.0
                and self.dropout_prob == 0.0 and self.spurious_count == 0
                and self.global_rotation_max == 0.0 and self.global_shift_max == 0.0)


# Survivors of dropout are never thinned below this many minutiae.
DROPOUT_FLOOR = 4

_SPACING_ATTEMPT_FACTOR = 10_000


def generate_template(seed: int, n: int, width: int = 512, height: int = 512,
                      *, min_spacing: float = DEFAULT_MIN_SPACING, margin: float = 0.0) -> Template:
    """Deterministically sample n minutiae with pairwise spacing >= min_spacing.

    A nonzero `margin` confines positions to the centered disk of radius
    min(width, height)/2 - margin, so rotations about the image center plus
    shifts up to the margin keep every minutia in bounds.
    Raises SpacingInfeasible after 10000*n rejected placements.
    """
    if not (1 <= n <= MAX_MINUTIAE):
        raise ValueError(f"n={n} outside 1..{MAX_MINUTIAE}")
    if width < 128 or height < 128:
        raise ValueError("image must be at least 128x128")
    lo_x, hi_x = EDGE_MARGIN, width - EDGE_MARGIN
    lo_y, hi_y = EDGE_MARGIN, height - EDGE_MARGIN
    disk_r_sq = None
    if margin > 0.0:
        disk_r = min(width, height) / 2.0 - margin
        if disk_r <= 0:
            raise ValueError("margin leaves no room for minutiae")
        disk_r_sq = disk_r * disk_r

    rng = random.Random(seed)
    cx, cy = width / 2.0, height / 2.0
    placed: list[tuple[float, float]] = []
    attempts_left = _SPACING_ATTEMPT_FACTOR * n
    spacing_sq = min_spacing * min_spacing
    while len(placed) < n:
        if attempts_left <= 0:
            raise SpacingInfeasible(f"could not place {n} minutiae at spacing {min_spacing}")
        attempts_left -= 1
        x = rng.uniform(lo_x, hi_x)
        y = rng.uniform(lo_y, hi_y)
        if disk_r_sq is not None and (x - cx) ** 2 + (y - cy) ** 2 > disk_r_sq:
            continue
        if any((x - px) ** 2 + (y - py) ** 2 < spacing_sq for px, py in placed):
            continue
        placed.append((x, y))

    minutiae = tuple(
        Minutia(x=x, y=y,
                angle=rng.uniform(0.0, TWO_PI) % TWO_PI,
                kind=MinutiaKind(rng.randrange(2)),
                quality=rng.uniform(0.5, 1.0))
        for x, y in placed
    )
    return Template(width=width, height=height, minutiae=minutiae)


def _clamp(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


def perturb(t: Template, p: PerturbationParams, seed: int) -> Template:
    """Simulate a fresh capture of the same finger.

    Applies, in order: a global rotation/shift about the image center,
    per-minutia Gaussian position and angle noise, Bernoulli dropout (floored
    at DROPOUT_FLOOR survivors), then spurious insertions. Out-of-bounds
    positions are clamped back inside the image. Deterministic per seed;
    all-zero params return the input unchanged.
    """
    if p.is_identity():
        return t

    rng = random.Random(seed)
    cx, cy = t.width / 2.0, t.height / 2.0
    lo_x, hi_x = EDGE_MARGIN, t.width - EDGE_MARGIN
    lo_y, hi_y = EDGE_MARGIN, t.height - EDGE_MARGIN

    dtheta = rng.uniform(-p.global_rotation_max, p.global_rotation_max)
    dx = rng.uniform(-p.global_shift_max, p.global_shift_max)
    dy = rng.uniform(-p.global_shift_max, p.global_shift_max)
    cos_t, sin_t = math.cos(dtheta), math.sin(dtheta)
    apply_global = dtheta != 0.0 or dx != 0.0 or dy != 0.0

    moved: list[Minutia] = []
    for m in t.minutiae:
        x, y, a = m.x, m.y, m.angle
        if apply_global:
            rx, ry = x - cx, y - cy
            x = rx * cos_t - ry * sin_t + cx + dx
            y = rx * sin_t + ry * cos_t + cy + dy
            a = a + dtheta
        if p.pos_sigma > 0.0:
            x += rng.gauss(0.0, p.pos_sigma)
            y += rng.gauss(0.0, p.pos_sigma)
        if p.angle_sigma > 0.0:
            a += rng.gauss(0.0, p.angle_sigma)
        moved.append(Minutia(x=_clamp(x, lo_x, hi_x), y=_clamp(y, lo_y, hi_y),
                             angle=wrap_angle(a), kind=m.kind, quality=m.quality))

    drops = [rng.random() < p.dropout_prob for _ in moved]
    floor = min(DROPOUT_FLOOR, len(moved))
    if len(moved) - sum(drops) < floor:
        for i in range(len(drops)):  # un-drop lowest indices until the floor holds
            if drops[i]:
                drops[i] = False
                if len(moved) - sum(drops) >= floor:
                    break
    kept = [m for m, d in zip(moved, drops) if not d]

    for _ in range(p.spurious_count):
        kept.append(Minutia(x=rng.uniform(lo_x, hi_x), y=rng.uniform(lo_y, hi_y),
                            angle=rng.uniform(0.0, TWO_PI) % TWO_PI,
                            kind=MinutiaKind(rng.randrange(2)),
                            quality=rng.uniform(0.2, 1.0)))
    return Template(width=t.width, height=t.height, minutiae=tuple(kept))


def rigid_transform(t: Template, dtheta: float, dx: float, dy: float) -> Template:
    """Rotate about the image center by dtheta, then translate by (dx, dy).

    Minutia directions are rotated with the positions. Raises OutOfBounds if
    any minutia leaves the image (no clamping, unlike `perturb`).
    """
    cx, cy = t.width / 2.0, t.height / 2.0
    cos_t, sin_t = math.cos(dtheta), math.sin(dtheta)
    rotate = dtheta != 0.0

    out = []
    for m in t.minutiae:
        if rotate:
            rx, ry = m.x - cx, m.y - cy
            x = rx * cos_t - ry * sin_t + cx + dx
            y = rx * sin_t + ry * cos_t + cy + dy
            a = wrap_angle(m.angle + dtheta)
        else:
            x, y, a = m.x + dx, m.y + dy, m.angle
        if not (0.0 <= x < t.width and 0.0 <= y < t.height):
            raise OutOfBounds(f"minutia moved to ({x:.2f}, {y:.2f})")
        out.append(Minutia(x=x, y=y, angle=a, kind=m.kind, quality=m.quality))
    return Template(width=t.width, height=t.height, minutiae=tuple(out))


_ANGLE_UNIT = TWO_PI / 65536.0


def encode_template(t: Template) -> bytes:
    """Serialize to the .biot byte layout (see module docstring)."""
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, t.width, t.height, len(t.minutiae))]
    for m in t.minutiae:
        qx = min(t.width - 1, int(math.floor(m.x + 0.5)))
        qy = min(t.height - 1, int(math.floor(m.y + 0.5)))
        qa = int(math.floor(m.angle / _ANGLE_UNIT + 0.5)) % 65536
        qq = int(math.floor(m.quality * 255.0 + 0.5))
        parts.append(_MINUTIA.pack(qx, qy, qa, int(m.kind), qq))
    return b"".join(parts)


def decode_template(data: bytes) -> Template:
    """Parse .biot bytes; raises BadMagic / BadTemplateVersion / Truncated."""
    if len(data) < 4:
        raise Truncated("shorter than magic")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise Truncated("header incomplete")
    _, version, width, height, count = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise BadTemplateVersion(f"version {version:#x}")
    need = _HEADER.size + count * _MINUTIA.size
    if len(data) < need:
        raise Truncated(f"need {need} bytes, have {len(data)}")

    minutiae = []
    off = _HEADER.size
    for _ in range(count):
        qx, qy, qa, kind, qq = _MINUTIA.unpack_from(data, off)
        off += _MINUTIA.size
        minutiae.append(Minutia(x=float(qx), y=float(qy), angle=qa * _ANGLE_UNIT,
                                kind=MinutiaKind(kind), quality=qq / 255.0))
    return Template(width=width, height=height, minutiae=tuple(minutiae))
