"""Procedural labeled phantom images and their on-disk container.

Each sample is a textured background plus ``g`` disjoint elliptical regions
with group-distinct intensity bands, an integer label map, and optional
bright circular lesions (at most one per sample) for the identification
task.  Generation is bit-deterministic: sample ``i`` draws from a stream
seeded by ``(seed, i)``, so parallel and serial generation agree.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class SpecError(ValueError):
    """The requested phantom geometry cannot be produced."""


class FormatError(ValueError):
    """Malformed container bytes; message carries the byte offset."""


MAGIC = b"OWTD"
VERSION = 1
HEADER = struct.Struct("<4sIIHHBB")  # magic, version, count, H, W, g, pad


@dataclass
class PhantomSample:
    image: np.ndarray            # [H, W, 1] float32 in [0, 1]
    labels: np.ndarray           # [H, W] uint8 in {0..g}
    lesions: np.ndarray          # [g] bool, lesions[k] = lesion in group k+1

    def lesion_bits(self) -> int:
        bits = 0
        for k, flag in enumerate(self.lesions):
            if flag:
                bits |= 1 << k
        return bits


@dataclass
class PhantomSpec:
    height: int = 32
    width: int = 32
    groups: int = 3
    seed: int = 0
    count: int = 16
    background_intensity: float = 0.12
    group_intensities: tuple[float, ...] | None = None  # defaults to an even spread
    noise_amplitude: float = 0.04
    lesion_probability: float = 0.25
    lesion_intensity: float = 0.95
    min_region_area: int = 30
    max_region_area: int = 140
    lesion_min_area: int = 5
    grid_align: int = 1  # snap region boundaries to this cell size (1 = free-form)

    def __post_init__(self):
        if self.grid_align < 1 or self.height % self.grid_align or self.width % self.grid_align:
            raise SpecError(f"grid_align {self.grid_align} must divide the canvas")
        if self.groups < 1:
            raise SpecError("need at least one semantic group")
        if self.group_intensities is None:
            self.group_intensities = tuple(
                np.linspace(0.42, 0.84, self.groups).round(4).tolist())
        if len(self.group_intensities) != self.groups:
            raise SpecError(f"{len(self.group_intensities)} intensities for {self.groups} groups")
        if self.groups * self.min_region_area > 0.5 * self.height * self.width:
            raise SpecError(
                f"canvas {self.height}x{self.width} too small for {self.groups} regions "
                f"of >= {self.min_region_area} px")
        if self.min_region_area >= self.max_region_area:
            raise SpecError("min_region_area must be below max_region_area")


def _value_noise(rng: np.random.Generator, height: int, width: int, cell: int = 8) -> np.ndarray:
    """Smooth [-1, 1] field: coarse uniform grid, bilinearly upsampled."""
    gh, gw = height // cell + 2, width // cell + 2
    coarse = rng.uniform(-1.0, 1.0, size=(gh, gw))
    ys = np.arange(height) / cell
    xs = np.arange(width) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = coarse[np.ix_(y0, x0)]
    tr = coarse[np.ix_(y0, x0 + 1)]
    bl = coarse[np.ix_(y0 + 1, x0)]
    br = coarse[np.ix_(y0 + 1, x0 + 1)]
    top = tl * (1 - fx) + tr * fx
    bot = bl * (1 - fx) + br * fx
    return top * (1 - fy) + bot * fy


def _ellipse_mask(height: int, width: int, cy: float, cx: float,
                  a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    y = yy - cy
    x = xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = x * c + y * s
    v = y * c - x * s
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _snap_to_cells(mask: np.ndarray, align: int) -> np.ndarray:
    """Blob version of a mask: a cell joins iff at least half of it is covered."""
    if align == 1:
        return mask
    h, w = mask.shape
    cells = mask.reshape(h // align, align, w // align, align).mean(axis=(1, 3))
    blocky = cells >= 0.5
    return np.repeat(np.repeat(blocky, align, axis=0), align, axis=1)


def _place_regions(rng: np.random.Generator, spec: PhantomSpec) -> np.ndarray:
    """Labels map with g disjoint elliptical regions, each within the area band."""
    labels = np.zeros((spec.height, spec.width), dtype=np.uint8)
    occupied = np.zeros_like(labels, dtype=bool)
    # axis band implied by the area band (pi*a*b), clamped to fit the canvas
    r_lo = max(1.0, np.sqrt(spec.min_region_area / np.pi) * 0.85)
    r_hi = np.sqrt(spec.max_region_area / np.pi) * 1.15
    r_hi = min(r_hi, (min(spec.height, spec.width) - 2.5) / 2.0)
    if r_hi <= r_lo:
        r_hi = r_lo + 0.1
    for group in range(1, spec.groups + 1):
        placed = False
        shrink = 1.0
        free = np.argwhere(~occupied)
        for attempt in range(1200):
            if attempt and attempt % 60 == 0:
                shrink = max(shrink * 0.9, r_lo / r_hi)
            a = min(rng.uniform(r_lo, r_hi) * shrink, (spec.height - 2.5) / 2.0)
            b = min(rng.uniform(r_lo, r_hi) * shrink, (spec.width - 2.5) / 2.0)
            # anchor near a free pixel so crowded canvases still resolve
            fy, fx = free[rng.integers(len(free))]
            cy = float(np.clip(fy + rng.uniform(-1, 1), a + 1, spec.height - a - 1))
            cx = float(np.clip(fx + rng.uniform(-1, 1), b + 1, spec.width - b - 1))
            theta = rng.uniform(0, np.pi)
            mask = _snap_to_cells(
                _ellipse_mask(spec.height, spec.width, cy, cx, a, b, theta),
                spec.grid_align)
            area = int(mask.sum())
            if not (spec.min_region_area <= area <= spec.max_region_area):
                continue
            if (mask & occupied).any():
                continue
            labels[mask] = group
            occupied |= mask
            placed = True
            break
        if not placed:
            raise SpecError(
                f"could not place region {group} on a {spec.height}x{spec.width} canvas")
    return labels


def _place_lesion(rng: np.random.Generator, spec: PhantomSpec,
                  labels: np.ndarray, image: np.ndarray) -> np.ndarray:
    lesions = np.zeros(spec.groups, dtype=bool)
    if rng.random() >= spec.lesion_probability:
        return lesions
    group = int(rng.integers(1, spec.groups + 1))
    inside = np.argwhere(labels == group)
    for _ in range(60):
        cy, cx = inside[rng.integers(len(inside))]
        radius = rng.uniform(1.4, 2.4)
        mask = _ellipse_mask(spec.height, spec.width, cy, cx, radius, radius, 0.0)
        # strictly inside the region, and big enough to matter
        if not (labels[mask] == group).all():
            continue
        if int(mask.sum()) < spec.lesion_min_area:
            continue
        image[mask] = spec.lesion_intensity
        lesions[group - 1] = True
        break
    return lesions


def generate_one(spec: PhantomSpec, index: int) -> PhantomSample:
    rng = np.random.default_rng((spec.seed, index))
    labels = _place_regions(rng, spec)
    image = spec.background_intensity + spec.noise_amplitude * _value_noise(
        rng, spec.height, spec.width)
    for group in range(1, spec.groups + 1):
        field_k = _value_noise(rng, spec.height, spec.width, cell=4)
        region = labels == group
        image[region] = spec.group_intensities[group - 1] + spec.noise_amplitude * field_k[region]
    lesions = _place_lesion(rng, spec, labels, image)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[..., None]
    return PhantomSample(image=image, labels=labels, lesions=lesions)


def generate(spec: PhantomSpec) -> list[PhantomSample]:
    return [generate_one(spec, i) for i in range(spec.count)]


# ---------------------------------------------------------------------------
# OWTD v1 container


def write_owtd(samples: list[PhantomSample], path, groups: int | None = None) -> None:
    if not samples:
        raise FormatError("refusing to write an empty container")
    H, W, _ = samples[0].image.shape
    g = groups if groups is not None else int(samples[0].lesions.shape[0])
    if g > 8:
        raise FormatError(f"lesion bitfield holds at most 8 groups, got {g}")
    for i, s in enumerate(samples):
        if s.image.shape != (H, W, 1) or s.labels.shape != (H, W):
            raise FormatError(f"sample {i} has inhomogeneous shape")
        if s.labels.max(initial=0) > g:
            raise FormatError(f"sample {i} labels exceed group count {g}")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, len(samples), H, W, g, 0))
        for s in samples:
            fh.write(np.ascontiguousarray(s.image[..., 0], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())
            fh.write(struct.pack("<B", s.lesion_bits()))


def read_owtd(path) -> tuple[list[PhantomSample], int]:
    """Read a container; returns (samples, group count)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER.size:
        raise FormatError(f"truncated header: {len(blob)} bytes at offset 0")
    magic, version, count, H, W, g, _pad = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    per_sample = H * W * 4 + H * W + 1
    expected = HEADER.size + count * per_sample
    if len(blob) != expected:
        raise FormatError(
            f"size mismatch at offset {min(len(blob), expected)}: "
            f"have {len(blob)} bytes, expected {expected}")
    samples = []
    offset = HEADER.size
    for _ in range(count):
        image = np.frombuffer(blob, dtype="<f4", count=H * W, offset=offset)
        offset += H * W * 4
        labels = np.frombuffer(blob, dtype=np.uint8, count=H * W, offset=offset)
        offset += H * W
        bits = blob[offset]
        offset += 1
        lesions = np.array([(bits >> k) & 1 == 1 for k in range(g)], dtype=bool)
        samples.append(PhantomSample(
            image=image.reshape(H, W)[..., None].copy(),
            labels=labels.reshape(H, W).copy(),
            lesions=lesions,
        ))
    return samples, g
