"""Synthetic glomerulus phantoms with ground-truth masks for every class.

Geometry: a Bowman's capsule ellipse, a tuft ellipse (the capsule scaled
down about its center) and a mesangium ellipse inside the tuft. Cells and
lesions are disc-shaped blobs dropped into anatomically plausible places
and kept apart so that no blob hides another in the rendering.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from PIL import Image

from .taxonomy import (CONTAINS, OVERLAPS, TAXONOMY, Taxonomy,
                       UnknownClassError)


class InvalidSpecError(ValueError):
    pass


# placement regions for blobs
BOWMAN_SPACE = "bowman_space"  # inside capsule, outside tuft
CAPSULE_EDGE = "capsule_edge"
TUFT = "tuft"  # inside tuft, outside mesangium
TUFT_EDGE = "tuft_edge"
MESANGIUM = "mesangium"

BACKGROUND_RGB = (236, 228, 236)
WALL_RGB = (170, 110, 150)
GS_WALL_RGB = (60, 40, 90)
BOWMAN_RGB = (222, 196, 214)
TUFT_RGB = (196, 120, 168)
MES_RGB = (150, 70, 140)

BLOB_RGB = {
    "Pod": (90, 60, 200),
    "Mec": (40, 20, 90),
    "AH": (200, 160, 40),
    "CD": (240, 110, 60),
    "HS": (255, 240, 120),
    "ME": (110, 190, 200),
    "ML": (20, 120, 160),
    "MA": (200, 30, 40),
    "NS": (60, 150, 80),
    "SS": (110, 110, 110),
}


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ay: float  # semi-axis along the (rotated) vertical direction
    ax: float
    rotation: float = 0.0  # radians

    def scaled(self, s: float) -> "Ellipse":
        return replace(self, ay=self.ay * s, ax=self.ax * s)

    def level(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        """<= 1 inside the ellipse."""
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        dy, dx = yy - self.cy, xx - self.cx
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / self.ax) ** 2 + (v / self.ay) ** 2

    def mask(self, yy, xx) -> np.ndarray:
        return self.level(yy, xx) <= 1.0


@dataclass(frozen=True)
class BlobParams:
    count: int
    radius: tuple  # (min, max) as fractions of the canvas side
    region: str


def default_lesion_params() -> dict:
    r = (0.045, 0.065)
    return {
        "AH": BlobParams(1, r, BOWMAN_SPACE),
        "CD": BlobParams(1, r, CAPSULE_EDGE),
        "HS": BlobParams(1, r, TUFT),
        "ME": BlobParams(1, r, MESANGIUM),
        "ML": BlobParams(1, r, TUFT),
        "MA": BlobParams(1, r, TUFT),
        "NS": BlobParams(1, r, MESANGIUM),
        "SS": BlobParams(1, r, TUFT_EDGE),
    }


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    canvas: int = 512
    capsule: Ellipse = Ellipse(256.0, 256.0, 190.0, 170.0, 0.3)
    tuft_scale: float = 0.72
    mes_scale: float = 0.5  # relative to the tuft
    cell_counts: dict = field(default_factory=lambda: {"Pod": 3, "Mec": 2})
    cell_radius: float = 0.035
    lesion_params: dict = field(default_factory=default_lesion_params)
    gs_enabled: bool = True
    gs_margin: float = 0.015  # capsule wall thickness as a canvas fraction
    noise_sigma: float = 4.0
    color_shift: tuple = (0.0, 0.0, 0.0)


@dataclass
class PhantomSample:
    image: np.ndarray  # (H, W, 3) uint8
    masks: dict  # code -> (H, W) bool
    spec: PhantomSpec


def random_phantom_spec(seed: int, canvas: int = 512, **overrides) -> PhantomSpec:
    """Draw capsule placement, size and orientation from ``seed``."""
    rng = np.random.default_rng([seed, 0x9A7])
    half = canvas / 2
    ay = rng.uniform(0.37, 0.44) * canvas
    ax = rng.uniform(0.35, 0.42) * canvas
    slack = half - max(ay, ax) - 0.02 * canvas
    cy, cx = half + rng.uniform(-slack, slack, size=2) * 0.8
    capsule = Ellipse(float(cy), float(cx), float(ay), float(ax), float(rng.uniform(0, np.pi)))
    kw = dict(seed=seed, canvas=canvas, capsule=capsule,
              tuft_scale=float(rng.uniform(0.68, 0.76)), mes_scale=float(rng.uniform(0.58, 0.66)))
    kw.update(overrides)
    return PhantomSpec(**kw)


def _validate(spec: PhantomSpec) -> None:
    if not 0 < spec.tuft_scale < 1 or not 0 < spec.mes_scale < 1:
        raise InvalidSpecError("tuft_scale and mes_scale must lie in (0, 1)")
    if spec.canvas < 16:
        raise InvalidSpecError(f"canvas {spec.canvas} too small")
    cap = spec.capsule
    if cap.ax <= 0 or cap.ay <= 0:
        raise InvalidSpecError("capsule axes must be positive")
    reach = max(cap.ax, cap.ay)
    if (cap.cy - reach < 0 or cap.cx - reach < 0
            or cap.cy + reach > spec.canvas or cap.cx + reach > spec.canvas):
        raise InvalidSpecError(f"capsule {cap} does not fit inside a {spec.canvas}x{spec.canvas} canvas")
    counts = list(spec.cell_counts.values()) + [p.count for p in spec.lesion_params.values()]
    if any(c < 0 for c in counts):
        raise InvalidSpecError("blob counts must be >= 0")
    unknown = (set(spec.cell_counts) | set(spec.lesion_params)) - set(BLOB_RGB)
    if unknown:
        raise InvalidSpecError(f"no blob rendering for {sorted(unknown)}")


def _place_blobs(spec: PhantomSpec, rng: np.random.Generator, regions: dict, yy, xx):
    """Return [(code, cy, cx, r)] with pairwise-disjoint discs."""
    canvas = spec.canvas
    jobs = []
    for code, n in spec.cell_counts.items():
        region = TUFT if code == "Pod" else MESANGIUM
        jobs += [(code, region, (spec.cell_radius, spec.cell_radius))] * n
    for code, p in spec.lesion_params.items():
        jobs += [(code, p.region, p.radius)] * p.count
    gap = max(1.5, 0.01 * canvas)
    pools = {}
    for _, region, _ in jobs:
        pools[region] = np.argwhere(regions[region])
        if len(pools[region]) == 0:
            raise InvalidSpecError(f"placement region {region} is empty")
    for _ in range(50):
        placed = []
        for code, region, (rmin, rmax) in jobs:
            candidates = pools[region]
            for _ in range(200):
                r = max(1.5, rng.uniform(rmin, rmax) * canvas)
                cy, cx = candidates[rng.integers(len(candidates))]
                if all(np.hypot(cy - py, cx - px) > r + pr + gap for _, py, px, pr in placed):
                    placed.append((code, float(cy), float(cx), float(r)))
                    break
            else:
                break
        else:
            return placed
    raise InvalidSpecError(f"could not place a {code} blob without overlap")


def generate_phantom(spec: PhantomSpec, taxonomy: Taxonomy = TAXONOMY) -> PhantomSample:
    _validate(spec)
    n = spec.canvas
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)

    cap_e = spec.capsule
    tuft_e = cap_e.scaled(spec.tuft_scale)
    mes_e = tuft_e.scaled(spec.mes_scale)
    cap, tuft, mes = cap_e.mask(yy, xx), tuft_e.mask(yy, xx), mes_e.mask(yy, xx)
    tuft &= cap
    mes &= tuft

    margin = max(1.0, spec.gs_margin * n)
    wall_e = replace(cap_e, ay=cap_e.ay - margin, ax=cap_e.ax - margin)
    inner = wall_e.mask(yy, xx) & cap
    wall = cap & ~inner

    edge_band = lambda e, w: (np.abs(np.sqrt(e.level(yy, xx)) - 1.0) * min(e.ax, e.ay) <= w)
    regions = {
        BOWMAN_SPACE: inner & ~tuft_e.scaled(1.15).mask(yy, xx),
        CAPSULE_EDGE: edge_band(cap_e, margin) & cap,
        TUFT: tuft & ~mes_e.scaled(1.1).mask(yy, xx) & ~edge_band(tuft_e, 0.04 * n),
        TUFT_EDGE: edge_band(tuft_e, 1.0) & inner,
        MESANGIUM: mes_e.scaled(0.85).mask(yy, xx),
    }

    masks = {c.code: np.zeros((n, n), dtype=bool) for c in taxonomy}
    masks["Cap"], masks["Tuft"], masks["Mes"] = cap, tuft, mes
    if spec.gs_enabled:
        masks["GS"] = inner.copy()
        if inner.sum() < 0.9 * cap.sum():
            raise InvalidSpecError("capsule too small for its wall: sclerosis mask would cover < 90% of it")

    img = np.empty((n, n, 3), dtype=np.float64)
    img[:] = BACKGROUND_RGB
    img[cap] = BOWMAN_RGB
    img[tuft] = TUFT_RGB
    img[mes] = MES_RGB
    img[wall] = GS_WALL_RGB if spec.gs_enabled else WALL_RGB

    for code, cy, cx, r in _place_blobs(spec, rng, regions, yy, xx):
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        masks[code] |= disc
        img[disc] = BLOB_RGB[code]

    img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img += np.asarray(spec.color_shift, dtype=np.float64)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return PhantomSample(image, masks, spec)


def check_hierarchy(masks: dict, taxonomy: Taxonomy = TAXONOMY, overlap_min: float = 0.9) -> list[str]:
    """Names of violated relations (empty when all hold).

    ``overlaps`` relations are checked only when the parent mask is present:
    the parent must cover at least ``overlap_min`` of the child.
    """
    bad = []
    for rel in taxonomy.relations:
        p, c = masks[rel.parent], masks[rel.child]
        if rel.relation == CONTAINS:
            if np.any(c & ~p):
                bad.append(f"{rel.parent} contains {rel.child}")
        elif rel.relation == OVERLAPS and p.any():
            if c.sum() == 0 or (p & c).sum() / c.sum() < overlap_min:
                bad.append(f"{rel.parent} overlaps {rel.child}")
    return bad


def class_contrast(sample: PhantomSample) -> dict:
    """Mean-intensity gap between each nonempty class region and the background."""
    gray = sample.image.astype(np.float64).mean(axis=2)
    background = ~sample.masks["Cap"]
    for m in sample.masks.values():
        background &= ~m
    bg = gray[background].mean()
    return {code: abs(gray[m].mean() - bg) for code, m in sample.masks.items() if m.any()}


def oracle_dice(mask_a, mask_b) -> float:
    """Dice by literal pixel counting; 1.0 when both masks are empty."""
    a = np.asarray(mask_a)
    b = np.asarray(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = size_a = size_b = 0
    for va, vb in zip(a.ravel().tolist(), b.ravel().tolist()):
        if va:
            size_a += 1
        if vb:
            size_b += 1
        if va and vb:
            inter += 1
    if size_a + size_b == 0:
        return 1.0
    return 2 * inter / (size_a + size_b)


def emit_partial_dataset(specs: Sequence[PhantomSpec], classes: Sequence[str], patients: int,
                         out_dir, species: str | None = None, every_class: bool = False,
                         prefix: str = "ph", patient_prefix: str = "P", taxonomy: Taxonomy = TAXONOMY):
    """Render phantoms to the on-disk patch layout, one class mask per sample.

    Tasks cycle through ``classes`` in round-robin order, one per spec; with
    ``every_class`` each spec instead yields one sample per class. Patients
    are assigned round-robin over specs. ``species=None`` files each class
    under rodent when the class exists there, otherwise human.
    """
    from .datamodel import DatasetManifest, ManifestEntry, save_mask

    if not classes:
        raise ValueError("classes must be nonempty")
    if patients < 3:
        raise ValueError(f"patients must be >= 3 for a 6:1:3 patient split, got {patients}")
    resolved = [taxonomy.lookup(c) for c in classes]
    for c in resolved:
        if species is not None and species not in c.species:
            raise UnknownClassError(f"class {c.code} is not annotated in {species} data")

    entries = []
    k = 0
    for i, spec in enumerate(specs):
        sample = generate_phantom(spec, taxonomy)
        patient = f"{patient_prefix}{i % patients:03d}"
        picks = resolved if every_class else [resolved[i % len(resolved)]]
        for cls in picks:
            sp = species or ("rodent" if "rodent" in cls.species else "human")
            d = os.path.join(out_dir, sp, cls.code, patient)
            os.makedirs(d, exist_ok=True)
            name = f"{prefix}{i:04d}_{k:05d}"
            img_path = os.path.join(d, f"{name}.png")
            mask_path = os.path.join(d, f"{name}_mask.png")
            Image.fromarray(sample.image).save(img_path)
            save_mask(mask_path, sample.masks[cls.code])
            entries.append(ManifestEntry(img_path, mask_path, cls.code, patient, sp, f"{prefix}{i:04d}"))
            k += 1
    manifest = DatasetManifest(entries, taxonomy.fingerprint)
    manifest.validate(taxonomy, check_files=False)
    return manifest


def domain_color_shift(seed: int, magnitude: tuple = (35.0, 60.0)) -> tuple:
    """Seeded per-channel intensity offset emulating a stain/scanner gap between species."""
    rng = np.random.default_rng([seed, 0xD0])
    signs = rng.choice([-1.0, 1.0], size=3)
    return tuple(float(v) for v in signs * rng.uniform(*magnitude, size=3))


def make_transfer_domains(out_dir, seed: int = 0, canvas: int = 64, rodent_counts=(40, 8, 16),
                          human_counts=(8, 6, 20), taxonomy: Taxonomy = TAXONOMY) -> dict:
    """Rodent and colour-shifted human lesion datasets with train/val/test splits.

    Counts are (train, val, test) samples; each split draws its own
    phantoms and its own patients. Returns {species: DomainData}.
    """
    from .evaluation import DomainData

    shift = domain_color_shift(seed)
    domains = {}
    for d, (species, counts, color) in enumerate((("rodent", rodent_counts, (0.0, 0.0, 0.0)),
                                                   ("human", human_counts, shift))):
        lesions = [c.code for c in taxonomy.lesions() if species in c.species]
        parts = []
        for k, (split, n) in enumerate(zip(("train", "val", "test"), counts)):
            base = 100_000 * (seed + 1) + 10_000 * (2 * d + 1) + 1_000 * k
            specs = [random_phantom_spec(base + i, canvas, color_shift=color) for i in range(n)]
            tag = f"{species[0]}{split[:2]}"
            parts.append(emit_partial_dataset(specs, lesions, max(3, n // 2), os.path.join(out_dir, split),
                                              species=species, prefix=tag, patient_prefix=f"{tag}P",
                                              taxonomy=taxonomy) if n else None)
        domains[species] = DomainData(*parts)
    return domains
