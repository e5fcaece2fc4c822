"""Partially labeled patch datasets: manifests, patient-level splits, image pool."""
from __future__ import annotations

import enum
import hashlib
import logging
import os
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

from .taxonomy import HUMAN, RODENT, SPECIES, TAXONOMY, Taxonomy

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
COLUMNS = ("image_path", "mask_path", "task_code", "patient_id", "species")


class DataError(ValueError):
    pass


class InvalidSampleError(DataError):
    pass


class MissingDomainError(DataError):
    pass


class Approach(str, enum.Enum):
    H2H = "H2H"
    R2H = "R2H"
    RH2H = "RH2H"
    RH2H_T = "RH2H_T"


@dataclass
class PatchSample:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) bool
    task: int
    patient_id: str
    species: str
    source_wsi: str = ""


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    mask_path: str
    task_code: str
    patient_id: str
    species: str
    source_wsi: str = ""


@dataclass
class DatasetManifest:
    entries: list
    taxonomy_fingerprint: str = TAXONOMY.fingerprint
    norm_mean: tuple | None = None  # per-channel, on the 0..1 scale
    norm_std: tuple | None = None
    schema_version: int = SCHEMA_VERSION

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def tasks(self) -> set:
        return {e.task_code for e in self.entries}

    @property
    def patients(self) -> set:
        return {e.patient_id for e in self.entries}

    @property
    def fingerprint(self) -> str:
        """Content digest independent of where the files live."""
        h = hashlib.sha256(self.taxonomy_fingerprint.encode())
        for e in self.entries:
            row = (os.path.basename(e.image_path), os.path.basename(e.mask_path), e.task_code, e.patient_id, e.species)
            h.update("\t".join(row).encode() + b"\n")
        return h.hexdigest()[:16]

    def where(self, *, tasks=None, species=None, patients=None) -> "DatasetManifest":
        keep = [
            e for e in self.entries
            if (tasks is None or e.task_code in tasks)
            and (species is None or e.species == species)
            and (patients is None or e.patient_id in patients)
        ]
        return replace(self, entries=keep)

    def class_counts(self) -> Counter:
        return Counter((e.species, e.task_code) for e in self.entries)

    def check_taxonomy(self, taxonomy: Taxonomy = TAXONOMY) -> None:
        if self.taxonomy_fingerprint != taxonomy.fingerprint:
            raise DataError(
                f"manifest built for taxonomy {self.taxonomy_fingerprint}, "
                f"live registry is {taxonomy.fingerprint}"
            )

    def validate(self, taxonomy: Taxonomy = TAXONOMY, check_files: bool = True) -> None:
        self.check_taxonomy(taxonomy)
        for e in self.entries:
            cls = taxonomy.lookup(e.task_code)
            if not e.patient_id:
                raise DataError(f"entry {e.image_path} has no patient id")
            if e.species not in cls.species:
                raise DataError(f"{e.image_path}: class {cls.code} is not annotated in {e.species} data")
            if check_files:
                if not os.path.exists(e.mask_path):
                    raise DataError(f"mask file missing: {e.mask_path}")
                load_mask(e.mask_path)

    def to_text(self) -> str:
        lines = [f"# schema_version\t{self.schema_version}",
                 f"# taxonomy_fingerprint\t{self.taxonomy_fingerprint}"]
        if self.norm_mean is not None:
            lines.append("# norm_mean\t" + ",".join(f"{v:.8f}" for v in self.norm_mean))
            lines.append("# norm_std\t" + ",".join(f"{v:.8f}" for v in self.norm_std))
        lines.append("\t".join(COLUMNS))
        for e in self.entries:
            lines.append("\t".join((e.image_path, e.mask_path, e.task_code, e.patient_id, e.species)))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        """Write the manifest; entry paths are stored relative to its directory."""
        base = os.path.dirname(os.path.abspath(path))
        rel = replace(self, entries=[
            replace(e, image_path=os.path.relpath(e.image_path, base), mask_path=os.path.relpath(e.mask_path, base))
            for e in self.entries
        ])
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            fh.write(rel.to_text())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        base = os.path.dirname(os.path.abspath(path))
        header, entries = {}, []
        with open(path) as fh:
            for raw in fh:
                line = raw.rstrip("\n")
                if not line:
                    continue
                if line.startswith("#"):
                    key, _, value = line[1:].strip().partition("\t")
                    header[key] = value
                    continue
                fields = line.split("\t")
                if tuple(fields) == COLUMNS:
                    continue
                if len(fields) != len(COLUMNS):
                    raise DataError(f"{path}: expected {len(COLUMNS)} tab-separated fields, got {line!r}")
                img, mask, task, patient, species = fields
                entries.append(ManifestEntry(os.path.join(base, img), os.path.join(base, mask), task, patient,
                                             species, _source_of(img)))
        version = int(header.get("schema_version", SCHEMA_VERSION))
        if version != SCHEMA_VERSION:
            raise DataError(f"{path}: unsupported manifest schema {version}")
        parse = lambda k: tuple(float(v) for v in header[k].split(",")) if k in header else None
        return cls(entries, header.get("taxonomy_fingerprint", ""), parse("norm_mean"), parse("norm_std"), version)


def _source_of(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


# ---------------------------------------------------------------- rasters

def load_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except Exception as exc:  # PIL raises a zoo of types for bad files
        raise DataError(f"cannot decode mask {path}: {exc}") from exc
    return arr > 0


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[:2] == (size, size):
        return img
    return np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask
    im = Image.fromarray(mask.astype(np.uint8) * 255).resize((size, size), Image.NEAREST)
    return np.asarray(im) > 0


def load_sample(entry: ManifestEntry, size: int = 512, taxonomy: Taxonomy = TAXONOMY) -> PatchSample:
    image = load_image(entry.image_path)
    mask = load_mask(entry.mask_path)
    if image.shape[:2] != mask.shape:
        raise DataError(f"{entry.mask_path}: mask {mask.shape} does not match image {image.shape[:2]}")
    return PatchSample(resize_image(image, size), resize_mask(mask, size), taxonomy.index_of(entry.task_code),
                       entry.patient_id, entry.species, entry.source_wsi)


def load_samples(manifest: DatasetManifest, size: int = 512, taxonomy: Taxonomy = TAXONOMY) -> list[PatchSample]:
    return [load_sample(e, size, taxonomy) for e in manifest.entries]


def channel_stats(manifest: DatasetManifest) -> tuple[tuple, tuple]:
    """Per-channel mean/std over all manifest images, on the 0..1 scale."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for path in sorted({e.image_path for e in manifest.entries}):
        img = load_image(path).reshape(-1, 3).astype(np.float64) / 255.0
        total += img.sum(0)
        total_sq += (img ** 2).sum(0)
        count += len(img)
    if count == 0:
        raise DataError("cannot compute channel statistics of an empty manifest")
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean ** 2, 1e-12))
    return tuple(mean.tolist()), tuple(std.tolist())


def with_stats(manifest: DatasetManifest) -> DatasetManifest:
    mean, std = channel_stats(manifest)
    return replace(manifest, norm_mean=mean, norm_std=std)


# ---------------------------------------------------------------- ingestion

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg")


@dataclass
class IngestResult:
    manifest: DatasetManifest
    warnings: list = field(default_factory=list)


def ingest(root, taxonomy: Taxonomy = TAXONOMY) -> IngestResult:
    """Build a manifest from ``<root>/<species>/<task>/<patient>/<sample>.png``.

    Images without a sibling ``<sample>_mask.png`` are excluded with a
    warning; masks that fail to decode abort the ingest.
    """
    if not os.path.isdir(root):
        raise DataError(f"{root} is not a directory")
    entries, warnings = [], []
    for species in sorted(os.listdir(root)):
        sp_dir = os.path.join(root, species)
        if not os.path.isdir(sp_dir):
            continue
        if species not in SPECIES:
            warnings.append(f"skipping unknown species directory {sp_dir}")
            continue
        for task in sorted(os.listdir(sp_dir)):
            task_dir = os.path.join(sp_dir, task)
            if not os.path.isdir(task_dir):
                continue
            code = taxonomy.lookup(task).code
            for patient in sorted(os.listdir(task_dir)):
                pdir = os.path.join(task_dir, patient)
                if not os.path.isdir(pdir):
                    continue
                for name in sorted(os.listdir(pdir)):
                    stem, ext = os.path.splitext(name)
                    if ext.lower() not in IMAGE_SUFFIXES or stem.endswith("_mask"):
                        continue
                    img = os.path.join(pdir, name)
                    mask = os.path.join(pdir, f"{stem}_mask.png")
                    if not os.path.exists(mask):
                        warnings.append(f"orphan image without mask: {img}")
                        continue
                    load_mask(mask)
                    entries.append(ManifestEntry(img, mask, code, patient, species, stem))
    if not entries:
        raise DataError(f"no samples found under {root}")
    for w in warnings:
        log.warning(w)
    manifest = DatasetManifest(entries, taxonomy.fingerprint)
    manifest.validate(taxonomy, check_files=False)
    return IngestResult(manifest, warnings)


def summary_table(manifest: DatasetManifest, taxonomy: Taxonomy = TAXONOMY) -> str:
    """Per-species class counts laid out like the dataset distribution table."""
    counts = manifest.class_counts()
    codes = [c.code for c in taxonomy]
    rows = [["", *codes, "Total"]]
    for sp in SPECIES:
        vals = [counts.get((sp, c), 0) for c in codes]
        rows.append([sp.capitalize(), *[str(v) if v else "-" for v in vals], str(sum(vals))])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows)


# ---------------------------------------------------------------- splitting

@dataclass
class SplitAssignment:
    train: frozenset
    val: frozenset
    test: frozenset
    ratios: tuple = (0.6, 0.1, 0.3)
    class_fractions: dict = field(default_factory=dict)  # task -> (train, val, test)
    warnings: list = field(default_factory=list)

    def apply(self, manifest: DatasetManifest) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
        return tuple(manifest.where(patients=s) for s in (self.train, self.val, self.test))


def _assign(order: Sequence[str], weight: dict, cuts: tuple) -> list[int]:
    """Cut a patient ordering at cumulative sample-share midpoints."""
    total = sum(weight.values())
    out, acc = [], 0.0
    for p in order:
        mid = (acc + weight[p] / 2) / total
        acc += weight[p]
        out.append(0 if mid < cuts[0] else 1 if mid < cuts[1] else 2)
    return out


def split_by_patient(manifest: DatasetManifest, ratios=(0.6, 0.1, 0.3), seed: int = 0,
                     candidates: int = 64) -> SplitAssignment:
    """Patient-disjoint train/val/test split stratified over classes.

    Several seeded patient orderings are cut at the target cumulative
    shares; the one whose worst per-class deviation from ``ratios`` is
    smallest wins (earliest on ties).
    """
    if not manifest.entries:
        raise ValueError("cannot split an empty manifest")
    if len(ratios) != 3 or abs(sum(ratios) - 1) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three nonnegative fractions summing to 1, got {ratios}")
    if any(not e.patient_id for e in manifest.entries):
        raise ValueError("every entry needs a patient id")

    patients = sorted(manifest.patients)
    weight = Counter(e.patient_id for e in manifest.entries)
    per_class: dict = {}
    for e in manifest.entries:
        per_class.setdefault(e.task_code, Counter())[e.patient_id] += 1
    cuts = (ratios[0], ratios[0] + ratios[1])
    rng = np.random.default_rng(seed)

    best = None
    for _ in range(max(1, candidates)):
        order = [patients[i] for i in rng.permutation(len(patients))]
        where = dict(zip(order, _assign(order, weight, cuts)))
        fracs = {}
        worst = 0.0
        for task, cnt in per_class.items():
            n = sum(cnt.values())
            f = [sum(v for p, v in cnt.items() if where[p] == k) / n for k in range(3)]
            fracs[task] = tuple(f)
            worst = max(worst, *(abs(a - b) for a, b in zip(f, ratios)))
        if best is None or worst < best[0]:
            best = (worst, where, fracs)

    _, where, fracs = best
    warnings = [f"class {task} comes from a single patient; split cannot stratify it"
                for task, cnt in sorted(per_class.items()) if len(cnt) == 1]
    for w in warnings:
        log.warning(w)
    groups = [frozenset(p for p, k in where.items() if k == i) for i in range(3)]
    return SplitAssignment(*groups, tuple(ratios), dict(sorted(fracs.items())), warnings)


# ---------------------------------------------------------------- batching

def interleave_by_class(samples: Sequence, rng: np.random.Generator, key=lambda s: s.task) -> list:
    """Round-robin over per-class shuffled queues."""
    queues: dict = {}
    for s in samples:
        queues.setdefault(key(s), []).append(s)
    order = []
    for k in sorted(queues):
        q = queues[k]
        order.append(deque(q[i] for i in rng.permutation(len(q))))
    stream = []
    while order:
        for q in list(order):
            stream.append(q.popleft())
            if not q:
                order.remove(q)
    return stream


class ImagePool:
    """Buffer that releases a random batch whenever it holds more than ``batch_size`` items."""

    def __init__(self, capacity: int, batch_size: int = 4, seed: int = 0, drop_last: bool = False,
                 tasks: Iterable[int] | None = None):
        if capacity < batch_size + 1:
            raise ValueError(f"pool capacity {capacity} must be at least batch_size + 1 = {batch_size + 1}")
        self.capacity = capacity
        self.batch_size = batch_size
        self.drop_last = drop_last
        self.tasks = None if tasks is None else frozenset(tasks)
        self.rng = np.random.default_rng(seed)
        self.buffer: list = []
        self.max_occupancy = 0

    def __len__(self):
        return len(self.buffer)

    def push(self, sample):
        task = getattr(sample, "task", None)
        if self.tasks is not None and task not in self.tasks:
            raise InvalidSampleError(f"sample task {task} is outside the active classes {sorted(self.tasks)}")
        self.buffer.append(sample)
        self.max_occupancy = max(self.max_occupancy, len(self.buffer))
        if len(self.buffer) > self.batch_size:
            pick = sorted(self.rng.choice(len(self.buffer), self.batch_size, replace=False).tolist())
            batch = [self.buffer[i] for i in pick]
            for i in reversed(pick):
                del self.buffer[i]
            return batch
        return None

    def flush(self):
        rest, self.buffer = self.buffer, []
        if rest and not self.drop_last:
            return [rest[i] for i in self.rng.permutation(len(rest))]
        return None

    def feed(self, stream: Iterable) -> Iterator[list]:
        for sample in stream:
            batch = self.push(sample)
            if batch is not None:
                yield batch
        last = self.flush()
        if last is not None:
            yield last


def pool_feed(pool: ImagePool, stream: Iterable) -> list[list]:
    return list(pool.feed(stream))


# ---------------------------------------------------------------- transfer regimes

def compose_training_set(manifests: dict, approach, taxonomy: Taxonomy = TAXONOMY) -> DatasetManifest:
    """Training manifest for a transfer approach from per-species training splits.

    ``manifests`` maps species ("rodent"/"human") to that domain's
    training-split manifest.
    """
    approach = Approach(approach)
    need = {Approach.H2H: (HUMAN,), Approach.R2H: (RODENT,)}.get(approach, (RODENT, HUMAN))
    missing = [sp for sp in need if sp not in manifests or manifests[sp] is None]
    if missing:
        raise MissingDomainError(f"{approach.value} needs {' and '.join(missing)} training data")
    lesions = {c.code for c in taxonomy.lesions()}
    tissue = {c.code for c in taxonomy.tissue()}
    entries = []
    for sp in need:
        m = manifests[sp]
        m.check_taxonomy(taxonomy)
        allowed = lesions | tissue if approach is Approach.RH2H_T else lesions
        entries += [e for e in m.entries if e.task_code in allowed and e.species == sp]
    return DatasetManifest(entries, taxonomy.fingerprint)
