"""Dice scoring, per-class reports and the rodent-to-human transfer protocol."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .datamodel import Approach, DataError, DatasetManifest, compose_training_set, load_samples
from .taxonomy import HUMAN, RODENT, TAXONOMY, Taxonomy

log = logging.getLogger(__name__)

HOLISTIC = "holistic"
RODENT_SUPERVISED = "rodent_supervised"
REPORT_KINDS = tuple(a.value for a in Approach) + (HOLISTIC, RODENT_SUPERVISED)

# lesion columns of the rodent-supervised table
RODENT_LESION_COLUMNS = ("AH", "CD", "GS", "HS", "ML", "MA", "NS", "SS")


class MissingClassError(DataError):
    pass


class SegmentationBackend(Protocol):
    """Anything that turns an image and task indices into binary masks."""

    input_size: int

    def predict(self, image: np.ndarray, tasks: Sequence[int]) -> np.ndarray: ...

    def checkpoint_id(self) -> str: ...


def dice_score(pred_mask, gt_mask) -> float:
    """2|A∩B| / (|A| + |B|); two empty masks score 1.0."""
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2 * int(np.count_nonzero(a & b)) / denom


@dataclass
class EvalReport:
    rows: dict  # class code -> Dice in percent, taxonomy order
    approach: str
    counts: dict = field(default_factory=dict)  # class code -> scored samples
    metadata: dict = field(default_factory=dict)

    @property
    def average(self) -> float:
        return float(np.mean(list(self.rows.values()))) if self.rows else float("nan")

    def table(self) -> str:
        """Aligned text table, one decimal place."""
        header = ["Approach", *self.rows, "Average"]
        values = [self.approach, *(f"{v:.1f}" for v in self.rows.values()), f"{self.average:.1f}"]
        widths = [max(len(h), len(v)) for h, v in zip(header, values)]
        fmt = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return fmt(header) + "\n" + fmt(values) + "\n"

    def to_tsv(self) -> str:
        lines = [f"# {k}\t{v}" for k, v in sorted(self.metadata.items())]
        lines.append("approach\tclass\tdice_percent\tn_samples")
        for code, v in self.rows.items():
            lines.append(f"{self.approach}\t{code}\t{v!r}\t{self.counts.get(code, 0)}")
        lines.append(f"{self.approach}\tAverage\t{self.average!r}\t{sum(self.counts.values())}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "EvalReport":
        meta, rows, counts, approach = {}, {}, {}, None
        for line in text.splitlines():
            if line.startswith("# "):
                k, _, v = line[2:].partition("\t")
                meta[k] = v
                continue
            parts = line.split("\t")
            if parts[0] == "approach" or len(parts) != 4:
                continue
            approach = parts[0]
            if parts[1] != "Average":
                rows[parts[1]] = float(parts[2])
                counts[parts[1]] = int(parts[3])
        return cls(rows, approach, counts, meta)

    def filename(self, ext: str = "tsv") -> str:
        ckpt = self.metadata.get("checkpoint_id", "na")
        data = self.metadata.get("dataset_fingerprint", "na")
        return f"report_{self.approach}_{ckpt}_{data}.{ext}"

    def save(self, out_dir) -> tuple[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        tsv = os.path.join(out_dir, self.filename("tsv"))
        txt = os.path.join(out_dir, self.filename("txt"))
        with open(tsv, "w") as fh:
            fh.write(self.to_tsv())
        with open(txt, "w") as fh:
            fh.write(self.table())
        return tsv, txt


def score_samples(backend: SegmentationBackend, samples, include_empty: bool = False):
    """Per-class lists of per-sample Dice, plus counts of skipped empty-truth samples."""
    scores: dict = {}
    skipped: dict = {}
    for s in samples:
        if not s.mask.any() and not include_empty:
            skipped[s.task] = skipped.get(s.task, 0) + 1
            continue
        pred = backend.predict(s.image, [s.task])[0]
        scores.setdefault(s.task, []).append(dice_score(pred, s.mask))
    return scores, skipped


def evaluate(backend: SegmentationBackend, manifest: DatasetManifest, classes: Sequence[str] | None = None,
             approach: str = HOLISTIC, include_empty: bool = False, taxonomy: Taxonomy = TAXONOMY,
             samples=None) -> EvalReport:
    """Score every sample on its own task and average per class.

    Per-class Dice is the mean of per-sample Dice; the report average is the
    unweighted mean of the class rows. Samples whose ground truth is empty
    are skipped unless ``include_empty``.
    """
    manifest.check_taxonomy(taxonomy)
    codes = [taxonomy.lookup(c).code for c in classes] if classes is not None else None
    present = manifest.tasks
    if codes is None:
        codes = [c.code for c in taxonomy if c.code in present]
    missing = [c for c in codes if c not in present]
    if missing:
        raise MissingClassError(f"classes {missing} have no samples in the evaluation manifest")
    subset = manifest.where(tasks=set(codes))
    if samples is None:
        samples = load_samples(subset, backend.input_size, taxonomy)
    else:
        keep = {taxonomy.index_of(c) for c in codes}
        samples = [s for s in samples if s.task in keep]
    scores, skipped = score_samples(backend, samples, include_empty)
    order = sorted(codes, key=taxonomy.index_of)
    rows, counts = {}, {}
    for code in order:
        vals = scores.get(taxonomy.index_of(code), [])
        if not vals:
            raise MissingClassError(f"class {code} has no scorable (nonempty) samples")
        rows[code] = 100.0 * float(np.mean(vals))
        counts[code] = len(vals)
    meta = {
        "checkpoint_id": backend.checkpoint_id(),
        "dataset_fingerprint": subset.fingerprint,
        "empty_empty_dice": "1.0",
        "empty_truth": "included" if include_empty else "excluded",
        "skipped_empty": str(sum(skipped.values())),
        "class_dice": "mean of per-sample Dice",
        "foreground_only": "true",
        "threshold": "0.5",
    }
    return EvalReport(rows, approach, counts, meta)


# ---------------------------------------------------------------- transfer protocol

@dataclass
class DomainData:
    """One species' patient-level splits (any of them may be None)."""

    train: DatasetManifest | None = None
    val: DatasetManifest | None = None
    test: DatasetManifest | None = None


def _lesion_part(m: DatasetManifest | None, taxonomy: Taxonomy):
    if m is None:
        return None
    return m.where(tasks={c.code for c in taxonomy.lesions()})


def _validation_set(domains: dict, approach: Approach, taxonomy: Taxonomy):
    if approach is Approach.R2H:
        parts = [domains[RODENT].val]
    elif approach is Approach.H2H:
        parts = [domains[HUMAN].val]
    else:
        parts = [domains[sp].val for sp in (RODENT, HUMAN)]
    entries = []
    for p in parts:
        if p is not None:
            keep = _lesion_part(p, taxonomy) if approach is not Approach.RH2H_T else p
            entries += keep.entries
    return DatasetManifest(entries, taxonomy.fingerprint) if entries else None


def transfer_classes(domains: dict, taxonomy: Taxonomy = TAXONOMY) -> list[str]:
    """Lesion classes present in the human test split and, when rodent data exists, the rodent test split."""
    human = _lesion_part(domains[HUMAN].test, taxonomy).tasks
    rodent_dom = domains.get(RODENT)
    if rodent_dom is not None and rodent_dom.test is not None:
        human &= _lesion_part(rodent_dom.test, taxonomy).tasks
    return sorted(human, key=taxonomy.index_of)


def run_transfer_suite(domains: dict, approaches, make_segmenter, train_config, run_dir=None,
                       taxonomy: Taxonomy = TAXONOMY, trainer=None) -> list[EvalReport]:
    """Train one model per approach and score it on the human lesion test split.

    ``domains`` maps "rodent"/"human" to DomainData. ``make_segmenter()``
    returns a fresh untrained model for each approach. R2H never reads the
    human training or validation splits.
    """
    from .training import train

    trainer = trainer or train
    if HUMAN not in domains or domains[HUMAN].test is None:
        raise DataError("transfer evaluation needs a human test split")
    human_test = _lesion_part(domains[HUMAN].test, taxonomy)
    classes = transfer_classes(domains, taxonomy)
    test_samples = None
    reports = []
    for approach in approaches:
        approach = Approach(approach)
        train_parts = {sp: d.train for sp, d in domains.items()
                       if d is not None and d.train is not None
                       and not (approach is Approach.R2H and sp == HUMAN)}
        train_set = compose_training_set(train_parts, approach, taxonomy)
        val_set = _validation_set(domains, approach, taxonomy)
        seg = make_segmenter()
        sub = os.path.join(run_dir, approach.value) if run_dir else None
        state = trainer(seg, train_set, val_set, train_config, run_dir=sub, taxonomy=taxonomy)
        if test_samples is None:
            test_samples = load_samples(human_test.where(tasks=set(classes)), seg.input_size, taxonomy)
        report = evaluate(seg, human_test, classes, approach.value, taxonomy=taxonomy, samples=test_samples)
        report.metadata["train_fingerprint"] = train_set.fingerprint
        report.metadata["best_epoch"] = str(state.best_epoch)
        if sub:
            report.save(sub)
        log.info("%s average Dice %.1f", approach.value, report.average)
        reports.append(report)
    return reports


def rodent_supervised_eval(backend: SegmentationBackend, rodent_test: DatasetManifest,
                           taxonomy: Taxonomy = TAXONOMY, samples=None) -> EvalReport:
    """Report over the rodent lesion columns present in the rodent test split."""
    present = rodent_test.tasks
    classes = [c for c in RODENT_LESION_COLUMNS if c in present]
    if not classes:
        raise MissingClassError("rodent test split holds no lesion samples")
    return evaluate(backend, rodent_test, classes, RODENT_SUPERVISED, taxonomy=taxonomy, samples=samples)
