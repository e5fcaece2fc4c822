"""Batch commands: ingest, make-synthetic, train, eval, transfer, segment.

Every command takes a flat ``section.key = value`` configuration and writes
into a run directory that holds the effective configuration, seeds,
dataset fingerprints, metrics and artifact paths (``run_manifest.txt``).
A ``RUN_INCOMPLETE`` marker sits in the run directory until the command
finishes, so a crashed or interrupted run is recognisable.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, fields
from typing import Iterator, Protocol

import numpy as np
from PIL import Image, ImageSequence

from . import datamodel as dm
from .evaluation import DomainData, EvalReport, evaluate, run_transfer_suite
from .network import BackboneConfig, HeadConfig, ModelConfig
from .synth import emit_partial_dataset, make_transfer_domains, random_phantom_spec
from .taxonomy import TAXONOMY, Taxonomy
from .training import Segmenter, TrainConfig, build_segmenter, load_checkpoint, train

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

MARKER = "RUN_INCOMPLETE"

# fixed overlay palette, taxonomy order
PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48), (145, 30, 180),
    (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (128, 0, 0),
)


class ConfigError(ValueError):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _ints(v) -> tuple:
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).split(",") if x.strip())


def _str_list(v) -> tuple:
    if isinstance(v, (list, tuple)):
        return tuple(v)
    return tuple(x.strip() for x in str(v).split(",") if x.strip())


def _opt_str(v):
    return None if v in (None, "", "none", "None") else str(v)


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "run.dir": (_opt_str, None),
    "data.root": (_opt_str, None),
    "data.manifest": (_opt_str, None),
    "data.train_manifest": (_opt_str, None),
    "data.val_manifest": (_opt_str, None),
    "data.test_manifest": (_opt_str, None),
    "data.rodent_manifest": (_opt_str, None),
    "data.human_manifest": (_opt_str, None),
    "data.split_ratios": (lambda v: tuple(float(x) for x in str(v).split(",")), (0.6, 0.1, 0.3)),
    "synth.out_dir": (_opt_str, None),
    "synth.count": (int, 56),
    "synth.canvas": (int, 512),
    "synth.patients": (int, 10),
    "synth.classes": (_str_list, ("all",)),
    "synth.species": (_opt_str, None),
    "synth.every_class": (_bool, False),
    "synth.transfer_domains": (_bool, False),
    "model.input_size": (int, 512),
    "model.stage_channels": (_ints, (32, 64, 128, 256, 512)),
    "model.blocks_per_stage": (int, 2),
    "model.decoder_channels": (int, 8),
    "model.head_hidden": (int, 8),
    "train.epochs": (int, 200),
    "train.batch_size": (int, 4),
    "train.loss": (str, "dice_bce"),
    "train.optimizer": (str, "sgd"),
    "train.lr": (float, 1e-2),
    "train.momentum": (float, 0.99),
    "train.nesterov": (_bool, True),
    "train.weight_decay": (float, 1e-4),
    "train.lr_power": (float, 0.9),
    "train.flip": (_bool, True),
    "train.rotate90": (_bool, True),
    "train.drop_last": (_bool, False),
    "train.eval_every": (int, 1),
    "eval.checkpoint": (_opt_str, None),
    "eval.classes": (_str_list, ("all",)),
    "eval.approach": (str, "holistic"),
    "eval.include_empty": (_bool, False),
    "transfer.approaches": (_str_list, ("H2H", "R2H", "RH2H", "RH2H_T")),
    "segment.patch_dir": (_opt_str, None),
    "segment.out_dir": (_opt_str, None),
    "segment.classes": (_str_list, ("all",)),
    "segment.overlay": (_bool, False),
}


@dataclass
class RunConfig:
    values: dict
    raw: dict = field(default_factory=dict)  # effective textual config, echoed into run manifests

    def __getitem__(self, key):
        return self.values[key]

    def echo(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.raw.items()))

    @classmethod
    def build(cls, file_text: str | None = None, overrides=(), seed: int | None = None) -> "RunConfig":
        raw: dict = {}
        if file_text:
            for n, line in enumerate(file_text.splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                sep = "=" if "=" in line else ":" if ":" in line else None
                if sep is None:
                    raise ConfigError(f"config line {n}: expected 'key = value', got {line!r}")
                k, v = line.split(sep, 1)
                raw[k.strip()] = v.strip()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            raw[k.strip()] = v.strip()
        if seed is not None:
            raw["seed"] = str(seed)
        unknown = sorted(set(raw) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for key, (parse, default) in SCHEMA.items():
            if key in raw:
                try:
                    values[key] = parse(raw[key])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{key}: {exc}") from exc
            else:
                values[key] = default
        return cls(values, raw)

    def require(self, *keys):
        missing = [k for k in keys if self.values.get(k) is None]
        if missing:
            raise ConfigError(f"missing required config: {', '.join(missing)}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            BackboneConfig(stage_channels=self["model.stage_channels"], blocks_per_stage=self["model.blocks_per_stage"],
                           decoder_out_channels=self["model.decoder_channels"], input_size=self["model.input_size"]),
            HeadConfig(hidden_channels=self["model.head_hidden"]),
        )

    def train_config(self) -> TrainConfig:
        kw = {f.name: self.values[f"train.{f.name}"] for f in fields(TrainConfig) if f"train.{f.name}" in self.values}
        return TrainConfig(seed=self["seed"], **kw)

    def classes(self, key: str, taxonomy: Taxonomy = TAXONOMY):
        v = self[key]
        if tuple(v) == ("all",):
            return None
        return [taxonomy.lookup(c).code for c in v]


class Run:
    """Context manager owning a run directory and its manifest."""

    def __init__(self, run_dir, command: str, cfg: RunConfig):
        self.dir = run_dir
        self.command = command
        self.cfg = cfg
        self.records: list = []
        self.artifacts: dict = {}

    def __enter__(self):
        os.makedirs(self.dir, exist_ok=True)
        with open(os.path.join(self.dir, MARKER), "w") as fh:
            fh.write(f"{self.command} started\n")
        return self

    def record(self, key, value):
        self.records.append((key, value))

    def artifact(self, name, path):
        self.artifacts[name] = path

    def __exit__(self, exc_type, exc, tb):
        lines = [f"command\t{self.command}", f"seed\t{self.cfg['seed']}", "", "[config]", self.cfg.echo().rstrip(), "",
                 "[records]"]
        lines += [f"{k}\t{v}" for k, v in self.records]
        lines += ["", "[artifacts]"] + [f"{k}\t{v}" for k, v in self.artifacts.items()]
        if exc is not None:
            lines += ["", f"status\tfailed: {exc}"]
        with open(os.path.join(self.dir, "run_manifest.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        if exc is None:
            os.remove(os.path.join(self.dir, MARKER))
        for name, path in self.artifacts.items():
            print(f"{name}: {path}")
        return False


def _run_dir(cfg: RunConfig, fallback: str | None = None) -> str:
    d = cfg["run.dir"] or fallback
    if d is None:
        raise ConfigError("missing required config: run.dir")
    return d


# ---------------------------------------------------------------- commands

def cmd_ingest(cfg: RunConfig, taxonomy: Taxonomy = TAXONOMY) -> dm.DatasetManifest:
    cfg.require("data.root", "data.manifest")
    res = dm.ingest(cfg["data.root"], taxonomy)
    manifest = dm.with_stats(res.manifest)
    manifest.save(cfg["data.manifest"])
    print(dm.summary_table(manifest, taxonomy))
    for w in res.warnings:
        print(f"warning: {w}")
    print(f"manifest: {cfg['data.manifest']} ({len(manifest)} entries)")
    return manifest


def cmd_make_synthetic(cfg: RunConfig, taxonomy: Taxonomy = TAXONOMY):
    cfg.require("synth.out_dir")
    out = cfg["synth.out_dir"]
    seed = cfg["seed"]
    if cfg["synth.transfer_domains"]:
        domains = make_transfer_domains(out, seed, cfg["synth.canvas"], taxonomy=taxonomy)
        for sp, dom in domains.items():
            for split in ("train", "val", "test"):
                m = getattr(dom, split)
                if m is not None:
                    dm.with_stats(m).save(os.path.join(out, f"{sp}_{split}.tsv"))
        print(f"synthetic domains: {out}")
        return domains
    classes = cfg.classes("synth.classes", taxonomy) or list(taxonomy.codes)
    specs = [random_phantom_spec(seed * 1_000_003 + i, cfg["synth.canvas"]) for i in range(cfg["synth.count"])]
    manifest = emit_partial_dataset(specs, classes, cfg["synth.patients"], out, species=cfg["synth.species"],
                                    every_class=cfg["synth.every_class"], taxonomy=taxonomy)
    print(f"synthetic tree: {out} ({len(manifest)} samples)")
    return manifest


def _load_manifest(path, taxonomy):
    m = dm.DatasetManifest.load(path)
    m.validate(taxonomy)
    return m


def cmd_train(cfg: RunConfig, taxonomy: Taxonomy = TAXONOMY):
    run_dir = _run_dir(cfg)
    with Run(run_dir, "train", cfg) as run:
        if cfg["data.train_manifest"]:
            train_m = _load_manifest(cfg["data.train_manifest"], taxonomy)
            val_m = _load_manifest(cfg["data.val_manifest"], taxonomy) if cfg["data.val_manifest"] else None
        else:
            cfg.require("data.manifest")
            full = _load_manifest(cfg["data.manifest"], taxonomy)
            split = dm.split_by_patient(full, cfg["data.split_ratios"], cfg["seed"])
            train_m, val_m, test_m = split.apply(full)
            for name, m in (("train", train_m), ("val", val_m), ("test", test_m)):
                path = os.path.join(run_dir, f"{name}_manifest.tsv")
                m.save(path)
                run.artifact(f"{name}_manifest", path)
            for w in split.warnings:
                run.record("split_warning", w)
        if train_m.norm_mean is None:
            train_m = dm.with_stats(train_m)
        run.record("train_fingerprint", train_m.fingerprint)
        if val_m is not None:
            run.record("val_fingerprint", val_m.fingerprint)
        seg = build_segmenter(cfg.model_config(), cfg["seed"], taxonomy=taxonomy)
        state = train(seg, train_m, val_m, cfg.train_config(), run_dir=run_dir, taxonomy=taxonomy)
        codes = [c.code for c in taxonomy]
        run.record("metrics", "epoch\tloss\tval_dice\t" + "\t".join(codes))
        for row in state.history:
            per = "\t".join(f"{row['per_class'].get(c, float('nan')):.6f}" for c in codes)
            run.record("epoch", f"{row['epoch']}\t{row['loss']:.6f}\t{row['val_dice']:.6f}\t{per}")
        run.record("best_epoch", state.best_epoch)
        run.record("best_val_dice", f"{state.best_val_dice:.6f}")
        run.artifact("checkpoint", state.best_checkpoint)
    return state


def cmd_eval(cfg: RunConfig, taxonomy: Taxonomy = TAXONOMY) -> EvalReport:
    cfg.require("eval.checkpoint")
    manifest_path = cfg["data.test_manifest"] or cfg["data.manifest"]
    if manifest_path is None:
        raise ConfigError("missing required config: data.test_manifest")
    run_dir = _run_dir(cfg)
    with Run(run_dir, "eval", cfg) as run:
        seg, meta = load_checkpoint(cfg["eval.checkpoint"], taxonomy)
        manifest = _load_manifest(manifest_path, taxonomy)
        report = evaluate(seg, manifest, cfg.classes("eval.classes", taxonomy), cfg["eval.approach"],
                          cfg["eval.include_empty"], taxonomy)
        tsv, txt = report.save(run_dir)
        print(report.table())
        run.record("dataset_fingerprint", manifest.fingerprint)
        run.record("average_dice", f"{report.average:.6f}")
        run.artifact("report_tsv", tsv)
        run.artifact("report_table", txt)
    return report


def _domains_from_config(cfg: RunConfig, taxonomy: Taxonomy) -> dict:
    domains = {}
    for sp in ("rodent", "human"):
        path = cfg[f"data.{sp}_manifest"]
        if path is None:
            continue
        full = _load_manifest(path, taxonomy)
        split = dm.split_by_patient(full, cfg["data.split_ratios"], cfg["seed"])
        domains[sp] = DomainData(*split.apply(full))
    return domains


def cmd_transfer(cfg: RunConfig, taxonomy: Taxonomy = TAXONOMY) -> list:
    run_dir = _run_dir(cfg)
    with Run(run_dir, "transfer", cfg) as run:
        if cfg["synth.transfer_domains"]:
            domains = make_transfer_domains(os.path.join(run_dir, "data"), cfg["seed"], cfg["synth.canvas"],
                                            taxonomy=taxonomy)
        else:
            domains = _domains_from_config(cfg, taxonomy)
        model_cfg = cfg.model_config()
        seed = cfg["seed"]
        reports = run_transfer_suite(domains, cfg["transfer.approaches"],
                                     lambda: build_segmenter(model_cfg, seed, taxonomy=taxonomy),
                                     cfg.train_config(), run_dir=run_dir, taxonomy=taxonomy)
        for r in reports:
            print(r.table())
            run.record(f"average_{r.approach}", f"{r.average:.6f}")
            run.artifact(f"report_{r.approach}", os.path.join(run_dir, r.approach, r.filename()))
    return reports


# ---------------------------------------------------------------- segmentation export

class Tiler(Protocol):
    """Source of patches cut from a whole-slide image.

    Only the patch-directory contract is implemented; a tiler would yield
    (name, RGB patch) pairs that feed ``segment_patches`` unchanged.
    """

    def tiles(self, slide_path: str) -> Iterator[tuple[str, np.ndarray]]: ...


def write_mask_stack(path, masks: np.ndarray) -> None:
    """One 8-bit page per channel (0/255) in a multi-page TIFF."""
    pages = [Image.fromarray(np.where(m, 255, 0).astype(np.uint8)) for m in masks]
    pages[0].save(path, save_all=True, append_images=pages[1:], compression="raw")


def read_mask_stack(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.stack([np.asarray(p.convert("L")) > 0 for p in ImageSequence.Iterator(im)])


def read_legend(path) -> list[str]:
    with open(path) as fh:
        return [line.split("\t")[1] for line in fh.read().splitlines()[1:] if line]


def render_overlay(image: np.ndarray, masks: np.ndarray, channels, alpha: float = 0.45) -> np.ndarray:
    out = image.astype(np.float64).copy()
    for m, idx in zip(masks, channels):
        out[m] = (1 - alpha) * out[m] + alpha * np.asarray(PALETTE[idx])
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def segment_patches(seg: Segmenter, patch_dir, out_dir, classes=None, overlay: bool = False,
                    taxonomy: Taxonomy = TAXONOMY) -> list[dict]:
    """Write a mask stack per patch plus ``legend.txt`` and ``index.tsv``; return the index rows."""
    codes = classes or list(taxonomy.codes)
    tasks = [taxonomy.index_of(c) for c in codes]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "legend.txt"), "w") as fh:
        fh.write("channel\tcode\tname\tcolor\n")
        for ch, t in enumerate(tasks):
            fh.write(f"{ch}\t{taxonomy[t].code}\t{taxonomy[t].name}\t{'#%02x%02x%02x' % PALETTE[t]}\n")
    rows = []
    names = sorted(n for n in os.listdir(patch_dir)
                   if os.path.splitext(n)[1].lower() in dm.IMAGE_SUFFIXES and not os.path.splitext(n)[0].endswith("_mask"))
    for name in names:
        stem = os.path.splitext(name)[0]
        try:
            image = dm.load_image(os.path.join(patch_dir, name))
        except Exception as exc:
            rows.append({"patch": name, "output": "", "status": f"error: {exc}", "channels": 0})
            continue
        masks = seg.predict(dm.resize_image(image, seg.input_size), tasks)
        if masks.shape[1:] != image.shape[:2]:
            size = (image.shape[1], image.shape[0])
            masks = np.stack([np.asarray(Image.fromarray(m).resize(size, Image.NEAREST)) for m in masks])
        out = os.path.join(out_dir, f"{stem}_masks.tif")
        write_mask_stack(out, masks)
        if overlay:
            Image.fromarray(render_overlay(image, masks, tasks)).save(os.path.join(out_dir, f"{stem}_overlay.png"))
        rows.append({"patch": name, "output": os.path.basename(out), "status": "ok", "channels": len(tasks)})
    with open(os.path.join(out_dir, "index.tsv"), "w") as fh:
        fh.write("patch\toutput\tstatus\tchannels\n")
        for r in rows:
            fh.write(f"{r['patch']}\t{r['output']}\t{r['status']}\t{r['channels']}\n")
    return rows


def cmd_segment(cfg: RunConfig, taxonomy: Taxonomy = TAXONOMY) -> list[dict]:
    cfg.require("eval.checkpoint", "segment.patch_dir")
    out_dir = cfg["segment.out_dir"] or _run_dir(cfg)
    with Run(out_dir, "segment", cfg) as run:
        seg, _ = load_checkpoint(cfg["eval.checkpoint"], taxonomy)
        rows = segment_patches(seg, cfg["segment.patch_dir"], out_dir, cfg.classes("segment.classes", taxonomy),
                               cfg["segment.overlay"], taxonomy)
        run.record("patches", len(rows))
        run.record("errors", sum(r["status"] != "ok" for r in rows))
        run.artifact("index", os.path.join(out_dir, "index.tsv"))
        run.artifact("legend", os.path.join(out_dir, "legend.txt"))
    return rows


COMMANDS = {
    "ingest": cmd_ingest,
    "make-synthetic": cmd_make_synthetic,
    "train": cmd_train,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "segment": cmd_segment,
}
