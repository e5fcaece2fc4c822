"""Multi-class glomerular segmentation with a class-aware dynamic head."""
from .taxonomy import NUM_CLASSES, TAXONOMY, Taxonomy, class_lookup, encode_task
from .network import DynamicHeadNet, DynamicKernels, ModelConfig, kernel_count
from .datamodel import Approach, DatasetManifest, ImagePool, ingest, split_by_patient
from .training import Segmenter, TrainConfig, build_segmenter, load_checkpoint, loss_fn, save_checkpoint, train
from .evaluation import EvalReport, dice_score, evaluate, run_transfer_suite
from .synth import PhantomSpec, generate_phantom, random_phantom_spec

__version__ = "0.1.0"

__all__ = [
    "NUM_CLASSES", "TAXONOMY", "Taxonomy", "class_lookup", "encode_task",
    "DynamicHeadNet", "DynamicKernels", "ModelConfig", "kernel_count",
    "Approach", "DatasetManifest", "ImagePool", "ingest", "split_by_patient",
    "Segmenter", "TrainConfig", "build_segmenter", "load_checkpoint", "loss_fn", "save_checkpoint", "train",
    "EvalReport", "dice_score", "evaluate", "run_transfer_suite",
    "PhantomSpec", "generate_phantom", "random_phantom_spec",
]
