"""Rodent-to-human transfer on colour-shifted phantoms.

The human domain differs from the rodent one by a seeded stain-like colour
offset and has only 8 labelled lesion samples. Compare a model trained on
rodent data alone (R2H) with one trained on both species (RH2H).

    python demos/04_transfer.py [epochs]
"""
import sys
import tempfile

from glomseg.evaluation import run_transfer_suite
from glomseg.network import ModelConfig
from glomseg.synth import domain_color_shift, make_transfer_domains
from glomseg.training import TrainConfig, build_segmenter

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 60
seed = 0
domains = make_transfer_domains(tempfile.mkdtemp(prefix="glomseg-transfer-"), seed)
print("human colour shift", [round(v) for v in domain_color_shift(seed)])
reports = run_transfer_suite(domains, ["R2H", "RH2H"], lambda: build_segmenter(ModelConfig.reduced(64), seed=seed),
                             TrainConfig(epochs=epochs, seed=seed))
for r in reports:
    print(r.table())
