"""Train a small model on partially labelled phantoms and segment new ones.

Each training sample carries a mask for one class only. After a short run
the model segments all fourteen classes of unseen phantoms.

    python demos/03_train_and_segment.py [epochs]
"""
import sys
import tempfile

from glomseg.evaluation import evaluate
from glomseg.network import ModelConfig
from glomseg.synth import emit_partial_dataset, random_phantom_spec
from glomseg.taxonomy import TAXONOMY
from glomseg.training import TrainConfig, build_segmenter, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
work = tempfile.mkdtemp(prefix="glomseg-demo-")
codes = list(TAXONOMY.codes)
train_m = emit_partial_dataset([random_phantom_spec(s, 64) for s in range(20)], codes, 10, f"{work}/train",
                               every_class=True)
test_m = emit_partial_dataset([random_phantom_spec(s, 64) for s in range(500, 505)], codes, 5, f"{work}/test",
                              every_class=True, prefix="te")

seg = build_segmenter(ModelConfig.reduced(64), seed=0)
train(seg, train_m, None, TrainConfig(epochs=epochs, eval_every=5),
      progress=lambda r: print(f"epoch {r['epoch']:3d} loss {r['loss']:.3f}") if r["epoch"] % 5 == 0 else None)
print(evaluate(seg, test_m).table())
