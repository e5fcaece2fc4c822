"""One backbone, fourteen heads.

The controller turns pooled bottleneck features plus a one-hot task into
162 numbers, which become the weights of a three-layer 1x1 head. The same
image therefore yields a different segmentation per class without any
class-specific parameters.

    python demos/02_dynamic_head.py
"""
import torch

from glomseg.network import DynamicHeadNet, ModelConfig, head_layout, kernel_count
from glomseg.taxonomy import TAXONOMY, encode_task

print("head layout (out, in):", head_layout(), "->", kernel_count(), "dynamic parameters")

torch.manual_seed(0)
net = DynamicHeadNet(ModelConfig.reduced(64)).eval()
x = torch.randn(1, 3, 64, 64)
with torch.no_grad():
    feats, m = net.backbone_forward(x)
    print("bottleneck F", tuple(feats.shape), "decoder M", tuple(m.shape))
    for code in ("Cap", "GS", "SS"):
        task = torch.from_numpy(encode_task(TAXONOMY.index_of(code)))[None]
        kernels = net.controller_forward(feats, task)
        print(f"{code:4s} first-layer kernel norm {kernels.weights[0].norm():.3f}")
    logits = net.forward_tasks(x, range(len(TAXONOMY)))
print("all-task logits", tuple(logits.shape), "from a single backbone pass")
