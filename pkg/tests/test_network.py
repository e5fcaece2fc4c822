import pytest
import torch

from glomseg.network import (BackboneConfig, Controller, DynamicHeadNet, DynamicKernels, ModelConfig,
                             head_forward, head_layout, kernel_count)
from glomseg.taxonomy import encode_task


@pytest.fixture(scope="module")
def small():
    torch.manual_seed(0)
    return DynamicHeadNet(ModelConfig.reduced(32)).eval()


def test_kernel_count_default():
    assert kernel_count(8, 8, 2) == 8 * 8 + 8 + 8 * 8 + 8 + 8 * 2 + 2 == 162
    assert DynamicHeadNet(ModelConfig.reduced(32)).n_kernels == 162


def test_kernel_count_other_widths():
    cfg = ModelConfig.reduced(32, decoder_out_channels=4)
    net = DynamicHeadNet(cfg)
    assert net.n_kernels == kernel_count(4, 8, 2) == 4 * 8 + 8 + 72 + 18
    assert net.controller.conv.out_channels == net.n_kernels


def test_default_shapes():
    torch.manual_seed(0)
    net = DynamicHeadNet().eval()
    with torch.no_grad():
        f, m = net.backbone_forward(torch.zeros(1, 3, 512, 512))
    assert m.shape == (1, 8, 512, 512)
    assert f.shape == (1, 512, 512 // 2 ** 4, 512 // 2 ** 4)
    assert torch.isfinite(f).all() and torch.isfinite(m).all()
    assert net.controller.conv.in_channels == 512 + 14


def test_non_512_rejected():
    net = DynamicHeadNet()
    with pytest.raises(ValueError, match="512x512"):
        net.backbone_forward(torch.zeros(1, 3, 256, 256))


def test_relaxed_size_contract():
    net = DynamicHeadNet(ModelConfig(BackboneConfig(stage_channels=(8, 16, 32), blocks_per_stage=1,
                                                    strict_size=False))).eval()
    for size in (16, 48, 96):
        f, m = net.backbone_forward(torch.zeros(1, 3, size, size))
        assert m.shape[-2:] == (size, size) and f.shape[-1] == size // 4
    with pytest.raises(ValueError, match="multiple of 4"):
        net.backbone_forward(torch.zeros(1, 3, 18, 18))


def test_identical_items_identical_outputs(small):
    x = torch.randn(1, 3, 32, 32).repeat(2, 1, 1, 1)
    with torch.no_grad():
        p = small(x, torch.tensor([3, 3]))
    assert torch.equal(p.logits[0], p.logits[1])


def test_gap_of_constant_map():
    ctrl = Controller(4, 14, 162)
    feats = torch.arange(4.0)[None, :, None, None].expand(1, 4, 5, 5)
    captured = {}
    ctrl.conv.register_forward_hook(lambda mod, inp, out: captured.setdefault("x", inp[0]))
    ctrl(feats, torch.from_numpy(encode_task(2))[None])
    assert torch.allclose(captured["x"][0, :4, 0, 0], torch.arange(4.0))
    assert captured["x"][0, 4:, 0, 0].tolist() == encode_task(2).tolist()


def test_controller_task_dim_mismatch():
    ctrl = Controller(4, 14, 162)
    with pytest.raises(ValueError, match="task"):
        ctrl(torch.zeros(1, 4, 2, 2), torch.zeros(1, 13))


def test_task_changes_kernels(small):
    feats = torch.randn(1, 64, 8, 8)
    k1 = small.controller_forward(feats, torch.from_numpy(encode_task(0))[None]).flat()
    k2 = small.controller_forward(feats, torch.from_numpy(encode_task(5))[None]).flat()
    assert not torch.equal(k1, k2)


def test_kernel_partition_round_trip():
    omega = torch.randn(3, 162)
    k = DynamicKernels.from_flat(omega, head_layout())
    assert [w.shape for w in k.weights] == [(3, 8, 8), (3, 8, 8), (3, 2, 8)]
    assert torch.equal(k.flat(), omega)
    with pytest.raises(ValueError):
        DynamicKernels.from_flat(torch.randn(1, 100), head_layout())


def test_zero_kernels_give_half():
    m = torch.randn(2, 8, 16, 16)
    k = DynamicKernels.from_flat(torch.zeros(2, 162), head_layout())
    logits = head_forward(m, k)
    assert torch.equal(logits, torch.zeros(2, 2, 16, 16))
    assert torch.all(torch.softmax(logits, 1)[:, 1] == 0.5)


def test_identity_layers_zero_last():
    m = torch.randn(1, 8, 4, 4)
    eye = torch.eye(8)[None]
    k = DynamicKernels((eye, eye, torch.zeros(1, 2, 8)), (torch.zeros(1, 8), torch.zeros(1, 8), torch.zeros(1, 2)))
    assert torch.equal(head_forward(m, k), torch.zeros(1, 2, 4, 4))


def test_head_channel_mismatch():
    k = DynamicKernels.from_flat(torch.zeros(1, 162), head_layout())
    with pytest.raises(ValueError, match="channels"):
        head_forward(torch.zeros(1, 4, 2, 2), k)


def test_head_pure():
    torch.manual_seed(1)
    m = torch.randn(2, 8, 8, 8)
    k = DynamicKernels.from_flat(torch.randn(2, 162), head_layout())
    assert torch.equal(head_forward(m, k), head_forward(m, k))


def test_all_tasks_one_weight_set(small):
    x = torch.randn(1, 3, 32, 32)
    with torch.no_grad():
        logits = small.forward_tasks(x, list(range(14)))
    assert logits.shape == (1, 14, 2, 32, 32)
    assert len({tuple(logits[0, t].flatten()[:5].tolist()) for t in range(14)}) == 14


def test_mixed_batch_kernels_differ(small):
    x = torch.randn(1, 3, 32, 32).repeat(4, 1, 1, 1)
    tasks = torch.tensor([0, 7, 7, 13])
    with torch.no_grad():
        feats, _ = small.backbone_forward(x)
        onehot = torch.nn.functional.one_hot(tasks, 14).float()
        flat = small.controller_forward(feats, onehot).flat()
    assert torch.equal(flat[1], flat[2])
    assert not torch.equal(flat[0], flat[1]) and not torch.equal(flat[1], flat[3])


def test_inference_deterministic(small):
    x = torch.randn(1, 3, 32, 32)
    with torch.no_grad():
        a = small(x, torch.tensor([4])).mask()
        b = small(x, torch.tensor([4])).mask()
    assert torch.equal(a, b)


def test_one_hot_and_index_tasks_agree(small):
    x = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        a = small(x, torch.tensor([1, 9])).logits
        b = small(x, torch.stack([torch.from_numpy(encode_task(1)), torch.from_numpy(encode_task(9))])).logits
    assert torch.equal(a, b)
