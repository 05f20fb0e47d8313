import importlib.util

import pytest
import torch
from torch import nn

from sacdnet.encoder import Adapter, EncoderHandle, _probe, adapt, extract_pyramid, load_backbone, synthetic_backbone
from sacdnet.errors import DimensionError, LoadError, StructuralError


def test_synthetic_backbone_is_frozen(encoder):
    assert sum(p.numel() for p in encoder.parameters() if p.requires_grad) == 0
    encoder.train()
    assert not encoder.training


def test_missing_foundation_weights(tmp_path):
    with pytest.raises(LoadError, match="not found"):
        load_backbone(tmp_path / "nope.pt", "foundation-x")


@pytest.mark.skipif(importlib.util.find_spec("ultralytics") is not None, reason="ultralytics installed")
def test_foundation_needs_ultralytics(tmp_path):
    f = tmp_path / "FastSAM-x.pt"
    f.write_bytes(b"not a checkpoint")
    with pytest.raises(LoadError, match="ultralytics"):
        load_backbone(f, "foundation-x")


def test_unknown_variant():
    with pytest.raises(LoadError):
        load_backbone(None, "foundation-xl")


def test_synthetic_weights_roundtrip(tmp_path, encoder):
    path = tmp_path / "w.pt"
    torch.save(nn.ModuleList(synthetic_backbone(seed=11)).state_dict(), path)
    loaded = load_backbone(path, "synthetic-test", seed=7)
    x = torch.rand(1, 3, 64, 64)
    assert not torch.equal(extract_pyramid(loaded, x)[0], extract_pyramid(encoder, x)[0])
    assert torch.equal(extract_pyramid(loaded, x)[0],
                       extract_pyramid(load_backbone(None, "synthetic-test", seed=11), x)[0])


def test_shape_mismatch_names_layer(tmp_path):
    state = nn.ModuleList(synthetic_backbone()).state_dict()
    state["2.0.weight"] = torch.zeros(5, 5, 3, 3)
    path = tmp_path / "bad.pt"
    torch.save(state, path)
    with pytest.raises(StructuralError, match="2.0.weight"):
        load_backbone(path, "synthetic-test")


def test_corrupt_weights(tmp_path):
    path = tmp_path / "corrupt.pt"
    path.write_bytes(b"\x00garbage")
    with pytest.raises(LoadError, match=str(path.name)):
        load_backbone(path, "synthetic-test")


def test_wrong_taps_detected():
    handle = EncoderHandle(synthetic_backbone(), (0, 2, 3, 4), "synthetic-test")
    with pytest.raises(StructuralError, match="tap layer 0"):
        _probe(handle, None)


def test_layer_routing_follows_from_attribute():
    class Add(nn.Module):
        f = [-1, 0]

        def forward(self, xs):
            return xs[0] + xs[1]

    layers = [nn.Identity(), nn.Identity(), Add()]
    handle = EncoderHandle(layers, (0, 1, 2, 2), "synthetic-test")
    x = torch.ones(1, 1, 2, 2)
    assert torch.equal(handle(x)[2], 2 * x)


def test_determinism_same_seed():
    x = torch.rand(2, 3, 64, 64)
    a = extract_pyramid(load_backbone(None, "synthetic-test", seed=7), x)
    b = extract_pyramid(load_backbone(None, "synthetic-test", seed=7), x)
    assert all(torch.equal(u, v) for u, v in zip(a, b))


@pytest.mark.parametrize("size", [256, 512])
def test_pyramid_shape_law(encoder, size):
    feats = extract_pyramid(encoder, torch.rand(1, 3, size, size))
    assert [tuple(f.shape[-2:]) for f in feats] == [(size // s, size // s) for s in (4, 8, 16, 32)]
    assert all(torch.isfinite(f).all() for f in feats)


@pytest.mark.parametrize("shape", [(1, 3, 100, 64), (1, 3, 64, 48), (1, 1, 64, 64), (3, 64, 64)])
def test_bad_image_shapes(encoder, shape):
    with pytest.raises(DimensionError):
        extract_pyramid(encoder, torch.rand(*shape))


def test_no_gradient_reaches_encoder(encoder):
    adapter = Adapter(encoder.channels, 8)
    out = adapt(extract_pyramid(encoder, torch.rand(2, 3, 64, 64)), adapter)
    sum(o.sum() for o in out).backward()
    for p in encoder.parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0
    assert all(p.grad is not None for p in adapter.parameters())


def _pyramid(channels, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(2, c, size >> k, size >> k, generator=g) for k, c in enumerate(channels)]


def test_adapter_output_contract():
    adapter = Adapter((16, 32, 48, 64), 24)
    out = adapter(_pyramid((16, 32, 48, 64)))
    assert [o.shape[1] for o in out] == [24] * 4
    assert [o.shape[-1] for o in out] == [32, 16, 8, 4]
    assert min(o.min().item() for o in out) >= 0


def test_adapter_zero_input_gives_relu_of_bn_bias():
    adapter = Adapter((4, 4, 4, 4), 6)
    for block in adapter.blocks:
        nn.init.normal_(block[1].bias)
    zeros = [torch.zeros(1, 4, 8, 8) for _ in range(4)]
    for mode in (True, False):
        adapter.train(mode)
        for block, o in zip(adapter.blocks, adapter(zeros)):
            expected = torch.relu(block[1].bias).view(1, -1, 1, 1).expand_as(o)
            assert torch.allclose(o, expected, atol=1e-6)


def test_adapter_commutes_with_transpose():
    adapter = Adapter((5, 5, 5, 5), 7).eval()
    x = [torch.randn(1, 5, 8, 8) for _ in range(4)]
    xt = [t.transpose(-1, -2) for t in x]
    for a, b in zip(adapter(x), adapter(xt)):
        assert torch.allclose(a.transpose(-1, -2), b, atol=1e-6)


def test_adapter_is_pixel_local():
    adapter = Adapter((3, 3, 3, 3), 4).eval()
    for block in adapter.blocks:
        nn.init.normal_(block[1].bias, mean=2.0)  # keep ReLU active so perturbations show
    base = _pyramid((3, 3, 3, 3), size=16)
    ref = adapter(base)
    for level in range(4):
        pert = [t.clone() for t in base]
        pert[level][0, :, 1, 1] += 5.0
        out = adapter(pert)
        for k, (a, b) in enumerate(zip(ref, out)):
            changed = (a != b).any(dim=1)
            if k == level:
                assert changed.sum().item() == 1 and changed[0, 1, 1]
            else:
                assert not changed.any()


def test_adapter_channel_mismatch_names_level():
    adapter = Adapter((16, 32, 48, 64), 8)
    pyr = _pyramid((16, 32, 40, 64))
    with pytest.raises(StructuralError, match="level 2"):
        adapter(pyr)
