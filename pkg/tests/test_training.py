import math

import pytest
import torch

from sacdnet import synthetic
from sacdnet.errors import CompatibilityError, DomainError, NumericError
from sacdnet.model import SegHead, build_model, seg_forward
from sacdnet.pseudochange import DatasetManifest, SegSource, SourceSpec
from sacdnet.training import (LOG_COLUMNS, Trainer, change_loss, finetune_loss, load_checkpoint, lr_at,
                              predict_batch, pretrain_loss, restore, run_finetune, run_pretrain,
                              save_checkpoint)

from conftest import small_config

EPS = 1e-7


def pixel_bce(p, y):
    total = 0.0
    for pi, yi in zip(p.ravel().tolist(), y.ravel().tolist()):
        pi = min(max(pi, EPS), 1 - EPS)
        total += -(yi * math.log(pi) + (1 - yi) * math.log(1 - pi))
    return total / p.numel()


def pixel_ce(probs, target):
    n, k, h, w = probs.shape
    total = 0.0
    for b in range(n):
        for i in range(h):
            for j in range(w):
                total += -math.log(max(probs[b, int(target[b, i, j]), i, j].item(), EPS))
    return total / (n * h * w)


def rand_maps(seed, shape=(2, 8, 8)):
    g = torch.Generator().manual_seed(seed)
    ys = torch.rand(shape, generator=g, dtype=torch.float64)
    yc = torch.rand(shape, generator=g, dtype=torch.float64)
    y = (torch.rand(shape, generator=g) > 0.5).double()
    return ys, yc, y


def rand_seg(seed, shape=(2, 2, 8, 8)):
    g = torch.Generator().manual_seed(seed)
    probs = torch.softmax(torch.randn(shape, generator=g, dtype=torch.float64), dim=1)
    target = torch.randint(0, shape[1], (shape[0],) + shape[2:], generator=g)
    return probs, target


# --- segmentation head ---------------------------------------------------------

def test_seg_head_shared_and_normalized():
    head = SegHead(8, 2).eval()
    d = torch.randn(2, 8, 16, 16)
    pa, pb = seg_forward(d, d.clone(), head, (64, 64))
    assert torch.equal(pa, pb)
    assert pa.shape == (2, 2, 64, 64)
    assert torch.allclose(pa.sum(dim=1), torch.ones(2, 64, 64), atol=1e-6)


def test_seg_head_single_pixel_oracle():
    torch.manual_seed(0)
    head = SegHead(4, 3).double()
    bn = head.block[1]
    bn.running_mean.normal_()
    bn.running_var.uniform_(0.5, 2.0)
    head.eval()
    d = torch.randn(1, 4, 6, 6, dtype=torch.float64)
    probs, _ = seg_forward(d, d, head, (6, 6))
    y, x = 2, 3
    conv = head.block[0].weight
    patch = torch.nn.functional.pad(d, (1, 1, 1, 1))[0, :, y:y + 3, x:x + 3]
    z = torch.stack([(conv[o] * patch).sum() for o in range(conv.shape[0])])
    z = (z - bn.running_mean) / torch.sqrt(bn.running_var + bn.eps) * bn.weight + bn.bias
    z = torch.relu(z)
    logits = head.classifier.weight[:, :, 0, 0] @ z + head.classifier.bias
    expected = torch.exp(logits) / torch.exp(logits).sum()
    assert torch.allclose(probs[0, :, y, x], expected, atol=1e-12)


# --- losses ---------------------------------------------------------------------

def test_change_loss_perfect_and_uniform():
    _, _, y = rand_maps(0)
    p = y.clamp(1e-6, 1 - 1e-6)
    assert change_loss(p, p, y) < 1e-3
    half = torch.full_like(y, 0.5)
    assert abs(change_loss(half, half, y).item() - 2 * math.log(2)) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_change_loss_matches_pixel_oracle(seed):
    ys, yc, y = rand_maps(seed)
    assert abs(change_loss(ys, yc, y).item() - (pixel_bce(ys, y) + pixel_bce(yc, y))) < 1e-6


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
def test_pretrain_loss_matches_pixel_oracle(lam):
    ys, yc, y = rand_maps(5)
    sa, ta = rand_seg(6)
    sb, tb = rand_seg(7)
    expected = pixel_bce(ys, y) + pixel_bce(yc, y) + lam * (pixel_ce(sa, ta) + pixel_ce(sb, tb))
    assert abs(pretrain_loss(ys, yc, sa, sb, y, ta, tb, lam).item() - expected) < 1e-6


def test_pretrain_loss_lambda_properties():
    ys, yc, y = rand_maps(8)
    sa, ta = rand_seg(9)
    sb, tb = rand_seg(10)
    assert pretrain_loss(ys, yc, sa, sb, y, ta, tb, 0.0) == change_loss(ys, yc, y)
    slope = (pretrain_loss(ys, yc, sa, sb, y, ta, tb, 1.5) - pretrain_loss(ys, yc, sa, sb, y, ta, tb, 0.5)).item()
    assert abs(slope - (pixel_ce(sa, ta) + pixel_ce(sb, tb))) < 1e-6
    perfect_seg = torch.nn.functional.one_hot(ta, 2).permute(0, 3, 1, 2).double()
    p = y.clamp(1e-6, 1 - 1e-6)
    assert pretrain_loss(p, p, perfect_seg, perfect_seg, y, ta, ta, 1.0) < 1e-3
    with pytest.raises(DomainError):
        pretrain_loss(ys, yc, sa, sb, y, ta, tb, -1.0)


def test_finetune_loss():
    ys, yc, y = rand_maps(11)
    yf = 0.3 * ys + 0.7 * yc
    expected = pixel_bce(ys, y) + pixel_bce(yc, y) + pixel_bce(yf, y)
    assert abs(finetune_loss(ys, yc, yf, y).item() - expected) < 1e-6
    half = torch.full_like(y, 0.5)
    assert abs(finetune_loss(half, half, half, y).item() - 3 * math.log(2)) < 1e-6
    p = y.clamp(1e-6, 1 - 1e-6)
    assert finetune_loss(p, p, p, y) < 1e-3


def test_non_binary_target():
    ys, yc, y = rand_maps(12)
    with pytest.raises(DomainError):
        change_loss(ys, yc, y * 0.5)


# --- schedule -------------------------------------------------------------------

def test_lr_schedule(cfg):
    cfg.train.phase, cfg.train.lr, cfg.train.epochs = "pretrain", None, None
    assert lr_at(0, cfg.train) == 0.1 and cfg.train.num_epochs == 200
    rates = [lr_at(e, cfg.train) for e in range(200)]
    assert all(abs(b / a - 0.97) < 1e-12 for a, b in zip(rates, rates[1:]))
    cfg.train.gamma = 1.0
    assert {lr_at(e, cfg.train) for e in range(200)} == {0.1}
    cfg.train.phase = "finetune"
    assert lr_at(0, cfg.train) == 0.01 and cfg.train.num_epochs == 50
    with pytest.raises(ValueError):
        lr_at(50, cfg.train)


# --- parameter partition ----------------------------------------------------------

def _batch(seed=0, n=4, size=64, seg=False):
    g = torch.Generator().manual_seed(seed)
    b = {"a": torch.rand(n, 3, size, size, generator=g), "b": torch.rand(n, 3, size, size, generator=g),
         "label": (torch.rand(n, size, size, generator=g) > 0.7).float()}
    if seg:
        b["seg_a"] = (torch.rand(n, size, size, generator=g) > 0.5).long()
        b["seg_b"] = (torch.rand(n, size, size, generator=g) > 0.5).long()
    return b


@pytest.mark.parametrize("phase", ["pretrain", "finetune"])
def test_only_phase_parts_change(cfg, phase, seeded):
    model = build_model(cfg, phase)
    enc_before = {k: v.clone() for k, v in model.encoder.state_dict().items()}
    parts_before = {n: {k: v.clone() for k, v in m.state_dict().items()} for n, m in model.components().items()}
    trainer = Trainer(model, cfg)
    for _ in range(2):
        trainer.step(_batch(seg=phase == "pretrain"))
    assert all(torch.equal(v, model.encoder.state_dict()[k]) for k, v in enc_before.items())
    assert all(p.grad is None for p in model.encoder.parameters())
    expected = {"adapter", "semantic", "difference", "seg_head" if phase == "pretrain" else "fusion"}
    assert set(model.components()) == expected
    for name, module in model.components().items():
        changed = any(not torch.equal(v, module.state_dict()[k]) for k, v in parts_before[name].items()
                      if v.is_floating_point())
        assert changed, name


def test_decoder_gradients_mostly_nonzero(cfg, seeded):
    model = build_model(cfg, "finetune")
    trainer = Trainer(model, cfg)
    model.train()
    # at 64 px the stride-32 level is 2x2 and 3x3 corner taps only ever see padding
    terms = trainer.losses(_batch(n=2, size=128))
    terms["total"].backward()
    total = nonzero = 0
    for module in (model.semantic, model.difference):
        for p in module.parameters():
            assert p.grad is not None and torch.isfinite(p.grad).all()
            total += p.numel()
            nonzero += torch.count_nonzero(p.grad).item()
    assert nonzero / total >= 0.99


def test_fusion_logit_gradient_matches_finite_difference(cfg, seeded):
    model = build_model(cfg, "finetune").double().eval()
    b = _batch(3)
    xa, xb, y = b["a"].double(), b["b"].double(), b["label"].double()
    with torch.no_grad():
        model.fusion.omega.fill_(0.4)

    def loss():
        out = model(xa, xb)
        return finetune_loss(out["semantic"], out["difference"], out["fused"], y)

    model.zero_grad()
    loss().backward()
    analytic = model.fusion.omega.grad.item()
    h = 1e-5
    with torch.no_grad():
        model.fusion.omega.fill_(0.4 + h)
        up = loss().item()
        model.fusion.omega.fill_(0.4 - h)
        down = loss().item()
    numeric = (up - down) / (2 * h)
    assert abs(analytic - numeric) <= 1e-4 * abs(numeric)


def test_nan_loss_aborts_with_diagnostics(cfg, seeded):
    model = build_model(cfg, "finetune")
    trainer = Trainer(model, cfg)
    trainer.step(_batch())
    with torch.no_grad():
        model.fusion.omega.fill_(float("nan"))
    with pytest.raises(NumericError) as info:
        trainer.step(_batch(1))
    assert info.value.diagnostics["step"] == 1 and len(info.value.diagnostics["history"]) == 1


# --- checkpoints --------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(cfg, tmp_path, seeded):
    model = build_model(cfg, "finetune")
    trainer = Trainer(model, cfg)
    trainer.step(_batch())
    path = save_checkpoint(tmp_path / "epoch_1.pt", model, cfg, 1, trainer.optimizer)
    ckpt = load_checkpoint(tmp_path)
    assert not any("encoder" in k for k in ckpt["components"])
    torch.manual_seed(123)
    fresh = build_model(cfg, "finetune")
    assert restore(fresh, ckpt, cfg) == ["adapter", "semantic", "difference", "fusion"]
    x = _batch(4)
    a, b = predict_batch(model, x["a"], x["b"]), predict_batch(fresh, x["a"], x["b"])
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert load_checkpoint(path)["epoch"] == 1


def test_checkpoint_architecture_mismatch(cfg, tmp_path):
    save_checkpoint(tmp_path / "epoch_1.pt", build_model(cfg, "pretrain"), cfg, 1)
    other = small_config()
    other.decoder.base_channels = 8
    with pytest.raises(CompatibilityError):
        restore(build_model(other, "finetune"), load_checkpoint(tmp_path / "epoch_1.pt"), other)


# --- loops --------------------------------------------------------------------------

def test_run_pretrain_then_finetune(tmp_path, toy_dataset):
    cfg = small_config(epochs=2, samples_per_epoch=8, batch_size=4, lr=0.05)
    segs = synthetic.segmentation_set(6, 64, seed=1)
    manifest = DatasetManifest([SourceSpec("toy")], 64, 8, seed=0)
    src = {"toy": SegSource.from_samples(SourceSpec("toy"), segs)}
    ckpt = run_pretrain(cfg, manifest, tmp_path / "pre", sources=src)
    assert ckpt.name == "epoch_2.pt" and (tmp_path / "pre" / "epoch_1.pt").exists()
    state = load_checkpoint(ckpt)
    assert set(state["components"]) == {"adapter", "semantic", "difference", "seg_head"}
    log_lines = (tmp_path / "pre" / "metrics.log").read_text().splitlines()
    assert log_lines[0].split("\t") == list(LOG_COLUMNS) and len(log_lines) == 3

    cfg = small_config(epochs=1, batch_size=2, val_fraction=0.25)
    ft = run_finetune(cfg, toy_dataset, tmp_path / "ft", init=tmp_path / "pre")
    state = load_checkpoint(ft)
    assert set(state["components"]) == {"adapter", "semantic", "difference", "fusion"}
    row = (tmp_path / "ft" / "metrics.log").read_text().splitlines()[1].split("\t")
    assert row[LOG_COLUMNS.index("val_f1")] != "nan"
    assert row[LOG_COLUMNS.index("loss_seg")] == "nan"
