import logging
import math

import numpy as np
import pytest
import torch
from torch import nn

import vibertgrid.training as tr
from vibertgrid.document import Document
from vibertgrid.synthetic import SyntheticSpec, generate_synthetic
from vibertgrid.training import (PlateauSchedule, TrainConfig, evaluate_micro_f1, load_checkpoint,
                                 make_optimizers, multi_scale_sample, optimizer_step,
                                 plateau_schedule, save_checkpoint, train)

SPEC = SyntheticSpec(seed=3)


@pytest.fixture(scope="module")
def one_doc():
    return generate_synthetic(SPEC, 1)


def overfit_cfg(**kw):
    base = dict(model_preset="tiny", encoder_lr=1e-3, cnn_lr=1e-3, train_scales=(320,),
                eval_short_side=320, epochs=50, vocab_min_count=1)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- config

def test_config_validation():
    for bad in (dict(encoder_lr=0.0), dict(plateau_factor=1.0), dict(train_scales=()),
                dict(model_preset="huge"), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    d = TrainConfig().to_dict()
    assert d["encoder_lr"] == 5e-5 and d["cnn_lr"] == 1e-4 and d["cnn_weight_decay"] == 0.005
    assert d["train_scales"] == [320, 416, 512, 608, 704] and d["batch_size"] == 2


# ---------------------------------------------------------------- AdamW

class Pair(nn.Module):
    def __init__(self):
        super().__init__()
        self.enc = nn.Parameter(torch.ones(3, dtype=torch.float64))
        self.cnn = nn.Parameter(torch.full((2,), 2.0, dtype=torch.float64))

    def encoder_parameters(self):
        return [self.enc]

    def cnn_parameters(self):
        return [self.cnn]


def steps(model, opts, grad, n):
    for _ in range(n):
        for p in model.parameters():
            p.grad = torch.full_like(p, grad)
        assert optimizer_step(model, opts)


def test_zero_grad_zero_decay_leaves_params():
    m = Pair()
    steps(m, make_optimizers(m, TrainConfig(encoder_weight_decay=0.0, cnn_weight_decay=0.0)), 0.0, 5)
    assert torch.equal(m.enc, torch.ones(3, dtype=torch.float64))
    assert torch.equal(m.cnn, torch.full((2,), 2.0, dtype=torch.float64))


def test_decoupled_decay_factor():
    m = Pair()
    cfg = TrainConfig(encoder_lr=1e-2, encoder_weight_decay=0.01, cnn_lr=1e-2, cnn_weight_decay=0.01)
    steps(m, make_optimizers(m, cfg), 0.0, 3)
    np.testing.assert_allclose(m.enc.detach().numpy(), (1 - 1e-4) ** 3, rtol=1e-14)
    np.testing.assert_allclose(m.cnn.detach().numpy(), 2 * (1 - 1e-4) ** 3, rtol=1e-14)


def test_constant_gradient_step_approaches_lr():
    m = Pair()
    cfg = TrainConfig(encoder_lr=1e-3, encoder_weight_decay=0.0, cnn_lr=1e-3, cnn_weight_decay=0.0)
    opts = make_optimizers(m, cfg)
    steps(m, opts, 0.7, 200)
    before = m.enc.detach().clone()
    steps(m, opts, 0.7, 1)
    delta = (before - m.enc.detach()).abs()
    np.testing.assert_allclose(delta.numpy(), 1e-3, rtol=0.01)


def test_group_hyperparameters():
    m = Pair()
    enc, cnn = make_optimizers(m, TrainConfig())
    assert enc.param_groups[0]["lr"] == 5e-5 and enc.param_groups[0]["weight_decay"] == 0.01
    assert cnn.param_groups[0]["lr"] == 1e-4 and cnn.param_groups[0]["weight_decay"] == 0.005
    assert enc.param_groups[0]["betas"] == (0.9, 0.999) and enc.param_groups[0]["eps"] == 1e-8


def test_non_finite_gradient_aborts_and_logs(caplog):
    m = Pair()
    opts = make_optimizers(m, TrainConfig())
    m.enc.grad = torch.tensor([1.0, math.nan, 0.0], dtype=torch.float64)
    m.cnn.grad = torch.ones(2, dtype=torch.float64)
    with caplog.at_level(logging.WARNING, logger="vibertgrid.training"):
        assert not optimizer_step(m, opts)
    assert "enc" in caplog.text
    assert torch.equal(m.cnn, torch.full((2,), 2.0, dtype=torch.float64))
    assert m.enc.grad is None and m.cnn.grad is None


# ---------------------------------------------------------------- plateau

def test_plateau_strictly_improving_keeps_rate():
    assert plateau_schedule([0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99]) == 1.0


def test_plateau_fires_after_five_stale_epochs():
    s = PlateauSchedule(5, 0.1)
    hist = [0.1, 0.2, 0.5, 0.5, 0.4, 0.5, 0.3, 0.5]  # best at epoch 3, flat through 8
    mults = [s.update(v, e) for e, v in enumerate(hist, 1)]
    assert mults[:7] == [1.0] * 7 and mults[7] == pytest.approx(0.1)
    assert s.events == [8]


def test_plateau_two_stale_windows_compound():
    assert plateau_schedule([0.5] + [0.4] * 10) == pytest.approx(0.01)
    assert plateau_schedule([0.5] + [0.4] * 9) == pytest.approx(0.1)


def test_plateau_multiplier_never_increases():
    r = np.random.default_rng(0)
    s = PlateauSchedule(2, 0.5)
    prev = 1.0
    for e, v in enumerate(r.uniform(size=200), 1):
        m = s.update(float(v), e)
        assert m <= prev
        prev = m


# ---------------------------------------------------------------- multi-scale

def test_single_scale_is_deterministic(one_doc):
    d = one_doc[0]
    cfg = TrainConfig(train_scales=(512,))
    out = multi_scale_sample(d, cfg, np.random.default_rng(0))
    assert min(out.height, out.width) == 512 or max(out.height, out.width) == 800


def test_scale_frequencies_within_three_sigma():
    cfg = TrainConfig()
    rng = np.random.default_rng(7)
    draws = [tr.sample_scale(cfg, rng) for _ in range(10_000)]
    sigma = math.sqrt(10_000 * 0.2 * 0.8)
    for s in cfg.train_scales:
        assert abs(draws.count(s) - 2000) <= 3 * sigma
    assert set(draws) == set(cfg.train_scales)


def test_eval_mode_bypasses_sampling():
    doc = Document("p", np.ones((100, 50, 3), np.float32), [])
    cfg = TrainConfig(eval_short_side=704, max_long_side=800)
    out = multi_scale_sample(doc, cfg, None, train=False)
    assert (out.height, out.width) == (800, 400)  # long-side cap wins over 704
    doc = Document("q", np.ones((100, 120, 3), np.float32), [])
    out = multi_scale_sample(doc, TrainConfig(eval_short_side=512), None, train=False)
    assert min(out.height, out.width) == 512


# ---------------------------------------------------------------- training runs

def test_overfit_single_document(one_doc):
    st = train(overfit_cfg(), one_doc, labels=SPEC.label_set())
    L = [r["loss_word"] + r["loss_aux"] for r in st.history]
    assert all(b < a for a, b in zip(L[:10], L[1:10]))
    assert evaluate_micro_f1(st, one_doc) == 1.0


def test_same_seed_same_curve(one_doc):
    a = train(overfit_cfg(epochs=4), one_doc, labels=SPEC.label_set())
    b = train(overfit_cfg(epochs=4), one_doc, labels=SPEC.label_set())
    assert a.history == b.history
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(p, q), n


@pytest.mark.parametrize("head", ["linear", "bilstm_crf"])
def test_checkpoint_round_trip_gives_identical_step(one_doc, tmp_path, head):
    docs = generate_synthetic(SPEC, 3)
    cfg = overfit_cfg(head_kind=head, epochs=2, train_scales=(256, 320), dropout=0.3)
    st = train(cfg, docs, labels=SPEC.label_set())
    save_checkpoint(st, tmp_path / "s.ckpt")
    loaded = load_checkpoint(tmp_path / "s.ckpt")
    a = train(cfg, docs, state=st, epochs=1)
    b = train(cfg, docs, state=loaded, epochs=1)
    assert a.history[-1] == b.history[-1]
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(p, q), n


def test_checkpoint_shape_mismatch_is_reported(one_doc, tmp_path):
    from vibertgrid.checkpoint import load_tensors, save_tensors
    st = train(overfit_cfg(epochs=1), one_doc, labels=SPEC.label_set())
    save_checkpoint(st, tmp_path / "s.ckpt")
    tensors, meta = load_tensors(tmp_path / "s.ckpt")
    tensors["fusion.proj.weight"] = torch.zeros(1, 1, 1, 1)
    save_tensors(tmp_path / "bad.ckpt", tensors, meta)
    with pytest.raises(ValueError, match="fusion.proj.weight"):
        load_checkpoint(tmp_path / "bad.ckpt")


@pytest.mark.parametrize("head", ["linear", "bilstm_crf"])
def test_reachability_audit(one_doc, monkeypatch, head):
    seen = {}
    real = tr.optimizer_step

    def spy(model, optimizers, grad_clip=0.0):
        for n, p in model.named_parameters():
            seen[n] = seen.get(n, False) or (p.grad is not None and bool(p.grad.any()))
        return real(model, optimizers, grad_clip)

    monkeypatch.setattr(tr, "optimizer_step", spy)
    train(overfit_cfg(head_kind=head, epochs=3), one_doc, labels=SPEC.label_set())
    dead = sorted(n for n, ok in seen.items() if not ok)
    assert seen and not dead, dead


def test_lambda_zero_leaves_seg_head_without_gradient(one_doc, monkeypatch):
    grads = []
    real = tr.optimizer_step

    def spy(model, optimizers, grad_clip=0.0):
        grads.append([p.grad for p in model.seg_head.parameters()])
        return real(model, optimizers, grad_clip)

    monkeypatch.setattr(tr, "optimizer_step", spy)
    st = train(overfit_cfg(lambda_aux=0.0), one_doc, labels=SPEC.label_set())
    assert grads and all(g is None or not g.any() for step in grads for g in step)
    assert evaluate_micro_f1(st, one_doc) == 1.0
    assert all(r["loss_aux"] == 0.0 for r in st.history)


def test_empty_documents_are_skipped(one_doc, caplog):
    empty = Document("blank", np.ones((64, 64, 3), np.float32), [])
    with caplog.at_level(logging.INFO, logger="vibertgrid.training"):
        st = train(overfit_cfg(epochs=1, batch_size=1), [empty] + one_doc, labels=SPEC.label_set())
    assert "blank" in caplog.text and st.step == 1


def test_non_finite_losses_abort_after_ten(one_doc, monkeypatch):
    def nan_losses(self, *a, **k):
        z = torch.tensor(math.nan, requires_grad=True)
        return z, z

    monkeypatch.setattr(tr.ViBERTgrid, "losses", nan_losses)
    with pytest.raises(RuntimeError, match="10 consecutive"):
        train(overfit_cfg(batch_size=1), one_doc * 10, labels=SPEC.label_set())
    with pytest.raises(ValueError):
        train(overfit_cfg(), [], labels=SPEC.label_set())


def test_metrics_log_and_checkpoints_written(one_doc, tmp_path):
    import json
    train(overfit_cfg(epochs=2), one_doc, one_doc, labels=SPEC.label_set(), out_dir=tmp_path)
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2]
    assert set(lines[0]) == {"epoch", "step", "loss_word", "loss_aux", "lr_encoder", "lr_cnn",
                             "val_micro_f1"}
    assert (tmp_path / "last.ckpt").exists() and (tmp_path / "best.ckpt").exists()
