import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from oracles import brute_owner, pixel_cells, random_document
from vibertgrid.document import BoundingBox, Document, Word
from vibertgrid.grid import Backbone, BackboneConfig, EarlyFusion, build_bertgrid

D = torch.float64
SMALL = BackboneConfig(widths=(4, 8, 8, 8), blocks=(1, 1, 1, 1), fpn_channels=8, groups=2)


def page(words, H=32, W=32):
    return Document("g", np.ones((H, W, 1), np.float32), words)


def word(box, label=0):
    return Word("w", BoundingBox(*box), label)


# ---------------------------------------------------------------- BERTgrid

def test_grid_zero_words():
    g = build_bertgrid(torch.zeros(0, 3), page([]), 4)
    assert g.shape == (3, 8, 8) and not g.any()


def test_grid_single_word_example():
    g = build_bertgrid(torch.tensor([[1.0, -1.0]]), page([word((0, 0, 8, 8))]), 4)
    nz = {tuple(c) for c in np.argwhere(g[0].numpy() != 0)}
    assert nz == {(y, x) for y in range(3) for x in range(3)}
    assert (g[:, :3, :3] == torch.tensor([1.0, -1.0])[:, None, None]).all()


def test_grid_identical_boxes_keep_second():
    emb = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
    g = build_bertgrid(emb, page([word((4, 4, 12, 12)), word((4, 4, 12, 12))]), 4)
    assert (g[:, 1:4, 1:4] == torch.tensor([0.0, 2.0])[:, None, None]).all()


@pytest.mark.parametrize("H, W, S, shape", [(33, 31, 4, (9, 8)), (64, 64, 4, (16, 16)),
                                            (1, 1, 8, (1, 1)), (17, 40, 8, (3, 5))])
def test_grid_dims_use_ceiling(H, W, S, shape):
    assert build_bertgrid(torch.zeros(0, 2), page([], H, W), S).shape[1:] == shape


@given(st.integers(0, 100_000), st.sampled_from([1, 2, 4, 8]))
def test_grid_matches_enumeration(seed, S):
    r = np.random.default_rng(seed)
    doc = random_document(r)
    emb = torch.tensor(r.uniform(0.5, 2.0, (len(doc.words), 3)))  # no zero entries
    g = build_bertgrid(emb, doc, S)
    owner = brute_owner([w.bbox.as_list() for w in doc.words], S, doc.height, doc.width)
    for y, row in enumerate(owner):
        for x, o in enumerate(row):
            want = emb[o] if o >= 0 else torch.zeros(3, dtype=emb.dtype)
            assert torch.equal(g[:, y, x], want)
    union = set().union(*[pixel_cells(w.bbox.as_list(), S, doc.height, doc.width)
                          for w in doc.words]) if doc.words else set()
    assert int((g.abs().sum(0) > 0).sum()) == len(union)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 3), st.integers(0, 3))
def test_grid_translation_by_stride(x0, y0, w, h):
    S = 4
    box = (x0 * 1.5, y0 * 1.5, x0 * 1.5 + w * 3, y0 * 1.5 + h * 3)
    moved = (box[0] + S, box[1] + S, box[2] + S, box[3] + S)
    emb = torch.ones(1, 1)
    a = build_bertgrid(emb, page([word(box)], 64, 64), S)[0].numpy()
    b = build_bertgrid(emb, page([word(moved)], 64, 64), S)[0].numpy()
    assert np.array_equal(np.roll(a, (1, 1), (0, 1)), b)


# ---------------------------------------------------------------- backbone

def test_backbone_shapes_and_fpn_channels():
    torch.manual_seed(0)
    bb = Backbone(BackboneConfig())
    levels, p2 = bb(torch.rand(1, 3, 64, 64))
    assert [lv.shape[-1] for lv in levels] == [16, 8, 4, 2]
    assert [lv.shape[1] for lv in levels] == [32, 64, 128, 256]
    assert p2.shape == (1, 256, 16, 16)


def test_backbone_zero_image_bias_free_is_zero():
    torch.manual_seed(0)
    bb = Backbone(BackboneConfig(widths=(4, 8, 8, 8), fpn_channels=8, groups=2, bias=False))
    levels, p2 = bb(torch.zeros(1, 3, 64, 96))
    assert all(not lv.any() for lv in levels) and not p2.any()


def test_backbone_channel_mismatch_errors():
    with pytest.raises(ValueError):
        Backbone(SMALL)(torch.zeros(1, 1, 32, 32))


def test_parameter_names_follow_checkpoint_scheme():
    from vibertgrid.model import ModelConfig, ViBERTgrid
    names = [n for n, _ in ViBERTgrid(ModelConfig.tiny(), 30).named_parameters()]
    assert any(n.startswith("backbone.stage1.block0.") for n in names)
    assert any(n.startswith("backbone.stage4.block0.") for n in names)
    assert "fusion.proj.weight" in names
    assert any(n.startswith("word_head.") for n in names)
    assert any(n.startswith("seg_head.") for n in names)


# ---------------------------------------------------------------- early fusion

def fusion(bias=True, channels=1):
    torch.manual_seed(0)
    cfg = BackboneConfig(in_channels=channels, widths=(4, 8, 8, 8), blocks=(1, 1, 1, 1),
                         fpn_channels=8, groups=2, bias=bias)
    bb = Backbone(cfg).double()
    return bb, EarlyFusion(3, bb).double()


def test_zero_grid_equals_text_free_backbone():
    bb, fu = fusion()
    img = torch.rand(1, 40, 56, dtype=D)
    zero = fu(bb, img, torch.zeros(3, 10, 14, dtype=D))
    none = fu(bb, img, None)
    assert zero.shape == (8, 10, 14)
    assert torch.equal(zero, none)


def test_zero_image_bias_free_depends_on_grid_only():
    bb, fu = fusion(bias=False)
    img = torch.zeros(1, 32, 32, dtype=D)
    g = torch.rand(3, 8, 8, dtype=D)
    out = fu(bb, img, g)
    assert out.abs().sum() > 0
    assert not fu(bb, img, torch.zeros_like(g)).any()
    assert torch.allclose(fu(bb, img, 2 * g), fu(bb, img, 2 * g))  # deterministic


def test_fusion_rejects_wrong_grid_shape():
    bb, fu = fusion()
    with pytest.raises(ValueError):
        fu(bb, torch.zeros(1, 32, 32, dtype=D), torch.zeros(3, 7, 8, dtype=D))


@pytest.mark.parametrize("H, W", [(33, 31), (17, 90), (64, 64), (5, 7)])
def test_fusion_shapes_for_any_size(H, W):
    bb, fu = fusion()
    out = fu(bb, torch.rand(1, H, W, dtype=D), torch.rand(3, -(-H // 4), -(-W // 4), dtype=D))
    assert out.shape == (8, -(-H // 4), -(-W // 4))


def test_fusion_gradient_nonzero_iff_word_occupies_cells():
    bb, fu = fusion()
    # word 1 is thin enough to miss every stride-4 anchor
    doc = page([word((2, 2, 14, 14)), word((5, 5, 7, 7))])
    emb = torch.rand(2, 3, dtype=D, requires_grad=True)
    probe = torch.rand(8, 8, 8, dtype=D)
    (fu(bb, torch.rand(1, 32, 32, dtype=D), build_bertgrid(emb, doc, 4)) * probe).sum().backward()
    assert emb.grad[0].abs().sum() > 0
    assert not emb.grad[1].any()
