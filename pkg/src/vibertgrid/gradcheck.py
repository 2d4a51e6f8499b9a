"""Central finite-difference checks of analytic gradients, in double precision.

Each probe builds a tiny float64 instance, computes autograd gradients of a
scalar loss and compares them against ``(f(x + h) - f(x - h)) / 2h`` for
every coordinate (or a seeded sample of coordinates for larger tensors).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .crf import BiLSTMCRF, CRFConfig, crf_nll
from .document import BoundingBox, Document, Word
from .encoding import EncoderConfig, TextEncoder, Vocabulary, chunk, encode_tokens, tokenize
from .grid import BackboneConfig
from .model import ClassWeights, ModelConfig, ViBERTgrid
from .seg_head import SegHead, seg_loss
from .word_head import LateFusion, LinearHead, WordHeadConfig, enet_weights, linear_head_loss

STEP = 1e-5
FLOOR = 1e-8
REL_FLOOR = 1e-3


@dataclass
class GradReport:
    name: str
    max_rel_err: float
    checked: int
    worst: str = ""
    grad_norm: float = float("nan")

    @property
    def ok(self):
        return self.max_rel_err < 1e-4


def relative_error(analytic: float, numeric: float, floor: float = FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check(name, loss_fn, tensors: dict, max_per_tensor: int | None = None, seed: int = 0,
          step: float = STEP, indices: dict | None = None) -> GradReport:
    """Compare autograd against central differences for every tensor in ``tensors``.

    ``indices`` optionally fixes which flat coordinates of a tensor are probed.
    """
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    grads = {k: t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
             for k, t in tensors.items()}
    # coordinates with exactly-zero true gradient only see round-off noise, so the
    # denominator is floored at a small fraction of the probe's gradient scale
    scale = max(float(g.abs().max()) for g in grads.values())
    floor = max(FLOOR, REL_FLOOR * scale)
    rng = np.random.default_rng(seed)
    worst, where, n = 0.0, "", 0
    with torch.no_grad():
        for key, t in tensors.items():
            flat = t.view(-1)
            idx = np.asarray(indices[key]) if indices and key in indices else np.arange(flat.numel())
            if max_per_tensor is not None and len(idx) > max_per_tensor:
                idx = np.sort(rng.choice(idx, size=max_per_tensor, replace=False))
            g = grads[key].view(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                err = relative_error(g[i].item(), (up - down) / (2 * step), floor)
                n += 1
                if err > worst:
                    worst, where = err, f"{key}[{i}]"
    return GradReport(name, worst, n, where)


def crf_probe(seed: int = 0) -> list[GradReport]:
    g = torch.Generator().manual_seed(seed)
    N, K = 5, 4
    E = torch.randn(N, K, generator=g, dtype=torch.float64, requires_grad=True)
    T = torch.randn(K, K, generator=g, dtype=torch.float64, requires_grad=True)
    y = torch.randint(0, K, (N,), generator=g)
    reports = [check("crf_nll wrt E, T", lambda: crf_nll(E, T, y), {"E": E, "T": T})]
    torch.manual_seed(seed)
    head = BiLSTMCRF(6, K, CRFConfig(hidden=4)).double()
    x = torch.randn(N, 6, generator=g, dtype=torch.float64)
    reports.append(check("crf_nll wrt BiLSTM + emission + transitions",
                         lambda: head.nll(head.emissions(x), y), dict(head.named_parameters())))
    return reports


def linear_head_probe(seed: int = 0) -> GradReport:
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    cfg = WordHeadConfig(channels=3, hidden=8, dropout=0.0)
    dim, N, K = 4, 4, 3
    fuse, head = LateFusion(cfg, dim).double(), LinearHead(8, K).double()
    rois = torch.randn(N, 3, 7, 7, generator=g, dtype=torch.float64)
    emb = torch.randn(N, dim, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 2, 1, 2])
    wm = torch.as_tensor(enet_weights([0.3, 0.2, 0.5]))
    wb = torch.as_tensor(enet_weights([0.5, 0.5]))

    def loss():
        o1, o2 = head(fuse(rois, emb))
        return linear_head_loss(o1, o2, y, K - 1, wm, wb)[2]
    params = {f"late.{k}": v for k, v in fuse.named_parameters()}
    params.update({f"cls.{k}": v for k, v in head.named_parameters()})
    return check("linear-head L_word wrt all head params", loss, params)


def seg_probe(seed: int = 0) -> GradReport:
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    head = SegHead(3, 3).double()
    fmap = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
    fine = torch.randint(-1, 3, (8, 8), generator=g)
    coarse = torch.where(fine < 0, 2, torch.where(fine == 2, 1, 0))
    wc = torch.as_tensor(enet_weights([0.2, 0.3, 0.5]))
    wf = torch.as_tensor(enet_weights([0.1, 0.2, 0.7]))

    def loss():
        c, f = head(fmap)
        return seg_loss(c, f, coarse, fine, wc, wf)
    return check("seg_loss wrt seg params", loss, dict(head.named_parameters()))


def encoder_probe(seed: int = 0) -> GradReport:
    torch.manual_seed(seed)
    vocab = Vocabulary.build(["abc", "abd", "xy"], 40, min_count=1)
    enc = TextEncoder(EncoderConfig(vocab_size=len(vocab), dim=4, layers=1, heads=2,
                                    ff_mult=2)).double()
    toks = tokenize(["abc", "xy", "abd", "zz"], vocab)
    chunks = chunk(toks, vocab)
    # weighted sum: a plain sum over a LayerNorm output is nearly constant
    probe = torch.randn(len(toks), 4, generator=torch.Generator().manual_seed(seed),
                        dtype=torch.float64)
    return check("encoder weighted-sum probe wrt encoder params",
                 lambda: (encode_tokens(chunks, enc, vocab, len(toks)) * probe).sum(),
                 dict(enc.named_parameters()), max_per_tensor=40, seed=seed)


def _probe_document():
    img = np.ones((64, 64, 1), dtype=np.float32)
    words = [Word("total", BoundingBox(4, 4, 30, 12), 1), Word("12.50", BoundingBox(34, 4, 60, 12), 0),
             Word("on", BoundingBox(4, 20, 14, 28), 1), Word("friday", BoundingBox(18, 20, 50, 28), 1)]
    for w in words:
        b = w.bbox
        img[int(b.y_min):int(b.y_max), int(b.x_min):int(b.x_max)] = 0.2
    return Document("probe", img, words)


def end_to_end_probe(head_kind: str = "linear", seed: int = 0) -> list[GradReport]:
    """Loss through the whole network, differentiated w.r.t. the embedding table rows in use.

    Besides the full gradient, the grid-only and skip-only routes are checked
    separately; each must carry a nonzero gradient (reported as its norm).
    """
    torch.manual_seed(seed)
    doc = _probe_document()
    vocab = Vocabulary.build([w.text for w in doc.words], 60, min_count=1)
    cfg = ModelConfig(head_kind=head_kind, num_fields=1,
                      encoder=EncoderConfig(dim=4, layers=1, heads=2, ff_mult=2),
                      backbone=BackboneConfig(widths=(4, 4, 4, 4), blocks=(1, 1, 1, 1),
                                              fpn_channels=4, groups=2),
                      word=WordHeadConfig(hidden=8, dropout=0.0), crf=CRFConfig(hidden=4))
    model = ViBERTgrid(cfg, len(vocab)).double()
    prep = model.prepare(doc, vocab)
    weights = ClassWeights.from_documents([doc], cfg.tags)
    table = model.encoder.embed.weight
    dim = table.shape[1]
    used = sorted(set(prep.chunk_ids[0].token_ids[1:1 + prep.num_tokens]))
    coords = [r * dim + j for r in used for j in range(dim)]

    with torch.no_grad():
        frozen = model.word_embeddings(prep, vocab).clone()
    reports = []
    for label, paths in (("full", {}), ("grid route only", {"skip_emb": frozen}),
                         ("skip route only", {"grid_emb": frozen})):
        def loss(paths=paths):
            lw, la = model.losses(prep, vocab, weights, 1.0, training=False, **paths)
            return lw + la
        rep = check(f"end-to-end {head_kind} ({label}) wrt used embedding rows", loss,
                    {"encoder.embed.weight": table}, indices={"encoder.embed.weight": coords})
        rep.grad_norm = float(table.grad[used].norm())
        reports.append(rep)
    def full_loss():
        lw, la = model.losses(prep, vocab, weights, 1.0, training=False)
        return lw + la
    reports.append(check(f"end-to-end {head_kind} wrt sampled coordinates of every parameter",
                         full_loss, dict(model.named_parameters()), max_per_tensor=3, seed=seed))
    model.zero_grad(set_to_none=True)
    return reports


def run_all(seed: int = 0) -> list[GradReport]:
    reports = crf_probe(seed)
    reports.append(linear_head_probe(seed))
    reports.append(seg_probe(seed))
    reports.append(encoder_probe(seed))
    for kind in ("linear", "bilstm_crf"):
        reports.extend(end_to_end_probe(kind, seed))
    return reports
