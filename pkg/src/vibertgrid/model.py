"""The full network: text encoder -> BERTgrid -> fused backbone -> word head(s) + seg head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .crf import BiLSTMCRF, CRFConfig
from .document import Document, owner_map, rasterize_masks
from .encoding import (PAYLOAD, EncoderConfig, TextEncoder, Vocabulary, aggregate_word_embeddings,
                       chunk, encode_tokens, tokenize)
from .grid import Backbone, BackboneConfig, EarlyFusion, scatter_grid
from .seg_head import SegHead, seg_loss
from .tags import TagScheme
from .word_head import LateFusion, LinearHead, WordHeadConfig, enet_weights, linear_head_loss, roi_align

HEAD_KINDS = ("linear", "bilstm_crf")


@dataclass
class ModelConfig:
    head_kind: str = "linear"
    num_fields: int = 4
    tag_scheme: str = "raw"
    chunk_stride: int = PAYLOAD
    crf_binary_aux: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    word: WordHeadConfig = field(default_factory=WordHeadConfig)
    crf: CRFConfig = field(default_factory=CRFConfig)

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}")
        for name, kind in (("encoder", EncoderConfig), ("backbone", BackboneConfig),
                           ("word", WordHeadConfig), ("crf", CRFConfig)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, kind(**value))
        self.backbone.widths = tuple(self.backbone.widths)
        self.backbone.blocks = tuple(self.backbone.blocks)
        self.word.channels = self.backbone.fpn_channels

    @property
    def tags(self) -> TagScheme:
        return TagScheme(self.num_fields, self.tag_scheme)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["widths"] = list(self.backbone.widths)
        d["backbone"]["blocks"] = list(self.backbone.blocks)
        return d

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """CPU-scale widths used for tests and the synthetic experiments."""
        cfg = dict(
            encoder=EncoderConfig(dim=32, layers=1, heads=2, ff_mult=2),
            backbone=BackboneConfig(widths=(8, 16, 16, 16), blocks=(1, 1, 1, 1),
                                    fpn_channels=16, groups=4),
            word=WordHeadConfig(hidden=64, dropout=0.1),
            crf=CRFConfig(hidden=32),
        )
        cfg.update(overrides)
        return cls(**cfg)


@dataclass
class ClassWeights:
    multi: np.ndarray
    binary: np.ndarray
    coarse: np.ndarray
    fine: np.ndarray
    k: float = 1.02

    @classmethod
    def uniform(cls, num_tags: int, num_labels: int) -> "ClassWeights":
        return cls(np.ones(num_tags), np.ones(2), np.ones(3), np.ones(num_labels), 1.0)

    @classmethod
    def from_documents(cls, docs, tags: TagScheme, k: float = 1.02, stride: int = 4):
        """ENet weights from word-tag, field/other, coarse-pixel and label priors."""
        tag_counts = np.zeros(tags.num_tags)
        label_counts = np.zeros(tags.num_labels)
        coarse_counts = np.zeros(3)
        for doc in docs:
            labels = [w.label for w in doc.words]
            for t in tags.encode(labels):
                tag_counts[t] += 1
            for lab in labels:
                label_counts[lab] += 1
            masks = rasterize_masks(doc, stride, tags.C)
            coarse_counts += np.bincount(masks.coarse_mask.ravel(), minlength=3)
        if label_counts.sum() == 0:
            raise ValueError("no labeled words")
        field_share = label_counts[:tags.C].sum() / label_counts.sum()
        return cls(
            multi=enet_weights(tag_counts / tag_counts.sum(), k),
            binary=enet_weights([1.0 - field_share, field_share], k),
            coarse=enet_weights(coarse_counts / coarse_counts.sum(), k),
            fine=enet_weights(label_counts / label_counts.sum(), k),
            k=k,
        )

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "ClassWeights":
        return cls(**{k: (np.asarray(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass
class Prepared:
    """Tensors for one document at its current scale."""

    doc: Document
    chunk_ids: list
    word_index: list
    num_tokens: int
    image: torch.Tensor
    owner: np.ndarray
    boxes: torch.Tensor
    tags: Optional[torch.Tensor] = None
    coarse_mask: Optional[torch.Tensor] = None
    fine_mask: Optional[torch.Tensor] = None

    @property
    def num_words(self):
        return len(self.doc.words)


class ViBERTgrid(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int):
        super().__init__()
        cfg.encoder.vocab_size = vocab_size
        self.cfg = cfg
        tags = cfg.tags
        self.encoder = TextEncoder(cfg.encoder)
        self.backbone = Backbone(cfg.backbone)
        self.fusion = EarlyFusion(cfg.encoder.dim, self.backbone)
        self.word_head = LateFusion(cfg.word, cfg.encoder.dim)
        if cfg.head_kind == "linear":
            self.classifier = LinearHead(cfg.word.hidden, tags.num_tags, cfg.word.binary_classifier,
                                         cfg.word.bias)
            self.crf = None
            self.aux_binary = None
        else:
            self.classifier = None
            self.crf = BiLSTMCRF(cfg.word.hidden, tags.num_tags, cfg.crf)
            self.aux_binary = (nn.Linear(cfg.word.hidden, 2, bias=cfg.word.bias)
                               if cfg.crf_binary_aux else None)
        self.seg_head = SegHead(cfg.backbone.fpn_channels, tags.num_labels)

    # parameter groups for the two optimizers
    def encoder_parameters(self):
        return list(self.encoder.parameters())

    def cnn_parameters(self):
        enc = {id(p) for p in self.encoder.parameters()}
        return [p for p in self.parameters() if id(p) not in enc]

    def prepare(self, doc: Document, vocab: Vocabulary, with_targets: bool = True) -> Prepared:
        tokens = tokenize([w.text for w in doc.words], vocab)
        chunks = chunk(tokens, vocab, self.cfg.chunk_stride)
        img = torch.from_numpy(np.ascontiguousarray(doc.image.transpose(2, 0, 1))).float()
        cin = self.cfg.backbone.in_channels
        if img.shape[0] != cin:
            img = img.mean(0, keepdim=True).expand(cin, -1, -1).contiguous()
        boxes = torch.tensor([w.bbox.as_list() for w in doc.words],
                             dtype=torch.float32).reshape(-1, 4)
        prep = Prepared(doc, chunks, tokens.word_index, len(tokens), img,
                        owner_map(doc, self.cfg.backbone.fusion_stride), boxes)
        if with_targets and doc.words and all(w.label is not None for w in doc.words):
            prep.tags = torch.tensor(self.cfg.tags.encode([w.label for w in doc.words]))
            masks = rasterize_masks(doc, 4, self.cfg.num_fields)
            prep.coarse_mask = torch.from_numpy(masks.coarse_mask)
            prep.fine_mask = torch.from_numpy(masks.fine_mask)
        return prep

    def word_embeddings(self, prep: Prepared, vocab: Vocabulary) -> torch.Tensor:
        tok = encode_tokens(prep.chunk_ids, self.encoder, vocab, prep.num_tokens)
        return aggregate_word_embeddings(tok, prep.word_index, prep.num_words)

    def features(self, prep: Prepared, vocab: Vocabulary, training: bool = False,
                 generator: torch.Generator | None = None, grid_emb=None, skip_emb=None):
        """Returns (word embeddings, P_fuse, fused per-word features x_hat).

        ``grid_emb`` / ``skip_emb`` replace the live embeddings on that route
        with a given tensor (used by gradient probes).
        """
        dtype = self.encoder.embed.weight.dtype
        emb = self.word_embeddings(prep, vocab)
        grid = scatter_grid(emb if grid_emb is None else grid_emb, prep.owner)
        p_fuse = self.fusion(self.backbone, prep.image.to(dtype), grid)
        rois = roi_align(p_fuse, prep.boxes.to(dtype), 4.0, self.cfg.word.roi_size,
                         self.cfg.word.sampling_ratio)
        x_hat = self.word_head(rois, emb if skip_emb is None else skip_emb, training, generator)
        return emb, p_fuse, x_hat

    def losses(self, prep: Prepared, vocab: Vocabulary, weights: ClassWeights,
               lambda_aux: float = 1.0, generator: torch.Generator | None = None,
               training: bool = True, **paths):
        """(L_word, L_aux) for one labeled document."""
        if prep.tags is None:
            raise ValueError("document has no labels")
        dtype = self.encoder.embed.weight.dtype
        _, p_fuse, x_hat = self.features(prep, vocab, training, generator, **paths)

        def w(a):
            return torch.as_tensor(a, dtype=dtype)
        other = self.cfg.tags.other_tag
        if self.crf is None:
            o1, o2 = self.classifier(x_hat)
            l_word = linear_head_loss(o1, o2, prep.tags, other, w(weights.multi), w(weights.binary))[2]
        else:
            E = self.crf.emissions(x_hat)
            l_word = self.crf.nll(E, prep.tags)
            if self.aux_binary is not None:
                l_word = l_word + linear_head_loss(self.aux_binary(x_hat), E, prep.tags, other,
                                                   None, w(weights.binary))[0]
        if lambda_aux == 0.0:
            return l_word, l_word.new_zeros(())
        coarse, fine = self.seg_head(p_fuse)
        l_aux = seg_loss(coarse, fine, prep.coarse_mask, prep.fine_mask, w(weights.coarse),
                         w(weights.fine))
        return l_word, l_aux

    @torch.no_grad()
    def predict_tags(self, prep: Prepared, vocab: Vocabulary) -> list[int]:
        if prep.num_words == 0:
            return []
        _, _, x_hat = self.features(prep, vocab, training=False)
        if self.crf is None:
            return self.classifier(x_hat)[1].argmax(dim=1).tolist()
        return self.crf.decode(self.crf.emissions(x_hat))[0]

    def predict_labels(self, prep: Prepared, vocab: Vocabulary) -> list[int]:
        return self.cfg.tags.decode(self.predict_tags(prep, vocab))
