"""Joint training: two AdamW groups, plateau decay, multi-scale sampling, checkpoints."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_tensors, save_tensors
from .document import Document, LabelSet, rescale_document
from .encoding import Vocabulary
from .evaluation import extract_entities, field_f1, gold_entities
from .model import ClassWeights, ModelConfig, ViBERTgrid

log = logging.getLogger(__name__)

MAX_BAD_STEPS = 10


@dataclass
class TrainConfig:
    head_kind: str = "linear"
    encoder_lr: float = 5e-5
    encoder_weight_decay: float = 0.01
    cnn_lr: float = 1e-4
    cnn_weight_decay: float = 0.005
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    plateau_patience_epochs: int = 5
    plateau_factor: float = 0.1
    batch_size: int = 2
    train_scales: tuple = (320, 416, 512, 608, 704)
    max_long_side: int = 800
    eval_short_side: int = 512
    epochs: int = 50
    seed: int = 0
    dropout: float = 0.1
    lambda_aux: float = 1.0
    enet_k: float = 1.02
    grad_clip: float = 0.0  # 0 = off
    vocab_size: int = 2000
    vocab_min_count: int = 5
    num_threads: int = 1
    model_preset: str = "full"  # "full" (original widths) or "tiny" (CPU scale)
    model: dict = field(default_factory=dict)  # overrides on top of the preset

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.train_scales = tuple(int(s) for s in self.train_scales)
        if min(self.encoder_lr, self.cnn_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if not self.train_scales:
            raise ValueError("train_scales must be nonempty")
        if self.model_preset not in ("full", "tiny"):
            raise ValueError("model_preset must be 'full' or 'tiny'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def model_config(self, num_fields: int) -> ModelConfig:
        base = ModelConfig.tiny() if self.model_preset == "tiny" else ModelConfig()
        d = base.to_dict()
        _deep_update(d, self.model)
        d["head_kind"] = self.head_kind
        d["num_fields"] = num_fields
        d["word"]["dropout"] = self.dropout
        return ModelConfig(**d)

    def to_dict(self):
        d = asdict(self)
        d["betas"], d["train_scales"] = list(self.betas), list(self.train_scales)
        return d


def _deep_update(base: dict, upd: dict):
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v


# --------------------------------------------------------------------------
# schedule and sampling

class PlateauSchedule:
    """Multiply the rate by ``factor`` once the best score is ``patience`` epochs old.

    After a decay the staleness count restarts, so a further decay needs another
    ``patience`` epochs without improvement.
    """

    def __init__(self, patience: int = 5, factor: float = 0.1):
        self.patience, self.factor = patience, factor
        self.best = -math.inf
        self.stale = 0
        self.multiplier = 1.0
        self.events: list[int] = []

    def update(self, score: float, epoch: int) -> float:
        if score > self.best:
            self.best, self.stale = score, 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.multiplier *= self.factor
                self.stale = 0
                self.events.append(epoch)
                log.info("lr decay at epoch %d -> multiplier %g", epoch, self.multiplier)
        return self.multiplier

    def state(self):
        return {"best": self.best, "stale": self.stale, "multiplier": self.multiplier,
                "events": list(self.events)}

    def load(self, st):
        self.best, self.stale = st["best"], st["stale"]
        self.multiplier, self.events = st["multiplier"], list(st["events"])


def plateau_schedule(history: Sequence[float], patience: int = 5,
                     factor: float = 0.1) -> float:
    sched = PlateauSchedule(patience, factor)
    for epoch, score in enumerate(history, start=1):
        sched.update(score, epoch)
    return sched.multiplier


def sample_scale(cfg: TrainConfig, rng: np.random.Generator) -> int:
    return int(cfg.train_scales[int(rng.integers(len(cfg.train_scales)))])


def multi_scale_sample(doc: Document, cfg: TrainConfig, rng: Optional[np.random.Generator],
                       train: bool = True) -> Document:
    side = sample_scale(cfg, rng) if train else cfg.eval_short_side
    return rescale_document(doc, side, max(cfg.max_long_side, side))


# --------------------------------------------------------------------------
# optimizers

def make_optimizers(model: ViBERTgrid, cfg: TrainConfig):
    enc = torch.optim.AdamW(model.encoder_parameters(), lr=cfg.encoder_lr, betas=cfg.betas,
                            eps=cfg.adam_eps, weight_decay=cfg.encoder_weight_decay)
    cnn = torch.optim.AdamW(model.cnn_parameters(), lr=cfg.cnn_lr, betas=cfg.betas,
                            eps=cfg.adam_eps, weight_decay=cfg.cnn_weight_decay)
    return enc, cnn


def set_multiplier(optimizers, cfg: TrainConfig, multiplier: float):
    enc, cnn = optimizers
    for g in enc.param_groups:
        g["lr"] = cfg.encoder_lr * multiplier
    for g in cnn.param_groups:
        g["lr"] = cfg.cnn_lr * multiplier


def optimizer_step(model: ViBERTgrid, optimizers, grad_clip: float = 0.0) -> bool:
    """Step both optimizers unless some gradient is non-finite (then nothing moves)."""
    for name, p in model.named_parameters():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            log.warning("non-finite gradient in %s; step aborted", name)
            for o in optimizers:
                o.zero_grad(set_to_none=True)
            return False
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    for o in optimizers:
        o.step()
        o.zero_grad(set_to_none=True)
    return True


# --------------------------------------------------------------------------
# state bundle

@dataclass
class TrainState:
    cfg: TrainConfig
    labels: LabelSet
    vocab: Vocabulary
    model: ViBERTgrid
    weights: ClassWeights
    optimizers: tuple
    schedule: PlateauSchedule
    rng: np.random.Generator
    dropout_gen: torch.Generator
    epoch: int = 0
    step: int = 0
    best_f1: Optional[float] = None
    history: list = field(default_factory=list)


def init_state(cfg: TrainConfig, train_docs: Sequence[Document], labels: LabelSet) -> TrainState:
    torch.set_num_threads(cfg.num_threads)
    torch.manual_seed(cfg.seed)
    vocab = Vocabulary.build([w.text for d in train_docs for w in d.words], cfg.vocab_size,
                             min_count=cfg.vocab_min_count)
    mcfg = cfg.model_config(labels.C)
    model = ViBERTgrid(mcfg, len(vocab))
    weights = ClassWeights.from_documents(train_docs, mcfg.tags, cfg.enet_k)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    return TrainState(cfg, labels.with_priors_from(train_docs), vocab, model, weights,
                      make_optimizers(model, cfg), PlateauSchedule(cfg.plateau_patience_epochs,
                                                                   cfg.plateau_factor),
                      np.random.default_rng(cfg.seed), gen)


def predict_document(model: ViBERTgrid, vocab: Vocabulary, doc: Document,
                     eval_short_side: Optional[int], max_long_side: int = 800) -> list[int]:
    if not doc.words:
        return []
    if eval_short_side:
        doc = rescale_document(doc, eval_short_side, max(max_long_side, eval_short_side))
    model.eval()
    return model.predict_labels(model.prepare(doc, vocab, with_targets=False), vocab)


def evaluate_micro_f1(state: TrainState, docs: Sequence[Document]) -> float:
    C = state.labels.C
    pred, gold = {}, {}
    for doc in docs:
        labels = predict_document(state.model, state.vocab, doc, state.cfg.eval_short_side,
                                  state.cfg.max_long_side)
        pred[doc.id] = extract_entities(labels, doc, C)
        gold[doc.id] = gold_entities(doc, C)
    return field_f1(pred, gold, C).micro_f1


def run_epoch(state: TrainState, train_docs: Sequence[Document]):
    cfg, model = state.cfg, state.model
    model.train()
    order = state.rng.permutation(len(train_docs))
    sums = {"loss_word": 0.0, "loss_aux": 0.0}
    n_steps, bad = 0, 0
    for start in range(0, len(order), cfg.batch_size):
        batch = [train_docs[i] for i in order[start:start + cfg.batch_size]]
        side = sample_scale(cfg, state.rng)
        l_word = l_aux = None
        n = 0
        for doc in batch:
            if not doc.words:
                log.info("skipping empty document %s", doc.id)
                continue
            scaled = rescale_document(doc, side, max(cfg.max_long_side, side))
            prep = model.prepare(scaled, state.vocab)
            lw, la = model.losses(prep, state.vocab, state.weights, cfg.lambda_aux,
                                  state.dropout_gen)
            l_word = lw if l_word is None else l_word + lw
            l_aux = la if l_aux is None else l_aux + la
            n += 1
        if n == 0:
            continue
        l_word, l_aux = l_word / n, l_aux / n
        total = l_word + cfg.lambda_aux * l_aux
        if not bool(torch.isfinite(total)):
            bad += 1
            log.warning("non-finite loss at step %d (%d consecutive)", state.step, bad)
            if bad >= MAX_BAD_STEPS:
                raise RuntimeError(f"{MAX_BAD_STEPS} consecutive non-finite losses; aborting")
            continue
        bad = 0
        total.backward()
        optimizer_step(model, state.optimizers, cfg.grad_clip)
        state.step += 1
        n_steps += 1
        sums["loss_word"] += float(l_word.detach())
        sums["loss_aux"] += float(l_aux.detach())
    return {k: v / max(n_steps, 1) for k, v in sums.items()}


def train(cfg: TrainConfig, train_docs: Sequence[Document], val_docs: Sequence[Document] = (),
          labels: Optional[LabelSet] = None, out_dir=None, state: Optional[TrainState] = None,
          epochs: Optional[int] = None, on_epoch=None) -> TrainState:
    """Train until ``cfg.epochs`` (or ``epochs`` more); returns the final state.

    With ``out_dir`` every epoch appends a line to ``metrics.jsonl`` and writes
    ``last.ckpt``; ``best.ckpt`` follows validation micro-F1 (or every epoch when
    there is no validation set).
    """
    train_docs = [d for d in train_docs]
    if not train_docs:
        raise ValueError("training set is empty")
    if state is None:
        if labels is None:
            raise ValueError("labels are required for a fresh run")
        state = init_state(cfg, train_docs, labels)
    cfg = state.cfg
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    stop = state.epoch + epochs if epochs is not None else cfg.epochs
    while state.epoch < stop:
        mult = state.schedule.multiplier
        losses = run_epoch(state, train_docs)
        state.epoch += 1
        val = evaluate_micro_f1(state, val_docs) if val_docs else None
        record = {"epoch": state.epoch, "step": state.step, **losses,
                  "lr_encoder": cfg.encoder_lr * mult, "lr_cnn": cfg.cnn_lr * mult,
                  "val_micro_f1": val}
        state.history.append(record)
        if val is not None:
            set_multiplier(state.optimizers, cfg, state.schedule.update(val, state.epoch))
        improved = val is None or state.best_f1 is None or val > state.best_f1
        if val is not None and improved:
            state.best_f1 = val
        if out:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
            save_checkpoint(state, out / "last.ckpt")
            if improved:
                save_checkpoint(state, out / "best.ckpt")
        if on_epoch:
            on_epoch(state, record)
        log.info("epoch %d %s", state.epoch, record)
    return state


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(state: TrainState, path):
    model = state.model
    names = {id(p): n for n, p in model.named_parameters()}
    tensors = {f"{n}": t for n, t in model.state_dict().items()}
    for group, opt in zip(("encoder", "cnn"), state.optimizers):
        for p, st in opt.state.items():
            for key, val in st.items():
                tensors[f"optim.{group}.{names[id(p)]}.{key}"] = torch.as_tensor(val)
    tensors["rng.dropout"] = state.dropout_gen.get_state()
    meta = {
        "format_version": 1,
        "train_config": state.cfg.to_dict(),
        "model_config": model.cfg.to_dict(),
        "labels": state.labels.names,
        "label_priors": None if state.labels.label_priors is None
        else state.labels.label_priors.tolist(),
        "vocab": state.vocab.pieces,
        "class_weights": state.weights.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "best_f1": state.best_f1,
        "schedule": state.schedule.state(),
        "lr": [o.param_groups[0]["lr"] for o in state.optimizers],
        "rng": state.rng.bit_generator.state,
        "history": state.history,
    }
    save_tensors(path, tensors, meta)


def load_checkpoint(path) -> TrainState:
    tensors, meta = load_tensors(path)
    cfg = TrainConfig(**meta["train_config"])
    torch.set_num_threads(cfg.num_threads)
    mcfg = ModelConfig(**meta["model_config"])
    vocab = Vocabulary(meta["vocab"])
    model = ViBERTgrid(mcfg, len(vocab))
    sd = model.state_dict()
    for name, t in sd.items():
        if name not in tensors:
            raise ValueError(f"checkpoint lacks tensor {name}")
        if tuple(tensors[name].shape) != tuple(t.shape):
            raise ValueError(f"shape mismatch for {name}: checkpoint {tuple(tensors[name].shape)}"
                             f" vs model {tuple(t.shape)}")
    model.load_state_dict({n: tensors[n] for n in sd})
    optimizers = make_optimizers(model, cfg)
    params = dict(model.named_parameters())
    for group, opt in zip(("encoder", "cnn"), optimizers):
        prefix = f"optim.{group}."
        for key, t in tensors.items():
            if key.startswith(prefix):
                pname, _, field_name = key[len(prefix):].rpartition(".")
                opt.state[params[pname]][field_name] = t.clone()
    for opt, lr in zip(optimizers, meta["lr"]):
        for g in opt.param_groups:
            g["lr"] = lr
    schedule = PlateauSchedule(cfg.plateau_patience_epochs, cfg.plateau_factor)
    schedule.load(meta["schedule"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    gen = torch.Generator()
    gen.set_state(tensors["rng.dropout"].clone())
    labels = LabelSet(meta["labels"], meta["label_priors"])
    return TrainState(cfg, labels, vocab, model, ClassWeights.from_dict(meta["class_weights"]),
                      optimizers, schedule, rng, gen, meta["epoch"], meta["step"], meta["best_f1"],
                      meta["history"])
