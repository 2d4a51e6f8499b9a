"""Command-line entry points.

Exit codes: 0 success, 1 validation error (bad input, config or arguments),
2 runtime failure. Log verbosity comes from ``VIBERTGRID_LOG`` (e.g. ``INFO``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import config
from .document import LabelSet, ValidationError, atomic_write_text, load_document, \
    match_field_annotations, save_document
from .evaluation import (FieldPrediction, extract_entities, field_f1, fields_as_text, gold_entities,
                         load_rules, mcnemar, postprocess, sroie_macro_f1)
from .synthetic import InfeasibleSpec, generate_synthetic, load_dataset, load_labels, save_dataset

log = logging.getLogger("vibertgrid")

LOG_ENV = "VIBERTGRID_LOG"
RESERVED = ("labels.json", "spec.json", "match_report.json", "metrics.json")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, json.dumps(obj, indent=2))


def _doc_paths(path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise ValidationError(f"{path}: no such file or directory")
    return sorted(p for p in path.glob("*.json") if p.name not in RESERVED)


def _labels_from(arg, data_dir) -> LabelSet:
    if arg is None:
        base = Path(data_dir)
        base = base if base.is_dir() else base.parent
        if not (base / "labels.json").exists():
            raise ValidationError(f"{base}: no labels.json; pass --labels")
        return load_labels(base)
    if Path(arg).exists():
        return LabelSet(json.loads(Path(arg).read_text())["names"])
    return LabelSet([s.strip() for s in arg.split(",") if s.strip()])


# --------------------------------------------------------------------------
# subcommands

def cmd_generate(args, overrides):
    layers = [config.load_file(args.config), overrides]
    if args.seed is not None:
        layers.append({"seed": args.seed})
    spec = config.synthetic_spec(*layers)
    try:
        docs = generate_synthetic(spec, args.count, args.prefix)
    except InfeasibleSpec as exc:
        raise ValidationError(f"infeasible spec: {exc}") from None
    save_dataset(docs, spec.label_set(), args.out, spec)
    log.info("wrote %d documents to %s", len(docs), args.out)
    return 0


def cmd_annotate(args, overrides):
    policy = config.match_policy(config.load_file(args.config), overrides)
    labels = _labels_from(args.labels, args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = []
    for path in _doc_paths(args.input):
        doc = load_document(path, labels)
        word_labels, entries = match_field_annotations(doc, doc.fields, labels.other, policy)
        save_document(doc.with_labels(word_labels), labels, out / path.name)
        for e in entries:
            e["document"] = doc.id
            e["field"] = {"label": labels.name(e["field"]["label"]), "text": e["field"]["text"]}
            if e["status"] != "matched":
                log.warning("%s: field %s %r is %s %s", doc.id, e["field"]["label"],
                            e["field"]["text"], e["status"], e["note"])
        report.extend(entries)
    atomic_write_text(out / "labels.json", json.dumps({"names": labels.names}))
    _write_json(args.report or out / "match_report.json", report)
    return 0


def cmd_train(args, overrides):
    from .training import load_checkpoint, train

    layers = [config.load_file(args.config), overrides]
    cli = {"head_kind": args.head, "epochs": args.epochs, "seed": args.seed}
    layers.append({k: v for k, v in cli.items() if v is not None})
    cfg = config.train_config(*layers)
    train_docs, labels = load_dataset(args.data)
    val_docs = load_dataset(args.val, labels)[0] if args.val else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        lock = FileLock(str(out / ".lock"), timeout=0).acquire()
    except Timeout:
        raise RuntimeError(f"{out} is locked by another run") from None
    with lock:
        state = load_checkpoint(args.resume) if args.resume else None
        if state is not None and state.labels.names != labels.names:
            raise ValidationError("checkpoint labels differ from the dataset labels")
        extra = args.epochs if state is not None and args.epochs is not None else None
        train(cfg, train_docs, val_docs, labels, out, state=state, epochs=extra)
    return 0


def _predictions_json(doc, word_labels, entities, labels):
    return {"id": doc.id,
            "words": [{"text": w.text, "label": labels.name(lab)}
                      for w, lab in zip(doc.words, word_labels)],
            "entities": [{"label": labels.name(e.label), "text": e.text, "span": list(e.span),
                          "source": e.source} for e in entities]}


def cmd_predict(args, overrides):
    from .training import load_checkpoint, predict_document

    if overrides:
        raise ValidationError(f"predict takes no config overrides (got {sorted(overrides)})")
    state = load_checkpoint(args.checkpoint)
    if args.head and args.head != state.cfg.head_kind:
        raise ValidationError(f"checkpoint holds a {state.cfg.head_kind} head, not {args.head}")
    labels = state.labels
    rules = load_rules(args.rules, labels) if args.rules else []
    side = args.eval_short_side or state.cfg.eval_short_side
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in _doc_paths(args.data):
        doc = load_document(path, labels)
        word_labels = predict_document(state.model, state.vocab, doc, side, state.cfg.max_long_side)
        entities = extract_entities(word_labels, doc, labels.C)
        if rules:
            entities = postprocess(entities, doc, rules)
        _write_json(out / f"{doc.id}.json", _predictions_json(doc, word_labels, entities, labels))
    return 0


def _load_predictions(pred_dir, labels: LabelSet) -> dict:
    preds = {}
    for path in _doc_paths(pred_dir):
        try:
            obj = json.loads(path.read_text())
            ents = [FieldPrediction(labels.id(e["label"]), e["text"], tuple(e["span"]),
                                    e.get("source", "model"))
                    for e in obj["entities"]]
            words = [labels.id(w["label"]) for w in obj["words"]]
            preds[obj["id"]] = (words, ents)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path}: malformed prediction file ({exc})") from None
    return preds


def _gold(gold_dir, labels: LabelSet) -> dict:
    gold = {}
    for path in _doc_paths(gold_dir):
        doc = load_document(path, labels)
        if any(w.label is None for w in doc.words):
            raise ValidationError(f"{path}: gold documents need a label on every word")
        gold[doc.id] = doc
    return gold


def _report(preds, gold, labels, match):
    C = labels.C
    missing = sorted(set(gold) - set(preds))
    if missing:
        log.warning("%d gold documents have no prediction (scored as empty): %s",
                    len(missing), missing[:5])
    pred_ents = {k: preds[k][1] for k in gold if k in preds}
    gold_ents = {k: gold_entities(d, C) for k, d in gold.items()}
    rep = field_f1(pred_ents, gold_ents, C, match).as_dict(labels)
    pred_text = {k: fields_as_text(v) for k, v in pred_ents.items()}
    gold_text = {k: ({f.label: f.text for f in d.fields} if d.fields else fields_as_text(gold_ents[k]))
                 for k, d in gold.items()}
    rep["sroie_macro_f1"] = sroie_macro_f1(pred_text, gold_text, C)
    return rep


def cmd_evaluate(args, overrides):
    if overrides:
        raise ValidationError(f"evaluate takes no config overrides (got {sorted(overrides)})")
    labels = _labels_from(args.labels, args.gold)
    gold = _gold(args.gold, labels)
    rep = _report(_load_predictions(args.pred, labels), gold, labels, args.match)
    rep["mcnemar"] = None
    _write_json(args.out, rep) if args.out else print(json.dumps(rep, indent=2))
    return 0


def _correctness(preds, gold, unit, C):
    out = []
    for doc_id in sorted(gold):
        doc = gold[doc_id]
        words, ents = preds.get(doc_id, (None, []))
        if unit == "word":
            if words is None:
                out.extend([False] * len(doc.words))
            elif len(words) != len(doc.words):
                raise ValidationError(f"{doc_id}: prediction has {len(words)} words, gold "
                                      f"{len(doc.words)}")
            else:
                out.extend(p == w.label for p, w in zip(words, doc.words))
        else:
            keys = {(e.label, e.span) for e in ents}
            out.extend((g.label, g.span) in keys for g in gold_entities(doc, C))
    return out


def cmd_compare(args, overrides):
    if overrides:
        raise ValidationError(f"compare takes no config overrides (got {sorted(overrides)})")
    labels = _labels_from(args.labels, args.gold)
    gold = _gold(args.gold, labels)
    pa, pb = _load_predictions(args.pred_a, labels), _load_predictions(args.pred_b, labels)
    p, table = mcnemar(_correctness(pa, gold, args.unit, labels.C),
                       _correctness(pb, gold, args.unit, labels.C))
    rep = {"a": _report(pa, gold, labels, args.match), "b": _report(pb, gold, labels, args.match),
           "mcnemar": {"b": table.b, "c": table.c, "p": p, "n_both_right": table.n_both_right,
                       "n_both_wrong": table.n_both_wrong, "unit": args.unit,
                       "significant_at_0.05": p < 0.05}}
    _write_json(args.out, rep) if args.out else print(json.dumps(rep, indent=2))
    return 0


def cmd_gradcheck(args, overrides):
    from .gradcheck import run_all

    if overrides:
        raise ValidationError(f"gradcheck takes no config overrides (got {sorted(overrides)})")
    reports = run_all(args.seed or 0)
    for r in reports:
        print(f"{'PASS' if r.ok else 'FAIL'}  max_rel_err={r.max_rel_err:.2e}  n={r.checked:4d}  "
              f"{r.name}  (worst {r.worst})")
    if args.out:
        _write_json(args.out, [{"name": r.name, "ok": r.ok, "max_rel_err": r.max_rel_err,
                                "checked": r.checked, "worst": r.worst} for r in reports])
    return 0 if all(r.ok for r in reports) else 2


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="vibertgrid", description="Multimodal key-information extraction toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset directory", formatter_class=fmt,
                       epilog=config.describe("generate") + "\n\noverride any key with --key value")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--prefix", default="syn")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("annotate", help="label OCR words from field texts", formatter_class=fmt,
                       epilog=config.describe("annotate") + "\n\noverride any key with --key value")
    a.add_argument("--input", required=True, help="OCR document file or directory")
    a.add_argument("--labels", help="labels.json path or comma-separated names")
    a.add_argument("--out", required=True)
    a.add_argument("--report", help="match report path (default <out>/match_report.json)")
    a.add_argument("--config")
    a.set_defaults(func=cmd_annotate)

    t = sub.add_parser("train", help="train a model", formatter_class=fmt,
                       epilog=config.describe("train") + "\n\noverride any key with --key value")
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--config")
    t.add_argument("--head", choices=["linear", "bilstm_crf"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from (--epochs then counts extra epochs)")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="label documents with a checkpoint")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--head", choices=["linear", "bilstm_crf"])
    pr.add_argument("--rules", help="rule-pack JSON applied after decoding")
    pr.add_argument("--eval-short-side", type=int)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="score predictions against gold documents")
    e.add_argument("--pred", required=True)
    e.add_argument("--gold", required=True)
    e.add_argument("--labels")
    e.add_argument("--match", choices=["span", "text"], default="span")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="McNemar test between two prediction sets")
    c.add_argument("--pred-a", required=True)
    c.add_argument("--pred-b", required=True)
    c.add_argument("--gold", required=True)
    c.add_argument("--labels")
    c.add_argument("--unit", choices=["word", "field"], default="word")
    c.add_argument("--match", choices=["span", "text"], default="span")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    gc = sub.add_parser("gradcheck", help="run the finite-difference gradient suites")
    gc.add_argument("--seed", type=int)
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args, rest = build_parser().parse_known_args(argv)
        return args.func(args, config.parse_overrides(rest))
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure maps to exit code 2
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
