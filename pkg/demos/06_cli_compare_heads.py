"""
The command line end to end: two heads and McNemar's test
=========================================================

Generates data, trains the linear and the BiLSTM-CRF head through the
``vibertgrid`` command, predicts on held-out documents, scores both and runs
McNemar's test on per-word correctness. Every step is a plain CLI call, so
the same sequence works from a shell.

Takes about three minutes on one CPU thread. Work files go to a temporary directory.
"""
import json
import tempfile
from pathlib import Path

from vibertgrid.cli import main

work = Path(tempfile.mkdtemp(prefix="vibertgrid_demo_"))
fast = ["--model_preset", "tiny", "--train_scales", "[256, 320]", "--eval_short_side", "320",
        "--encoder_lr", "1e-3", "--cnn_lr", "1e-3", "--plateau_patience_epochs", "4"]


def run(*args):
    print("$ vibertgrid", " ".join(args))
    code = main(list(args))
    assert code == 0, code


run("generate", "--out", str(work / "train"), "--count", "150", "--seed", "1")
run("generate", "--out", str(work / "test"), "--count", "15", "--seed", "2", "--prefix", "test")

for head in ("linear", "bilstm_crf"):
    run("train", "--data", str(work / "train"), "--val", str(work / "test"), "--out",
        str(work / head), "--head", head, "--epochs", "8", "--seed", "0", *fast)
    run("predict", "--checkpoint", str(work / head / "best.ckpt"), "--data", str(work / "test"),
        "--out", str(work / f"pred_{head}"))

run("compare", "--pred-a", str(work / "pred_linear"), "--pred-b", str(work / "pred_bilstm_crf"),
    "--gold", str(work / "test"), "--out", str(work / "compare.json"))
rep = json.loads((work / "compare.json").read_text())
for side, head in (("a", "linear"), ("b", "bilstm_crf")):
    print(f"{head:10s} micro F1 {rep[side]['micro_f1']:.4f}  macro F1 {rep[side]['macro_f1']:.4f}"
          f"  SROIE-style {rep[side]['sroie_macro_f1']:.4f}")
m = rep["mcnemar"]
print(f"McNemar on {m['unit']}s: b={m['b']} c={m['c']} p={m['p']:.4g}"
      f" significant at 0.05: {m['significant_at_0.05']}")
print("files in", work)
