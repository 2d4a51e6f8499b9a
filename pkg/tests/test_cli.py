import json
import os
import shutil

import pytest

from vibertgrid import cli
from vibertgrid.gradcheck import GradReport

FAST = ["--model_preset", "tiny", "--train_scales", "[256]", "--eval_short_side", "256",
        "--vocab_min_count", "1"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["generate", "--out", str(root / "data"), "--count", "2", "--seed", "3"]) == 0
    return root


def read(path):
    return json.loads(open(path).read())


def test_generate_writes_dataset(data):
    names = sorted(os.listdir(data / "data"))
    assert "labels.json" in names and "spec.json" in names
    assert sum(n.endswith(".json") and n.startswith("syn") for n in names) == 2
    assert read(data / "data" / "spec.json")["seed"] == 3


def test_train_bilstm_crf_one_epoch(data):
    out = data / "crf"
    rc = cli.main(["train", "--data", str(data / "data"), "--out", str(out), "--head", "bilstm_crf",
                   "--epochs", "1"] + FAST)
    assert rc == 0
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["epoch"] == 1
    assert (out / "last.ckpt").exists() and (out / "best.ckpt").exists()


def test_predict_evaluate_round(data):
    ckpt = data / "lin" / "last.ckpt"
    assert cli.main(["train", "--data", str(data / "data"), "--out", str(data / "lin"),
                     "--epochs", "1"] + FAST) == 0
    assert cli.main(["predict", "--checkpoint", str(ckpt), "--data", str(data / "data"),
                     "--out", str(data / "pred")]) == 0
    p = read(next((data / "pred").glob("*.json")))
    assert set(p) == {"id", "words", "entities"}
    assert cli.main(["predict", "--checkpoint", str(ckpt), "--data", str(data / "data"),
                     "--out", str(data / "pred2"), "--head", "bilstm_crf"]) == 1
    assert cli.main(["evaluate", "--pred", str(data / "pred"), "--gold", str(data / "data"),
                     "--out", str(data / "m.json")]) == 0
    rep = read(data / "m.json")
    assert {"micro_f1", "macro_f1", "per_label", "mcnemar", "sroie_macro_f1"} <= set(rep)


def gold_as_predictions(src, dst):
    dst.mkdir()
    for path in src.glob("syn*.json"):
        doc = read(path)
        words = [{"text": w["text"], "label": w["label"]} for w in doc["words"]]
        ents, cur = [], None
        for i, w in enumerate(words + [{"label": "other", "text": ""}]):
            if cur and w["label"] == cur["label"]:
                cur["span"][1] = i + 1
                cur["text"] += " " + w["text"]
                continue
            if cur:
                ents.append(cur)
                cur = None
            if w["label"] != "other":
                cur = {"label": w["label"], "text": w["text"], "span": [i, i + 1]}
        (dst / path.name).write_text(json.dumps({"id": doc["id"], "words": words,
                                                 "entities": ents}))


def test_evaluate_gold_is_perfect_and_compare_self(data, capsys):
    gold_as_predictions(data / "data", data / "goldpred")
    assert cli.main(["evaluate", "--pred", str(data / "goldpred"), "--gold",
                     str(data / "data")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["micro_f1"] == 1.0 and rep["macro_f1"] == 1.0 and rep["sroie_macro_f1"] == 1.0
    assert cli.main(["compare", "--pred-a", str(data / "goldpred"), "--pred-b",
                     str(data / "goldpred"), "--gold", str(data / "data")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["mcnemar"]["p"] == 1.0 and rep["mcnemar"]["b"] == rep["mcnemar"]["c"] == 0


def test_annotate_unmatched_field_is_reported(data, tmp_path):
    src = tmp_path / "ocr"
    shutil.copytree(data / "data", src)
    path = next(src.glob("syn*.json"))
    doc = read(path)
    for w in doc["words"]:
        w["label"] = None
    doc["fields"].append({"label": "total", "text": "ZZZ-NOT-THERE 999999"})
    path.write_text(json.dumps(doc))
    assert cli.main(["annotate", "--input", str(src), "--out", str(tmp_path / "ann")]) == 0
    report = read(tmp_path / "ann" / "match_report.json")
    bad = [e for e in report if e["status"] == "unmatched"]
    assert len(bad) == 1 and bad[0]["document"] == doc["id"] and bad[0]["field"]["label"] == "total"
    assert (tmp_path / "ann" / path.name).exists()


def test_exit_codes(data, tmp_path, monkeypatch, capsys):
    assert cli.main(["train", "--data", str(data / "data"), "--out", str(tmp_path / "x"),
                     "--epochz", "1"]) == 1
    assert cli.main(["train", "--out", str(tmp_path / "x")]) == 1
    assert cli.main(["evaluate", "--pred", str(tmp_path / "missing"), "--gold",
                     str(data / "data")]) == 1
    assert cli.main(["generate", "--out", str(tmp_path / "g"), "--page_width", "[10, 10]",
                     "--page_height", "[10, 10]", "--count", "1"]) == 1
    broken = tmp_path / "broken.ckpt"
    broken.write_bytes(b"garbage!" * 4)
    assert cli.main(["predict", "--checkpoint", str(broken), "--data", str(data / "data"),
                     "--out", str(tmp_path / "p")]) == 2
    monkeypatch.setattr("vibertgrid.gradcheck.run_all",
                        lambda seed=0: [GradReport("fake", 1.0, 1, "x[0]")])
    assert cli.main(["gradcheck"]) == 2
    assert "FAIL" in capsys.readouterr().out


def test_locked_checkpoint_dir_is_runtime_failure(data, tmp_path):
    from filelock import FileLock
    out = tmp_path / "locked"
    out.mkdir()
    with FileLock(str(out / ".lock")):
        assert cli.main(["train", "--data", str(data / "data"), "--out", str(out),
                         "--epochs", "1"] + FAST) == 2


@pytest.mark.parametrize("command, key", [("train", "plateau_patience_epochs"),
                                          ("train", "model.backbone.widths"),
                                          ("generate", "templates.total"),
                                          ("annotate", "max_edit_distance")])
def test_help_lists_config_keys(command, key, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    assert f"  {key} = " in capsys.readouterr().out
