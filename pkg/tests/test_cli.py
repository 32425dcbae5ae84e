import hashlib
import json
import re

import numpy as np
import pytest
from PIL import Image

from memefusion.cli import main

FAST = ["data.n_synthetic=16", "train.stage1_epochs=1", "train.stage2_epochs=1"]


def _dir_digest(path):
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(path)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _train(tmp_path, name="run", extra=()):
    out = tmp_path / name
    code = main(["train", "--out", str(out), *FAST, *extra])
    assert code == 0
    return out


@pytest.fixture()
def trained(tmp_path):
    return _train(tmp_path)


def test_synth_writes_deterministic_dataset(tmp_path, capsys):
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert main(["synth", "--out", str(a), "--n", "16", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert "n=16" in out and "seed=3" in out
    assert (a / "synthetic.jsonl").is_file()
    assert len(list((a / "img").glob("*.png"))) == 16

    assert main(["synth", "--out", str(b), "--n", "16", "--seed", "3"]) == 0
    assert _dir_digest(a) == _dir_digest(b)

    c = tmp_path / "c"
    assert main(["synth", "--out", str(c), "--n", "16", "--seed", "4"]) == 0
    assert _dir_digest(a) != _dir_digest(c)


def test_train_echoes_config_and_writes_checkpoints(tmp_path, capsys):
    out = _train(tmp_path)
    stdout = capsys.readouterr().out
    lines = stdout.strip().splitlines()

    assert any(l.startswith("config_hash=") for l in lines)
    assert any(l == 'data.n_synthetic=16' or l == "data.n_synthetic=16" for l in lines)
    assert 'backbone.kind="mock"' in lines
    assert any(l.startswith("stage1=") for l in lines)
    assert any(l.startswith("final=") for l in lines)
    assert any(l.startswith("selected_epoch=") for l in lines)

    # echoed dotted keys come out sorted
    dotted = [l.split("=", 1)[0] for l in lines if "=" in l and "." in l.split("=", 1)[0]]
    assert dotted == sorted(dotted)

    assert (out / "stage1" / "manifest.json").is_file()
    assert (out / "final" / "manifest.json").is_file()
    assert (out / "run.log").is_file()


def test_train_seed_changes_artifacts(tmp_path):
    a = _train(tmp_path, "a", extra=["--seed", "0"])
    b = _train(tmp_path, "b", extra=["--seed", "1"])
    assert (a / "final" / "tensors.bin").read_bytes() != (b / "final" / "tensors.bin").read_bytes()
    assert (a / "final" / "manifest.json").read_bytes() != (b / "final" / "manifest.json").read_bytes()


def test_eval_reports_metrics(trained, tmp_path, capsys):
    report_path = tmp_path / "report.json"
    code = main(["eval", "--checkpoint", str(trained / "final"),
                 "--split", "test", "--out", str(report_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert re.search(r"^split=test$", out, re.M)
    assert re.search(r"^n=\d+$", out, re.M)
    assert re.search(r"^accuracy=\d\.\d{6}$", out, re.M)
    assert re.search(r"^auroc=\d\.\d{6}$", out, re.M)
    assert f"report={report_path}" in out
    assert json.loads(report_path.read_text())["split"] == "test"


def test_eval_unknown_split_is_usage_error(trained, capsys):
    code = main(["eval", "--checkpoint", str(trained / "final"), "--split", "nope"])
    assert code == 2
    err = capsys.readouterr().err
    assert "unknown split 'nope'" in err
    assert "holdout" in err and "test" in err


def test_eval_unlabeled_split_advises_predict(trained, tmp_path, capsys):
    root = tmp_path / "hmc"
    (root / "img").mkdir(parents=True)
    rng = np.random.default_rng(0)
    rows = {"train": 4, "dev_seen": 2, "test_unseen": 2}
    for split, n in rows.items():
        with open(root / f"{split}.jsonl", "w") as fh:
            for k in range(n):
                rid = f"{split}{k}"
                img_rel = f"img/{rid}.png"
                arr = rng.integers(0, 255, size=(16, 16, 3)).astype(np.uint8)
                Image.fromarray(arr).save(root / img_rel)
                rec = {"id": rid, "img": img_rel, "text": f"meme {k}"}
                if split != "test_unseen":
                    rec["label"] = k % 2
                fh.write(json.dumps(rec) + "\n")

    code = main(["eval", "--checkpoint", str(trained / "final"),
                 "--split", "test_unseen",
                 "data.source=hmc", f"data.root={root}"])
    assert code == 2
    assert "use predict" in capsys.readouterr().err


def test_predict_prints_one_score_line(trained, tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "ds"), "--n", "4", "--seed", "0"]) == 0
    capsys.readouterr()
    image = sorted((tmp_path / "ds" / "img").glob("*.png"))[0]
    code = main(["predict", "--checkpoint", str(trained / "final"),
                 "--image", str(image), "--text", "an example caption"])
    assert code == 0
    out = capsys.readouterr().out
    lines = out.strip().splitlines()
    assert len(lines) == 1
    m = re.fullmatch(r"score=(0\.\d+|[01](\.\d+)?([eE][+-]?\d+)?) verdict=(hateful|not-hateful)", lines[0])
    assert m, lines[0]
    score = float(lines[0].split()[0].split("=")[1])
    verdict = lines[0].split("verdict=")[1]
    assert verdict == ("hateful" if score >= 0.5 else "not-hateful")


def test_predict_undecodable_image_exits_5(trained, tmp_path, capsys):
    bogus = tmp_path / "not_an_image.png"
    bogus.write_text("plain text, not pixels")
    code = main(["predict", "--checkpoint", str(trained / "final"),
                 "--image", str(bogus), "--text", "x"])
    assert code == 5
    assert "error:" in capsys.readouterr().err


def test_corrupt_checkpoint_exits_4(trained, capsys):
    blob = trained / "final" / "tensors.bin"
    raw = bytearray(blob.read_bytes())
    raw[7] ^= 0x01
    blob.write_bytes(bytes(raw))
    code = main(["eval", "--checkpoint", str(trained / "final")])
    assert code == 4
    assert "error:" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path, capsys):
    # unknown override key
    assert main(["train", "--out", str(tmp_path / "x"), "nosuch.key=1"]) == 2
    # malformed override (no '=')
    assert main(["train", "--out", str(tmp_path / "x"), "train.lr"]) == 2
    # argparse-level: unknown command and missing required argument
    assert main(["frobnicate"]) == 2
    assert main(["train"]) == 2
    assert main(["eval"]) == 2
    # bad value type for a numeric key
    assert main(["train", "--out", str(tmp_path / "x"), "train.lr=banana"]) == 2
    capsys.readouterr()


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for command in ("synth", "train", "eval", "predict", "ablate", "baselines",
                    "convert-weights"):
        assert command in out


def test_baselines_subset(tmp_path, capsys):
    # positional overrides go before --modes (both are variadic)
    code = main(["baselines", *FAST, "--modes", "text_only", "image_only"])
    assert code == 0
    out = capsys.readouterr().out
    assert re.search(r"^mode=text_only accuracy=\d\.\d{6} auroc=\d\.\d{6}$", out, re.M)
    assert re.search(r"^mode=image_only ", out, re.M)
    assert "mode=sum" not in out


def test_ablate_writes_table(tmp_path, capsys):
    out_dir = tmp_path / "ablate"
    code = main(["ablate", "--out", str(out_dir),
                 "data.n_synthetic=16", "train.stage1_epochs=1", "train.stage2_epochs=1"])
    assert code == 0
    stdout = capsys.readouterr().out
    rows = [l for l in stdout.splitlines() if l.startswith("row=")]
    assert len(rows) == 4
    assert rows[0].startswith("row=1 combiner=False two_stage=False textual_inversion=False")
    assert rows[3].startswith("row=4 combiner=True two_stage=True textual_inversion=True")
    assert (out_dir / "table.csv").is_file()
    assert (out_dir / "table.md").is_file()
