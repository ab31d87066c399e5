import csv
import io
import json
import re

import numpy as np
import pytest

from galr.checkpoint import load_checkpoint, save_checkpoint
from galr.cli import main
from galr.config import DataSettings, PathSettings, RunConfig, TrainSettings, save_config
from galr.separator import TOY, SeparatorModel
from galr.training import gen_synthetic
from galr.wav import wav_read, wav_write


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "toy.ckpt"
    save_checkpoint(SeparatorModel(TOY.replace(N=1), seed=0), path)
    return path


@pytest.fixture
def mixture_files(tmp_path):
    ex = next(gen_synthetic(5, 1, 1.0))
    wav_write(tmp_path / "mix.wav", ex.mixture)
    for c, s in enumerate(ex.sources, 1):
        wav_write(tmp_path / f"ref{c}.wav", s)
    return tmp_path


def test_cost_reports_the_lightest_row(capsys):
    code, out, _ = run(capsys, "cost", "--arch", "galr", "--D", "64", "--M", "16", "--K", "100", "--Q", "32",
                       "--seconds", "1")
    assert code == 0
    total = next(line for line in out.splitlines() if line.startswith("total"))
    gflops = float(re.search(r"([\d.]+) GFLOPs", total).group(1))
    assert gflops == pytest.approx(5.6, rel=0.20)
    assert "mpl=O(K)" in out


def test_cost_csv_to_stdout(capsys):
    code, out, _ = run(capsys, "cost", "--arch", "dprnn", "--M", "4", "--K", "200", "--csv", "-")
    assert code == 0
    table = out[out.index("component,"):]
    rows = list(csv.DictReader(io.StringIO(table)))
    assert rows[-1]["component"] == "total"
    assert "mpl=O(S+K)" in out


def test_separate_writes_one_file_per_source(capsys, checkpoint, mixture_files):
    code, out, _ = run(capsys, "separate", "--checkpoint", str(checkpoint), str(mixture_files / "mix.wav"),
                       "--out-dir", str(mixture_files / "out"))
    assert code == 0
    written = sorted((mixture_files / "out").iterdir())
    assert [p.name for p in written] == ["mix_src1.wav", "mix_src2.wav"]
    assert all(len(wav_read(p)) == 8000 for p in written)
    assert out.split() == [str(p) for p in written]


def test_eval_prints_json(capsys, checkpoint, mixture_files):
    code, out, _ = run(capsys, "eval", "--checkpoint", str(checkpoint), "--mixture", str(mixture_files / "mix.wav"),
                       "--references", str(mixture_files / "ref1.wav"), str(mixture_files / "ref2.wav"))
    assert code == 0
    assert np.isfinite(json.loads(out)["si_snri"])


def test_eval_rejects_wrong_reference_count(capsys, checkpoint, mixture_files):
    code, _, err = run(capsys, "eval", "--checkpoint", str(checkpoint), "--mixture", str(mixture_files / "mix.wav"),
                       "--references", str(mixture_files / "ref1.wav"))
    assert code == 1
    assert err.startswith("error[input]:")


def test_train_writes_checkpoint_and_metrics(capsys, tmp_path):
    cfg = RunConfig(TOY.replace(N=1), TrainSettings(epochs=2, batch_size=2),
                    DataSettings(train_count=2, val_count=1, length_s=0.25),
                    PathSettings(checkpoint=str(tmp_path / "t.ckpt"), metrics=str(tmp_path / "m.jsonl")))
    save_config(cfg, tmp_path / "cfg.json")
    code, _, err = run(capsys, "train", "--config", str(tmp_path / "cfg.json"))
    assert code == 0
    assert "saved" in err
    records = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [(r["epoch"], r["split"]) for r in records] == [(0, "train"), (0, "val"), (1, "train"), (1, "val")]
    assert load_checkpoint(tmp_path / "t.ckpt").hp == cfg.hyperparams


def test_gradcheck_ops(capsys):
    code, out, _ = run(capsys, "gradcheck", "--skip-model")
    assert code == 0
    errors = [float(line.split("=")[-1]) for line in out.splitlines()]
    assert len(errors) > 30
    assert max(errors) <= 1e-4


def test_attn_dump_rows_sum_to_one(capsys, checkpoint):
    code, out, _ = run(capsys, "attn-dump", "--checkpoint", str(checkpoint), "--head", "1")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    sums = {}
    for r in rows:
        key = (r["sequence"], r["query"])
        sums[key] = sums.get(key, 0.0) + float(r["weight"])
    assert np.allclose(list(sums.values()), 1.0, atol=1e-6)


def test_ablate_prints_four_variants(capsys):
    code, out, _ = run(capsys, "ablate", "--toy", "--epochs", "1", "--train-count", "2", "--val-count", "1",
                       "--test-count", "1")
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 4
    pairs = {(re.search(r"local=(\w+)", l).group(1), re.search(r"global=(\w+)", l).group(1)) for l in lines}
    assert pairs == {(a, b) for a in ("recurrent", "attentive") for b in ("recurrent", "attentive")}
    assert all("test_si_snri=" in l for l in lines)


@pytest.mark.parametrize("argv,kind,code", [
    ([], "usage", 2),
    (["fly"], "usage", 2),
    (["ablate"], "usage", 2),
    (["cost", "--K", "7"], "config", 1),
    (["cost", "--D", "abc"], "usage", 2),
    (["train", "--config", "/nonexistent/cfg.json"], "config", 1),
    (["separate", "--checkpoint", "/nonexistent.ckpt", "x.wav"], "io", 1),
])
def test_errors_exit_nonzero_with_one_tagged_line(capsys, argv, kind, code):
    got, _, err = run(capsys, *argv)
    assert got == code
    assert err.count("\n") == 1
    assert err.startswith(f"error[{kind}]:")


def test_corrupt_checkpoint_kind_reaches_the_cli(capsys, tmp_path, mixture_files):
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + bytes(32))
    code, _, err = run(capsys, "separate", "--checkpoint", str(tmp_path / "bad.ckpt"), str(mixture_files / "mix.wav"))
    assert code == 1
    assert err.startswith("error[checkpoint-magic]:")
