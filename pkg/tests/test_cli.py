import csv
import json

import numpy as np
import pytest

from mixforge.audio_io import Waveform, write_wav
from mixforge.cli import main
from mixforge.config import ConfigError, load_settings
from mixforge.mix_engine import ToyCorpusConfig, generate_toy_corpus

SMALL_MODEL = ["--set", "model.n_layers=1", "--set", "model.embed_dim=16", "--set", "model.prompt_len=2",
               "--set", "model.input_samples=3200"]


def test_mix_two_fg_six_bg(tmp_path):
    generate_toy_corpus(ToyCorpusConfig(1, 1, 3, 3, fg_duration=(0.3, 0.5), bg_duration=(0.2, 0.4)),
                        seed=0, out_dir=tmp_path / "src" / "train")
    rc = main(["mix", "--sources", str(tmp_path / "src"), "--out", str(tmp_path / "run"), "--seed", "3"])
    assert rc == 0
    rows = [json.loads(l) for l in (tmp_path / "run" / "dataset" / "train.jsonl").read_text().splitlines()]
    assert sum(r["kind"] == "mixed" for r in rows) == 8
    assert len(list((tmp_path / "run" / "dataset" / "train" / "mixed").glob("*.wav"))) == 8
    first = (tmp_path / "run" / "dataset" / "train.jsonl").read_bytes()
    assert main(["mix", "--sources", str(tmp_path / "src"), "--out", str(tmp_path / "run"), "--seed", "3"]) == 0
    assert (tmp_path / "run" / "dataset" / "train.jsonl").read_bytes() == first


def test_analyze_tone(tmp_path):
    n = np.arange(16000)
    omega = 2 * np.pi * 1000 / 16000
    write_wav(Waveform(0.5 * np.cos(omega * n), 16000), tmp_path / "tone.wav")
    assert main(["analyze", str(tmp_path / "tone.wav"), "--out", str(tmp_path / "o")]) == 0
    with open(tmp_path / "o" / "tone_analysis.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["n", "f_high", "f_all", "f_low", "psi"]
    f_all = np.array([float(r["f_all"]) for r in rows])
    assert np.median(f_all[100:-100]) == pytest.approx(omega, abs=1e-3)


def test_missing_config_no_output(tmp_path):
    out = tmp_path / "never"
    assert main(["mix", "--config", str(tmp_path / "nope.cfg"), "--out", str(out)]) == 1
    assert not out.exists()


def test_usage_errors(tmp_path):
    assert main(["bogus"]) == 1
    assert main(["train", "--task", "both"]) == 1
    assert main(["mix", "--set", "nonsense=1", "--out", str(tmp_path)]) == 1
    assert main(["mix", "--set", "novalue", "--out", str(tmp_path)]) == 1


def test_data_errors(tmp_path):
    assert main(["analyze", str(tmp_path / "missing.wav"), "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.wav").write_bytes(b"not a wav")
    assert main(["analyze", str(tmp_path / "bad.wav"), "--out", str(tmp_path)]) == 2
    assert main(["train", "--out", str(tmp_path / "empty")]) == 2
    assert main(["eval", "--out", str(tmp_path / "empty")]) == 2


def test_train_then_eval(tiny_dataset, tmp_path):
    out = tmp_path / "run"
    common = ["--dataset", str(tiny_dataset), "--out", str(out)] + SMALL_MODEL
    assert main(["train", *common, "--epochs", "2", "--batch-size", "8"]) == 0
    ckpt = out / "train_foreground" / "best.ckpt"
    assert ckpt.is_file() and (out / "train_foreground" / "train_log.csv").is_file()
    assert main(["eval", *common]) == 0
    report = (out / "eval_foreground" / "report.csv").read_text().splitlines()
    assert report[0] == "bucket,count,eer"
    assert any(line.startswith("overall,") for line in report)
    assert (out / "eval_foreground" / "scores.csv").is_file()


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nepochs = 7\nmodel.n_layers=2\nsnr_set=0,5\nseed=4\n")
    s = load_settings(cfg, {"epochs": "9"})
    assert s.train.epochs == 9 and s.model.n_layers == 2 and s.snr_set == (0, 5)
    assert s.train.seed == s.model.seed == s.seed == 4
    with pytest.raises(ConfigError):
        load_settings(None, {"model.bogus": "1"})
    with pytest.raises(ConfigError):
        load_settings(None, {"epochs": "many"})
    with pytest.raises(FileNotFoundError):
        load_settings(tmp_path / "absent.cfg")
