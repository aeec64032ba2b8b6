import json
import os

import pytest

from cs_forge.cli import load_config, main
from cs_forge.errors import ConfigurationError, MissingArtifactError


def write_config(tmp_path, **overrides):
    cfg = {
        "seed": 3,
        "output_dir": "run",
        "corpus": {"lexicon_size": 10, "n_asr": 30, "n_st": 30, "n_dev": 4,
                   "n_test_parallel": 20, "sentence_len_range": [3, 6],
                   "dwell_max": 1},
        "model": {"emb_dim": 8, "hidden_dim": 16, "attn_dim": 8,
                  "enc_layers": 1, "subsample_layers": 0, "dropout": 0.0},
        "train": {"max_updates": 2, "tokens_per_update": 200,
                  "warmup_updates": 1, "epochs_to_average": 1},
        "finetune": {"max_updates": 2, "warmup_updates": 1},
        "augment": {"sweep": [0.2]},
        "testset": {"n_utterances": 4, "sentences_per_utterance": [2, 2],
                    "n_mono_test": 5},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestLoadConfig:
    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigurationError):
            load_config(path)

    def test_defaults_merged(self, tmp_path):
        path = write_config(tmp_path)
        cfg = load_config(path)
        # untouched default survives a partial user section
        assert cfg["model"]["dec_layers"] == 1
        assert cfg["model"]["emb_dim"] == 8

    def test_empty_corpus_rejected(self, tmp_path):
        path = write_config(tmp_path, corpus={"n_asr": 0, "n_st": 0})
        with pytest.raises(ConfigurationError):
            load_config(path)

    def test_sweep_range_checked(self, tmp_path):
        path = write_config(tmp_path, augment={"sweep": [0.9]})
        with pytest.raises(ConfigurationError):
            load_config(path)

    def test_overrides_win(self, tmp_path):
        path = write_config(tmp_path)
        cfg = load_config(path, overrides={"seed": 99, "output_dir": None})
        assert cfg["seed"] == 99
        assert cfg["output_dir"] == "run"


class TestExitCodes:
    def test_bad_config_value_is_2(self, tmp_path, capsys):
        path = write_config(tmp_path, corpus={"n_asr": 0, "n_st": 0})
        assert main(["synth", "--config", str(path)]) == 2
        assert "error" in capsys.readouterr().err

    def test_missing_config_is_3(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "nope.json")]) == 3

    def test_decode_without_models_is_3(self, tmp_path):
        path = write_config(tmp_path)
        assert main(["testset", "--config", str(path)]) == 0
        assert main(["decode", "--config", str(path)]) == 3


class TestSynth:
    def test_writes_artifacts(self, tmp_path):
        path = write_config(tmp_path)
        assert main(["synth", "--config", str(path)]) == 0
        run = tmp_path / "run"
        for name in ("lexicon.json", "asr_train.jsonl", "st_train.jsonl",
                     "dev.jsonl", "test_parallel.jsonl"):
            assert (run / name).exists()
            assert (run / (name + ".echo.json")).exists()

    def test_second_run_is_noop(self, tmp_path):
        path = write_config(tmp_path)
        main(["synth", "--config", str(path)])
        target = tmp_path / "run" / "asr_train.jsonl"
        before = os.stat(target).st_mtime_ns
        assert main(["synth", "--config", str(path)]) == 0
        assert os.stat(target).st_mtime_ns == before

    def test_seed_change_regenerates(self, tmp_path):
        path = write_config(tmp_path)
        main(["synth", "--config", str(path)])
        target = tmp_path / "run" / "asr_train.jsonl"
        first = target.read_bytes()
        assert main(["synth", "--config", str(path), "--seed", "4"]) == 0
        assert target.read_bytes() != first


class TestGradcheckCommand:
    def test_passes(self, tmp_path, capsys):
        path = write_config(tmp_path)
        assert main(["gradcheck", "--config", str(path)]) == 0
        assert "max relative error" in capsys.readouterr().out


class TestPunctCommands:
    def test_train_and_apply(self, tmp_path):
        path = write_config(tmp_path, corpus={"n_asr": 120})
        main(["synth", "--config", str(path)])
        restorer = tmp_path / "restorer.json"
        assert main(["punct-train", "--config", str(path),
                     "--output", str(restorer)]) == 0
        assert restorer.exists()
        text_in = tmp_path / "in.txt"
        text_in.write_text("t001 t002 t003\n")
        text_out = tmp_path / "out.txt"
        assert main(["punct-apply", "--config", str(path),
                     "--restorer", str(restorer), "--input", str(text_in),
                     "--output", str(text_out)]) == 0
        line = text_out.read_text().strip()
        assert line.split()[0][0].isupper() and line.endswith(".")

    def test_apply_needs_all_flags(self, tmp_path):
        path = write_config(tmp_path)
        assert main(["punct-apply", "--config", str(path)]) == 2


class TestTinyReproduce:
    def test_end_to_end_and_resumable(self, tmp_path, capsys):
        path = write_config(tmp_path)
        assert main(["reproduce", "--config", str(path)]) == 0
        out = capsys.readouterr().out
        assert "cs/bleu" in out
        run = tmp_path / "run"
        assert (run / "report.json").exists()
        for system in ("ASR", "ST", "LAST", "LAST_half", "LAST+DA20"):
            assert (run / f"model_{system}.pt").exists()
        # resumable: no model is retrained on the second invocation
        stamp = os.stat(run / "model_LAST.pt").st_mtime_ns
        assert main(["reproduce", "--config", str(path)]) == 0
        assert os.stat(run / "model_LAST.pt").st_mtime_ns == stamp
