"""End-to-end command-line behavior via in-process main() calls."""

import json
from pathlib import Path

import pytest

from miles.cli import main
from miles.config import RunConfig, StageConfig, to_dict


def tiny_cfg_dict() -> dict:
    cfg = RunConfig()
    cfg.data.classes = 4
    cfg.data.size = 8
    cfg.data.val_size = 4
    cfg.data.test_size = 4
    cfg.data.frames = 4
    cfg.data.resolution = 16
    cfg.data.seed = 5
    cfg.encoder.patch_size = 8
    cfg.encoder.embed_dim = 16
    cfg.encoder.depth = 1
    cfg.encoder.heads = 2
    cfg.encoder.max_frames = 2
    cfg.encoder.patches_per_frame = 4
    cfg.encoder.proj_dim = 8
    cfg.train.stages = [
        StageConfig(frames=1, epochs=1, batch_size=4, lr=1e-3,
                    mask_strategy="random_per_frame", mask_ratio=0.5),
        StageConfig(frames=2, epochs=1, batch_size=4, lr=1e-3,
                    mask_strategy="random_tube", mask_ratio=0.5),
    ]
    cfg.train.warmup_epochs = 1
    cfg.finetune.frames = 2
    cfg.finetune.epochs = 1
    cfg.finetune.batch_size = 4
    cfg.finetune.lr = 1e-3
    cfg.finetune.mask_strategy = "random_tube"
    cfg.finetune.mask_ratio = 0.5
    return to_dict(cfg)


@pytest.fixture(scope="module")
def config_file(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(tiny_cfg_dict()))
    return path


@pytest.fixture(scope="module")
def corpus(config_file, tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("cli_corpus")
    assert main(["generate", "--config", str(config_file), "--out", str(out),
                 "--force"]) == 0
    return out


@pytest.fixture(scope="module")
def pretrained(config_file, corpus, tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("cli_pretrain")
    assert main(["pretrain", "--config", str(config_file),
                 "--corpus", str(corpus), "--out", str(out)]) == 0
    return out


def test_generate_refuses_nonempty_dir(config_file, corpus, capsys):
    assert main(["generate", "--config", str(config_file),
                 "--out", str(corpus)]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["generate", "--config", str(config_file), "--out", str(corpus),
                 "--force"]) == 0


def test_generate_seed_flag_sets_corpus_seed(config_file, tmp_path):
    out = tmp_path / "seeded"
    assert main(["generate", "--config", str(config_file), "--seed", "3",
                 "--out", str(out)]) == 0
    assert json.loads((out / "corpus.json").read_text())["seed"] == 3


def test_pretrain_outputs(pretrained):
    for name in ("final.ckpt", "train_log.jsonl", "training_losses.png",
                 "epoch_001.ckpt", "epoch_002.ckpt"):
        assert (pretrained / name).exists(), name


def test_pretrain_dry_run_writes_nothing(config_file, corpus, tmp_path, capsys):
    out = tmp_path / "dry"
    assert main(["pretrain", "--config", str(config_file), "--corpus", str(corpus),
                 "--out", str(out), "--dry-run"]) == 0
    assert "dry run ok" in capsys.readouterr().out
    assert not out.exists()


def test_pretrain_resume_needs_checkpoints(config_file, corpus, tmp_path, capsys):
    out = tmp_path / "empty"
    out.mkdir()
    assert main(["pretrain", "--config", str(config_file), "--corpus", str(corpus),
                 "--out", str(out), "--resume"]) == 2
    assert "no epoch checkpoints" in capsys.readouterr().err


def test_pretrain_resume_completes(config_file, corpus, pretrained, tmp_path):
    # copy the last epoch checkpoint and resume: the reconstructed final
    # checkpoint must match the uninterrupted run bit for bit
    out = tmp_path / "resume"
    out.mkdir()
    src = sorted(pretrained.glob("epoch_*.ckpt"))[-1]
    (out / src.name).write_bytes(src.read_bytes())
    assert main(["pretrain", "--config", str(config_file), "--corpus", str(corpus),
                 "--out", str(out), "--resume"]) == 0
    assert (out / "final.ckpt").read_bytes() == (pretrained / "final.ckpt").read_bytes()
    assert (out / "train_log.jsonl").read_bytes() == \
        (pretrained / "train_log.jsonl").read_bytes()


def test_eval_writes_reports_and_figures(corpus, pretrained, tmp_path, capsys):
    out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(pretrained / "final.ckpt"),
                 "--corpus", str(corpus), "--out", str(out), "--split", "val"]) == 0
    for name in ("eval.json", "eval.txt", "eval_recall.png", "eval_confusion.png"):
        assert (out / name).exists(), name
    result = json.loads((out / "eval.json").read_text())
    assert result["split"] == "val"
    assert "t2v" in result and "zeroshot" in result
    assert "r@1" in capsys.readouterr().out


def test_eval_mode_filters(corpus, pretrained, tmp_path):
    out_r = tmp_path / "retr"
    assert main(["eval", "--checkpoint", str(pretrained / "final.ckpt"),
                 "--corpus", str(corpus), "--out", str(out_r),
                 "--mode", "retrieval"]) == 0
    assert "zeroshot" not in json.loads((out_r / "eval.json").read_text())

    out_z = tmp_path / "zs"
    assert main(["eval", "--checkpoint", str(pretrained / "final.ckpt"),
                 "--corpus", str(corpus), "--out", str(out_z),
                 "--mode", "zeroshot"]) == 0
    payload = json.loads((out_z / "eval.json").read_text())
    assert set(payload) == {"split", "n_queries", "zeroshot"}
    assert (out_z / "eval_confusion.png").exists()


def test_eval_config_mismatch_detected(config_file, corpus, pretrained, tmp_path, capsys):
    bad = json.loads(config_file.read_text())
    bad["encoder"]["embed_dim"] = 32
    bad_path = tmp_path / "bad.json"
    bad_path.write_text(json.dumps(bad))
    assert main(["eval", "--config", str(bad_path),
                 "--checkpoint", str(pretrained / "final.ckpt"),
                 "--corpus", str(corpus), "--out", str(tmp_path / "x")]) == 2
    assert "geometry" in capsys.readouterr().err

    # the matching config must pass the same check
    assert main(["eval", "--config", str(config_file),
                 "--checkpoint", str(pretrained / "final.ckpt"),
                 "--corpus", str(corpus), "--out", str(tmp_path / "y")]) == 0


def test_finetune_cli(config_file, corpus, pretrained, tmp_path):
    out = tmp_path / "ft"
    assert main(["finetune", "--config", str(config_file),
                 "--checkpoint", str(pretrained / "final.ckpt"),
                 "--corpus", str(corpus), "--out", str(out), "--no-mvm"]) == 0
    assert (out / "final.ckpt").exists()
    records = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert all(r["l_mvm"] == 0.0 for r in records)


def test_ablate_targets_axis(config_file, corpus, tmp_path, capsys):
    out = tmp_path / "ab"
    assert main(["ablate", "--axis", "targets", "--config", str(config_file),
                 "--corpus", str(corpus), "--out", str(out), "--seeds", "0"]) == 0
    for name in ("ablation_targets.csv", "ablation_targets.txt",
                 "ablation_targets.json", "ablation_targets_t2v_r1.png"):
        assert (out / name).exists(), name
    csv_lines = (out / "ablation_targets.csv").read_text().splitlines()
    assert len(csv_lines) == 4  # header + one row per variant
    assert "3/3 ok" in capsys.readouterr().out


def test_ablate_bad_seeds(config_file, corpus, tmp_path, capsys):
    assert main(["ablate", "--axis", "targets", "--config", str(config_file),
                 "--corpus", str(corpus), "--out", str(tmp_path / "x"),
                 "--seeds", "0,zebra"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "1", "--skip-composite"]) == 0
    out = capsys.readouterr().out
    assert "gradient checks passed" in out
    assert "FAIL" not in out


def test_usage_errors_exit_one(capsys):
    assert main(["pretrain"]) == 1  # missing required arguments
    assert "usage error" in capsys.readouterr().err
    assert main(["florble"]) == 1
    capsys.readouterr()


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "generate" in capsys.readouterr().out


def test_bad_override_path(config_file, tmp_path, capsys):
    assert main(["generate", "--config", str(config_file),
                 "--out", str(tmp_path / "x"),
                 "--set", "data.does_not_exist=1"]) == 1
    assert "config error" in capsys.readouterr().err


def test_override_applies(config_file, tmp_path):
    out = tmp_path / "noise"
    assert main(["generate", "--config", str(config_file), "--out", str(out),
                 "--set", "data.noise=0.0"]) == 0
    meta = json.loads((out / "corpus.json").read_text())
    assert meta["config"]["noise"] == 0.0


def test_log_level_env_validated(monkeypatch, capsys, tmp_path):
    monkeypatch.setenv("MILES_LOG_LEVEL", "chatty")
    assert main(["gradcheck", "--seeds", "1", "--skip-composite"]) == 1
    assert "MILES_LOG_LEVEL" in capsys.readouterr().err
    monkeypatch.setenv("MILES_LOG_LEVEL", "error")
    assert main(["--help"]) == 0
    capsys.readouterr()
