"""Curriculum trainer: determinism, warm-up, snapshots, resume, finetune."""

import json
from pathlib import Path

import numpy as np
import pytest

from miles.config import (
    DataConfig,
    EncoderConfig,
    FinetuneConfig,
    RunConfig,
    StageConfig,
    TrainConfig,
)
from miles.data import generate_corpus, load_split
from miles.errors import StateError, TrainingFailure
from miles.trainer import (
    _enter_stage,
    _tokenize_all,
    epoch_boundary,
    finetune,
    init_train_state,
    load_encoder_arrays,
    load_state,
    run_curriculum,
    save_encoders,
    save_state,
    train_step,
)


def tiny_run_cfg(**train_kw) -> RunConfig:
    train = dict(
        stages=[
            StageConfig(frames=1, epochs=1, batch_size=4, lr=1e-3,
                        mask_strategy="random_per_frame", mask_ratio=0.5),
            StageConfig(frames=2, epochs=1, batch_size=4, lr=1e-3,
                        mask_strategy="random_tube", mask_ratio=0.5),
        ],
        seed=0,
        warmup_epochs=1,
    )
    train.update(train_kw)
    return RunConfig(
        data=DataConfig(classes=4, size=8, val_size=4, test_size=4, frames=4,
                        resolution=16, noise=0.02, seed=5),
        encoder=EncoderConfig(patch_size=8, channels=3, embed_dim=16, depth=1,
                              heads=2, max_frames=2, patches_per_frame=4,
                              proj_dim=8, text_max_len=16, vocab_size=24),
        train=TrainConfig(**train),
        finetune=FinetuneConfig(frames=2, epochs=1, batch_size=4, lr=1e-3,
                                mask_strategy="random_tube", mask_ratio=0.5),
    )


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("trainer_corpus")
    generate_corpus(tiny_run_cfg().data, out)
    return out


@pytest.fixture(scope="module")
def train_corpus(corpus_dir):
    return load_split(corpus_dir, "train")


def _params_copy(params):
    return {k: p.data.copy() for k, p in params.items()}


def test_run_is_bitwise_deterministic(train_corpus, tmp_path):
    cfg = tiny_run_cfg()
    run_curriculum(cfg, train_corpus, tmp_path / "a")
    run_curriculum(tiny_run_cfg(), train_corpus, tmp_path / "b")
    for name in ("final.ckpt", "train_log.jsonl", "epoch_001.ckpt", "epoch_002.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_warmup_epoch_is_pure_contrastive(train_corpus, tmp_path):
    cfg = tiny_run_cfg()
    state = run_curriculum(cfg, train_corpus, tmp_path / "run")
    records = state.loss_history
    assert len(records) == 4  # 8 clips / batch 4, two epochs
    for rec in records[:2]:   # epoch 0 falls inside warm-up
        assert rec["l_mvm"] == 0.0
        assert rec["l_total"] == rec["l_vanilla"]  # exact float equality
    for rec in records[2:]:   # epoch 1 trains the masked term
        assert rec["l_mvm"] > 0.0
        assert rec["l_total"] == pytest.approx(rec["l_vanilla"] + rec["l_mvm"], rel=1e-5)


def test_no_masks_drawn_during_warmup(train_corpus, tmp_path):
    cfg = tiny_run_cfg()
    state = run_curriculum(cfg, train_corpus, tmp_path / "run")
    # masks are drawn only for the 8 samples of the post-warm-up epoch,
    # and that stage uses a tube strategy
    assert state.stats["masks_validated"] == 8
    assert state.stats["tube_masks_validated"] == 8


def test_epoch_snapshot_updates_counted(train_corpus, tmp_path):
    cfg = tiny_run_cfg()
    state = run_curriculum(cfg, train_corpus, tmp_path / "run")
    assert state.snapshot.updates_applied == 2  # one per epoch boundary
    assert state.snapshot.epoch_of_last_update == 2


def test_snapshot_frozen_within_epoch(train_corpus):
    # under the per-epoch EMA mode, train_step must never move the snapshot
    cfg = tiny_run_cfg(warmup_epochs=0)
    state = init_train_state(cfg)
    ids = _tokenize_all(train_corpus, cfg.encoder)
    before = _params_copy(state.snapshot.params)
    for _ in range(2):
        train_step(state, train_corpus, ids, np.arange(4), cfg)
    for name, arr in before.items():
        assert state.snapshot.params[name].data.tobytes() == arr.tobytes()
    epoch_boundary(state, cfg)
    moved = any(
        state.snapshot.params[n].data.tobytes() != before[n].tobytes()
        for n in before
    )
    assert moved


def test_stage_entry_zero_fills_new_rows():
    cfg = tiny_run_cfg()
    state = init_train_state(cfg)
    state.max_frames_seen = 1
    state.stage_idx = 1  # stage with frames=2
    for params in (state.video_params, state.snapshot.params):
        params["pos_temporal"].data = np.ones_like(params["pos_temporal"].data)
    state.adam.m["video/pos_temporal"][:] = 0.5
    state.adam.v["video/pos_temporal"][:] = 0.5
    _enter_stage(state, cfg)
    for params in (state.video_params, state.snapshot.params):
        table = params["pos_temporal"].data
        assert table[0].all()            # old row untouched
        assert not table[1].any()        # fresh row zeroed
    assert not state.adam.m["video/pos_temporal"][1].any()
    assert not state.adam.v["video/pos_temporal"][1].any()
    assert state.adam.m["video/pos_temporal"][0].all()
    assert state.max_frames_seen == 2


def test_resume_reproduces_final_bits(train_corpus, tmp_path):
    cfg = tiny_run_cfg()
    run_curriculum(cfg, train_corpus, tmp_path / "full")

    state, loaded_cfg = load_state(tmp_path / "full" / "epoch_001.ckpt")
    run_curriculum(loaded_cfg, train_corpus, tmp_path / "resumed", state=state)
    for name in ("final.ckpt", "epoch_002.ckpt", "train_log.jsonl"):
        assert (tmp_path / "resumed" / name).read_bytes() == \
            (tmp_path / "full" / name).read_bytes(), name


def test_state_roundtrip_and_rewrite(train_corpus, tmp_path):
    cfg = tiny_run_cfg()
    state = run_curriculum(cfg, train_corpus, tmp_path / "run", keep_epoch_checkpoints=False)
    assert not list((tmp_path / "run").glob("epoch_*.ckpt"))
    path = tmp_path / "run" / "final.ckpt"
    loaded, loaded_cfg = load_state(path)
    assert loaded.global_step == state.global_step
    assert loaded.loss_history == state.loss_history
    assert loaded.stats == state.stats
    for name, p in state.video_params.items():
        assert loaded.video_params[name].data.tobytes() == p.data.tobytes()
    save_state(tmp_path / "again.ckpt", loaded, loaded_cfg)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_train_log_matches_history(train_corpus, tmp_path):
    cfg = tiny_run_cfg()
    state = run_curriculum(cfg, train_corpus, tmp_path / "run")
    lines = (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(l) for l in lines] == state.loss_history


def test_prev_iter_lags_one_step(train_corpus):
    cfg = tiny_run_cfg(warmup_epochs=0, snapshot_mode="prev_iter")
    cfg.train.stages = cfg.train.stages[:1]
    state = init_train_state(cfg)
    assert state.stash is not None
    ids = _tokenize_all(train_corpus, cfg.encoder)
    p0 = _params_copy(state.video_params)
    train_step(state, train_corpus, ids, np.arange(4), cfg)
    p1 = _params_copy(state.video_params)
    train_step(state, train_corpus, ids, np.arange(4, 8), cfg)
    # during step 2 the targets came from p0; the stash now holds p1 for step 3
    for name, arr in p0.items():
        assert state.snapshot.params[name].data.tobytes() == arr.tobytes()
    train_step(state, train_corpus, ids, np.arange(4), cfg)
    for name, arr in p1.items():
        assert state.snapshot.params[name].data.tobytes() == arr.tobytes()


def test_snapshot_mode_changes_trajectory(train_corpus):
    records = {}
    finals = {}
    for mode in ("prev_iter", "current_iter"):
        cfg = tiny_run_cfg(warmup_epochs=0, snapshot_mode=mode)
        cfg.train.stages = cfg.train.stages[:1]
        state = init_train_state(cfg)
        ids = _tokenize_all(train_corpus, cfg.encoder)
        recs = [train_step(state, train_corpus, ids, np.arange(4), cfg) for _ in range(2)]
        records[mode] = recs
        finals[mode] = _params_copy(state.video_params)
    # step 1 targets agree (both read the initial weights), step 2 must not
    assert records["prev_iter"][0]["l_mvm"] == records["current_iter"][0]["l_mvm"]
    assert records["prev_iter"][1]["l_mvm"] != records["current_iter"][1]["l_mvm"]
    assert any(
        finals["prev_iter"][n].tobytes() != finals["current_iter"][n].tobytes()
        for n in finals["prev_iter"]
    )


def test_pixel_target_mode_trains(train_corpus, tmp_path):
    cfg = tiny_run_cfg(warmup_epochs=0, recon_target="pixels")
    state = run_curriculum(cfg, train_corpus, tmp_path / "pix", keep_epoch_checkpoints=False)
    assert "pixel_head.w" in state.video_params
    assert all(rec["l_mvm"] > 0.0 for rec in state.loss_history)


def test_recon_none_never_regresses(train_corpus, tmp_path):
    cfg = tiny_run_cfg(warmup_epochs=0, recon_target="none")
    state = run_curriculum(cfg, train_corpus, tmp_path / "none", keep_epoch_checkpoints=False)
    assert all(rec["l_mvm"] == 0.0 for rec in state.loss_history)
    assert state.stats["masks_validated"] == 0


def test_numeric_failure_is_wrapped(train_corpus):
    cfg = tiny_run_cfg(warmup_epochs=0)
    state = init_train_state(cfg)
    ids = _tokenize_all(train_corpus, cfg.encoder)
    state.video_params["patch_proj.w"].data[0, 0] = np.nan
    with pytest.raises(TrainingFailure, match="step 0"):
        train_step(state, train_corpus, ids, np.arange(4), cfg)


def test_finetune_mvm_switch(train_corpus, tmp_path):
    cfg = tiny_run_cfg()
    run_curriculum(cfg, train_corpus, tmp_path / "pre", keep_epoch_checkpoints=False)
    pre = tmp_path / "pre" / "final.ckpt"
    pre_video, _, _ = load_encoder_arrays(pre)

    on = finetune(tiny_run_cfg(), pre, train_corpus, tmp_path / "ft_on", use_mvm=True)
    off = finetune(tiny_run_cfg(), pre, train_corpus, tmp_path / "ft_off", use_mvm=False)
    assert all(rec["l_mvm"] > 0.0 for rec in on.loss_history)
    assert all(rec["l_mvm"] == 0.0 for rec in off.loss_history)
    # finetuning must actually move the weights
    assert any(
        on.video_params[n].data.tobytes() != pre_video[n].tobytes()
        for n in pre_video
    )
    # and the caller's config must not be mutated
    assert cfg.train.recon_target == "aligned_features"


def test_encoder_pair_archive(train_corpus, tmp_path):
    cfg = tiny_run_cfg()
    state = init_train_state(cfg)
    path = tmp_path / "enc.ckpt"
    save_encoders(path, state.video_params, state.text_params, cfg.encoder)
    video, text, enc_meta = load_encoder_arrays(path)
    assert enc_meta["embed_dim"] == cfg.encoder.embed_dim
    for name, p in state.video_params.items():
        assert video[name].tobytes() == p.data.tobytes()
    assert set(text) == set(state.text_params)

    from miles.checkpoint import write_archive
    write_archive(tmp_path / "junk.ckpt", {"kind": "mystery"}, {})
    with pytest.raises(StateError):
        load_encoder_arrays(tmp_path / "junk.ckpt")
    with pytest.raises(StateError):
        load_state(path)  # encoder pair is not a full train state
