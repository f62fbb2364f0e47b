"""Curriculum training loop: contrastive warm-up, masked regression, snapshots.

One optimizer step does, in order: sample frames per clip, draw one mask
per sample, push the masked sequence through the video encoder and the
caption through the text encoder, score the symmetric InfoNCE term,
regress masked student features onto snapshot targets, backprop, clip
the global gradient norm, and apply Adam.  The snapshot encoder changes
only where its update mode says so; under the default per-epoch EMA it
is bit-stable within an epoch.

Determinism: every random draw comes from a generator seeded by
``(run_seed, purpose_tag, epoch, step)``, so resuming from an epoch
checkpoint replays the exact remaining stream and lands on the same
final bits as the uninterrupted run.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import data as datamod
from . import encoders, masking, objectives, snapshot as snapmod
from .autodiff import Tensor
from .config import RunConfig, StageConfig, config_from_dict, to_dict
from .encoders import EncoderConfig
from .errors import NumericError, StateError, TrainingFailure
from .optim import AdamState, adam_step, clip_global_norm

log = logging.getLogger(__name__)

# rng purpose tags
_TAG_INIT_VIDEO = 1
_TAG_INIT_TEXT = 2
_TAG_SHUFFLE = 3
_TAG_STEP = 4
_TAG_PIXEL_HEAD = 5


@dataclass
class TrainState:
    video_params: dict[str, Tensor]
    text_params: dict[str, Tensor]
    trainable: dict[str, Tensor]
    snapshot: snapmod.SnapshotState
    adam: AdamState
    stash: dict[str, np.ndarray] | None = None
    stage_idx: int = 0
    epoch_in_stage: int = 0
    global_epoch: int = 0
    global_step: int = 0
    step_in_epoch: int = 0
    max_frames_seen: int = 0
    loss_history: list[dict] = field(default_factory=list)
    stats: dict[str, int] = field(default_factory=lambda: {
        "masks_validated": 0, "tube_masks_validated": 0,
    })


def _prefixed(video: dict[str, Tensor], text: dict[str, Tensor]) -> dict[str, Tensor]:
    merged = {f"video/{k}": v for k, v in video.items()}
    merged.update({f"text/{k}": v for k, v in text.items()})
    return merged


def init_train_state(
    run_cfg: RunConfig,
    initial_video: dict[str, np.ndarray] | None = None,
    initial_text: dict[str, np.ndarray] | None = None,
) -> TrainState:
    run_cfg.validate()
    tc = run_cfg.train
    ecfg = run_cfg.encoder
    vp = encoders.init_video_params(ecfg, np.random.default_rng([tc.seed, _TAG_INIT_VIDEO]))
    tp = encoders.init_text_params(ecfg, np.random.default_rng([tc.seed, _TAG_INIT_TEXT]))
    if tc.recon_target == "pixels":
        vp.update(encoders.init_pixel_head(ecfg, np.random.default_rng([tc.seed, _TAG_PIXEL_HEAD])))
    if initial_video is not None:
        for name, arr in initial_video.items():
            if name in vp:
                vp[name].data = arr.astype(vp[name].data.dtype)
    if initial_text is not None:
        for name, arr in initial_text.items():
            if name in tp:
                tp[name].data = arr.astype(tp[name].data.dtype)
    snap = snapmod.init_snapshot(vp, tc.momentum)
    trainable = _prefixed(vp, tp)
    stash = None
    if tc.snapshot_mode == "prev_iter":
        stash = {k: p.data.copy() for k, p in vp.items()}
    return TrainState(
        video_params=vp,
        text_params=tp,
        trainable=trainable,
        snapshot=snap,
        adam=AdamState.for_params(trainable),
        stash=stash,
    )


def _tokenize_all(corpus: datamod.LoadedCorpus, ecfg: EncoderConfig) -> np.ndarray:
    return np.stack([
        datamod.tokenize_caption(c, corpus.vocab, ecfg.text_max_len)
        for c in corpus.captions
    ])


def _pixel_targets(
    frames: np.ndarray, grids: np.ndarray, ecfg: EncoderConfig, dtype
) -> tuple[Tensor, np.ndarray]:
    pix = encoders.patch_pixels(frames, ecfg)
    flat = pix.reshape(-1, pix.shape[-1])
    idx = np.flatnonzero(grids.reshape(-1))
    counts = grids.reshape(grids.shape[0], -1).sum(axis=1)
    return Tensor(flat[idx].astype(dtype)), counts


def train_step(
    state: TrainState,
    corpus: datamod.LoadedCorpus,
    token_ids: np.ndarray,
    batch_idx: np.ndarray,
    run_cfg: RunConfig,
) -> dict:
    """One optimizer step over the given clip indices; returns the loss record."""
    tc = run_cfg.train
    ecfg = run_cfg.encoder
    stage = tc.stages[state.stage_idx]
    m = stage.frames
    n = ecfg.patches_per_frame
    warmup = state.global_epoch < tc.warmup_epochs
    use_mvm = (not warmup) and tc.recon_target != "none"
    rng = np.random.default_rng([tc.seed, _TAG_STEP, state.global_epoch, state.step_in_epoch])

    frames = np.stack([
        datamod.sample_frames(corpus.clips[i], m, "train", rng) for i in batch_idx
    ])
    if use_mvm:
        specs = [
            masking.sample_mask(stage.mask_strategy, m, n, stage.mask_ratio, rng)
            for _ in batch_idx
        ]
        grids = np.stack([s.grid for s in specs])
        state.stats["masks_validated"] += len(specs)
        if stage.mask_strategy in masking.TUBE_STRATEGIES:
            state.stats["tube_masks_validated"] += len(specs)
    else:
        grids = np.zeros((len(batch_idx), m, n), dtype=bool)
    ids = token_ids[batch_idx]
    drop_rng = rng if ecfg.dropout > 0.0 else None

    if tc.snapshot_mode == "current_iter":
        snapmod.alternative_update("current_iter", state.snapshot, state.video_params)
    elif tc.snapshot_mode == "prev_iter":
        snapmod.alternative_update(
            "prev_iter", state.snapshot, state.video_params, prev_params=state.stash
        )
        # stash the weights the student is about to use, pre-update, so the
        # next step's targets lag by exactly one optimizer step
        state.stash = {k: p.data.copy() for k, p in state.video_params.items()}

    try:
        with ad.recording():
            tokens = encoders.patchify(frames, state.video_params, ecfg)
            seq = encoders.apply_mask_and_positions(tokens, grids, state.video_params, ecfg)
            venc = encoders.video_forward(seq, grids, state.video_params, ecfg, drop_rng)
            tenc = encoders.text_forward(ids, state.text_params, ecfg, drop_rng)
            l_con = objectives.contrastive_loss(
                venc.cls, tenc.cls, tc.tau, tc.contrastive_reduction
            )
            l_mvm = None
            if use_mvm:
                if tc.recon_target == "aligned_features":
                    targets, counts = snapmod.snapshot_targets(
                        frames, grids, state.snapshot, ecfg
                    )
                    student = venc.masked_features
                else:
                    targets, counts = _pixel_targets(
                        frames, grids, ecfg, state.video_params["pixel_head.w"].data.dtype
                    )
                    student = ad.matmul(
                        venc.masked_features, state.video_params["pixel_head.w"]
                    ) + state.video_params["pixel_head.b"]
                l_mvm = objectives.mvm_loss(student, targets, counts, tc.mvm_squared)
            total = objectives.total_loss(l_con, l_mvm, warmup, tc.mvm_weight)
            ad.backward(total)
    except NumericError as exc:
        raise TrainingFailure(f"numeric failure at step {state.global_step}: {exc}") from exc

    grads: dict[str, np.ndarray] = {}
    for name, p in state.trainable.items():
        if p.grad is not None:
            grads[name] = p.grad
        p.grad = None
    clip_global_norm(grads, tc.grad_clip)
    adam_step(state.trainable, grads, state.adam, stage.lr)

    if tc.snapshot_mode == "prev_iter_momentum":
        snapmod.alternative_update("prev_iter_momentum", state.snapshot, state.video_params)

    record = {
        "step": state.global_step,
        "l_vanilla": float(l_con.data),
        "l_mvm": float(l_mvm.data) if l_mvm is not None else 0.0,
        "l_total": float(total.data),
    }
    state.loss_history.append(record)
    state.global_step += 1
    state.step_in_epoch += 1
    return record


def epoch_boundary(state: TrainState, run_cfg: RunConfig) -> None:
    """Per-epoch snapshot refresh, using params as they stand right now."""
    mode = run_cfg.train.snapshot_mode
    if mode == "prev_epoch_momentum":
        snapmod.ema_update(state.snapshot, state.video_params, state.global_epoch + 1)
    elif mode == "prev_epoch_plain":
        snapmod.alternative_update(
            "prev_epoch_plain", state.snapshot, state.video_params,
            epoch=state.global_epoch + 1,
        )


def _enter_stage(state: TrainState, run_cfg: RunConfig) -> None:
    """Zero-fill freshly exposed temporal-position rows on frame growth."""
    stage = run_cfg.train.stages[state.stage_idx]
    prev = state.max_frames_seen
    if stage.frames > prev:
        for params in (state.video_params, state.snapshot.params):
            table = params["pos_temporal"]
            fresh = table.data.copy()
            fresh[prev:stage.frames] = 0.0
            table.data = fresh
        for buf in (state.adam.m, state.adam.v):
            buf["video/pos_temporal"][prev:stage.frames] = 0.0
        state.max_frames_seen = stage.frames


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def run_curriculum(
    run_cfg: RunConfig,
    corpus: datamod.LoadedCorpus,
    out_dir: Path,
    state: TrainState | None = None,
    keep_epoch_checkpoints: bool = True,
) -> TrainState:
    """Train through every stage, checkpointing at each epoch boundary."""
    run_cfg.validate()
    tc = run_cfg.train
    if state is None:
        state = init_train_state(run_cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    token_ids = _tokenize_all(corpus, run_cfg.encoder)
    log_path = out_dir / "train_log.jsonl"
    # rewrite from stored history so a resumed run converges to the same
    # final log bytes as an uninterrupted one, even after a mid-epoch crash
    with open(log_path, "w") as logf:
        for record in state.loss_history:
            logf.write(json.dumps(record, sort_keys=True) + "\n")
        while state.stage_idx < len(tc.stages):
            stage = tc.stages[state.stage_idx]
            if state.epoch_in_stage == 0:
                _enter_stage(state, run_cfg)
            while state.epoch_in_stage < stage.epochs:
                shuffle = np.random.default_rng([tc.seed, _TAG_SHUFFLE, state.global_epoch])
                order = shuffle.permutation(len(corpus))
                state.step_in_epoch = 0
                for batch_idx in _batches(order, stage.batch_size):
                    record = train_step(state, corpus, token_ids, batch_idx, run_cfg)
                    logf.write(json.dumps(record, sort_keys=True) + "\n")
                logf.flush()
                epoch_boundary(state, run_cfg)
                state.global_epoch += 1
                state.epoch_in_stage += 1
                if keep_epoch_checkpoints:
                    save_state(out_dir / f"epoch_{state.global_epoch:03d}.ckpt", state, run_cfg)
            state.stage_idx += 1
            state.epoch_in_stage = 0
    save_state(out_dir / "final.ckpt", state, run_cfg)
    return state


def finetune(
    run_cfg: RunConfig,
    pretrained: Path,
    corpus: datamod.LoadedCorpus,
    out_dir: Path,
    use_mvm: bool,
) -> TrainState:
    """Continue training a pretrained encoder pair with MVM on or off.

    Uses the ``finetune`` config section as a single fresh stage with a
    new optimizer and a snapshot re-seeded from the loaded weights; no
    warm-up epoch.
    """
    video_np, text_np, _ = load_encoder_arrays(pretrained)
    ft = run_cfg.finetune
    cfg = copy.deepcopy(run_cfg)
    cfg.train.stages = [StageConfig(
        frames=ft.frames, epochs=ft.epochs, batch_size=ft.batch_size, lr=ft.lr,
        mask_strategy=ft.mask_strategy, mask_ratio=ft.mask_ratio,
    )]
    cfg.train.warmup_epochs = 0
    cfg.train.recon_target = "aligned_features" if use_mvm else "none"
    state = init_train_state(cfg, initial_video=video_np, initial_text=text_np)
    state.snapshot = snapmod.init_snapshot(state.video_params, cfg.train.momentum)
    # loaded weights already know the full frame range; skip re-zeroing
    state.max_frames_seen = cfg.encoder.max_frames
    return run_curriculum(cfg, corpus, out_dir, state=state)


# ---------------------------------------------------------------------------
# persistence


def save_state(path: Path, state: TrainState, run_cfg: RunConfig) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in state.video_params.items():
        arrays[f"video/{name}"] = p.data
    for name, p in state.text_params.items():
        arrays[f"text/{name}"] = p.data
    for name, p in state.snapshot.params.items():
        arrays[f"snap/{name}"] = p.data
    for name, buf in state.adam.m.items():
        arrays[f"adam_m/{name}"] = buf
    for name, buf in state.adam.v.items():
        arrays[f"adam_v/{name}"] = buf
    if state.stash is not None:
        for name, buf in state.stash.items():
            arrays[f"stash/{name}"] = buf
    meta = {
        "kind": "train_state",
        "format": 1,
        "config": to_dict(run_cfg),
        "counters": {
            "stage_idx": state.stage_idx,
            "epoch_in_stage": state.epoch_in_stage,
            "global_epoch": state.global_epoch,
            "global_step": state.global_step,
            "max_frames_seen": state.max_frames_seen,
            "adam_t": state.adam.step_count,
        },
        "snapshot": {
            "momentum": state.snapshot.momentum,
            "epoch_of_last_update": state.snapshot.epoch_of_last_update,
            "updates_applied": state.snapshot.updates_applied,
        },
        "rng": {"scheme": "counter-derived", "seed": run_cfg.train.seed},
        "loss_history": state.loss_history,
        "stats": state.stats,
    }
    ckpt.write_archive(path, meta, arrays)


def load_state(path: Path) -> tuple[TrainState, RunConfig]:
    meta, arrays = ckpt.read_archive(path)
    if meta.get("kind") != "train_state":
        raise StateError(f"{path} is not a training checkpoint")
    run_cfg = config_from_dict(meta["config"])
    run_cfg.validate()
    state = init_train_state(run_cfg)
    for name, p in state.video_params.items():
        p.data = arrays[f"video/{name}"].copy()
    for name, p in state.text_params.items():
        p.data = arrays[f"text/{name}"].copy()
    for name, p in state.snapshot.params.items():
        p.data = arrays[f"snap/{name}"].copy()
    for name in state.adam.m:
        state.adam.m[name] = arrays[f"adam_m/{name}"].copy()
        state.adam.v[name] = arrays[f"adam_v/{name}"].copy()
    if any(k.startswith("stash/") for k in arrays):
        state.stash = {
            k.split("/", 1)[1]: arrays[k].copy() for k in arrays if k.startswith("stash/")
        }
    counters = meta["counters"]
    state.stage_idx = counters["stage_idx"]
    state.epoch_in_stage = counters["epoch_in_stage"]
    state.global_epoch = counters["global_epoch"]
    state.global_step = counters["global_step"]
    state.max_frames_seen = counters["max_frames_seen"]
    state.adam.step_count = counters["adam_t"]
    state.snapshot.momentum = meta["snapshot"]["momentum"]
    state.snapshot.epoch_of_last_update = meta["snapshot"]["epoch_of_last_update"]
    state.snapshot.updates_applied = meta["snapshot"]["updates_applied"]
    state.loss_history = list(meta.get("loss_history", []))
    state.stats = dict(meta.get("stats", {}))
    return state, run_cfg


def save_encoders(
    path: Path,
    video_params: dict[str, Tensor],
    text_params: dict[str, Tensor],
    ecfg: EncoderConfig,
) -> None:
    """Encoder-only archive (no optimizer/snapshot), for eval-time loading."""
    arrays = {f"video/{k}": p.data for k, p in video_params.items()}
    arrays.update({f"text/{k}": p.data for k, p in text_params.items()})
    ckpt.write_archive(path, {"kind": "encoder_pair", "format": 1,
                              "encoder": to_dict(ecfg)}, arrays)


def load_encoder_arrays(path: Path) -> tuple[dict, dict, dict]:
    """(video arrays, text arrays, encoder config dict) from either archive kind."""
    meta, arrays = ckpt.read_archive(path)
    kind = meta.get("kind")
    if kind == "train_state":
        enc_meta = meta["config"]["encoder"]
    elif kind == "encoder_pair":
        enc_meta = meta["encoder"]
    else:
        raise StateError(f"{path} holds neither a train state nor an encoder pair")
    video = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("video/")}
    text = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("text/")}
    if not video or not text:
        raise StateError(f"{path} is missing encoder parameters")
    return video, text, enc_meta
