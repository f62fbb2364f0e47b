"""Frozen copy of the video encoder that supplies regression targets.

The snapshot shares the video encoder's architecture and is never
touched by the optimizer: its parameters carry ``requires_grad=False``
and every forward pass through it runs with recording suspended.  Under
the default schedule it changes only at epoch boundaries via

    snap <- momentum * snap + (1 - momentum) * video

so targets stay fixed within an epoch.  Alternative update rules used by
the ablation harness (copy-now, copy-previous-iteration, per-iteration
EMA, per-epoch plain copy) live behind :func:`alternative_update`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import encoders
from .autodiff import Tensor
from .encoders import EncoderConfig
from .errors import ConfigError, ContractError, StateError

UPDATE_MODES = (
    "prev_epoch_momentum",   # default: per-epoch EMA
    "prev_epoch_plain",      # per-epoch copy (momentum 0)
    "current_iter",          # copy the student right before each step
    "prev_iter",             # copy of the student one optimizer step ago
    "prev_iter_momentum",    # EMA after every optimizer step
)

PER_EPOCH_MODES = ("prev_epoch_momentum", "prev_epoch_plain")


@dataclass
class SnapshotState:
    params: dict[str, Tensor]
    momentum: float
    epoch_of_last_update: int = 0
    updates_applied: int = 0


def init_snapshot(video_params: dict[str, Tensor], momentum: float) -> SnapshotState:
    """Start as an exact copy of the freshly initialized video encoder."""
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"snapshot momentum must lie in [0, 1), got {momentum}")
    params = {
        name: Tensor(p.data.copy(), requires_grad=False)
        for name, p in video_params.items()
    }
    return SnapshotState(params=params, momentum=momentum)


def _check_aligned(snap: SnapshotState, video_params: dict[str, Tensor]) -> None:
    if snap.params.keys() != video_params.keys():
        missing = set(snap.params) ^ set(video_params)
        raise ContractError(f"snapshot/video parameter names diverge: {sorted(missing)}")
    for name, p in video_params.items():
        if snap.params[name].data.shape != p.data.shape:
            raise ContractError(
                f"shape mismatch for '{name}': snapshot {snap.params[name].data.shape} "
                f"vs video {p.data.shape}"
            )


def _blend(snap: SnapshotState, video_params: dict[str, Tensor], momentum: float) -> None:
    for name, p in video_params.items():
        old = snap.params[name].data
        snap.params[name].data = momentum * old + (1.0 - momentum) * p.data


def ema_update(
    snap: SnapshotState, video_params: dict[str, Tensor], epoch: int
) -> SnapshotState:
    """Per-epoch exponential moving average; call once per epoch boundary."""
    _check_aligned(snap, video_params)
    _blend(snap, video_params, snap.momentum)
    snap.epoch_of_last_update = epoch
    snap.updates_applied += 1
    return snap


def alternative_update(
    mode: str,
    snap: SnapshotState,
    video_params: dict[str, Tensor],
    prev_params: dict[str, np.ndarray] | None = None,
    epoch: int | None = None,
) -> SnapshotState:
    """Ablation update rules; the trainer decides when each fires."""
    if mode not in UPDATE_MODES:
        raise ConfigError(f"unknown snapshot update mode '{mode}'")
    _check_aligned(snap, video_params)
    if mode == "prev_epoch_momentum":
        return ema_update(snap, video_params, epoch if epoch is not None else 0)
    if mode == "prev_epoch_plain":
        _blend(snap, video_params, 0.0)
    elif mode == "current_iter":
        _blend(snap, video_params, 0.0)
    elif mode == "prev_iter":
        if prev_params is None:
            raise ContractError("prev_iter update needs the stashed previous params")
        for name in snap.params:
            snap.params[name].data = prev_params[name].copy()
    elif mode == "prev_iter_momentum":
        _blend(snap, video_params, snap.momentum)
    if epoch is not None:
        snap.epoch_of_last_update = epoch
    snap.updates_applied += 1
    return snap


def snapshot_targets(
    frames: np.ndarray,
    mask: np.ndarray,
    snap: SnapshotState,
    cfg: EncoderConfig,
) -> tuple[Tensor, np.ndarray]:
    """Token features the student must regress to at its masked positions.

    The raw, *unmasked* frames go through the snapshot encoder; final
    layer-norm features (before the retrieval projection) are gathered
    at the student's masked positions.  Runs entirely without recording,
    so the result is a constant with respect to every parameter.
    """
    if snap is None or not snap.params:
        raise StateError("snapshot encoder is not initialized")
    with ad.no_grad():
        tokens = encoders.patchify(frames, snap.params, cfg)
        visible = np.zeros_like(mask)
        seq = encoders.apply_mask_and_positions(tokens, visible, snap.params, cfg)
        enc = encoders.video_forward(seq, mask, snap.params, cfg)
    targets = Tensor(enc.masked_features.data.copy())
    return targets, enc.masked_counts
