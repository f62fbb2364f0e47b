"""Retrieval metrics, zero-shot classification, and the ablation harness.

Ranks use pessimistic tie-breaking: every gallery item whose similarity
ties the ground truth counts as ranked ahead of it.  This makes reported
recall a lower bound and keeps results deterministic.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import encoders, trainer
from .autodiff import Tensor
from .config import RunConfig, apply_overrides
from .encoders import EncoderConfig
from .errors import ContractError, MilesError
from .snapshot import UPDATE_MODES

log = logging.getLogger(__name__)

REPORT_KS = (1, 5, 10, 50)

ABLATION_AXES = ("targets", "update", "masking", "finetune_mvm")
MASKING_ABLATION_RATIOS = (0.65, 0.75, 0.85)
TARGET_CHOICES = ("none", "pixels", "aligned_features")


# ---------------------------------------------------------------------------
# ranking


def rank_of_truth(scores: np.ndarray, truth: int) -> int:
    """1-based rank of the ground-truth item under pessimistic ties."""
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ContractError(f"score row must be 1-d, got shape {scores.shape}")
    if not 0 <= truth < scores.shape[0]:
        raise ContractError(f"truth index {truth} outside gallery of {scores.shape[0]}")
    s = scores[truth]
    greater = int(np.sum(scores > s))
    tied = int(np.sum(scores == s)) - 1
    return 1 + greater + tied


def ranks_of_truth(sim: np.ndarray, ground_truth: np.ndarray) -> np.ndarray:
    sim = np.asarray(sim)
    ground_truth = np.asarray(ground_truth)
    if sim.ndim != 2:
        raise ContractError(f"similarity matrix must be 2-d, got shape {sim.shape}")
    if ground_truth.shape != (sim.shape[0],):
        raise ContractError("need exactly one ground-truth index per query row")
    return np.asarray(
        [rank_of_truth(sim[q], int(ground_truth[q])) for q in range(sim.shape[0])],
        dtype=np.int64,
    )


@dataclass
class RetrievalReport:
    direction: str
    r_at: dict[int, float]
    med_r: float
    mean_r: float
    n_queries: int

    def as_dict(self) -> dict:
        return {
            "direction": self.direction,
            "r_at": {str(k): v for k, v in self.r_at.items()},
            "med_r": self.med_r,
            "mean_r": self.mean_r,
            "n_queries": self.n_queries,
        }


def retrieval_report(
    sim: np.ndarray,
    ground_truth: np.ndarray,
    direction: str,
    ks: tuple[int, ...] = REPORT_KS,
) -> RetrievalReport:
    """Recall@k (percent), median rank, and mean rank over all queries."""
    sim = np.asarray(sim)
    if sim.size == 0:
        raise ContractError("cannot report retrieval over an empty query set")
    if not np.all(np.isfinite(sim)):
        raise ContractError("similarity matrix contains non-finite entries")
    r = ranks_of_truth(sim, ground_truth)
    q = r.shape[0]
    return RetrievalReport(
        direction=direction,
        r_at={k: 100.0 * float(np.sum(r <= k)) / q for k in ks},
        med_r=float(np.median(r)),
        mean_r=float(np.mean(r)),
        n_queries=q,
    )


@dataclass
class ClassificationReport:
    accuracy: float
    n_classes: int
    n_queries: int
    confusion: np.ndarray = field(repr=False)
    predictions: np.ndarray = field(repr=False)

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "chance": 100.0 / self.n_classes,
            "n_classes": self.n_classes,
            "n_queries": self.n_queries,
            "confusion": self.confusion.tolist(),
        }


def zero_shot_classify(
    video_emb: np.ndarray, class_emb: np.ndarray, truth: np.ndarray
) -> ClassificationReport:
    """Nearest class caption wins; ties go to the lowest class index."""
    video_emb = np.asarray(video_emb)
    class_emb = np.asarray(class_emb)
    truth = np.asarray(truth)
    if video_emb.ndim != 2 or class_emb.ndim != 2:
        raise ContractError("embeddings must be 2-d")
    if video_emb.shape[1] != class_emb.shape[1]:
        raise ContractError("video and class embeddings disagree on width")
    if truth.shape != (video_emb.shape[0],):
        raise ContractError("need one truth label per video")
    n_classes = class_emb.shape[0]
    if truth.size and (truth.min() < 0 or truth.max() >= n_classes):
        raise ContractError("truth label outside class range")
    sim = video_emb @ class_emb.T
    pred = np.argmax(sim, axis=1)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    acc = 100.0 * float(np.mean(pred == truth)) if truth.size else 0.0
    return ClassificationReport(
        accuracy=acc,
        n_classes=n_classes,
        n_queries=truth.shape[0],
        confusion=confusion,
        predictions=pred,
    )


# ---------------------------------------------------------------------------
# embedding


def _as_tensors(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=False) for k, v in arrays.items()}


def embed_videos(
    clips: list[np.ndarray],
    video_params: dict[str, Tensor],
    ecfg: EncoderConfig,
    n_frames: int,
    batch_size: int = 32,
) -> np.ndarray:
    """Deterministic midpoint-frame embeddings, no masking, no gradients."""
    out = []
    with ad.no_grad():
        for start in range(0, len(clips), batch_size):
            chunk = clips[start : start + batch_size]
            frames = np.stack([
                datamod.sample_frames(c, n_frames, "test") for c in chunk
            ])
            grids = np.zeros((len(chunk), n_frames, ecfg.patches_per_frame), dtype=bool)
            tokens = encoders.patchify(frames, video_params, ecfg)
            seq = encoders.apply_mask_and_positions(tokens, grids, video_params, ecfg)
            enc = encoders.video_forward(seq, grids, video_params, ecfg)
            out.append(enc.cls.data.copy())
    return np.concatenate(out, axis=0)


def embed_texts(
    captions: list[str],
    vocab: dict[str, int],
    text_params: dict[str, Tensor],
    ecfg: EncoderConfig,
    batch_size: int = 32,
) -> np.ndarray:
    ids = np.stack([
        datamod.tokenize_caption(c, vocab, ecfg.text_max_len) for c in captions
    ])
    out = []
    with ad.no_grad():
        for start in range(0, len(captions), batch_size):
            enc = encoders.text_forward(ids[start : start + batch_size], text_params, ecfg)
            out.append(enc.cls.data.copy())
    return np.concatenate(out, axis=0)


def _eval_captions(corpus: datamod.LoadedCorpus, concat: bool) -> list[str]:
    if not concat:
        return list(corpus.captions)
    # one caption per clip in this corpus, so grouping by clip is a no-op,
    # but the pathway mirrors corpora where a clip owns several sentences
    grouped: dict[int, list[str]] = {}
    for i, cap in enumerate(corpus.captions):
        grouped.setdefault(i, []).append(cap)
    return [" ".join(grouped[i]) for i in range(len(corpus))]


def evaluate_params(
    video_params: dict[str, Tensor],
    text_params: dict[str, Tensor],
    ecfg: EncoderConfig,
    corpus: datamod.LoadedCorpus,
    n_frames: int,
    batch_size: int = 32,
    concat_captions: bool = False,
) -> dict:
    """Retrieval both ways plus zero-shot classification on one split."""
    captions = _eval_captions(corpus, concat_captions)
    v = embed_videos(corpus.clips, video_params, ecfg, n_frames, batch_size)
    t = embed_texts(captions, corpus.vocab, text_params, ecfg, batch_size)
    sim = t @ v.T  # query rows are captions
    truth = np.arange(len(corpus))
    t2v = retrieval_report(sim, truth, "t2v")
    v2t = retrieval_report(sim.T, truth, "v2t")
    result = {
        "n_queries": len(corpus),
        "gallery_size": len(corpus),
        "t2v": t2v.as_dict(),
        "v2t": v2t.as_dict(),
    }
    if corpus.class_captions:
        class_emb = embed_texts(
            corpus.class_captions, corpus.vocab, text_params, ecfg, batch_size
        )
        cls_report = zero_shot_classify(v, class_emb, corpus.class_ids)
        result["zeroshot"] = cls_report.as_dict()
    return result


def evaluate_checkpoint(
    ckpt_path: Path,
    corpus_dir: Path,
    split: str = "test",
    batch_size: int = 32,
    concat_captions: bool = False,
) -> dict:
    video_np, text_np, enc_meta = trainer.load_encoder_arrays(ckpt_path)
    ecfg = EncoderConfig(**enc_meta)
    ecfg.validate()
    corpus = datamod.load_split(corpus_dir, split)
    result = evaluate_params(
        _as_tensors(video_np), _as_tensors(text_np), ecfg, corpus,
        n_frames=ecfg.max_frames, batch_size=batch_size,
        concat_captions=concat_captions,
    )
    result["split"] = split
    return result


# ---------------------------------------------------------------------------
# ablation harness


@dataclass
class AblationCell:
    variant: str
    seed: int
    ok: bool
    metrics: dict[str, float] = field(default_factory=dict)
    error: str = ""


@dataclass
class AblationTable:
    axis: str
    seeds: list[int]
    split: str
    cells: list[AblationCell]
    rows: list[dict]
    stats: dict[str, int]

    def as_dict(self) -> dict:
        return {
            "axis": self.axis,
            "seeds": self.seeds,
            "split": self.split,
            "rows": self.rows,
            "stats": self.stats,
            "cells": [
                {"variant": c.variant, "seed": c.seed, "ok": c.ok,
                 "metrics": c.metrics, "error": c.error}
                for c in self.cells
            ],
        }


METRIC_KEYS = ("t2v_r1", "t2v_r5", "t2v_medr", "v2t_r1", "zeroshot_acc")


def _cell_metrics(result: dict) -> dict[str, float]:
    return {
        "t2v_r1": result["t2v"]["r_at"]["1"],
        "t2v_r5": result["t2v"]["r_at"]["5"],
        "t2v_medr": result["t2v"]["med_r"],
        "v2t_r1": result["v2t"]["r_at"]["1"],
        "zeroshot_acc": result.get("zeroshot", {}).get("accuracy", 0.0),
    }


def variants_for_axis(axis: str, base_cfg: RunConfig) -> list[tuple[str, list[str]]]:
    """(name, config override strings) per variant; finetune_mvm is special-cased."""
    last = len(base_cfg.train.stages) - 1
    if axis == "targets":
        return [(t, [f"train.recon_target={t}"]) for t in TARGET_CHOICES]
    if axis == "update":
        return [(m, [f"train.snapshot_mode={m}"]) for m in UPDATE_MODES]
    if axis == "masking":
        out = []
        for strat in ("frame_wise", "random_tube", "block_per_frame", "block_tube"):
            for ratio in MASKING_ABLATION_RATIOS:
                out.append((
                    f"{strat}@{ratio}",
                    [f"train.stages.{last}.mask_strategy={strat}",
                     f"train.stages.{last}.mask_ratio={ratio}"],
                ))
        return out
    if axis == "finetune_mvm":
        return [("mvm_on", []), ("mvm_off", [])]
    raise ContractError(f"unknown ablation axis '{axis}'")


def _train_and_score(
    cfg: RunConfig,
    corpus_train: datamod.LoadedCorpus,
    corpus_eval: datamod.LoadedCorpus,
    work_dir: Path,
) -> tuple[dict[str, float], trainer.TrainState]:
    state = trainer.run_curriculum(cfg, corpus_train, work_dir, keep_epoch_checkpoints=False)
    result = evaluate_params(
        state.video_params, state.text_params, cfg.encoder, corpus_eval,
        n_frames=cfg.encoder.max_frames, batch_size=cfg.eval.batch_size,
    )
    return _cell_metrics(result), state


def ablation_run(
    base_cfg: RunConfig,
    axis: str,
    seeds: list[int],
    corpus_dir: Path,
    work_dir: Path,
    split: str = "val",
) -> AblationTable:
    """Train every (variant, seed) cell and aggregate mean and spread.

    A failing cell is recorded with its error message and the sweep
    continues; aggregation uses the surviving seeds of each variant.
    """
    if axis not in ABLATION_AXES:
        raise ContractError(f"unknown ablation axis '{axis}'")
    variants = variants_for_axis(axis, base_cfg)
    if len(variants) < 2:
        raise ContractError("an ablation needs at least two variants")
    work_dir = Path(work_dir)
    corpus_train = datamod.load_split(corpus_dir, "train")
    corpus_eval = datamod.load_split(corpus_dir, split)
    cells: list[AblationCell] = []
    stats = {"masks_validated": 0, "tube_masks_validated": 0}

    for seed in seeds:
        pretrain_state: trainer.TrainState | None = None
        pretrain_dir = work_dir / f"base_seed{seed}"
        for name, overrides in variants:
            cfg = copy.deepcopy(base_cfg)
            cfg.train.seed = seed
            cell_dir = work_dir / f"{axis}_{name}_seed{seed}"
            try:
                if axis == "finetune_mvm":
                    if pretrain_state is None:
                        pretrain_state = trainer.run_curriculum(
                            cfg, corpus_train, pretrain_dir,
                            keep_epoch_checkpoints=False,
                        )
                    ft_state = trainer.finetune(
                        cfg, pretrain_dir / "final.ckpt", corpus_train, cell_dir,
                        use_mvm=(name == "mvm_on"),
                    )
                    result = evaluate_params(
                        ft_state.video_params, ft_state.text_params, cfg.encoder,
                        corpus_eval, n_frames=cfg.encoder.max_frames,
                        batch_size=cfg.eval.batch_size,
                    )
                    metrics = _cell_metrics(result)
                    run_stats = ft_state.stats
                else:
                    cfg = apply_overrides(cfg, overrides)
                    metrics, state = _train_and_score(
                        cfg, corpus_train, corpus_eval, cell_dir
                    )
                    run_stats = state.stats
                for key in stats:
                    stats[key] += run_stats.get(key, 0)
                cells.append(AblationCell(variant=name, seed=seed, ok=True, metrics=metrics))
            except MilesError as exc:
                log.warning("ablation cell %s/seed=%d failed: %s", name, seed, exc)
                cells.append(AblationCell(variant=name, seed=seed, ok=False,
                                          error=f"{type(exc).__name__}: {exc}"))

    rows = []
    for name, _ in variants:
        ok = [c for c in cells if c.variant == name and c.ok]
        row: dict = {"variant": name, "seeds_ok": len(ok), "seeds_total": len(seeds)}
        for key in METRIC_KEYS:
            if ok:
                vals = np.asarray([c.metrics[key] for c in ok], dtype=np.float64)
                row[f"{key}_mean"] = float(vals.mean())
                row[f"{key}_range"] = float(vals.max() - vals.min())
            else:
                row[f"{key}_mean"] = float("nan")
                row[f"{key}_range"] = float("nan")
        rows.append(row)
    return AblationTable(axis=axis, seeds=list(seeds), split=split,
                         cells=cells, rows=rows, stats=stats)
