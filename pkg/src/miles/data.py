"""Synthetic moving-shape corpus: generation, storage, captions, sampling.

Each clip is a short sequence of frames showing one colored shape
drifting across a dark canvas with wrap-around.  The class label is the
(shape, color, direction) triple; captions additionally spell out size,
start offset, and speed, so every caption determines its class while
test-split captions stay unique per clip.

Storage layout under a corpus directory::

    corpus.json          generator seed/version, class names, vocabulary file
    vocab.json           token -> id map ([CLS]=0, [PAD]=1, dense ids)
    train.jsonl          one {"id","path","caption","class"} record per clip
    val.jsonl / test.jsonl
    clips/<split>/<id>.clip

Clip files are binary: a header of four little-endian uint32 values
(frames, height, width, channels) followed by the row-major float32
pixel block in [0, 1].
"""

from __future__ import annotations

import itertools
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, VocabError

GENERATOR_VERSION = "1"

CLS_TOKEN = "[CLS]"
PAD_TOKEN = "[PAD]"
CLS_ID = 0
PAD_ID = 1

SHAPES = ("square", "circle", "triangle", "cross")
COLORS = {"red": (1.0, 0.1, 0.1), "green": (0.1, 1.0, 0.1),
          "blue": (0.15, 0.3, 1.0), "yellow": (1.0, 0.9, 0.1)}
MOTIONS = ("left", "right", "up", "down")
SIZES = {"small": 4.0, "large": 7.0}
SPEEDS = {"slowly": 1.5, "quickly": 3.5}
OFFSETS = ("top", "bottom", "left", "right")  # start position, cross to motion

VOCAB_WORDS = (
    "a", "small", "large",
    "red", "green", "blue", "yellow",
    "square", "circle", "triangle", "cross",
    "near", "the", "top", "bottom", "left", "right",
    "moving", "up", "down", "slowly", "quickly",
)


@dataclass
class DataConfig:
    classes: int = 8
    size: int = 256           # train split clip count
    val_size: int = 64
    test_size: int = 64
    frames: int = 8           # stored frames per clip
    resolution: int = 32
    channels: int = 3
    noise: float = 0.02
    # fraction of train captions stripped to the bare class phrase, so the
    # text tower also sees the short style used by zero-shot classification
    bare_caption_rate: float = 0.25
    seed: int = 7

    def validate(self, patch_size: int | None = None) -> None:
        if self.classes < 2 or self.classes > len(class_table(64)):
            raise ConfigError(f"classes must be in [2, 64], got {self.classes}")
        if not 0.0 <= self.bare_caption_rate <= 1.0:
            raise ConfigError(
                f"bare_caption_rate must lie in [0, 1], got {self.bare_caption_rate}"
            )
        for name in ("size", "val_size", "test_size"):
            count = getattr(self, name)
            if count <= 0 or count % self.classes:
                raise ConfigError(
                    f"{name}={count} must be a positive multiple of classes={self.classes}"
                )
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        if self.channels != 3:
            raise ConfigError("only 3-channel clips are supported")
        if patch_size is not None and self.resolution % patch_size:
            raise ConfigError(
                f"resolution {self.resolution} not divisible by patch size {patch_size}"
            )


@dataclass
class ClipRecord:
    clip_id: str
    path: str
    caption: str
    class_id: int


@dataclass
class CorpusManifest:
    split: str
    records: list[ClipRecord]
    seed: int
    version: str = GENERATOR_VERSION


def class_table(limit: int) -> list[tuple[str, str, str]]:
    """(shape, color, motion) triples; motion varies fastest so small class
    counts still contain pairs separated only by their movement."""
    combos = list(itertools.product(SHAPES, COLORS.keys(), MOTIONS))
    return combos[:limit]


def class_caption(shape: str, color: str, motion: str) -> str:
    return f"a {color} {shape} moving {motion}"


def clip_caption(shape: str, color: str, motion: str,
                 size: str, offset: str, speed: str) -> str:
    return f"a {size} {color} {shape} near the {offset} moving {motion} {speed}"


def modifier_table() -> list[tuple[str, str, str]]:
    """(size, offset_kind, speed) combos cycled within each class."""
    return list(itertools.product(SIZES.keys(), ("near", "far"), SPEEDS.keys()))


def _offset_word(motion: str, kind: str) -> str:
    # offsets sit on the axis the shape does not travel along
    if motion in ("left", "right"):
        return "top" if kind == "near" else "bottom"
    return "left" if kind == "near" else "right"


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray, s: float) -> np.ndarray:
    if shape == "square":
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if shape == "circle":
        return dx * dx + dy * dy <= s * s
    if shape == "triangle":
        return (dy >= -s) & (dy <= s) & (np.abs(dx) <= (dy + s) * 0.5)
    if shape == "cross":
        bar = s * 0.38
        return ((np.abs(dx) <= bar) & (np.abs(dy) <= s)) | (
            (np.abs(dy) <= bar) & (np.abs(dx) <= s)
        )
    raise ConfigError(f"unknown shape '{shape}'")


def render_frame(
    shape: str,
    color: tuple[float, float, float],
    center: tuple[float, float],
    half_size: float,
    resolution: int,
    noise: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One H x W x 3 frame in [0, 1]; coordinates wrap around the canvas."""
    h = w = resolution
    ys, xs = np.mgrid[0:h, 0:w]
    cx, cy = center
    dx = (xs - cx + w / 2.0) % w - w / 2.0
    dy = (ys - cy + h / 2.0) % h - h / 2.0
    frame = np.zeros((h, w, 3), dtype=np.float64)
    inside = _shape_mask(shape, dx, dy, half_size)
    frame[inside] = np.asarray(color)
    if noise > 0.0:
        frame += rng.normal(0.0, noise, size=frame.shape)
    return np.clip(frame, 0.0, 1.0).astype(np.float32)


def make_clip(
    class_id: int,
    modifier_idx: int,
    rng: np.random.Generator,
    cfg: DataConfig,
    allow_bare: bool = False,
) -> tuple[np.ndarray, str]:
    """Render all stored frames for one clip and build its caption."""
    shape, color, motion = class_table(cfg.classes)[class_id]
    size_word, offset_kind, speed_word = modifier_table()[modifier_idx]
    offset_word = _offset_word(motion, offset_kind)

    res = cfg.resolution
    half = SIZES[size_word] * res / 32.0
    step = SPEEDS[speed_word] * res / 32.0
    dx, dy = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1)}[motion]

    lane = res * (0.3 if offset_kind == "near" else 0.7) + rng.uniform(-1.0, 1.0)
    start = rng.uniform(0.0, res)
    frames = np.empty((cfg.frames, res, res, 3), dtype=np.float32)
    for t in range(cfg.frames):
        if motion in ("left", "right"):
            center = (start + dx * step * t, lane)
        else:
            center = (lane, start + dy * step * t)
        frames[t] = render_frame(shape, COLORS[color], center, half, res, cfg.noise, rng)
    caption = clip_caption(shape, color, motion, size_word, offset_word, speed_word)
    # style draw comes after rendering so frame bytes do not depend on it
    if allow_bare and rng.uniform() < cfg.bare_caption_rate:
        caption = class_caption(shape, color, motion)
    return frames, caption


# ---------------------------------------------------------------------------
# clip file format


def write_clip(path: Path, frames: np.ndarray) -> None:
    if frames.ndim != 4:
        raise ContractError(f"clip array must be 4-d, got shape {frames.shape}")
    m, h, w, c = frames.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4I", m, h, w, c))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_clip(path: Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read clip file {path}: {exc}") from exc
    if len(raw) < 16:
        raise DataError(f"clip file {path} truncated")
    m, h, w, c = struct.unpack("<4I", raw[:16])
    expect = 16 + m * h * w * c * 4
    if len(raw) != expect:
        raise DataError(f"clip file {path} has {len(raw)} bytes, expected {expect}")
    body = np.frombuffer(raw, dtype="<f4", offset=16)
    return body.reshape(m, h, w, c).astype(np.float32)


# ---------------------------------------------------------------------------
# corpus generation and loading


def _split_plan(cfg: DataConfig) -> dict[str, int]:
    return {"train": cfg.size, "val": cfg.val_size, "test": cfg.test_size}


def generate_corpus(cfg: DataConfig, out_dir: Path) -> dict[str, CorpusManifest]:
    """Write clips, manifests, vocabulary, and corpus metadata.

    Every split is balanced over classes, and modifier combos cycle
    within each class so attribute marginals stay flat.  All randomness
    derives from (corpus seed, global clip index): regenerating with the
    same config reproduces every byte.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    manifests: dict[str, CorpusManifest] = {}
    n_modifiers = len(modifier_table())
    global_idx = 0
    for split, count in _split_plan(cfg).items():
        per_class = count // cfg.classes
        records = []
        for class_id in range(cfg.classes):
            for j in range(per_class):
                clip_id = f"{split}-{global_idx:05d}"
                rng = np.random.default_rng([cfg.seed, global_idx])
                frames, caption = make_clip(class_id, j % n_modifiers, rng, cfg,
                                            allow_bare=(split == "train"))
                rel = f"clips/{split}/{clip_id}.clip"
                write_clip(out_dir / rel, frames)
                records.append(ClipRecord(clip_id, rel, caption, class_id))
                global_idx += 1
        manifests[split] = CorpusManifest(split=split, records=records, seed=cfg.seed)
        with open(out_dir / f"{split}.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(
                    {"id": rec.clip_id, "path": rec.path,
                     "caption": rec.caption, "class": rec.class_id},
                    sort_keys=True) + "\n")

    vocab = build_vocab()
    with open(out_dir / "vocab.json", "w") as fh:
        json.dump(vocab, fh, indent=0, sort_keys=True)
    meta = {
        "generator_version": GENERATOR_VERSION,
        "seed": cfg.seed,
        "config": {
            "classes": cfg.classes, "size": cfg.size, "val_size": cfg.val_size,
            "test_size": cfg.test_size, "frames": cfg.frames,
            "resolution": cfg.resolution, "channels": cfg.channels,
            "noise": cfg.noise, "bare_caption_rate": cfg.bare_caption_rate,
        },
        "class_captions": [class_caption(*combo) for combo in class_table(cfg.classes)],
        "vocab_file": "vocab.json",
    }
    with open(out_dir / "corpus.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return manifests


def load_manifest(corpus_dir: Path, split: str) -> CorpusManifest:
    corpus_dir = Path(corpus_dir)
    meta = load_corpus_meta(corpus_dir)
    path = corpus_dir / f"{split}.jsonl"
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = ClipRecord(obj["id"], obj["path"], obj["caption"], int(obj["class"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"bad manifest line {line_no} in {path}: {exc}") from exc
            if not (corpus_dir / rec.path).exists():
                raise DataError(f"clip file missing for manifest entry '{rec.clip_id}'")
            records.append(rec)
    if not records:
        raise DataError(f"manifest {path} is empty")
    return CorpusManifest(split=split, records=records, seed=meta["seed"])


def load_corpus_meta(corpus_dir: Path) -> dict:
    path = Path(corpus_dir) / "corpus.json"
    if not path.exists():
        raise DataError(f"{path} does not exist; not a corpus directory")
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# captions


def build_vocab() -> dict[str, int]:
    vocab = {CLS_TOKEN: CLS_ID, PAD_TOKEN: PAD_ID}
    for word in VOCAB_WORDS:
        vocab[word] = len(vocab)
    return vocab


def load_vocab(corpus_dir: Path) -> dict[str, int]:
    path = Path(corpus_dir) / "vocab.json"
    if not path.exists():
        raise DataError(f"vocabulary file {path} missing")
    with open(path) as fh:
        vocab = json.load(fh)
    ids = sorted(vocab.values())
    if vocab.get(CLS_TOKEN) != CLS_ID or ids != list(range(len(ids))):
        raise DataError("vocabulary ids must be dense with [CLS] at 0")
    return vocab


def tokenize_caption(caption: str, vocab: dict[str, int], max_len: int) -> np.ndarray:
    """[CLS] + word ids, right-padded with [PAD] to ``max_len``."""
    words = caption.split()
    if not words:
        raise VocabError("empty caption")
    if len(words) + 1 > max_len:
        raise VocabError(f"caption longer than max_len={max_len}: '{caption}'")
    ids = [CLS_ID]
    for word in words:
        if word not in vocab:
            raise VocabError(f"word '{word}' not in vocabulary")
        ids.append(vocab[word])
    ids.extend([PAD_ID] * (max_len - len(ids)))
    return np.asarray(ids, dtype=np.int64)


def detokenize(ids, vocab: dict[str, int]) -> str:
    inverse = {v: k for k, v in vocab.items()}
    words = []
    for i in np.asarray(ids).reshape(-1):
        token = inverse.get(int(i))
        if token is None:
            raise VocabError(f"id {int(i)} not in vocabulary")
        if token in (CLS_TOKEN, PAD_TOKEN):
            continue
        words.append(token)
    return " ".join(words)


# ---------------------------------------------------------------------------
# frame sampling


def sample_frames(
    clip: np.ndarray,
    n_frames: int,
    mode: str,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Pick ``n_frames`` stored frames by equal temporal segments.

    Train mode draws one uniform frame per segment; test mode takes each
    segment midpoint floor((2k+1)L / (2M)).  Indices come back strictly
    increasing, so ordering information survives.
    """
    length = clip.shape[0]
    if n_frames < 1 or n_frames > length:
        raise ContractError(f"cannot sample {n_frames} frames from a {length}-frame clip")
    if mode == "train":
        if rng is None:
            raise ContractError("train-mode sampling needs an rng")
        idx = []
        for k in range(n_frames):
            lo = (k * length) // n_frames
            hi = ((k + 1) * length) // n_frames
            idx.append(int(rng.integers(lo, hi)))
    elif mode == "test":
        idx = [((2 * k + 1) * length) // (2 * n_frames) for k in range(n_frames)]
    else:
        raise ContractError(f"unknown sampling mode '{mode}'")
    return clip[np.asarray(idx)]


@dataclass
class LoadedCorpus:
    """All clips of one split resident in memory for fast batching."""

    manifest: CorpusManifest
    clips: list[np.ndarray]
    captions: list[str]
    class_ids: np.ndarray
    class_captions: list[str]
    vocab: dict[str, int] = field(repr=False)

    def __len__(self) -> int:
        return len(self.clips)


def load_split(corpus_dir: Path, split: str) -> LoadedCorpus:
    corpus_dir = Path(corpus_dir)
    manifest = load_manifest(corpus_dir, split)
    meta = load_corpus_meta(corpus_dir)
    vocab = load_vocab(corpus_dir)
    clips = [read_clip(corpus_dir / rec.path) for rec in manifest.records]
    shapes = {c.shape for c in clips}
    if len(shapes) != 1:
        raise DataError(f"clips in split '{split}' disagree on shape: {shapes}")
    return LoadedCorpus(
        manifest=manifest,
        clips=clips,
        captions=[rec.caption for rec in manifest.records],
        class_ids=np.asarray([rec.class_id for rec in manifest.records], dtype=np.int64),
        class_captions=list(meta.get("class_captions", [])),
        vocab=vocab,
    )
