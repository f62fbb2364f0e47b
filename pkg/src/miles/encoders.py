"""Dual encoders: a divided space-time video transformer and a text transformer.

Video side
    Frames are cut into non-overlapping square patches, projected to the
    embedding width, and laid out frame-major then row-major.  Masked
    positions are replaced by a learned mask embedding *before* the
    learned spatial (within-frame index) and temporal (frame index)
    position tables are added, so masked tokens stay distinguishable by
    position.  A [CLS] token carrying no position embedding is prepended.

    Each block applies temporal attention (tokens sharing a spatial
    index attend across frames; [CLS] passes through untouched), then
    spatial attention (each frame's tokens attend over that frame plus
    [CLS]; the [CLS] query attends over everything), then a GELU MLP,
    all pre-norm with residuals.  The retrieval embedding is a linear
    projection of the final-norm [CLS] token scaled to unit length;
    features reported for masked positions are the final-norm token
    features *before* that projection.

Text side
    Token plus learned positional embeddings, bidirectional attention
    with padding keys masked out, same pre-norm block layout, [CLS]
    read from position 0 and projected/normalized like the video side.

The temporal position table starts at zero.  That makes a clip of
repeated identical frames exactly frame-symmetric at initialization and
lets the frame-count curriculum grow the table by appending rows that
are indistinguishable from "just initialized".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError


@dataclass
class EncoderConfig:
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    max_frames: int = 4
    patches_per_frame: int = 16
    proj_dim: int = 32
    mlp_ratio: int = 4
    text_max_len: int = 16
    vocab_size: int = 24
    dropout: float = 0.0
    cls_token_id: int = 0
    pad_token_id: int = 1

    def validate(self) -> None:
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if min(self.patch_size, self.channels, self.embed_dim, self.depth, self.heads,
               self.max_frames, self.patches_per_frame, self.proj_dim, self.mlp_ratio,
               self.text_max_len, self.vocab_size) < 1:
            raise ConfigError("encoder dimensions must all be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


@dataclass
class VideoEncoding:
    cls: Tensor                 # (B, proj_dim), unit rows
    patch_features: Tensor      # (B, frames*patches, embed_dim), final-norm
    masked_features: Tensor     # (K_total, embed_dim) at masked positions
    masked_counts: np.ndarray   # (B,) masked positions per sample


@dataclass
class TextEncoding:
    cls: Tensor                 # (B, proj_dim), unit rows
    token_features: Tensor      # (B, L, embed_dim), final-norm


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.standard_normal(shape) * std, -2.0 * std, 2.0 * std)


def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}.{w}" for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def init_video_params(
    cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32
) -> dict[str, Tensor]:
    cfg.validate()
    d = cfg.embed_dim
    p: dict[str, np.ndarray] = {}
    p["patch_proj.w"] = trunc_normal(rng, (cfg.patch_dim, d))
    p["patch_proj.b"] = np.zeros(d)
    p["cls"] = trunc_normal(rng, (d,))
    p["mask_token"] = trunc_normal(rng, (d,))
    p["pos_spatial"] = trunc_normal(rng, (cfg.patches_per_frame, d))
    p["pos_temporal"] = np.zeros((cfg.max_frames, d))
    for i in range(cfg.depth):
        for sub in ("t", "s"):
            p[f"blocks.{i}.ln_{sub}.g"] = np.ones(d)
            p[f"blocks.{i}.ln_{sub}.b"] = np.zeros(d)
            for name in _attn_names(f"blocks.{i}.attn_{sub}"):
                p[name] = trunc_normal(rng, (d, d)) if ".w" in name else np.zeros(d)
        p[f"blocks.{i}.ln_m.g"] = np.ones(d)
        p[f"blocks.{i}.ln_m.b"] = np.zeros(d)
        p[f"blocks.{i}.mlp.w1"] = trunc_normal(rng, (d, d * cfg.mlp_ratio))
        p[f"blocks.{i}.mlp.b1"] = np.zeros(d * cfg.mlp_ratio)
        p[f"blocks.{i}.mlp.w2"] = trunc_normal(rng, (d * cfg.mlp_ratio, d))
        p[f"blocks.{i}.mlp.b2"] = np.zeros(d)
    p["ln_f.g"] = np.ones(d)
    p["ln_f.b"] = np.zeros(d)
    p["proj.w"] = trunc_normal(rng, (d, cfg.proj_dim))
    p["proj.b"] = np.zeros(cfg.proj_dim)
    return {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in p.items()}


def init_text_params(
    cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32
) -> dict[str, Tensor]:
    cfg.validate()
    d = cfg.embed_dim
    p: dict[str, np.ndarray] = {}
    p["tok_emb"] = trunc_normal(rng, (cfg.vocab_size, d))
    p["pos"] = trunc_normal(rng, (cfg.text_max_len, d))
    for i in range(cfg.depth):
        p[f"blocks.{i}.ln_a.g"] = np.ones(d)
        p[f"blocks.{i}.ln_a.b"] = np.zeros(d)
        for name in _attn_names(f"blocks.{i}.attn"):
            p[name] = trunc_normal(rng, (d, d)) if ".w" in name else np.zeros(d)
        p[f"blocks.{i}.ln_m.g"] = np.ones(d)
        p[f"blocks.{i}.ln_m.b"] = np.zeros(d)
        p[f"blocks.{i}.mlp.w1"] = trunc_normal(rng, (d, d * cfg.mlp_ratio))
        p[f"blocks.{i}.mlp.b1"] = np.zeros(d * cfg.mlp_ratio)
        p[f"blocks.{i}.mlp.w2"] = trunc_normal(rng, (d * cfg.mlp_ratio, d))
        p[f"blocks.{i}.mlp.b2"] = np.zeros(d)
    p["ln_f.g"] = np.ones(d)
    p["ln_f.b"] = np.zeros(d)
    p["proj.w"] = trunc_normal(rng, (d, cfg.proj_dim))
    p["proj.b"] = np.zeros(cfg.proj_dim)
    return {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in p.items()}


def init_pixel_head(
    cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32
) -> dict[str, Tensor]:
    """Linear map from token features to raw patch pixels (pixel-target runs)."""
    return {
        "pixel_head.w": Tensor(
            trunc_normal(rng, (cfg.embed_dim, cfg.patch_dim)), requires_grad=True, dtype=dtype
        ),
        "pixel_head.b": Tensor(np.zeros(cfg.patch_dim), requires_grad=True, dtype=dtype),
    }


# ---------------------------------------------------------------------------
# shape helpers


def _split_heads(t: Tensor, heads: int) -> Tensor:
    """(..., S, D) -> (..., heads, S, D/heads)."""
    *lead, s, d = t.shape
    t = ad.reshape(t, (*lead, s, heads, d // heads))
    n = len(lead)
    return ad.transpose(t, (*range(n), n + 1, n, n + 2))


def _merge_heads(t: Tensor) -> Tensor:
    """(..., heads, S, hd) -> (..., S, heads*hd)."""
    *lead, h, s, hd = t.shape
    n = len(lead)
    t = ad.transpose(t, (*range(n), n + 1, n, n + 2))
    return ad.reshape(t, (*lead, s, h * hd))


def _swap_last(t: Tensor) -> Tensor:
    n = t.ndim
    return ad.transpose(t, (*range(n - 2), n - 1, n - 2))


def _attend(q: Tensor, k: Tensor, v: Tensor, scale: float, add_mask: Tensor | None = None) -> Tensor:
    scores = ad.matmul(q, _swap_last(k)) * scale
    if add_mask is not None:
        scores = scores + add_mask
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def _maybe_dropout(x: Tensor, cfg: EncoderConfig, rng: np.random.Generator | None) -> Tensor:
    if cfg.dropout > 0.0 and rng is not None:
        return ad.dropout(x, cfg.dropout, rng)
    return x


# ---------------------------------------------------------------------------
# video encoder


def patch_pixels(frames: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Rearrange (B, M, H, W, C) frames into flat per-patch pixel vectors.

    Patch order is frame-major, then row-major over the patch grid; each
    vector is the (P, P, C) block flattened row-major.
    """
    if frames.ndim != 5:
        raise DimensionError(f"frames must be 5-d (B, M, H, W, C), got {frames.shape}")
    b, m, h, w, c = frames.shape
    p = cfg.patch_size
    if h % p or w % p:
        raise ConfigError(f"frame size {h}x{w} not divisible by patch size {p}")
    if c != cfg.channels:
        raise ConfigError(f"expected {cfg.channels} channels, got {c}")
    n = (h // p) * (w // p)
    if n != cfg.patches_per_frame:
        raise ConfigError(
            f"grid yields {n} patches per frame, config says {cfg.patches_per_frame}"
        )
    if m > cfg.max_frames:
        raise ConfigError(f"{m} frames exceed max_frames={cfg.max_frames}")
    blocks = frames.reshape(b, m, h // p, p, w // p, p, c)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5, 6)
    return np.ascontiguousarray(blocks.reshape(b, m * n, p * p * c))


def patchify(frames: np.ndarray, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Project raw patches to embedding width: (B, M*N, D)."""
    pixels = patch_pixels(frames, cfg)
    x = Tensor(pixels, dtype=params["patch_proj.w"].dtype)
    return ad.matmul(x, params["patch_proj.w"]) + params["patch_proj.b"]


def apply_mask_and_positions(
    tokens: Tensor,
    mask: np.ndarray,
    params: dict[str, Tensor],
    cfg: EncoderConfig,
) -> Tensor:
    """Swap masked tokens for the mask embedding, add positions, prepend [CLS].

    ``mask`` is boolean (B, M, N).  Replacement happens before position
    tables are added.  With an all-false mask the blend coefficients are
    all zero, so no gradient ever reaches the mask embedding.
    """
    b, s, d = tokens.shape
    m, n = mask.shape[1], mask.shape[2]
    if mask.shape[0] != b or m * n != s:
        raise DimensionError(f"mask shape {mask.shape} does not cover tokens {tokens.shape}")
    coef = Tensor(mask.reshape(b, s, 1).astype(tokens.dtype))
    x = tokens * (1.0 - coef) + params["mask_token"] * coef

    flat_spatial = np.tile(np.arange(n), m)
    flat_temporal = np.repeat(np.arange(m), n)
    x = x + ad.gather_rows(params["pos_spatial"], flat_spatial)
    x = x + ad.gather_rows(params["pos_temporal"], flat_temporal)

    cls_row = ad.reshape(params["cls"], (1, 1, d))
    cls_tokens = Tensor(np.zeros((b, 1, d), dtype=tokens.data.dtype)) + cls_row
    return ad.concat([cls_tokens, x], axis=1)


def _video_block(
    x: Tensor,
    params: dict[str, Tensor],
    i: int,
    cfg: EncoderConfig,
    frames: int,
    rng: np.random.Generator | None,
) -> Tensor:
    b = x.shape[0]
    n = cfg.patches_per_frame
    d = cfg.embed_dim
    h = cfg.heads
    scale = 1.0 / np.sqrt(cfg.head_dim)
    pre = f"blocks.{i}"

    # temporal attention: spatial index fixed, attend across frames; [CLS] skipped
    y = ad.layer_norm(x, params[f"{pre}.ln_t.g"], params[f"{pre}.ln_t.b"])
    yp = ad.transpose(ad.reshape(y[:, 1:, :], (b, frames, n, d)), (0, 2, 1, 3))
    q = _split_heads(ad.matmul(yp, params[f"{pre}.attn_t.wq"]) + params[f"{pre}.attn_t.bq"], h)
    k = _split_heads(ad.matmul(yp, params[f"{pre}.attn_t.wk"]) + params[f"{pre}.attn_t.bk"], h)
    v = _split_heads(ad.matmul(yp, params[f"{pre}.attn_t.wv"]) + params[f"{pre}.attn_t.bv"], h)
    out = _merge_heads(_attend(q, k, v, scale))                  # (B, N, M, D)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, frames * n, d))
    out = ad.matmul(out, params[f"{pre}.attn_t.wo"]) + params[f"{pre}.attn_t.bo"]
    out = _maybe_dropout(out, cfg, rng)
    pad = Tensor(np.zeros((b, 1, d), dtype=x.data.dtype))
    x = x + ad.concat([pad, out], axis=1)

    # spatial attention: per-frame groups with shared [CLS] key/value,
    # [CLS] query reads the full sequence
    y = ad.layer_norm(x, params[f"{pre}.ln_s.g"], params[f"{pre}.ln_s.b"])
    q_all = ad.matmul(y, params[f"{pre}.attn_s.wq"]) + params[f"{pre}.attn_s.bq"]
    k_all = ad.matmul(y, params[f"{pre}.attn_s.wk"]) + params[f"{pre}.attn_s.bk"]
    v_all = ad.matmul(y, params[f"{pre}.attn_s.wv"]) + params[f"{pre}.attn_s.bv"]

    def per_frame(t: Tensor) -> Tensor:
        return _split_heads(ad.reshape(t[:, 1:, :], (b, frames, n, d)), h)

    qp = per_frame(q_all)                                        # (B, M, Hd, N, hd)
    kp = per_frame(k_all)
    vp = per_frame(v_all)
    k_cls = ad.reshape(_split_heads(k_all[:, 0:1, :], h), (b, 1, h, 1, cfg.head_dim))
    v_cls = ad.reshape(_split_heads(v_all[:, 0:1, :], h), (b, 1, h, 1, cfg.head_dim))
    kk = ad.concat([ad.concat([k_cls] * frames, axis=1), kp], axis=3)
    vv = ad.concat([ad.concat([v_cls] * frames, axis=1), vp], axis=3)
    patch_out = _merge_heads(_attend(qp, kk, vv, scale))         # (B, M, N, D)
    patch_out = ad.reshape(patch_out, (b, frames * n, d))

    q_cls = _split_heads(q_all[:, 0:1, :], h)                    # (B, Hd, 1, hd)
    cls_out = _merge_heads(
        _attend(q_cls, _split_heads(k_all, h), _split_heads(v_all, h), scale)
    )                                                            # (B, 1, D)
    out = ad.concat([cls_out, patch_out], axis=1)
    out = ad.matmul(out, params[f"{pre}.attn_s.wo"]) + params[f"{pre}.attn_s.bo"]
    x = x + _maybe_dropout(out, cfg, rng)

    # mlp
    y = ad.layer_norm(x, params[f"{pre}.ln_m.g"], params[f"{pre}.ln_m.b"])
    hmid = ad.gelu(ad.matmul(y, params[f"{pre}.mlp.w1"]) + params[f"{pre}.mlp.b1"])
    out = ad.matmul(hmid, params[f"{pre}.mlp.w2"]) + params[f"{pre}.mlp.b2"]
    return x + _maybe_dropout(out, cfg, rng)


def video_forward(
    seq: Tensor,
    mask: np.ndarray,
    params: dict[str, Tensor],
    cfg: EncoderConfig,
    dropout_rng: np.random.Generator | None = None,
) -> VideoEncoding:
    """Run the divided space-time blocks over a built input sequence.

    ``seq`` comes from :func:`apply_mask_and_positions`; ``mask`` is the
    same (B, M, N) boolean grid used there and selects which final token
    features are gathered as ``masked_features``.
    """
    b, total, d = seq.shape
    m, n = mask.shape[1], mask.shape[2]
    if mask.shape[0] != b or total != 1 + m * n:
        raise DimensionError(
            f"sequence length {total} does not match mask grid {mask.shape}"
        )
    x = seq
    for i in range(cfg.depth):
        x = _video_block(x, params, i, cfg, m, dropout_rng)
    feats = ad.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    cls = ad.l2_normalize(
        ad.matmul(feats[:, 0:1, :], params["proj.w"])[:, 0, :] + params["proj.b"], axis=-1
    )
    patch_features = feats[:, 1:, :]
    flat = ad.reshape(patch_features, (b * m * n, d))
    idx = np.flatnonzero(mask.reshape(-1))
    masked_features = ad.gather_rows(flat, idx)
    counts = mask.reshape(b, -1).sum(axis=1)
    return VideoEncoding(
        cls=cls,
        patch_features=patch_features,
        masked_features=masked_features,
        masked_counts=counts,
    )


# ---------------------------------------------------------------------------
# text encoder


def text_forward(
    ids: np.ndarray,
    params: dict[str, Tensor],
    cfg: EncoderConfig,
    dropout_rng: np.random.Generator | None = None,
) -> TextEncoding:
    """Encode token id rows (B, L); [PAD] keys are excluded from attention."""
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise DimensionError(f"ids must be (B, L), got {ids.shape}")
    b, length = ids.shape
    if length > cfg.text_max_len:
        raise ContractError(f"sequence length {length} exceeds text_max_len")
    if (ids[:, 0] != cfg.cls_token_id).any():
        raise ContractError("every caption must start with the [CLS] token id")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ContractError("token id outside vocabulary range")

    d = cfg.embed_dim
    h = cfg.heads
    scale = 1.0 / np.sqrt(cfg.head_dim)
    x = ad.reshape(ad.gather_rows(params["tok_emb"], ids.reshape(-1)), (b, length, d))
    x = x + params["pos"][0:length, :]
    dtype = params["tok_emb"].data.dtype
    pad_bias = np.where(ids == cfg.pad_token_id, -1e9, 0.0).astype(dtype)
    add_mask = Tensor(pad_bias.reshape(b, 1, 1, length))

    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        y = ad.layer_norm(x, params[f"{pre}.ln_a.g"], params[f"{pre}.ln_a.b"])
        q = _split_heads(ad.matmul(y, params[f"{pre}.attn.wq"]) + params[f"{pre}.attn.bq"], h)
        k = _split_heads(ad.matmul(y, params[f"{pre}.attn.wk"]) + params[f"{pre}.attn.bk"], h)
        v = _split_heads(ad.matmul(y, params[f"{pre}.attn.wv"]) + params[f"{pre}.attn.bv"], h)
        out = _merge_heads(_attend(q, k, v, scale, add_mask=add_mask))
        out = ad.matmul(out, params[f"{pre}.attn.wo"]) + params[f"{pre}.attn.bo"]
        x = x + _maybe_dropout(out, cfg, dropout_rng)
        y = ad.layer_norm(x, params[f"{pre}.ln_m.g"], params[f"{pre}.ln_m.b"])
        hmid = ad.gelu(ad.matmul(y, params[f"{pre}.mlp.w1"]) + params[f"{pre}.mlp.b1"])
        out = ad.matmul(hmid, params[f"{pre}.mlp.w2"]) + params[f"{pre}.mlp.b2"]
        x = x + _maybe_dropout(out, cfg, dropout_rng)

    feats = ad.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    cls = ad.l2_normalize(
        ad.matmul(feats[:, 0:1, :], params["proj.w"])[:, 0, :] + params["proj.b"], axis=-1
    )
    return TextEncoding(cls=cls, token_features=feats)


# ---------------------------------------------------------------------------
# similarity


def similarity(v: Tensor, t: Tensor) -> Tensor:
    """Dot product of two single embeddings."""
    if v.shape != t.shape or v.ndim != 1:
        raise DimensionError(f"similarity expects matching vectors, got {v.shape}/{t.shape}")
    return ad.sum_(v * t)


def similarity_matrix(v: Tensor, t: Tensor) -> Tensor:
    """All-pairs dot products: rows index ``v``, columns index ``t``."""
    if v.ndim != 2 or t.ndim != 2 or v.shape[1] != t.shape[1]:
        raise DimensionError(f"bad embedding matrices {v.shape} / {t.shape}")
    return ad.matmul(v, ad.transpose(t, (1, 0)))
