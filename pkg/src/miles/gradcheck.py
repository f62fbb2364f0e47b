"""Finite-difference verification of every differentiable primitive.

The oracle is central differences on the forward computation alone, so
it stays independent of the backward path it checks.  All checks run in
float64; training itself stays in float32.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FD_STEP = 1e-5
PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3

# A case is (name, build) where build(rng) returns (arrays, forward);
# forward maps tensors (one per array, in order) to a scalar Tensor.
Case = tuple[str, Callable[[np.random.Generator], tuple[list[np.ndarray], Callable]]]


def finite_difference(
    forward_value: Callable[[list[np.ndarray]], float],
    arrays: list[np.ndarray],
    index: int,
    step: float = FD_STEP,
) -> np.ndarray:
    """Central-difference gradient of a scalar function wrt arrays[index]."""
    work = [a.copy() for a in arrays]
    grad = np.zeros_like(work[index])
    flat = work[index].reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        keep = flat[j]
        flat[j] = keep + step
        up = forward_value(work)
        flat[j] = keep - step
        down = forward_value(work)
        flat[j] = keep
        gflat[j] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = float(np.max(np.abs(analytic - numeric)))
    scale = float(np.max(np.abs(numeric)) + np.max(np.abs(analytic)) + 1e-12)
    return diff / scale


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def check_case(
    build: Callable[[np.random.Generator], tuple[list[np.ndarray], Callable]],
    rng: np.random.Generator,
    step: float = FD_STEP,
) -> float:
    """Max relative error between tape gradients and finite differences."""
    arrays, forward = build(rng)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    def value(vals: list[np.ndarray]) -> float:
        with ad.no_grad():
            out = forward([Tensor(v, dtype=np.float64) for v in vals])
        return float(out.data)

    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with ad.recording():
        loss = forward(tensors)
    ad.backward(loss)

    worst = 0.0
    for i, t in enumerate(tensors):
        numeric = finite_difference(value, arrays, i, step)
        analytic = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _weighted(rng: np.random.Generator, shape: tuple[int, ...]):
    """Random projection weights; makes the scalarized loss grad non-uniform."""
    return rng.standard_normal(shape)


def primitive_cases() -> list[Case]:
    def c_add(rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4,))  # broadcast path
        w = _weighted(rng, (3, 4))
        return [a, b], lambda ts: ad.sum_(ad.add(ts[0], ts[1]) * Tensor(w, dtype=np.float64))

    def c_sub(rng):
        a = rng.standard_normal((2, 5))
        b = rng.standard_normal((2, 5))
        w = _weighted(rng, (2, 5))
        return [a, b], lambda ts: ad.sum_(ad.sub(ts[0], ts[1]) * Tensor(w, dtype=np.float64))

    def c_mul(rng):
        a = rng.standard_normal((3, 1, 4))
        b = rng.standard_normal((2, 4))  # broadcast both ways
        w = _weighted(rng, (3, 2, 4))
        return [a, b], lambda ts: ad.sum_(ad.mul(ts[0], ts[1]) * Tensor(w, dtype=np.float64))

    def c_div(rng):
        a = rng.standard_normal((4, 3))
        b = rng.standard_normal((4, 3)) + 3.0  # keep away from zero
        w = _weighted(rng, (4, 3))
        return [a, b], lambda ts: ad.sum_(ad.div(ts[0], ts[1]) * Tensor(w, dtype=np.float64))

    def c_neg(rng):
        a = rng.standard_normal((6,))
        w = _weighted(rng, (6,))
        return [a], lambda ts: ad.sum_(ad.neg(ts[0]) * Tensor(w, dtype=np.float64))

    def c_matmul(rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        w = _weighted(rng, (3, 2))
        return [a, b], lambda ts: ad.sum_(ad.matmul(ts[0], ts[1]) * Tensor(w, dtype=np.float64))

    def c_matmul_batched(rng):
        a = rng.standard_normal((2, 3, 2, 4))
        b = rng.standard_normal((4, 3))  # broadcast over leading dims
        w = _weighted(rng, (2, 3, 2, 3))
        return [a, b], lambda ts: ad.sum_(ad.matmul(ts[0], ts[1]) * Tensor(w, dtype=np.float64))

    def c_transpose(rng):
        a = rng.standard_normal((2, 3, 4))
        w = _weighted(rng, (4, 2, 3))
        return [a], lambda ts: ad.sum_(ad.transpose(ts[0], (2, 0, 1)) * Tensor(w, dtype=np.float64))

    def c_reshape(rng):
        a = rng.standard_normal((3, 4))
        w = _weighted(rng, (2, 6))
        return [a], lambda ts: ad.sum_(ad.reshape(ts[0], (2, 6)) * Tensor(w, dtype=np.float64))

    def c_concat(rng):
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((2, 2))
        w = _weighted(rng, (2, 5))
        return [a, b], lambda ts: ad.sum_(ad.concat([ts[0], ts[1]], axis=1) * Tensor(w, dtype=np.float64))

    def c_slice(rng):
        a = rng.standard_normal((4, 5))
        w = _weighted(rng, (2, 3))
        return [a], lambda ts: ad.sum_(ts[0][1:3, 2:] * Tensor(w, dtype=np.float64))

    def c_gather(rng):
        a = rng.standard_normal((5, 3))
        idx = np.array([0, 2, 2, 4])  # duplicate rows exercise scatter-add
        w = _weighted(rng, (4, 3))
        return [a], lambda ts: ad.sum_(ad.gather_rows(ts[0], idx) * Tensor(w, dtype=np.float64))

    def c_sum_axis(rng):
        a = rng.standard_normal((3, 4, 2))
        w = _weighted(rng, (3, 2))
        return [a], lambda ts: ad.sum_(ad.sum_(ts[0], axis=1) * Tensor(w, dtype=np.float64))

    def c_mean_axis(rng):
        a = rng.standard_normal((3, 4))
        w = _weighted(rng, (4,))
        return [a], lambda ts: ad.sum_(ad.mean(ts[0], axis=0) * Tensor(w, dtype=np.float64))

    def c_exp(rng):
        a = rng.standard_normal((3, 3))
        w = _weighted(rng, (3, 3))
        return [a], lambda ts: ad.sum_(ad.exp(ts[0]) * Tensor(w, dtype=np.float64))

    def c_log(rng):
        a = rng.random((3, 3)) + 0.5
        w = _weighted(rng, (3, 3))
        return [a], lambda ts: ad.sum_(ad.log(ts[0]) * Tensor(w, dtype=np.float64))

    def c_sqrt(rng):
        a = rng.random((3, 4)) + 0.5
        w = _weighted(rng, (3, 4))
        return [a], lambda ts: ad.sum_(ad.sqrt(ts[0]) * Tensor(w, dtype=np.float64))

    def c_gelu(rng):
        a = rng.standard_normal((4, 4)) * 2.0
        w = _weighted(rng, (4, 4))
        return [a], lambda ts: ad.sum_(ad.gelu(ts[0]) * Tensor(w, dtype=np.float64))

    def c_softmax(rng):
        a = rng.standard_normal((3, 5)) * 2.0
        w = _weighted(rng, (3, 5))
        return [a], lambda ts: ad.sum_(ad.softmax(ts[0], axis=-1) * Tensor(w, dtype=np.float64))

    def c_logsumexp(rng):
        a = rng.standard_normal((4, 6)) * 2.0
        w = _weighted(rng, (4,))
        return [a], lambda ts: ad.sum_(ad.logsumexp(ts[0], axis=1) * Tensor(w, dtype=np.float64))

    def c_layer_norm(rng):
        x = rng.standard_normal((3, 4, 6))
        gain = rng.standard_normal((6,)) * 0.5 + 1.0
        bias = rng.standard_normal((6,)) * 0.1
        w = _weighted(rng, (3, 4, 6))
        return [x, gain, bias], lambda ts: ad.sum_(
            ad.layer_norm(ts[0], ts[1], ts[2]) * Tensor(w, dtype=np.float64)
        )

    def c_l2_normalize(rng):
        a = rng.standard_normal((4, 5)) + 0.1
        w = _weighted(rng, (4, 5))
        return [a], lambda ts: ad.sum_(ad.l2_normalize(ts[0], axis=-1) * Tensor(w, dtype=np.float64))

    def c_dropout(rng):
        a = rng.standard_normal((4, 4))
        w = _weighted(rng, (4, 4))
        mask_seed = int(rng.integers(1 << 31))

        def fwd(ts):
            # fixed seed so forward and FD evaluations share one mask
            return ad.sum_(
                ad.dropout(ts[0], 0.5, np.random.default_rng(mask_seed))
                * Tensor(w, dtype=np.float64)
            )

        return [a], fwd

    def c_attention_composite(rng):
        # one softmax(QK^T)V head end to end through matmul/softmax/reshape
        x = rng.standard_normal((5, 4))
        wq = rng.standard_normal((4, 4)) * 0.5
        wk = rng.standard_normal((4, 4)) * 0.5
        wv = rng.standard_normal((4, 4)) * 0.5
        w = _weighted(rng, (5, 4))

        def fwd(ts):
            xq, q, k, v = ts
            att = ad.softmax(ad.matmul(xq @ q, ad.transpose(xq @ k, (1, 0))) * 0.5, axis=-1)
            return ad.sum_(ad.matmul(att, xq @ v) * Tensor(w, dtype=np.float64))

        return [x, wq, wk, wv], fwd

    return [
        ("add", c_add),
        ("sub", c_sub),
        ("mul", c_mul),
        ("div", c_div),
        ("neg", c_neg),
        ("matmul", c_matmul),
        ("matmul_batched", c_matmul_batched),
        ("transpose", c_transpose),
        ("reshape", c_reshape),
        ("concat", c_concat),
        ("slice", c_slice),
        ("gather_rows", c_gather),
        ("sum_axis", c_sum_axis),
        ("mean_axis", c_mean_axis),
        ("exp", c_exp),
        ("log", c_log),
        ("sqrt", c_sqrt),
        ("gelu", c_gelu),
        ("softmax", c_softmax),
        ("logsumexp", c_logsumexp),
        ("layer_norm", c_layer_norm),
        ("l2_normalize", c_l2_normalize),
        ("dropout", c_dropout),
        ("attention_composite", c_attention_composite),
    ]


def run_primitive_suite(seeds: int = 20, tol: float = PRIMITIVE_TOL) -> list[CheckResult]:
    results = []
    for name, build in primitive_cases():
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng([seed, 101])
            worst = max(worst, check_case(build, rng))
        results.append(CheckResult(name=name, max_rel_err=worst, tol=tol))
    return results


def run_encoder_composite(seed: int = 0, tol: float = COMPOSITE_TOL) -> CheckResult:
    """Full encoder pair through the total loss versus finite differences.

    Uses a deliberately tiny configuration (two patches per frame, depth
    one) so the element-by-element sweep stays quick.
    """
    from . import encoders, objectives, snapshot
    from .encoders import EncoderConfig

    cfg = EncoderConfig(
        patch_size=4,
        channels=2,
        embed_dim=8,
        depth=1,
        heads=2,
        max_frames=2,
        patches_per_frame=2,
        proj_dim=4,
        text_max_len=4,
        vocab_size=6,
    )
    rng = np.random.default_rng([seed, 202])
    frames = rng.random((2, 2, 4, 8, 2))  # B=2, M=2, H=4, W=8, C=2
    mask = np.zeros((2, 2, 2), dtype=bool)
    mask[0, :, 1] = True  # a tube on sample 0
    mask[1, :, 0] = True
    ids = np.array([[0, 2, 3, 1], [0, 4, 5, 1]])

    vparams = encoders.init_video_params(cfg, np.random.default_rng([seed, 203]), dtype=np.float64)
    tparams = encoders.init_text_params(cfg, np.random.default_rng([seed, 204]), dtype=np.float64)
    # independent random target net so MVM targets are parameter-free constants
    sparams = encoders.init_video_params(cfg, np.random.default_rng([seed, 205]), dtype=np.float64)
    snap = snapshot.SnapshotState(
        params={k: Tensor(v.data.copy(), dtype=np.float64) for k, v in sparams.items()},
        momentum=0.996,
    )
    names = [f"v/{k}" for k in vparams] + [f"t/{k}" for k in tparams]
    arrays = [vparams[k].data.copy() for k in vparams] + [tparams[k].data.copy() for k in tparams]

    def forward(tensors: list[Tensor]) -> Tensor:
        vp = {k: tensors[i] for i, k in enumerate(vparams)}
        tp = {k: tensors[len(vparams) + i] for i, k in enumerate(tparams)}
        tokens = encoders.patchify(frames, vp, cfg)
        seq = encoders.apply_mask_and_positions(tokens, mask, vp, cfg)
        venc = encoders.video_forward(seq, mask, vp, cfg)
        tenc = encoders.text_forward(ids, tp, cfg)
        targets, counts = snapshot.snapshot_targets(frames, mask, snap, cfg)
        l_con = objectives.contrastive_loss(venc.cls, tenc.cls, tau=0.5)
        l_mvm = objectives.mvm_loss(venc.masked_features, targets, counts)
        return objectives.total_loss(l_con, l_mvm, warmup_active=False)

    def value(vals: list[np.ndarray]) -> float:
        with ad.no_grad():
            out = forward([Tensor(v, dtype=np.float64) for v in vals])
        return float(out.data)

    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with ad.recording():
        loss = forward(tensors)
    ad.backward(loss)

    worst = 0.0
    for i in range(len(arrays)):
        numeric = finite_difference(value, arrays, i)
        analytic = tensors[i].grad
        if analytic is None:
            analytic = np.zeros_like(arrays[i])
        err = relative_error(analytic, numeric)
        worst = max(worst, err)
    return CheckResult(name="encoder_total_loss", max_rel_err=worst, tol=tol)


def run_full_suite(seeds: int = 20) -> list[CheckResult]:
    results = run_primitive_suite(seeds=seeds)
    results.append(run_encoder_composite())
    return results
