"""Adam with bias correction, plus global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    """First/second moment buffers keyed like the parameter dict."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One Adam update over every named parameter.

    A missing gradient counts as zero, which leaves the parameter value
    unchanged (zero moments stay zero and the bias-corrected update is
    exactly zero) while the shared step counter still advances.
    Parameter buffers are rebound, never mutated, so arrays copied out
    earlier keep their values.
    """
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(
                f"grad shape {g.shape} does not match param '{name}' {p.data.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.data.shape:
            raise DimensionError(f"optimizer state stale for param '{name}'")
        m = BETA1 * m + (1.0 - BETA1) * g
        v = BETA2 * v + (1.0 - BETA2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + EPS)
        p.data = p.data - np.asarray(lr * update, dtype=p.data.dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.  No-op when already within bounds or when
    ``max_norm`` is non-positive (clipping disabled).
    """
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / norm
        for name, g in grads.items():
            grads[name] = g * np.asarray(scale, dtype=g.dtype)
    return norm
