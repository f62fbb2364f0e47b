"""Patch mask samplers for masked visual modeling.

Positions are indexed per frame in row-major order over the patch grid,
matching the token layout the video encoder produces.  Five strategies:

* ``block_tube``       one 2-d block union shared by every frame
* ``random_tube``      uniform spatial positions shared by every frame
* ``random_per_frame`` independent uniform positions per frame
* ``block_per_frame``  independent block unions per frame
* ``frame_wise``       whole frames masked or left alone

Block unions follow the usual rectangle-accretion scheme: rectangles
with aspect ratio in [0.5, 2] and area between 4 patches and a quarter
of the grid are stamped until coverage reaches the ceiling of the
target, so the achieved ratio can overshoot (blocks are never trimmed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, SamplingError

STRATEGIES = (
    "block_tube",
    "random_tube",
    "random_per_frame",
    "block_per_frame",
    "frame_wise",
)

TUBE_STRATEGIES = ("block_tube", "random_tube")


@dataclass
class BlockParams:
    min_area: int = 4
    max_area_frac: float = 0.25
    min_aspect: float = 0.5
    max_aspect: float = 2.0
    max_iters: int = 10_000

    def max_area(self, n_positions: int) -> int:
        return max(self.min_area, int(n_positions * self.max_area_frac))


@dataclass
class MaskSpec:
    """A sampled mask: boolean grid of shape (frames, positions_per_frame)."""

    strategy: str
    target_ratio: float
    grid: np.ndarray
    slack: float

    @property
    def frames(self) -> int:
        return self.grid.shape[0]

    @property
    def positions(self) -> int:
        return self.grid.shape[1]

    @property
    def achieved_ratio(self) -> float:
        return float(self.grid.mean())

    def validate(self) -> None:
        if self.grid.dtype != np.bool_ or self.grid.ndim != 2:
            raise ContractError("mask grid must be a 2-d boolean array")
        achieved = self.achieved_ratio
        if not (self.target_ratio <= achieved <= self.target_ratio + self.slack + 1e-9):
            raise ContractError(
                f"achieved ratio {achieved:.4f} outside "
                f"[{self.target_ratio:.4f}, {self.target_ratio + self.slack:.4f}]"
            )
        if self.strategy in TUBE_STRATEGIES and self.frames > 1:
            if not (self.grid == self.grid[0]).all():
                raise ContractError("tube mask differs across frames")
        if self.strategy == "frame_wise":
            rows = self.grid.all(axis=1) | ~self.grid.any(axis=1)
            if not rows.all():
                raise ContractError("frame_wise mask has partially masked frames")

    def as_text(self) -> str:
        """Debug dump: '#' masked, '.' visible, one grid per frame."""
        side = math.isqrt(self.positions)
        blocks = []
        for f in range(self.frames):
            row = self.grid[f]
            if side * side == self.positions:
                lines = [
                    "".join("#" if v else "." for v in row[r * side : (r + 1) * side])
                    for r in range(side)
                ]
            else:
                lines = ["".join("#" if v else "." for v in row)]
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks)


def sample_block_mask_2d(
    grid_side: int,
    target_ratio: float,
    rng: np.random.Generator,
    params: BlockParams | None = None,
) -> np.ndarray:
    """Union of random rectangles on a square grid until coverage >= target.

    Rectangle areas are drawn no larger than what is still needed (but
    never below the minimum block area), which keeps mean overshoot
    within a fraction of the smallest block.
    """
    params = params or BlockParams()
    n = grid_side * grid_side
    need = math.ceil(target_ratio * n)
    cap = params.max_area(n)
    if params.min_area > n:
        raise ConfigError(f"minimum block area {params.min_area} exceeds grid size {n}")
    mask = np.zeros((grid_side, grid_side), dtype=bool)
    covered = 0
    log_lo = math.log(params.min_aspect)
    log_hi = math.log(params.max_aspect)
    for _ in range(params.max_iters):
        if covered >= need:
            break
        draw_cap = min(cap, max(params.min_area, need - covered))
        area = int(rng.integers(params.min_area, draw_cap + 1))
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        h = max(1, min(grid_side, round(math.sqrt(area * aspect))))
        w = max(1, min(grid_side, round(math.sqrt(area / aspect))))
        while h * w > cap:
            if h >= w:
                h -= 1
            else:
                w -= 1
        top = int(rng.integers(0, grid_side - h + 1))
        left = int(rng.integers(0, grid_side - w + 1))
        mask[top : top + h, left : left + w] = True
        covered = int(mask.sum())
    if covered < need:
        raise SamplingError(
            f"block sampler missed target {target_ratio} after {params.max_iters} draws"
        )
    return mask


def extend_tube(mask_2d: np.ndarray, frames: int) -> np.ndarray:
    """Repeat a per-frame mask over the time axis."""
    flat = mask_2d.reshape(-1)
    return np.repeat(flat[None, :], frames, axis=0)


def _grid_side(positions: int) -> int:
    side = math.isqrt(positions)
    if side * side != positions:
        raise ConfigError(
            f"block masking needs a square patch grid, got {positions} positions"
        )
    return side


def sample_mask(
    strategy: str,
    frames: int,
    positions: int,
    target_ratio: float,
    rng: np.random.Generator,
    block_params: BlockParams | None = None,
) -> MaskSpec:
    """Draw one mask; the result is validated before it is returned."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown masking strategy '{strategy}'")
    if not 0.0 < target_ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {target_ratio}")
    if frames < 1 or positions < 1:
        raise ConfigError("mask grid must have at least one frame and one position")
    params = block_params or BlockParams()

    if strategy == "block_tube":
        side = _grid_side(positions)
        grid = extend_tube(sample_block_mask_2d(side, target_ratio, rng, params), frames)
        slack = params.max_area(positions) / positions
    elif strategy == "random_tube":
        k = math.ceil(target_ratio * positions)
        chosen = rng.choice(positions, size=k, replace=False)
        row = np.zeros(positions, dtype=bool)
        row[chosen] = True
        grid = np.repeat(row[None, :], frames, axis=0)
        slack = 1.0 / positions
    elif strategy == "random_per_frame":
        k = math.ceil(target_ratio * positions)
        grid = np.zeros((frames, positions), dtype=bool)
        for f in range(frames):
            grid[f, rng.choice(positions, size=k, replace=False)] = True
        slack = 1.0 / positions
    elif strategy == "block_per_frame":
        side = _grid_side(positions)
        grid = np.stack(
            [
                sample_block_mask_2d(side, target_ratio, rng, params).reshape(-1)
                for _ in range(frames)
            ]
        )
        slack = params.max_area(positions) / positions
    else:  # frame_wise
        k = math.ceil(target_ratio * frames)
        chosen = rng.choice(frames, size=k, replace=False)
        grid = np.zeros((frames, positions), dtype=bool)
        grid[chosen] = True
        slack = 1.0 / frames

    spec = MaskSpec(strategy=strategy, target_ratio=target_ratio, grid=grid, slack=slack)
    spec.validate()
    return spec
