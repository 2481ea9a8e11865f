"""Rotary position embeddings over a garment-extended video grid.

Tokens live on a t-major ``[frames (+ garment slot), height, width]``
grid. Each attention-head channel pair is owned by exactly one axis
(temporal pairs first, then rows, then columns) and is rotated by that
axis's frequency times the coordinate, so rotated dot products depend
only on per-axis coordinate differences. Prepending a garment slot at
``t = 0`` shifts video frame ``f`` to ``t = f + 1`` and gives garment
and video tokens relative positions on a shared grid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidStateError

Array = np.ndarray


@dataclass(frozen=True)
class PositionGrid:
    """Grid dimensions; ``garment_slots`` is 0 or 1 extra leading frame."""

    frames: int
    height: int
    width: int
    garment_slots: int = 0

    def __post_init__(self):
        if self.frames < 1 or self.height < 1 or self.width < 1:
            raise ValueError(f"grid dims must be >= 1, got {self}")
        if self.garment_slots not in (0, 1):
            raise ValueError(f"garment_slots must be 0 or 1, got {self.garment_slots}")

    @property
    def sequence_length(self) -> int:
        return (self.frames + self.garment_slots) * self.height * self.width


@dataclass(frozen=True)
class GridPosition:
    """A single ``(t, x, y)`` grid coordinate; ``t = 0`` is the garment slot
    when the grid carries one."""

    t: int
    x: int
    y: int


@dataclass(frozen=True)
class RopeFrequencies:
    """Per-channel-pair angular frequencies, split by axis ownership."""

    omega_t: Array
    omega_x: Array
    omega_y: Array

    def __post_init__(self):
        for name, om in (("omega_t", self.omega_t), ("omega_x", self.omega_x), ("omega_y", self.omega_y)):
            om = np.asarray(om, dtype=np.float64)
            if om.ndim != 1 or om.size < 1:
                raise ValueError(f"{name} must be a nonempty 1-d array")
            if np.any(om <= 0):
                raise ValueError(f"{name} must be strictly positive")
            if np.any(np.diff(om) >= 0):
                raise ValueError(f"{name} must be strictly decreasing")
            object.__setattr__(self, name, om)

    @property
    def pairs(self) -> int:
        return self.omega_t.size + self.omega_x.size + self.omega_y.size

    @property
    def axis_split(self) -> tuple[int, int, int]:
        return (self.omega_t.size, self.omega_x.size, self.omega_y.size)

    @property
    def head_dim(self) -> int:
        return 2 * self.pairs


def build_rope_frequencies(head_dim: int, base: float = 10000.0) -> RopeFrequencies:
    """Geometric frequency ladders for a 3-axis split of ``head_dim / 2`` pairs.

    The spatial axes each take ``floor(P / 3)`` pairs and the temporal
    axis keeps the remainder; within an axis with ``P_a`` pairs,
    ``omega_j = base ** (-j / P_a)``.
    """
    if head_dim % 2 != 0 or head_dim < 6:
        raise ValueError(f"head_dim must be even and >= 6, got {head_dim}")
    if base <= 1.0:
        raise ValueError(f"base must be > 1, got {base}")
    pairs = head_dim // 2
    p_spatial = pairs // 3
    p_t = pairs - 2 * p_spatial

    def ladder(n: int) -> Array:
        j = np.arange(n, dtype=np.float64)
        return base ** (-j / n)

    return RopeFrequencies(ladder(p_t), ladder(p_spatial), ladder(p_spatial))


def rotation_angle(freqs: RopeFrequencies, p: GridPosition, pair_index: int) -> float:
    """Rotation angle of channel pair ``pair_index`` at grid position ``p``.

    Exactly one axis term is active per pair; the other two frequencies
    are zero by the axis-ownership convention.
    """
    p_t, p_x, _ = freqs.axis_split
    if not 0 <= pair_index < freqs.pairs:
        raise ValueError(f"pair_index {pair_index} out of range for {freqs.pairs} pairs")
    if pair_index < p_t:
        return float(freqs.omega_t[pair_index] * p.t)
    if pair_index < p_t + p_x:
        return float(freqs.omega_x[pair_index - p_t] * p.x)
    return float(freqs.omega_y[pair_index - p_t - p_x] * p.y)


def grid_coordinates(grid: PositionGrid) -> tuple[Array, Array, Array]:
    """Per-flat-index ``(t, x, y)`` coordinates in t-major order.

    With a garment slot the first ``H*W`` entries sit at ``t = 0`` and
    video frame ``f`` maps to ``t = f + 1``.
    """
    frames_total = grid.frames + grid.garment_slots
    t, x, y = np.indices((frames_total, grid.height, grid.width))
    return t.ravel(), x.ravel(), y.ravel()


def angle_table(grid: PositionGrid, freqs: RopeFrequencies) -> Array:
    """``[sequence_length, pairs]`` rotation angles for every token."""
    t, x, y = grid_coordinates(grid)
    return np.concatenate(
        [
            t[:, None] * freqs.omega_t[None, :],
            x[:, None] * freqs.omega_x[None, :],
            y[:, None] * freqs.omega_y[None, :],
        ],
        axis=1,
    )


def _rotate_pairs(tokens: Array, cos: Array, sin: Array) -> Array:
    even = tokens[..., 0::2]
    odd = tokens[..., 1::2]
    out = np.empty_like(tokens)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope(
    tokens: Array,
    grid: PositionGrid,
    freqs: RopeFrequencies,
    inverse: bool = False,
) -> Array:
    """Rotate each channel pair of ``[L, heads, head_dim]`` tokens.

    Rotations are orthogonal, so per-token norms are preserved;
    ``inverse=True`` applies the negated angles and exactly undoes a
    forward application. This same property is the backward pass: the
    gradient of a rotation is the inverse rotation of the gradient.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 3:
        raise ValueError(f"tokens must be [L, heads, head_dim], got shape {tokens.shape}")
    if tokens.shape[0] != grid.sequence_length:
        raise ValueError(
            f"sequence length {tokens.shape[0]} does not match grid length {grid.sequence_length}"
        )
    if tokens.shape[2] != freqs.head_dim:
        raise ValueError(
            f"head_dim {tokens.shape[2]} does not match frequencies ({freqs.head_dim})"
        )
    angles = angle_table(grid, freqs)
    cos = np.cos(angles).astype(tokens.dtype)[:, None, :]
    sin = np.sin(angles).astype(tokens.dtype)[:, None, :]
    if inverse:
        sin = -sin
    return _rotate_pairs(tokens, cos, sin)


def extend_grid_for_garment(grid: PositionGrid) -> PositionGrid:
    """Add the leading garment slot, growing the grid to ``[F+1, H, W]``."""
    if grid.garment_slots != 0:
        raise InvalidStateError("grid already carries a garment slot")
    return replace(grid, garment_slots=1)


def prepend_garment_token(input_tokens: Array, garment_tokens: Array) -> Array:
    """Concatenate ``[H*W, C]`` garment tokens ahead of ``[F*H*W, C]`` video tokens."""
    input_tokens = np.asarray(input_tokens)
    garment_tokens = np.asarray(garment_tokens)
    if input_tokens.ndim != 2 or garment_tokens.ndim != 2:
        raise ValueError("token arrays must be 2-d [tokens, channels]")
    if input_tokens.shape[1] != garment_tokens.shape[1]:
        raise ValueError(
            f"channel mismatch: {input_tokens.shape[1]} vs {garment_tokens.shape[1]}"
        )
    if garment_tokens.shape[0] == 0 or input_tokens.shape[0] % garment_tokens.shape[0] != 0:
        raise ValueError(
            f"garment token count {garment_tokens.shape[0]} does not divide "
            f"input token count {input_tokens.shape[0]}"
        )
    return np.concatenate([garment_tokens, input_tokens], axis=0)
