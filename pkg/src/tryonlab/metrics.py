"""Desk-scale quality metrics.

SSIM and PSNR are standard; the jitter statistic measures residual
frame-to-frame energy inside the garment mask after compensating the
generator's known integer body translation; garment fidelity inverts
the per-frame placement and scores the masked result region against the
garment product image with SSIM. All metrics are pure functions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .data import TryOnSample

Array = np.ndarray

_C1 = 0.01 ** 2
_C2 = 0.03 ** 2
_WINDOW = 7
_MARGIN = _WINDOW // 2


@dataclass
class MetricReport:
    """Mean metrics over an evaluation split; emitted as JSON by the CLI."""

    ssim: Optional[float]
    psnr: Optional[float]
    temporal_jitter: float
    garment_fidelity: float
    background_agreement: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _check_frame(frame: Array, name: str) -> Array:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        frame = frame[:, :, None]
    if frame.ndim != 3:
        raise ValueError(f"{name} must be [H, W] or [H, W, C], got {frame.shape}")
    if frame.shape[0] < _WINDOW or frame.shape[1] < _WINDOW:
        raise ValueError(f"{name} smaller than the {_WINDOW}x{_WINDOW} SSIM window")
    if frame.min() < -1e-6 or frame.max() > 1.0 + 1e-6:
        raise ValueError(f"{name} values outside [0, 1]")
    return frame


def _window_mean(x: Array) -> Array:
    filt = ndimage.uniform_filter(x, size=(_WINDOW, _WINDOW, 1), mode="constant")
    return filt[_MARGIN:-_MARGIN, _MARGIN:-_MARGIN]


def ssim(a: Array, b: Array) -> float:
    """Mean SSIM over valid 7x7 uniform windows and channels.

    ``C1 = 0.01**2`` and ``C2 = 0.03**2`` for unit dynamic range;
    ``ssim(a, a)`` is exactly 1.
    """
    a = _check_frame(a, "a")
    b = _check_frame(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mu_a = _window_mean(a)
    mu_b = _window_mean(b)
    e_aa = _window_mean(a * a)
    e_bb = _window_mean(b * b)
    e_ab = _window_mean(a * b)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _C1) * (2.0 * cov + _C2)
    den = (mu_a * mu_a + mu_b * mu_b + _C1) * (var_a + var_b + _C2)
    return float(np.mean(num / den))


def psnr(a: Array, b: Array) -> float:
    """``10 log10(1 / mse)`` for unit dynamic range, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 99.0
    return min(10.0 * np.log10(1.0 / mse), 99.0)


def _shift(frame: Array, dy: int, dx: int):
    """Integer-shift a frame; returns (shifted, validity) with zeros outside."""
    out = np.zeros_like(frame)
    valid = np.zeros(frame.shape[:2], dtype=bool)
    h, w = frame.shape[:2]
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = frame[ys_src, xs_src]
    valid[ys, xs] = True
    return out, valid


def temporal_jitter(
    video: Array,
    mask: Array,
    frame_offsets: Optional[Sequence[Sequence[int]]] = None,
) -> float:
    """Mean masked squared difference between consecutive frames.

    With ``frame_offsets`` (per-frame integer ``[y, x]`` placements from
    the generator), each next frame is translated back by the offset
    delta before differencing, so rigid garment motion cancels. Without
    offsets, no compensation is applied and the raw value is returned.
    """
    video = np.asarray(video, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if video.ndim != 4:
        raise ValueError(f"expected [F, H, W, C] video, got {video.shape}")
    if video.shape[0] < 2:
        raise ValueError("need at least 2 frames")
    if mask.shape[:3] != video.shape[:3]:
        raise ValueError(f"mask shape {mask.shape} does not match video {video.shape}")
    mask2 = mask[..., 0] if mask.ndim == 4 else mask

    total = 0.0
    pairs = 0
    for f in range(video.shape[0] - 1):
        nxt, nxt_mask = video[f + 1], mask2[f + 1]
        valid = np.ones(video.shape[1:3], dtype=bool)
        if frame_offsets is not None:
            dy = int(frame_offsets[f][0]) - int(frame_offsets[f + 1][0])
            dx = int(frame_offsets[f][1]) - int(frame_offsets[f + 1][1])
            nxt, valid = _shift(nxt, dy, dx)
            nxt_mask, _ = _shift(nxt_mask[:, :, None], dy, dx)
            nxt_mask = nxt_mask[:, :, 0]
        region = (mask2[f] > 0) & (nxt_mask > 0) & valid
        if not region.any():
            continue
        diff = video[f][region] - nxt[region]
        total += float(np.mean(diff * diff))
        pairs += 1
    return total / pairs if pairs else 0.0


def garment_fidelity(result_video: Array, sample: TryOnSample) -> float:
    """Masked garment-region SSIM against the garment product image.

    Each frame's garment region is cut out at the generator's known
    integer placement and compared with the corresponding region of the
    garment image; regions are cropped to their common size so unpaired
    garments of a different cut still score. Pixels outside the mask
    never enter the metric.
    """
    scene = sample.scene_params or {}
    if "placement" not in scene or "garment" not in scene:
        raise ValueError("sample.scene_params missing placement/garment information")
    result_video = np.asarray(result_video, dtype=np.float64)
    garment = scene["garment"]
    region = scene.get("placement_size", [garment["height"], garment["width"]])
    crop_h = min(int(region[0]), int(garment["height"]))
    crop_w = min(int(region[1]), int(garment["width"]))
    gy0, gx0 = int(garment["top"]), int(garment["left"])
    reference = sample.garment_image[gy0 : gy0 + crop_h, gx0 : gx0 + crop_w]

    scores = []
    for f, (py, px) in enumerate(scene["placement"]):
        crop = result_video[f, py : py + crop_h, px : px + crop_w]
        scores.append(ssim(crop, reference))
    return float(np.mean(scores))


def background_agreement(result_video: Array, agnostic_video: Array, mask: Array) -> float:
    """Pearson correlation between result and agnostic input outside the mask.

    Tracks how well regeneration preserves non-garment content; a design
    tracking metric, not an exactness claim.
    """
    result = np.asarray(result_video, dtype=np.float64)
    agnostic = np.asarray(agnostic_video, dtype=np.float64)
    outside = np.broadcast_to(np.asarray(mask) == 0, result.shape)
    a = result[outside]
    b = agnostic[outside]
    if a.size < 2 or np.std(a) == 0 or np.std(b) == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])
