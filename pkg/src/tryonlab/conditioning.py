"""Garment conditioning: frozen toy encoders plus trainable patchfiers.

The garment image is decomposed into four token streams:

* caption tokens — hashed word embeddings of the garment caption,
* image-statistics tokens — four deterministic summary tokens (mean
  color, color histogram, edge density, thumbnail projection),
* line tokens — patchified latent of the Sobel structure map,
* garment tokens — patchified latent of the garment image itself.

Everything except the two patchfiers is frozen and seeded: identical
inputs produce bit-identical streams. Each patchfier ends in a
zero-initialized projection, so a freshly constructed pipeline emits
exactly-zero garment and line streams.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

Array = np.ndarray

TXT_BUCKETS = 4096
TXT_MAX_TOKENS = 32
SEMANTIC_TOKENS = 4
_TABLE_SEED = 1833502
_HIST_BINS = 8
_THUMB = 8

# Rec.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass
class GarmentCondition:
    """The four decomposed garment token streams, all ``[n, channels]``."""

    txt_tokens: Array
    clip_tokens: Array
    line_tokens: Array
    garment_tokens: Array


@dataclass
class PatchfierParams:
    """Latent-to-token projection with a zero-initialized output stage."""

    patch_projection: Array  # [latent_channels, channels]
    zero_projection: Array   # [channels, channels], zeros at construction

    @classmethod
    def create(cls, latent_channels: int, channels: int, rng: np.random.Generator):
        proj = (rng.standard_normal((latent_channels, channels)) / np.sqrt(latent_channels))
        return cls(
            patch_projection=proj.astype(np.float32),
            zero_projection=np.zeros((channels, channels), dtype=np.float32),
        )


@dataclass
class ToyVaeParams:
    """Fixed (never trained) latent codec.

    Encode: spatial ``factor x factor`` average pool, center pixels to
    ``[-1, 1]``, then lift 3 channels with ``[I_3 | B]``. Decode reads
    the first three latent channels back, so block-constant images
    round-trip exactly.
    """

    factor: int
    lift: Array  # [3, latent_channels], first 3x3 block is identity
    proj: Array  # [latent_channels, 3], exact right-inverse of lift

    @classmethod
    def create(cls, factor: int = 4, latent_channels: int = 8, seed: int = 7):
        if factor < 1 or latent_channels < 3:
            raise ValueError("need factor >= 1 and at least 3 latent channels")
        rng = np.random.default_rng(seed)
        lift = np.zeros((3, latent_channels), dtype=np.float32)
        lift[:, :3] = np.eye(3, dtype=np.float32)
        if latent_channels > 3:
            lift[:, 3:] = (rng.standard_normal((3, latent_channels - 3)) * 0.5).astype(np.float32)
        proj = np.zeros((latent_channels, 3), dtype=np.float32)
        proj[:3, :3] = np.eye(3, dtype=np.float32)
        return cls(factor=factor, lift=lift, proj=proj)

    @property
    def latent_channels(self) -> int:
        return self.lift.shape[1]


# ---------------------------------------------------------------------------
# frozen encoders


def extract_line_map(image: Array) -> Array:
    """Normalized Sobel gradient magnitude of the luminance channel.

    Returns an ``[H, W, 1]`` map in ``[0, 1]``; a constant image maps to
    all zeros.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] image, got {image.shape}")
    if np.min(image) < 0.0 or np.max(image) > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    luma = image.astype(np.float64) @ _LUMA
    gx = ndimage.sobel(luma, axis=1, mode="reflect")
    gy = ndimage.sobel(luma, axis=0, mode="reflect")
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    if peak > 0:
        mag /= peak
    return mag[:, :, None].astype(np.float32)


def toy_vae_encode(frames: Array, vae: ToyVaeParams) -> Array:
    """Encode ``[F, H, W, 3]`` frames to ``[F, H/s, W/s, latent]`` latents."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise ValueError(f"expected [F, H, W, 3] frames, got {frames.shape}")
    f, h, w, _ = frames.shape
    s = vae.factor
    if h % s != 0 or w % s != 0:
        raise ValueError(f"spatial dims {h}x{w} not divisible by factor {s}")
    pooled = frames.reshape(f, h // s, s, w // s, s, 3).mean(axis=(2, 4), dtype=np.float64)
    centered = (pooled - 0.5) * 2.0
    return (centered @ vae.lift.astype(np.float64)).astype(np.float32)


def toy_vae_decode(latents: Array, vae: ToyVaeParams) -> Array:
    """Decode latents back to ``[F, H, W, 3]`` pixels, clamped to [0, 1]."""
    latents = np.asarray(latents)
    if latents.ndim != 4 or latents.shape[3] != vae.latent_channels:
        raise ValueError(f"expected [F, h, w, {vae.latent_channels}] latents, got {latents.shape}")
    centered = latents.astype(np.float64) @ vae.proj.astype(np.float64)
    pixels = centered / 2.0 + 0.5
    s = vae.factor
    up = pixels.repeat(s, axis=1).repeat(s, axis=2)
    return np.clip(up, 0.0, 1.0).astype(np.float32)


def encode_image(image: Array, vae: ToyVaeParams) -> Array:
    """Single-image convenience wrapper around :func:`toy_vae_encode`."""
    return toy_vae_encode(np.asarray(image)[None], vae)[0]


def _token_bucket(word: str) -> int:
    digest = hashlib.sha1(word.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") % TXT_BUCKETS


def _embedding_table(channels: int) -> Array:
    rng = np.random.default_rng(_TABLE_SEED)
    return (rng.standard_normal((TXT_BUCKETS, channels)) / np.sqrt(channels)).astype(np.float32)


def encode_caption(caption: str, channels: int) -> Array:
    """Hash each whitespace token into a fixed seeded embedding table.

    At most ``TXT_MAX_TOKENS`` tokens are kept; identical captions are
    bit-identical and captions differing in one word differ in exactly
    one token row.
    """
    words = caption.split()
    if not words:
        raise ValueError("caption must be nonempty")
    words = words[:TXT_MAX_TOKENS]
    table = _embedding_table(channels)
    rows = [table[_token_bucket(word)] for word in words]
    return np.stack(rows, axis=0)


def semantic_features(image: Array) -> dict:
    """Raw deterministic image summary features, before projection.

    ``mean_color``: per-channel mean and standard deviation (6 values).
    ``histogram``: luminance histogram over 8 uniform bins.
    ``edge_density``: mean Sobel magnitude globally and per quadrant.
    ``thumbnail``: 8x8 average-pooled grayscale, flattened.
    """
    image = np.asarray(image)
    if np.min(image) < 0.0 or np.max(image) > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    img = image.astype(np.float64)
    mean_color = np.concatenate([img.mean(axis=(0, 1)), img.std(axis=(0, 1))])

    luma = img @ _LUMA
    hist, _ = np.histogram(luma, bins=_HIST_BINS, range=(0.0, 1.0))
    hist = hist / luma.size

    line = extract_line_map(image)[:, :, 0].astype(np.float64)
    h2, w2 = line.shape[0] // 2, line.shape[1] // 2
    edge = np.array(
        [
            line.mean(),
            line[:h2, :w2].mean(),
            line[:h2, w2:].mean(),
            line[h2:, :w2].mean(),
            line[h2:, w2:].mean(),
        ]
    )

    hh, ww = luma.shape
    ty, tx = hh // _THUMB, ww // _THUMB
    if ty >= 1 and tx >= 1:
        thumb = luma[: ty * _THUMB, : tx * _THUMB]
        thumb = thumb.reshape(_THUMB, ty, _THUMB, tx).mean(axis=(1, 3))
    else:
        thumb = np.full((_THUMB, _THUMB), luma.mean())
    return {
        "mean_color": mean_color,
        "histogram": hist,
        "edge_density": edge,
        "thumbnail": thumb.ravel(),
    }


def encode_semantic(image: Array, channels: int) -> Array:
    """Project the four summary feature vectors to one token each."""
    feats = semantic_features(image)
    rng = np.random.default_rng(_TABLE_SEED + 1)
    tokens = []
    for name in ("mean_color", "histogram", "edge_density", "thumbnail"):
        vec = feats[name]
        proj = rng.standard_normal((vec.size, channels)) / np.sqrt(vec.size)
        tokens.append(vec @ proj)
    return np.stack(tokens, axis=0).astype(np.float32)


# ---------------------------------------------------------------------------
# trainable patchfier


def patchify(latent: Array, params: PatchfierParams) -> Array:
    """Flatten an ``[h, w, latent]`` grid row-major and project to tokens.

    The final stage is the zero-initialized projection, so fresh
    parameters yield exactly-zero tokens.
    """
    out, _ = patchify_forward(latent, params)
    return out


def patchify_forward(latent: Array, params: PatchfierParams):
    latent = np.asarray(latent)
    if latent.ndim != 3:
        raise ValueError(f"expected [h, w, latent_channels] grid, got {latent.shape}")
    flat = latent.reshape(-1, latent.shape[2])
    base = flat @ params.patch_projection
    tokens = base @ params.zero_projection
    return tokens, (flat, base, params)


def patchify_backward(grad_tokens: Array, cache):
    """Returns grads dict with keys ``patch_projection`` / ``zero_projection``."""
    flat, base, params = cache
    d_zero = base.T @ grad_tokens
    d_base = grad_tokens @ params.zero_projection.T
    d_patch = flat.T @ d_base
    return {"patch_projection": d_patch, "zero_projection": d_zero}


def decompose_garment(
    image: Array,
    caption: str,
    patchfier_g: PatchfierParams,
    patchfier_l: PatchfierParams,
    vae: ToyVaeParams,
) -> GarmentCondition:
    """Build all four conditioning streams from one garment image + caption.

    The line map is broadcast to three channels and pushed through the
    same frozen codec as the garment image, but each stream has its own
    patchfier.
    """
    channels = patchfier_g.patch_projection.shape[1]
    garment_latent = encode_image(image, vae)
    line = extract_line_map(image)
    line_rgb = np.repeat(line, 3, axis=2)
    line_latent = encode_image(line_rgb, vae)
    return GarmentCondition(
        txt_tokens=encode_caption(caption, channels),
        clip_tokens=encode_semantic(image, channels),
        line_tokens=patchify(line_latent, patchfier_l),
        garment_tokens=patchify(garment_latent, patchfier_g),
    )
