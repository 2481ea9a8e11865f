"""Procedural toy try-on data.

Each sample is a short video of a "body" rectangle moving along a
seeded smooth path with a patterned garment patch affixed to it, plus
the matching garment product image, a binary mask of exactly the
rendered garment footprint, a pose map of Gaussian blobs, and a caption
derived from the scene parameters.

Rendering is integer-raster with per-frame integer placement, so the
garment pixels in the video are bit-identical to the corresponding crop
of the garment image — the paired-consistency oracle used by the
garment fidelity metric.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List

import numpy as np

from .container import read_tensor_container, write_tensor_container

Array = np.ndarray

COLORS = {
    "red": (0.85, 0.15, 0.15),
    "blue": (0.20, 0.30, 0.85),
    "green": (0.15, 0.70, 0.25),
    "yellow": (0.90, 0.85, 0.20),
    "purple": (0.60, 0.20, 0.75),
    "orange": (0.95, 0.55, 0.10),
}
PATTERNS = ("solid", "striped", "checkered", "dotted")
GARMENT_TYPES = ("shirt", "top", "vest", "tee")
_ACCENT = (0.95, 0.95, 0.95)
_BODY_COLOR = (0.84, 0.69, 0.55)
_GARMENT_BG = (0.94, 0.94, 0.94)
_OCCLUDER_COLOR = (0.25, 0.25, 0.30)


@dataclass(frozen=True)
class GeneratorConfig:
    frames: int = 8
    image_size: int = 32
    vae_factor: int = 4
    pattern_cell: int = 8
    occluder_probability: float = 0.5

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError(f"need at least 2 frames, got {self.frames}")
        if self.image_size % self.vae_factor != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by vae factor {self.vae_factor}"
            )


@dataclass
class TryOnSample:
    person_video: Array   # [F, H, W, 3] in [0, 1]
    garment_image: Array  # [H, W, 3]
    agnostic_mask: Array  # [F, H, W, 1], binary
    pose_map: Array       # [F, H, W, 3]
    caption: str
    scene_params: dict


def _pattern_patch(height: int, width: int, pattern: str, c1, c2, cell: int) -> Array:
    """Render the garment-local pattern once; reused for video and image."""
    patch = np.empty((height, width, 3), dtype=np.float32)
    patch[:] = c1
    u = np.arange(height)[:, None]
    v = np.arange(width)[None, :]
    if pattern == "striped":
        sel = (u // cell) % 2 == 1
        patch[np.broadcast_to(sel, (height, width))] = c2
    elif pattern == "checkered":
        sel = (u // cell + v // cell) % 2 == 1
        patch[sel] = c2
    elif pattern == "dotted":
        dy, dx = height // 4, width // 4
        patch[dy : dy + cell, dx : dx + cell] = c2
    elif pattern != "solid":
        raise ValueError(f"unknown pattern {pattern!r}")
    return patch


def _gaussian_blob(size: int, cy: float, cx: float, sigma: float) -> Array:
    y = np.arange(size, dtype=np.float64)[:, None]
    x = np.arange(size, dtype=np.float64)[None, :]
    return np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2.0 * sigma * sigma))


def synth_sample(seed: int, cfg: GeneratorConfig) -> TryOnSample:
    """Deterministically render one paired sample from ``seed``."""
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    f_count = cfg.frames

    color_name = str(rng.choice(sorted(COLORS)))
    pattern = str(rng.choice(PATTERNS))
    garment_type = str(rng.choice(GARMENT_TYPES))
    c1 = COLORS[color_name]
    c2 = _ACCENT

    # keep the garment at least 8 px so 7x7 SSIM windows fit the region
    gh = int(rng.integers(max(8, size * 3 // 8), max(size * 9 // 16, 9)))
    gw = int(rng.integers(max(8, size * 5 // 16), max(size // 2, 9)))
    patch = _pattern_patch(gh, gw, pattern, c1, c2, cfg.pattern_cell)
    margin = max(2, size // 16)

    # seeded smooth path: linear drift plus a sinusoid, rounded to ints
    half_h = (gh + 2 * margin) // 2
    half_w = (gw + 2 * margin) // 2
    base_y = size / 2 + rng.uniform(-2, 2)
    base_x = size / 2 + rng.uniform(-2, 2)
    drift = rng.uniform(-0.8, 0.8, size=2)
    amp = rng.uniform(1.0, float(margin + 2), size=2)
    phase = rng.uniform(0.0, 2 * np.pi, size=2)
    fs = np.arange(f_count, dtype=np.float64)
    cy = base_y + drift[0] * fs + amp[0] * np.sin(2 * np.pi * fs / f_count + phase[0])
    cx = base_x + drift[1] * fs + amp[1] * np.sin(2 * np.pi * fs / f_count + phase[1])
    cy = np.clip(np.round(cy), half_h, size - 1 - half_h).astype(int)
    cx = np.clip(np.round(cx), half_w, size - 1 - half_w).astype(int)

    background = np.array(rng.uniform(0.05, 0.45, size=3), dtype=np.float32)
    use_occluder = bool(rng.random() < cfg.occluder_probability)
    occ_width = max(2, size // 10)
    occ_x0 = int(rng.integers(0, size - occ_width))
    occ_speed = int(rng.choice((-2, -1, 1, 2)))

    video = np.empty((f_count, size, size, 3), dtype=np.float32)
    mask = np.zeros((f_count, size, size, 1), dtype=np.float32)
    pose = np.zeros((f_count, size, size, 3), dtype=np.float32)
    placement = []
    for f in range(f_count):
        frame = np.empty((size, size, 3), dtype=np.float32)
        frame[:] = background
        if use_occluder:
            x = int(np.clip(occ_x0 + occ_speed * f, 0, size - occ_width))
            frame[:, x : x + occ_width] = _OCCLUDER_COLOR
        by0 = cy[f] - half_h
        bx0 = cx[f] - half_w
        frame[by0 : by0 + gh + 2 * margin, bx0 : bx0 + gw + 2 * margin] = _BODY_COLOR
        py = cy[f] - gh // 2
        px = cx[f] - gw // 2
        frame[py : py + gh, px : px + gw] = patch
        mask[f, py : py + gh, px : px + gw, 0] = 1.0
        placement.append([int(py), int(px)])
        video[f] = frame

        center = _gaussian_blob(size, cy[f], cx[f], 2.5)
        corners = np.zeros((size, size), dtype=np.float64)
        for oy in (by0, by0 + gh + 2 * margin - 1):
            for ox in (bx0, bx0 + gw + 2 * margin - 1):
                corners += _gaussian_blob(size, oy, ox, 1.5)
        pose[f, :, :, 0] = center
        pose[f, :, :, 1] = np.clip(corners, 0.0, 1.0)

    garment_image = np.empty((size, size, 3), dtype=np.float32)
    garment_image[:] = _GARMENT_BG
    gy0 = (size - gh) // 2
    gx0 = (size - gw) // 2
    garment_image[gy0 : gy0 + gh, gx0 : gx0 + gw] = patch

    caption = f"Model is wearing {color_name} {pattern} {garment_type}"
    scene = {
        "seed": int(seed),
        "background": [float(v) for v in background],
        "garment": {
            "top": gy0,
            "left": gx0,
            "height": gh,
            "width": gw,
            "pattern": pattern,
            "color": color_name,
            "type": garment_type,
            "cell": cfg.pattern_cell,
        },
        "placement": placement,
        "placement_size": [gh, gw],
        "occluder": (
            {"x0": occ_x0, "speed": occ_speed, "width": occ_width} if use_occluder else None
        ),
    }
    return TryOnSample(video, garment_image, mask, pose, caption, scene)


def swap_garment(person: TryOnSample, garment: TryOnSample) -> TryOnSample:
    """Unpaired pairing: the person's video and mask with another sample's
    garment image and caption."""
    scene = dict(person.scene_params)
    scene = json.loads(json.dumps(scene))  # deep copy via round-trip
    scene["garment"] = dict(garment.scene_params["garment"])
    scene["unpaired_from_seed"] = garment.scene_params["seed"]
    return TryOnSample(
        person_video=person.person_video,
        garment_image=garment.garment_image,
        agnostic_mask=person.agnostic_mask,
        pose_map=person.pose_map,
        caption=garment.caption,
        scene_params=scene,
    )


def make_agnostic(person_video: Array, mask: Array, fill: float = 0.5) -> Array:
    """Blank the garment region out of a video (clothing-agnostic input)."""
    return (person_video * (1.0 - mask) + fill * mask).astype(np.float32)


# ---------------------------------------------------------------------------
# on-disk dataset


def write_dataset(out_dir, cfg: GeneratorConfig, n_train: int, n_test: int, base_seed: int) -> dict:
    """Generate and write a dataset; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_train + n_test):
        seed = base_seed + i
        sample = synth_sample(seed, cfg)
        name = f"sample_{i:04d}.tc"
        write_tensor_container(
            out / name,
            {
                "person_video": sample.person_video,
                "garment_image": sample.garment_image,
                "agnostic_mask": sample.agnostic_mask,
                "pose_map": sample.pose_map,
            },
        )
        entries.append(
            {
                "file": name,
                "seed": seed,
                "split": "train" if i < n_train else "test",
                "caption": sample.caption,
                "scene": sample.scene_params,
            }
        )
    manifest = {"config": asdict(cfg), "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def load_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())


def load_sample(data_dir, entry: dict) -> TryOnSample:
    tensors = read_tensor_container(Path(data_dir) / entry["file"])
    return TryOnSample(
        person_video=tensors["person_video"],
        garment_image=tensors["garment_image"],
        agnostic_mask=tensors["agnostic_mask"],
        pose_map=tensors["pose_map"],
        caption=entry["caption"],
        scene_params=entry["scene"],
    )


def split_entries(manifest: dict, split: str) -> List[dict]:
    return [e for e in manifest["samples"] if e["split"] == split]
