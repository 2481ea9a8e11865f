"""The conditioned video denoiser.

Input latents ``[F, h, w, noise+agnostic+pose+mask]`` are flattened
t-major into tokens, projected to model width, and prepended with the
garment tokens so the sequence lives on the extended ``[F+1, h, w]``
grid. A stack of transformer blocks with rotary self-attention and the
two cross-attention paths processes the sequence; the head reads the
video tokens back out as a noise prediction.

Parameter trees are plain dataclasses of numpy arrays; the helpers at
the bottom flatten them into name->array dicts for the optimizer,
checkpoints, and gradient checks.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, fields, is_dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np

from .attention import BlockParams, dit_block_backward, dit_block_forward
from .conditioning import (
    GarmentCondition,
    PatchfierParams,
    ToyVaeParams,
    encode_caption,
    encode_image,
    encode_semantic,
    extract_line_map,
    patchify,
    toy_vae_decode,
    toy_vae_encode,
)
from .container import read_tensor_container, write_tensor_container
from .data import TryOnSample, make_agnostic
from .diffusion import NoiseSchedule, assemble_input, ddim_sample, mask_to_latent
from .rope import PositionGrid, RopeFrequencies, build_rope_frequencies, prepend_garment_token
from .tensor_ops import layer_norm_backward, layer_norm_forward

Array = np.ndarray


@dataclass(frozen=True)
class ModelDims:
    channels: int = 32
    heads: int = 2
    head_dim: int = 16
    blocks: int = 4
    latent_channels: int = 8
    ffn_ratio: int = 4
    adapter_rank: int = 4
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.channels != self.heads * self.head_dim:
            raise ValueError(
                f"channels must equal heads*head_dim, got {self.channels} vs "
                f"{self.heads}*{self.head_dim}"
            )
        if min(self.channels, self.heads, self.head_dim, self.blocks, self.latent_channels) < 1:
            raise ValueError("all model dims must be >= 1")

    @property
    def input_channels(self) -> int:
        # noise + agnostic + pose latents plus the 1-channel mask
        return 3 * self.latent_channels + 1


@dataclass
class DenoiserParams:
    input_w: Array
    input_b: Array
    blocks: List[BlockParams]
    final_gain: Array
    final_bias: Array
    head_w: Array
    head_b: Array


def time_embedding(t: int, channels: int, dtype=np.float32) -> Array:
    """Fixed sinusoidal embedding of an integer timestep."""
    half = channels // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    if emb.size < channels:
        emb = np.concatenate([emb, np.zeros(channels - emb.size)])
    return emb.astype(dtype)


class Denoiser:
    """Noise-prediction network over garment-conditioned latent videos."""

    def __init__(self, dims: ModelDims, params: DenoiserParams):
        self.dims = dims
        self.params = params
        self.freqs: RopeFrequencies = build_rope_frequencies(dims.head_dim, dims.rope_base)

    @classmethod
    def create(cls, dims: ModelDims, seed: int) -> "Denoiser":
        rng = np.random.default_rng(seed)
        c = dims.channels
        c_in = dims.input_channels
        params = DenoiserParams(
            input_w=(rng.standard_normal((c_in, c)) / np.sqrt(c_in)).astype(np.float32),
            input_b=np.zeros(c, dtype=np.float32),
            blocks=[
                BlockParams.create(
                    c, dims.heads, dims.head_dim, rng,
                    ffn_ratio=dims.ffn_ratio, adapter_rank=dims.adapter_rank,
                )
                for _ in range(dims.blocks)
            ],
            final_gain=np.ones(c, dtype=np.float32),
            final_bias=np.zeros(c, dtype=np.float32),
            head_w=(rng.standard_normal((c, dims.latent_channels)) * 0.02).astype(np.float32),
            head_b=np.zeros(dims.latent_channels, dtype=np.float32),
        )
        return cls(dims, params)

    # -- forward / backward ------------------------------------------------

    def forward(self, x_in: Array, cond: GarmentCondition, t: int) -> Array:
        eps, _ = self.forward_with_cache(x_in, cond, t)
        return eps

    def forward_with_cache(self, x_in: Array, cond: GarmentCondition, t: int):
        x_in = np.asarray(x_in)
        if x_in.ndim != 4 or x_in.shape[3] != self.dims.input_channels:
            raise ValueError(
                f"expected [F, h, w, {self.dims.input_channels}] input, got {x_in.shape}"
            )
        f, h, w, c_in = x_in.shape
        flat = x_in.reshape(f * h * w, c_in)
        tokens = flat @ self.params.input_w + self.params.input_b
        seq = prepend_garment_token(tokens, cond.garment_tokens)
        grid = PositionGrid(f, h, w, garment_slots=1)
        t_emb = time_embedding(t, self.dims.channels, dtype=seq.dtype)

        block_caches = []
        for block in self.params.blocks:
            seq, cache = dit_block_forward(seq, cond, grid, self.freqs, block, t_emb)
            block_caches.append(cache)
        normed, final_cache = layer_norm_forward(seq, self.params.final_gain, self.params.final_bias)
        video = normed[h * w :]
        eps_flat = video @ self.params.head_w + self.params.head_b
        eps = eps_flat.reshape(f, h, w, self.dims.latent_channels)
        cache = (flat, (f, h, w), block_caches, final_cache, video)
        return eps, cache

    def backward(self, grad_eps: Array, cache):
        """Reverse-mode through the whole network.

        Returns ``(grads, d_x_in, d_garment_tokens, d_line_tokens)``;
        ``grads`` is keyed like :func:`params_to_dict`.
        """
        flat, (f, h, w), block_caches, final_cache, video = cache
        hw = h * w
        g_flat = np.asarray(grad_eps).reshape(f * hw, self.dims.latent_channels)
        grads: Dict[str, Array] = {
            "head_w": video.T @ g_flat,
            "head_b": g_flat.sum(axis=0),
        }
        d_normed = np.zeros((hw * (f + 1), self.dims.channels), dtype=g_flat.dtype)
        d_normed[hw:] = g_flat @ self.params.head_w.T
        d_seq, d_fg, d_fb = layer_norm_backward(d_normed, final_cache)
        grads["final_gain"] = d_fg
        grads["final_bias"] = d_fb

        d_garment = None
        d_line = None
        for i in range(len(block_caches) - 1, -1, -1):
            d_seq, block_grads, d_g, d_l = dit_block_backward(d_seq, block_caches[i])
            for k, v in block_grads.items():
                grads[f"blocks.{i}.{k}"] = v
            d_garment = d_g if d_garment is None else d_garment + d_g
            d_line = d_l if d_line is None else d_line + d_l

        # garment tokens also enter as the prepended sequence prefix
        d_garment = d_garment + d_seq[:hw]
        d_tokens = d_seq[hw:]
        grads["input_w"] = flat.T @ d_tokens
        grads["input_b"] = d_tokens.sum(axis=0)
        d_x_in = (d_tokens @ self.params.input_w.T).reshape(f, h, w, self.dims.input_channels)
        return grads, d_x_in, d_garment, d_line

    def copy(self) -> "Denoiser":
        return Denoiser(self.dims, copy.deepcopy(self.params))


class ConditionedDenoiser:
    """Binds a denoiser to one sample's side channels and conditioning.

    The result is the ``eps_model(x, t)`` callable the sampler expects;
    ``calls`` counts network evaluations (the NFE).
    """

    def __init__(self, denoiser: Denoiser, cond: GarmentCondition,
                 agnostic_lat: Array, pose_lat: Array, mask_lat: Array):
        self.denoiser = denoiser
        self.cond = cond
        self.agnostic_lat = agnostic_lat
        self.pose_lat = pose_lat
        self.mask_lat = mask_lat
        self.calls = 0

    @property
    def latent_shape(self) -> tuple:
        return self.agnostic_lat.shape

    def __call__(self, x: Array, t: int) -> Array:
        self.calls += 1
        x_in = assemble_input(x, self.agnostic_lat, self.pose_lat, self.mask_lat)
        return self.denoiser.forward(x_in, self.cond, t)


# ---------------------------------------------------------------------------
# the full trainable bundle


@dataclass
class EncodedSample:
    """All frozen-encoder outputs for one dataset sample.

    Everything here is independent of trainable parameters, so it is
    computed once per sample; only the patchfier projections of
    ``garment_latent`` / ``line_latent`` are re-run while training.
    """

    z0: Array
    agnostic_lat: Array
    pose_lat: Array
    mask_lat: Array
    garment_latent: Array
    line_latent: Array
    txt_tokens: Array
    clip_tokens: Array
    sample: TryOnSample


def encode_sample(sample: TryOnSample, vae: ToyVaeParams, channels: int) -> EncodedSample:
    agnostic_video = make_agnostic(sample.person_video, sample.agnostic_mask)
    line = extract_line_map(sample.garment_image)
    return EncodedSample(
        z0=toy_vae_encode(sample.person_video, vae),
        agnostic_lat=toy_vae_encode(agnostic_video, vae),
        pose_lat=toy_vae_encode(sample.pose_map, vae),
        mask_lat=mask_to_latent(sample.agnostic_mask, vae),
        garment_latent=encode_image(sample.garment_image, vae),
        line_latent=encode_image(np.repeat(line, 3, axis=2), vae),
        txt_tokens=encode_caption(sample.caption, channels),
        clip_tokens=encode_semantic(sample.garment_image, channels),
        sample=sample,
    )


@dataclass
class TryOnModel:
    """Denoiser plus the two trainable patchfiers and the frozen codec."""

    denoiser: Denoiser
    patchfier_g: PatchfierParams
    patchfier_l: PatchfierParams
    vae: ToyVaeParams

    @classmethod
    def create(cls, dims: ModelDims, seed: int, vae_factor: int = 4) -> "TryOnModel":
        rng = np.random.default_rng(seed + 1)
        return cls(
            denoiser=Denoiser.create(dims, seed),
            patchfier_g=PatchfierParams.create(dims.latent_channels, dims.channels, rng),
            patchfier_l=PatchfierParams.create(dims.latent_channels, dims.channels, rng),
            vae=ToyVaeParams.create(factor=vae_factor, latent_channels=dims.latent_channels),
        )

    def condition(self, enc: EncodedSample) -> GarmentCondition:
        return GarmentCondition(
            txt_tokens=enc.txt_tokens,
            clip_tokens=enc.clip_tokens,
            line_tokens=patchify(enc.line_latent, self.patchfier_l),
            garment_tokens=patchify(enc.garment_latent, self.patchfier_g),
        )

    def conditioned(self, enc: EncodedSample) -> "ConditionedDenoiser":
        return ConditionedDenoiser(
            self.denoiser, self.condition(enc), enc.agnostic_lat, enc.pose_lat, enc.mask_lat
        )

    def trainable_dict(self) -> Dict[str, Array]:
        flat = {f"denoiser.{k}": v for k, v in params_to_dict(self.denoiser.params).items()}
        flat.update({f"patchfier_g.{k}": v for k, v in params_to_dict(self.patchfier_g).items()})
        flat.update({f"patchfier_l.{k}": v for k, v in params_to_dict(self.patchfier_l).items()})
        return flat


LATENT_CLIP = 3.0  # toy-codec latents live within about +-2.6


def sample_tryon(
    model: TryOnModel,
    enc: EncodedSample,
    steps: int,
    seed: int,
    schedule: NoiseSchedule,
    clip_x0: float | None = LATENT_CLIP,
):
    """Run the deterministic sampler for one sample.

    Returns ``(latent, video, nfe)`` where ``video`` is the decoded
    result and ``nfe`` the number of denoiser evaluations.
    """
    cd = model.conditioned(enc)
    latent = ddim_sample(cd, cd.latent_shape, steps, seed, schedule, clip_x0=clip_x0)
    return latent, toy_vae_decode(latent, model.vae), cd.calls


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(prefix, model: TryOnModel, extra: dict | None = None) -> None:
    """Write ``<prefix>.tc`` (all parameters) and ``<prefix>.json`` (dims)."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    tensors = dict(model.trainable_dict())
    tensors["vae.lift"] = model.vae.lift
    tensors["vae.proj"] = model.vae.proj
    write_tensor_container(prefix.with_suffix(".tc"), tensors)
    meta = {
        "dims": asdict(model.denoiser.dims),
        "vae_factor": model.vae.factor,
    }
    if extra:
        meta.update(extra)
    prefix.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def load_checkpoint(prefix) -> TryOnModel:
    prefix = Path(prefix)
    meta = json.loads(prefix.with_suffix(".json").read_text())
    dims = ModelDims(**meta["dims"])
    model = TryOnModel.create(dims, seed=0, vae_factor=meta["vae_factor"])
    tensors = read_tensor_container(prefix.with_suffix(".tc"))
    model.vae.lift[...] = tensors.pop("vae.lift")
    model.vae.proj[...] = tensors.pop("vae.proj")
    flat = model.trainable_dict()
    for name, arr in flat.items():
        arr[...] = tensors[name]
    return model


# ---------------------------------------------------------------------------
# parameter-tree helpers


def _leaves(obj, prefix: str):
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif is_dataclass(obj):
        for fld in fields(obj):
            value = getattr(obj, fld.name)
            if isinstance(value, (np.ndarray, list)) or is_dataclass(value):
                name = f"{prefix}.{fld.name}" if prefix else fld.name
                yield from _leaves(value, name)
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from _leaves(item, f"{prefix}.{i}")


def params_to_dict(params) -> Dict[str, Array]:
    """Flatten a parameter dataclass tree into a name->array dict.

    The arrays are the live parameters, not copies; in-place updates
    through the dict mutate the model.
    """
    return dict(_leaves(params, ""))


def load_params_dict(params, values: Dict[str, Array]) -> None:
    """Copy ``values`` into an existing parameter tree, in place."""
    current = params_to_dict(params)
    missing = set(current) - set(values)
    extra = set(values) - set(current)
    if missing or extra:
        raise ValueError(f"parameter name mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
    for name, arr in current.items():
        new = np.asarray(values[name], dtype=arr.dtype)
        if new.shape != arr.shape:
            raise ValueError(f"shape mismatch for {name}: {new.shape} vs {arr.shape}")
        arr[...] = new


def params_astype(params, dtype):
    """Deep-copy a parameter tree with every array cast to ``dtype``."""
    out = copy.deepcopy(params)
    for name, arr in params_to_dict(out).items():
        _assign_by_name(out, name, arr.astype(dtype))
    return out


def _assign_by_name(obj, name: str, value):
    parts = name.split(".")
    target = obj
    for part in parts[:-1]:
        target = target[int(part)] if part.isdigit() else getattr(target, part)
    last = parts[-1]
    if last.isdigit():
        target[int(last)] = value
    else:
        setattr(target, last, value)


def params_checksum(params) -> str:
    """Order-stable SHA-256 over every parameter's bytes."""
    digest = hashlib.sha256()
    flat = params_to_dict(params)
    for name in sorted(flat):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(flat[name]).tobytes())
    return digest.hexdigest()
