"""Teacher training: Adam, the mask-aware denoising loop, and evaluation.

The loop is single-threaded and fully seeded; gradients over a batch
are accumulated in a fixed order, so a given (config, seed) pair
reproduces checkpoints bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .conditioning import GarmentCondition, patchify_backward, patchify_forward
from .data import TryOnSample, swap_garment
from .diffusion import (
    NoiseSchedule,
    add_noise,
    assemble_input,
    masked_diffusion_loss_grad,
    masked_diffusion_loss_terms,
)
from .distill import StudentSchedule, sample_tryon_student
from .errors import NumericFailure
from .metrics import MetricReport, background_agreement, garment_fidelity, psnr, ssim, temporal_jitter
from .model import EncodedSample, TryOnModel, encode_sample, sample_tryon
from .optim import Adam

Array = np.ndarray


@dataclass
class LossRecord:
    iteration: int
    loss: float
    masked_term: float
    unmasked_term: float


def write_loss_log(path, records: Sequence[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "masked_term", "unmasked_term"])
        for r in records:
            writer.writerow([r.iteration, f"{r.loss:.8f}", f"{r.masked_term:.8f}", f"{r.unmasked_term:.8f}"])


def training_step_grads(model: TryOnModel, enc: EncodedSample, t: int, eps: Array,
                        schedule: NoiseSchedule):
    """Loss terms and gradients for one (sample, t, eps) triple.

    Gradients cover the denoiser and both patchfiers; the garment and
    line token gradients flow back through their patchfier projections.
    """
    garment_tokens, cache_g = patchify_forward(enc.garment_latent, model.patchfier_g)
    line_tokens, cache_l = patchify_forward(enc.line_latent, model.patchfier_l)
    cond = GarmentCondition(
        txt_tokens=enc.txt_tokens,
        clip_tokens=enc.clip_tokens,
        line_tokens=line_tokens,
        garment_tokens=garment_tokens,
    )
    z_t = add_noise(enc.z0, t, eps, schedule)
    x_in = assemble_input(z_t, enc.agnostic_lat, enc.pose_lat, enc.mask_lat)
    pred, net_cache = model.denoiser.forward_with_cache(x_in, cond, t)
    loss, unmasked, masked = masked_diffusion_loss_terms(pred, eps, enc.mask_lat)
    d_pred = masked_diffusion_loss_grad(pred, eps, enc.mask_lat)
    net_grads, _, d_garment, d_line = model.denoiser.backward(d_pred, net_cache)

    grads = {f"denoiser.{k}": v for k, v in net_grads.items()}
    for k, v in patchify_backward(d_garment, cache_g).items():
        grads[f"patchfier_g.{k}"] = v
    for k, v in patchify_backward(d_line, cache_l).items():
        grads[f"patchfier_l.{k}"] = v
    return loss, unmasked, masked, grads


def train_teacher(
    model: TryOnModel,
    encoded: Sequence[EncodedSample],
    schedule: NoiseSchedule,
    iterations: int,
    lr: float,
    seed: int,
    batch_size: int = 1,
    log_every: int = 1,
) -> List[LossRecord]:
    """Fit the teacher with the mask-aware loss; returns the loss log."""
    if not encoded:
        raise ValueError("no training samples")
    rng = np.random.default_rng(seed)
    adam = Adam(model.trainable_dict(), lr=lr)
    records: List[LossRecord] = []
    for it in range(iterations):
        acc: Dict[str, Array] = {}
        loss_sum = unmasked_sum = masked_sum = 0.0
        for _ in range(batch_size):
            enc = encoded[int(rng.integers(len(encoded)))]
            t = int(rng.integers(schedule.steps))
            eps = rng.standard_normal(enc.z0.shape).astype(np.float32)
            loss, unmasked, masked, grads = training_step_grads(model, enc, t, eps, schedule)
            if not np.isfinite(loss):
                raise NumericFailure(f"non-finite training loss at iteration {it}", context=it)
            loss_sum += loss
            unmasked_sum += unmasked
            masked_sum += masked
            for k, v in grads.items():
                if k in acc:
                    acc[k] += v
                else:
                    acc[k] = v.copy()
        if batch_size > 1:
            for v in acc.values():
                v /= batch_size
        adam.update(acc)
        if it % log_every == 0 or it == iterations - 1:
            records.append(
                LossRecord(it, loss_sum / batch_size, masked_sum / batch_size, unmasked_sum / batch_size)
            )
    return records


def moving_average(values: Sequence[float], window: int) -> List[float]:
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


# ---------------------------------------------------------------------------
# evaluation


def evaluate_split(
    model: TryOnModel,
    encoded: Sequence[EncodedSample],
    schedule: NoiseSchedule,
    steps: int,
    seed: int,
    unpaired: bool = False,
    student_schedule: Optional[StudentSchedule] = None,
    student_model: Optional[TryOnModel] = None,
) -> MetricReport:
    """Sample every entry and average the metrics.

    Paired evaluation scores against each sample's own video and
    garment; unpaired swaps in the next sample's garment, for which only
    garment fidelity and jitter are meaningful. With ``student_schedule``
    the few-step student sampler is used instead of the teacher's.
    """
    if not encoded:
        raise ValueError("no evaluation samples")
    ssims: List[float] = []
    psnrs: List[float] = []
    jitters: List[float] = []
    fidelities: List[float] = []
    agreements: List[float] = []
    sampler_model = student_model or model
    for i, enc in enumerate(encoded):
        sample = enc.sample
        if unpaired:
            other = encoded[(i + 1) % len(encoded)].sample
            sample = swap_garment(sample, other)
            enc = _encoded_with_garment(enc, other, model)
        if student_schedule is not None:
            _, video, _ = sample_tryon_student(
                sampler_model, enc, student_schedule, seed + i, schedule
            )
        else:
            _, video, _ = sample_tryon(sampler_model, enc, steps, seed + i, schedule)
        if not unpaired:
            frame_ssims = [ssim(video[f], sample.person_video[f]) for f in range(video.shape[0])]
            ssims.append(float(np.mean(frame_ssims)))
            psnrs.append(psnr(video, sample.person_video))
        jitters.append(
            temporal_jitter(video, sample.agnostic_mask, sample.scene_params["placement"])
        )
        fidelities.append(garment_fidelity(video, sample))
        agnostic_video = sample.person_video * (1 - sample.agnostic_mask) + 0.5 * sample.agnostic_mask
        agreements.append(background_agreement(video, agnostic_video, sample.agnostic_mask))
    return MetricReport(
        ssim=float(np.mean(ssims)) if ssims else None,
        psnr=float(np.mean(psnrs)) if psnrs else None,
        temporal_jitter=float(np.mean(jitters)),
        garment_fidelity=float(np.mean(fidelities)),
        background_agreement=float(np.mean(agreements)),
    )


def _encoded_with_garment(enc: EncodedSample, garment_sample: TryOnSample, model: TryOnModel) -> EncodedSample:
    """Re-encode the garment-dependent streams for an unpaired pairing."""
    swapped = swap_garment(enc.sample, garment_sample)
    channels = enc.txt_tokens.shape[1]
    return encode_sample(swapped, model.vae, channels)
