"""Noise schedule, latent input assembly, mask-aware loss, and the
deterministic ODE sampler.

The schedule is variance preserving: ``alpha_bar_t + sigma_t**2 == 1``.
The denoiser predicts the noise ``eps``; the training loss is a plain
MSE plus a second MSE restricted to the garment mask, both averaged
over all elements. Sampling integrates the reverse process with the
deterministic update (no stochasticity beyond the seeded initial draw),
over an evenly spaced sub-schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import ToyVaeParams
from .errors import NumericFailure

Array = np.ndarray

# fixed channel layout of the assembled model input
INPUT_BLOCKS = ("noise", "agnostic", "pose", "mask")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step cumulative signal coefficients and noise scales."""

    alpha_bar: Array
    sigma: Array

    @property
    def steps(self) -> int:
        return self.alpha_bar.shape[0]


def make_schedule(t_count: int) -> NoiseSchedule:
    """Cosine signal schedule over ``t_count`` discrete steps.

    ``alpha_bar_t = cos^2(((t/T + 0.008) / 1.008) * pi/2)`` clamped to
    ``[1e-5, 0.9999]``. Where the lower clamp would flatten the tail
    into ties, the tied run is replaced by a geometric ramp down to the
    clamp value so the sequence stays strictly decreasing.
    """
    if t_count < 2:
        raise ValueError(f"schedule needs at least 2 steps, got {t_count}")
    t = np.arange(t_count, dtype=np.float64)
    raw = np.cos(((t / t_count + 0.008) / 1.008) * np.pi / 2.0) ** 2
    alpha_bar = np.clip(raw, 1e-5, 0.9999)
    low = raw < 1e-5
    if np.any(low):
        first = int(np.argmax(low))
        if first == 0:
            raise ValueError("schedule collapsed: first step already at clamp")
        n_tail = t_count - first
        alpha_bar[first:] = np.geomspace(alpha_bar[first - 1], 1e-5, n_tail + 1)[1:]
    sigma = np.sqrt(1.0 - alpha_bar)
    return NoiseSchedule(alpha_bar=alpha_bar, sigma=sigma)


def _check_step(t: int, schedule: NoiseSchedule) -> int:
    t = int(t)
    if not 0 <= t < schedule.steps:
        raise ValueError(f"step {t} out of range [0, {schedule.steps})")
    return t


def add_noise(z0: Array, t: int, eps: Array, schedule: NoiseSchedule) -> Array:
    """Forward diffusion: ``sqrt(alpha_bar_t) * z0 + sigma_t * eps``."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {eps.shape} does not match z0 shape {z0.shape}")
    t = _check_step(t, schedule)
    ab = schedule.alpha_bar[t]
    return (np.sqrt(ab) * z0 + schedule.sigma[t] * eps).astype(z0.dtype)


def mask_to_latent(mask_img: Array, vae: ToyVaeParams) -> Array:
    """Max-pool a binary pixel mask to latent resolution.

    Any garment pixel inside an ``s x s`` block marks the whole latent
    cell; binarity is preserved.
    """
    mask_img = np.asarray(mask_img)
    if mask_img.ndim != 4 or mask_img.shape[3] != 1:
        raise ValueError(f"expected [F, H, W, 1] mask, got {mask_img.shape}")
    values = np.unique(mask_img)
    if not np.all(np.isin(values, (0.0, 1.0))):
        raise ValueError("mask must be binary (values in {0, 1})")
    f, h, w, _ = mask_img.shape
    s = vae.factor
    if h % s != 0 or w % s != 0:
        raise ValueError(f"mask dims {h}x{w} not divisible by factor {s}")
    pooled = mask_img.reshape(f, h // s, s, w // s, s, 1).max(axis=(2, 4))
    return pooled.astype(np.float32)


def assemble_input(noisy: Array, agnostic_lat: Array, pose_lat: Array, mask_lat: Array) -> Array:
    """Concatenate the four latent blocks along channels in fixed order."""
    parts = (noisy, agnostic_lat, pose_lat, mask_lat)
    base = np.asarray(noisy).shape[:3]
    for name, part in zip(INPUT_BLOCKS, parts):
        part = np.asarray(part)
        if part.ndim != 4 or part.shape[:3] != base:
            raise ValueError(
                f"{name} block shape {part.shape} incompatible with leading dims {base}"
            )
    return np.concatenate(parts, axis=3)


def input_channel_slices(latent_channels: int) -> dict:
    """Channel slices of the assembled input, keyed by block name."""
    c = latent_channels
    return {
        "noise": slice(0, c),
        "agnostic": slice(c, 2 * c),
        "pose": slice(2 * c, 3 * c),
        "mask": slice(3 * c, 3 * c + 1),
    }


def masked_diffusion_loss(pred: Array, eps: Array, mask_lat: Array) -> float:
    """Plain MSE plus mask-restricted MSE, both means over all elements."""
    loss, _, _ = masked_diffusion_loss_terms(pred, eps, mask_lat)
    return loss


def masked_diffusion_loss_terms(pred: Array, eps: Array, mask_lat: Array):
    """Returns ``(total, unmasked_term, masked_term)`` as floats."""
    pred = np.asarray(pred)
    eps = np.asarray(eps)
    mask_lat = np.asarray(mask_lat)
    if pred.shape != eps.shape:
        raise ValueError(f"pred shape {pred.shape} does not match eps shape {eps.shape}")
    if mask_lat.shape != pred.shape[:3] + (1,):
        raise ValueError(
            f"mask shape {mask_lat.shape} does not broadcast over pred shape {pred.shape}"
        )
    diff = pred.astype(np.float64) - eps.astype(np.float64)
    unmasked = float(np.mean(diff * diff))
    md = mask_lat * diff
    masked = float(np.mean(md * md))
    return unmasked + masked, unmasked, masked


def masked_diffusion_loss_grad(pred: Array, eps: Array, mask_lat: Array) -> Array:
    """Analytic gradient of the loss w.r.t. ``pred``:
    ``(2/N) * (pred - eps) * (1 + mask)`` element-wise."""
    pred = np.asarray(pred)
    diff = pred - np.asarray(eps)
    n = diff.size
    grad = (2.0 / n) * diff * (1.0 + np.asarray(mask_lat))
    return grad.astype(pred.dtype)


# ---------------------------------------------------------------------------
# deterministic sampling


def sample_sub_schedule(t_count: int, steps: int) -> Array:
    """Evenly spaced timesteps including both endpoints, ascending.

    ``steps == 1`` keeps only the noisy endpoint. Index ``steps - 1``
    is the start of the reverse process (pure noise end) and index 0
    the clean end.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps > t_count:
        raise ValueError(f"steps {steps} exceeds schedule length {t_count}")
    if steps == 1:
        return np.array([t_count - 1], dtype=np.int64)
    return np.round(np.linspace(0, t_count - 1, steps)).astype(np.int64)


def ddim_sample(
    eps_model,
    latent_shape: tuple,
    steps: int,
    seed: int,
    schedule: NoiseSchedule,
    record_indices=None,
    clip_x0: float | None = None,
):
    """Deterministically integrate the reverse process.

    ``eps_model(x, t)`` predicts the noise at integer timestep ``t``.
    Starting from a seeded standard Gaussian at the noisiest sub-schedule
    point, each step predicts the clean latent and moves it to the next
    point with the predicted noise; the return value is the final clean
    prediction. The same seed gives bit-identical output.

    ``clip_x0`` bounds the intermediate clean predictions. Near the noisy
    end the conversion divides by sqrt(alpha_bar), so with a learned
    model tiny noise-prediction errors blow up into out-of-range clean
    estimates that derail the rest of the trajectory; clamping to the
    known latent range is the standard stabilization. Leave ``None``
    for exact-oracle models.

    When ``record_indices`` is given, returns ``(z0, states)`` where
    ``states[i]`` is the latent at sub-schedule index ``i`` before that
    step's model call.
    """
    taus = sample_sub_schedule(schedule.steps, steps)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(latent_shape).astype(np.float32)
    states = {} if record_indices is not None else None
    record = set(int(i) for i in record_indices) if record_indices is not None else None

    x0_pred = None
    for i in range(steps - 1, -1, -1):
        t = int(taus[i])
        if record is not None and i in record:
            states[i] = x.copy()
        eps_pred = eps_model(x, t)
        if not np.all(np.isfinite(eps_pred)):
            raise NumericFailure(f"non-finite noise prediction at sampler step {i}", context=i)
        ab = schedule.alpha_bar[t]
        x0_pred = (x - schedule.sigma[t] * eps_pred) / np.sqrt(ab)
        if clip_x0 is not None:
            x0_pred = np.clip(x0_pred, -clip_x0, clip_x0)
            # keep the jump consistent with the clamped prediction
            eps_pred = (x - np.sqrt(ab) * x0_pred) / schedule.sigma[t]
        if not np.all(np.isfinite(x0_pred)):
            raise NumericFailure(f"non-finite latent at sampler step {i}", context=i)
        if i > 0:
            t_next = int(taus[i - 1])
            x = (
                np.sqrt(schedule.alpha_bar[t_next]) * x0_pred
                + schedule.sigma[t_next] * eps_pred
            ).astype(np.float32)
    z0 = x0_pred.astype(np.float32)
    if states is not None:
        return z0, states
    return z0
