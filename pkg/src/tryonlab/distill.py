"""Few-step student distillation.

Phase 1 caches deterministic teacher trajectories over a 50-point
sampling schedule, keeps the states at the four student-aligned indices
``{0, 36, 44, 49}`` together with the clean endpoint, and regresses the
student onto those endpoints. Phase 2 alternates student updates driven
by the difference between a frozen "data" critic and an online "fake"
critic score (reverse-KL matching; the score difference is a constant
cotangent back-propagated through the student's few-step rollout) with
denoising updates of the fake critic on the student's own outputs.

The student shares the teacher's architecture and predicts the clean
latent through the standard noise-prediction conversion
``x0 = (x - sigma_t * eps(x, t)) / sqrt(alpha_bar_t)``, so initializing
it from teacher weights is exact. Both critics start as teacher copies;
the real critic never changes. Conditioning patchfiers stay frozen at
their teacher-trained values throughout distillation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .conditioning import toy_vae_decode
from .container import read_tensor_container, write_tensor_container
from .diffusion import NoiseSchedule, add_noise, assemble_input, ddim_sample, sample_sub_schedule
from .errors import DivergenceError, NumericFailure
from .model import (
    ConditionedDenoiser,
    Denoiser,
    EncodedSample,
    TryOnModel,
    params_checksum,
    params_to_dict,
    save_checkpoint,
)
from .optim import Adam

Array = np.ndarray
Grads = Dict[str, Array]

STUDENT_INDICES = (0, 36, 44, 49)


@dataclass(frozen=True)
class StudentSchedule:
    """Ordered indices into the teacher's sampling sub-schedule.

    Index 0 is the clean end; the last index is the start of the
    reverse process (the pure-noise state).
    """

    indices: Tuple[int, ...] = STUDENT_INDICES
    teacher_steps: int = 50

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if len(idx) < 1 or any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"indices must be strictly increasing, got {idx}")
        if idx[0] < 0 or idx[-1] != self.teacher_steps - 1:
            raise ValueError(
                f"last index must equal teacher_steps - 1 = {self.teacher_steps - 1}, got {idx}"
            )

    def timesteps(self, schedule: NoiseSchedule) -> Array:
        taus = sample_sub_schedule(schedule.steps, self.teacher_steps)
        return taus[list(self.indices)]


@dataclass
class CriticPair:
    """The frozen data-score critic and the online generator-score critic.

    Both start as copies of the same trained denoiser; the real critic's
    parameters must never change, which :meth:`verify_frozen` asserts
    against a construction-time checksum.
    """

    real: Denoiser
    fake: Denoiser
    real_checksum: str = ""

    def __post_init__(self):
        if not self.real_checksum:
            self.real_checksum = params_checksum(self.real.params)

    @classmethod
    def from_teacher(cls, teacher_denoiser: Denoiser) -> "CriticPair":
        return cls(real=teacher_denoiser, fake=teacher_denoiser.copy())

    def verify_frozen(self) -> None:
        if params_checksum(self.real.params) != self.real_checksum:
            raise RuntimeError("real critic parameters changed during distillation")


@dataclass
class CacheEntry:
    sample_index: int
    seed: int
    states: Dict[int, Array]  # schedule index -> latent state
    x0: Array


@dataclass
class TrajectoryCache:
    schedule: StudentSchedule
    entries: List[CacheEntry]


def eps_to_score(eps_pred: Array, t: int, schedule: NoiseSchedule) -> Array:
    """Convert a noise prediction to a score: ``-eps / sigma_t``."""
    sigma = schedule.sigma[int(t)]
    if sigma <= 0:
        raise ValueError(f"sigma is zero at step {t}; score undefined")
    return -np.asarray(eps_pred) / sigma


# ---------------------------------------------------------------------------
# trajectory cache


def generate_ode_cache(
    teacher: TryOnModel,
    encoded: Sequence[EncodedSample],
    n: int,
    base_seed: int,
    schedule: NoiseSchedule,
    student_schedule: StudentSchedule = StudentSchedule(),
    clip_x0: float | None = 3.0,
) -> TrajectoryCache:
    """Run the deterministic sampler ``n`` times and keep the states at
    the student-aligned indices plus the clean endpoint.

    Trajectory ``i`` is seeded with ``base_seed + i`` and conditioned on
    ``encoded[i % len(encoded)]``; regeneration is bit-exact.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 trajectories, got {n}")
    if not encoded:
        raise ValueError("no conditioning samples")
    entries = []
    for i in range(n):
        sample_index = i % len(encoded)
        cd = teacher.conditioned(encoded[sample_index])
        try:
            x0, states = ddim_sample(
                cd,
                cd.latent_shape,
                student_schedule.teacher_steps,
                base_seed + i,
                schedule,
                record_indices=student_schedule.indices,
                clip_x0=clip_x0,
            )
        except NumericFailure as exc:
            raise NumericFailure(f"trajectory {i}: {exc}", context=i) from exc
        entries.append(CacheEntry(sample_index, base_seed + i, states, x0))
    return TrajectoryCache(student_schedule, entries)


def save_cache(out_dir, cache: TrajectoryCache) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for i, entry in enumerate(cache.entries):
        for idx, state in entry.states.items():
            tensors[f"e{i:04d}.s{idx:02d}"] = state
        tensors[f"e{i:04d}.x0"] = entry.x0
    write_tensor_container(out / "trajectories.tc", tensors)
    manifest = {
        "teacher_steps": cache.schedule.teacher_steps,
        "indices": list(cache.schedule.indices),
        "entries": [
            {"sample_index": e.sample_index, "seed": e.seed} for e in cache.entries
        ],
    }
    (out / "cache_manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_cache(cache_dir) -> TrajectoryCache:
    cache_dir = Path(cache_dir)
    manifest = json.loads((cache_dir / "cache_manifest.json").read_text())
    tensors = read_tensor_container(cache_dir / "trajectories.tc")
    schedule = StudentSchedule(tuple(manifest["indices"]), manifest["teacher_steps"])
    entries = []
    for i, meta in enumerate(manifest["entries"]):
        states = {idx: tensors[f"e{i:04d}.s{idx:02d}"] for idx in schedule.indices}
        entries.append(CacheEntry(meta["sample_index"], meta["seed"], states, tensors[f"e{i:04d}.x0"]))
    return TrajectoryCache(schedule, entries)


# ---------------------------------------------------------------------------
# student: clean-latent prediction and the few-step rollout

SideChannels = Tuple[Array, Array, Array]  # agnostic, pose, mask latents


def predict_clean_forward(denoiser: Denoiser, x: Array, t: int, cond, side: SideChannels,
                          schedule: NoiseSchedule, clip_x0: float | None = None):
    x = np.asarray(x)
    x_in = assemble_input(x, *side)
    eps, net_cache = denoiser.forward_with_cache(x_in, cond, t)
    ab = float(schedule.alpha_bar[int(t)])
    sigma = float(schedule.sigma[int(t)])
    x0 = ((x - sigma * eps) / np.sqrt(ab)).astype(x.dtype)
    live = None
    if clip_x0 is not None:
        live = np.abs(x0) <= clip_x0
        x0 = np.clip(x0, -clip_x0, clip_x0)
    return x0, (net_cache, int(t), live)


def predict_clean_backward(denoiser: Denoiser, grad_x0: Array, cache, schedule: NoiseSchedule):
    """VJP of :func:`predict_clean_forward` w.r.t. parameters and ``x``.

    Where the forward clamped the prediction, the gradient is zero.
    """
    net_cache, t, live = cache
    grad_x0 = np.asarray(grad_x0)
    if live is not None:
        grad_x0 = grad_x0 * live
    ab = float(schedule.alpha_bar[t])
    sigma = float(schedule.sigma[t])
    sqrt_ab = float(np.sqrt(ab))
    g_eps = (-(sigma / sqrt_ab) * grad_x0).astype(grad_x0.dtype)
    grads, d_x_in, _, _ = denoiser.backward(g_eps, net_cache)
    c_lat = denoiser.dims.latent_channels
    g_x = grad_x0 / sqrt_ab + d_x_in[..., :c_lat]
    return grads, g_x.astype(grad_x0.dtype)


def _jump_coefficients(t: int, t_next: int, schedule: NoiseSchedule):
    """Deterministic move from step ``t`` to ``t_next`` given a clean
    prediction: ``x' = a x + b x0`` (the implied-noise update)."""
    a = float(schedule.sigma[t_next] / schedule.sigma[t])
    b = float(np.sqrt(schedule.alpha_bar[t_next])) - a * float(np.sqrt(schedule.alpha_bar[t]))
    return a, b


def rollout_student(denoiser: Denoiser, noise: Array, cond, side: SideChannels,
                    sched: StudentSchedule, schedule: NoiseSchedule,
                    clip_x0: float | None = None):
    """Few-step generation from a concrete noise draw, with caches.

    Iterates the indices from noisiest to cleanest: predict the clean
    latent, then move deterministically to the next index with the
    noise implied by the prediction. Returns ``(x0, caches)``.
    """
    taus = sched.timesteps(schedule)
    x = np.asarray(noise)
    dt = x.dtype
    caches = []
    x0 = None
    for pos in range(len(sched.indices) - 1, -1, -1):
        t = int(taus[pos])
        x0, pc_cache = predict_clean_forward(denoiser, x, t, cond, side, schedule, clip_x0)
        if not np.all(np.isfinite(x0)):
            raise NumericFailure(f"non-finite student prediction at index {sched.indices[pos]}")
        if pos > 0:
            a, b = _jump_coefficients(t, int(taus[pos - 1]), schedule)
            caches.append((pc_cache, a, b))
            x = (a * x + b * x0).astype(dt)
        else:
            caches.append((pc_cache, None, None))
    return x0, caches


def rollout_student_vjp(denoiser: Denoiser, grad_x0: Array, caches,
                        schedule: NoiseSchedule) -> Grads:
    """Back-propagate a cotangent on the rollout output into the
    student parameters, through every prediction and jump."""
    total: Grads = {}
    grad_x0 = np.asarray(grad_x0)
    dt = grad_x0.dtype
    g_next: Optional[Array] = None
    for pc_cache, a, b in reversed(caches):
        if g_next is None:
            g_x0 = grad_x0
            g_direct = 0.0
        else:
            g_x0 = (b * g_next).astype(dt)
            g_direct = a * g_next
        step_grads, g_x = predict_clean_backward(denoiser, g_x0, pc_cache, schedule)
        for k, v in step_grads.items():
            if k in total:
                total[k] += v
            else:
                total[k] = v.copy()
        g_next = (g_x + g_direct).astype(dt)
    return total


def few_step_sample(predict_clean: Callable[[Array, int], Array], latent_shape: tuple,
                    sched: StudentSchedule, seed: int, schedule: NoiseSchedule,
                    clip_x0: float | None = None) -> Array:
    """Four-step deterministic sampling from a seeded Gaussian draw.

    ``predict_clean(x, t)`` is the student's clean-latent prediction;
    the seed governs only the initial draw.
    """
    if len(sched.indices) != 4:
        raise ValueError(f"the few-step sampler uses exactly 4 indices, got {len(sched.indices)}")
    taus = sched.timesteps(schedule)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(latent_shape).astype(np.float32)
    x0 = None
    for pos in range(len(sched.indices) - 1, -1, -1):
        t = int(taus[pos])
        x0 = predict_clean(x, t)
        if clip_x0 is not None:
            x0 = np.clip(x0, -clip_x0, clip_x0)
        if not np.all(np.isfinite(x0)):
            raise NumericFailure(f"non-finite student prediction at index {sched.indices[pos]}")
        if pos > 0:
            a, b = _jump_coefficients(t, int(taus[pos - 1]), schedule)
            x = (a * x + b * np.asarray(x0)).astype(np.float32)
    return np.asarray(x0)


def sample_tryon_student(student: TryOnModel, enc: EncodedSample, sched: StudentSchedule,
                         seed: int, schedule: NoiseSchedule,
                         clip_x0: float | None = 3.0):
    """Few-step counterpart of :func:`tryonlab.model.sample_tryon`."""
    cd = ConditionedDenoiser(
        student.denoiser, student.condition(enc), enc.agnostic_lat, enc.pose_lat, enc.mask_lat
    )
    side = (enc.agnostic_lat, enc.pose_lat, enc.mask_lat)

    def predict(x, t):
        cd.calls += 1
        x0, _ = predict_clean_forward(student.denoiser, x, t, cd.cond, side, schedule)
        return x0

    latent = few_step_sample(predict, cd.latent_shape, sched, seed, schedule, clip_x0=clip_x0)
    return latent, toy_vae_decode(latent, student.vae), cd.calls


# ---------------------------------------------------------------------------
# losses and update steps


def student_init_loss(predict_clean: Callable[[Array, int], Array],
                      triples: Sequence[Tuple[Array, int, Array]]) -> float:
    """Mean squared error of clean-latent predictions over cached triples."""
    if not triples:
        raise ValueError("empty batch")
    total = 0.0
    count = 0
    for state, t, target in triples:
        pred = predict_clean(state, int(t))
        if pred.shape != target.shape:
            raise ValueError(f"prediction shape {pred.shape} does not match target {target.shape}")
        diff = (np.asarray(pred) - target).astype(np.float64)
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


@dataclass
class DmdStepInfo:
    output: Array
    score_diff_norm: float


def dmd_student_step(
    rollout_fn: Callable[[Array], tuple],
    rollout_vjp: Callable[[Array, object], Grads],
    real_eps: Callable[[Array, int], Array],
    fake_eps: Callable[[Array, int], Array],
    noise: Array,
    t: int,
    eps_noise: Array,
    schedule: NoiseSchedule,
) -> Tuple[Grads, DmdStepInfo]:
    """One distribution-matching update for the student.

    The student's few-step output is re-noised to step ``t``; the
    difference of the data score (frozen critic) and the generator
    score (online critic) at that point, negated, is treated as a
    constant cotangent on the output and back-propagated through the
    rollout. No gradient flows into either critic.
    """
    x, cache = rollout_fn(noise)
    x_t = add_noise(x, t, eps_noise, schedule)
    s_data = eps_to_score(real_eps(x_t, t), t, schedule)
    s_gen = eps_to_score(fake_eps(x_t, t), t, schedule)
    if not (np.all(np.isfinite(s_data)) and np.all(np.isfinite(s_gen))):
        raise NumericFailure(f"non-finite critic score at step t={t}")
    g = -(s_data - s_gen)
    grads = rollout_vjp(g.astype(np.asarray(x).dtype), cache)
    return grads, DmdStepInfo(output=x, score_diff_norm=float(np.sqrt(np.mean(g * g))))


def fake_critic_step(fake_den: Denoiser, student_sample: Array, cond, side: SideChannels,
                     t: int, eps: Array, schedule: NoiseSchedule):
    """Denoising update of the online critic on a detached student sample.

    Returns ``(loss, grads)`` where the loss is the plain noise MSE.
    """
    x_t = add_noise(student_sample, t, eps, schedule)
    pred, cache = fake_den.forward_with_cache(assemble_input(x_t, *side), cond, t)
    diff = (pred - eps).astype(np.float64)
    loss = float(np.mean(diff * diff))
    d_pred = (2.0 / diff.size) * (pred - eps)
    grads, _, _, _ = fake_den.backward(d_pred.astype(np.float32), cache)
    return loss, grads


class _DivergenceGuard:
    """Aborts after 100 consecutive losses above 10x the initial loss."""

    def __init__(self, label: str, factor: float = 10.0, patience: int = 100):
        self.label = label
        self.factor = factor
        self.patience = patience
        self.initial: Optional[float] = None
        self.streak = 0

    def check(self, loss: float) -> None:
        if not np.isfinite(loss):
            raise NumericFailure(f"{self.label}: non-finite loss")
        if self.initial is None:
            self.initial = max(loss, 1e-12)
            return
        if loss > self.factor * self.initial:
            self.streak += 1
            if self.streak >= self.patience:
                raise DivergenceError(
                    f"{self.label}: loss {loss:.3e} above {self.factor}x initial "
                    f"{self.initial:.3e} for {self.patience} consecutive steps"
                )
        else:
            self.streak = 0


# ---------------------------------------------------------------------------
# the full two-phase loop


def distill(
    teacher: TryOnModel,
    encoded: Sequence[EncodedSample],
    schedule: NoiseSchedule,
    settings,
    cache: Optional[TrajectoryCache] = None,
    checkpoint_prefix=None,
) -> Tuple[TryOnModel, dict]:
    """Run both phases and return ``(student_model, history)``.

    ``settings`` is a :class:`tryonlab.config.DistillSettings`. The
    returned student shares the teacher's frozen patchfiers and codec.
    On divergence a checkpoint is written (when ``checkpoint_prefix`` is
    given) before the exception propagates.
    """
    sched = StudentSchedule(tuple(settings.student_indices), settings.teacher_steps)
    if cache is None:
        cache = generate_ode_cache(
            teacher, encoded, settings.cache_size, settings.cache_seed, schedule, sched
        )
    critics = CriticPair.from_teacher(teacher.denoiser)
    real_den = critics.real
    fake_den = critics.fake
    student_den = teacher.denoiser.copy()

    conds = [teacher.condition(enc) for enc in encoded]
    sides = [(enc.agnostic_lat, enc.pose_lat, enc.mask_lat) for enc in encoded]
    taus = sched.timesteps(schedule)
    rng = np.random.default_rng(settings.seed)
    history = {"init_loss": [], "dmd_score_diff": [], "critic_loss": []}

    student_model = TryOnModel(student_den, teacher.patchfier_g, teacher.patchfier_l, teacher.vae)

    def write_abort_checkpoint():
        if checkpoint_prefix is not None:
            save_checkpoint(checkpoint_prefix, student_model, extra={"aborted": True})

    # phase 1: regression onto cached clean endpoints
    adam_init = Adam(params_to_dict(student_den.params), lr=settings.init_lr)
    guard = _DivergenceGuard("ode-init regression")
    n_positions = len(sched.indices)
    for it in range(settings.init_iterations):
        acc: Grads = {}
        loss_sum = 0.0
        for _ in range(settings.init_batch):
            entry = cache.entries[int(rng.integers(len(cache.entries)))]
            pos = int(rng.integers(n_positions))
            idx = sched.indices[pos]
            t = int(taus[pos])
            state = entry.states[idx]
            cond = conds[entry.sample_index]
            side = sides[entry.sample_index]
            pred, pc_cache = predict_clean_forward(
                student_den, state, t, cond, side, schedule, clip_x0=settings.clip_x0
            )
            diff = (pred - entry.x0).astype(np.float64)
            loss_sum += float(np.mean(diff * diff))
            g = (2.0 / (diff.size * settings.init_batch)) * diff
            grads, _ = predict_clean_backward(student_den, g.astype(np.float32), pc_cache, schedule)
            for k, v in grads.items():
                if k in acc:
                    acc[k] += v
                else:
                    acc[k] = v
        loss = loss_sum / settings.init_batch
        history["init_loss"].append(loss)
        try:
            guard.check(loss)
        except (DivergenceError, NumericFailure):
            write_abort_checkpoint()
            raise
        adam_init.update(acc)

    # phase 2: alternate student and critic updates, 1:1
    adam_student = Adam(params_to_dict(student_den.params), lr=settings.student_lr)
    adam_critic = Adam(params_to_dict(fake_den.params), lr=settings.critic_lr)
    guard = _DivergenceGuard("fake-critic denoising")
    t_lo = max(1, int(settings.t_min_frac * schedule.steps))
    t_hi = min(schedule.steps, int(settings.t_max_frac * schedule.steps))
    latent_shape = encoded[0].z0.shape
    last_output: Optional[Array] = None
    last_sample_index = 0
    for it in range(settings.dmd_iterations):
        if it % 2 == 0:
            sample_index = int(rng.integers(len(encoded)))
            cond = conds[sample_index]
            side = sides[sample_index]
            noise = rng.standard_normal(latent_shape).astype(np.float32)
            t = int(rng.integers(t_lo, t_hi))
            eps_noise = rng.standard_normal(latent_shape).astype(np.float32)

            def rollout_fn(z, _cond=cond, _side=side):
                return rollout_student(
                    student_den, z, _cond, _side, sched, schedule, clip_x0=settings.clip_x0
                )

            def rollout_vjp(g, c):
                return rollout_student_vjp(student_den, g, c, schedule)

            def real_fn(x, tt, _cond=cond, _side=side):
                return real_den.forward(assemble_input(x, *_side), _cond, tt)

            def fake_fn(x, tt, _cond=cond, _side=side):
                return fake_den.forward(assemble_input(x, *_side), _cond, tt)

            try:
                grads, info = dmd_student_step(
                    rollout_fn, rollout_vjp, real_fn, fake_fn, noise, t, eps_noise, schedule
                )
            except NumericFailure:
                write_abort_checkpoint()
                raise
            adam_student.update(grads)
            history["dmd_score_diff"].append(info.score_diff_norm)
            last_output = info.output
            last_sample_index = sample_index
        else:
            if last_output is None:
                continue
            cond = conds[last_sample_index]
            side = sides[last_sample_index]
            t = int(rng.integers(t_lo, t_hi))
            eps = rng.standard_normal(latent_shape).astype(np.float32)
            loss, grads = fake_critic_step(fake_den, last_output, cond, side, t, eps, schedule)
            history["critic_loss"].append(loss)
            try:
                guard.check(loss)
            except (DivergenceError, NumericFailure):
                write_abort_checkpoint()
                raise
            adam_critic.update(grads)

    critics.verify_frozen()
    return student_model, history
