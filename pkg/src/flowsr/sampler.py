"""Euler integration of the learned velocity field from noise (t=1) to image (t=0)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flowsr.model import ConditionTag, LowRankAdapter, RejectedInput, VelocityModel, forward

TRAIN_STEPS = 6
INFERENCE_STEPS = 40
DEFAULT_K = 24


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampleConfig:
    steps: int = INFERENCE_STEPS
    schedule: str = "uniform"
    seed: int = 0
    initial_noise_scale: float = 1.0

    def validate(self) -> None:
        if self.steps < 1:
            raise RejectedInput("steps must be >= 1")
        if self.schedule != "uniform":
            raise RejectedInput(f"unsupported schedule {self.schedule!r}")
        if self.initial_noise_scale <= 0:
            raise RejectedInput("initial_noise_scale must be > 0")


def initial_noise(shape, seed: int, scale: float = 1.0, dtype=np.float64) -> np.ndarray:
    return (scale * np.random.default_rng(seed).standard_normal(shape)).astype(dtype)


def _velocity_fn(model, adapter):
    if isinstance(model, VelocityModel):
        return lambda x, t, lr, ids: forward(model, x, t, lr, ids, adapter)
    if adapter is not None:
        raise RejectedInput("an adapter requires a VelocityModel")
    return model


def integrate(velocity, x: np.ndarray, lr: np.ndarray, ids, steps: int) -> np.ndarray:
    """Batched Euler: x <- x - dt * v(x, t) for t = 1, 1 - dt, ..., dt."""
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        v = velocity(x, t, lr, ids)
        x = x - dt * v
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state after Euler step {i + 1}/{steps} (t={t:.4f})")
    return x


def sample(model, cond: ConditionTag, cfg: SampleConfig = SampleConfig(),
           adapter: LowRankAdapter | None = None) -> np.ndarray:
    """Draw one SR image. ``model`` is a VelocityModel or any callable
    ``velocity(x_batch, t, lr_batch, prompt_ids) -> v_batch``."""
    cfg.validate()
    lr = np.asarray(cond.lr_image)
    dtype = model.dtype if isinstance(model, VelocityModel) else np.float64
    x = initial_noise(lr.shape, cfg.seed, cfg.initial_noise_scale, dtype)[None]
    out = integrate(_velocity_fn(model, adapter), x, lr[None].astype(dtype), np.array([cond.prompt_id]),
                    cfg.steps)
    return out[0]


def sample_batch(model, lr_up: np.ndarray, prompt_ids, seeds, cfg: SampleConfig = SampleConfig(),
                 adapter: LowRankAdapter | None = None) -> np.ndarray:
    """Samples for N conditions at once; item i uses noise seed ``seeds[i]``."""
    cfg.validate()
    lr_up = np.asarray(lr_up)
    dtype = model.dtype if isinstance(model, VelocityModel) else np.float64
    x = np.stack([initial_noise(lr_up.shape[1:], int(s), cfg.initial_noise_scale, dtype) for s in seeds])
    ids = np.broadcast_to(np.asarray(prompt_ids), (len(seeds),))
    return integrate(_velocity_fn(model, adapter), x, lr_up.astype(dtype), ids, cfg.steps)


def rollout_batch(model, cond: ConditionTag, K: int = DEFAULT_K, cfg: SampleConfig = SampleConfig(steps=TRAIN_STEPS),
                  adapter: LowRankAdapter | None = None) -> list[np.ndarray]:
    """K candidates with seeds ``cfg.seed + 0 .. cfg.seed + K - 1``, in seed order."""
    if K < 2:
        raise RejectedInput("a rollout group needs K >= 2")
    lr = np.asarray(cond.lr_image)
    lr_b = np.broadcast_to(lr, (K,) + lr.shape)
    out = sample_batch(model, lr_b, cond.prompt_id, [cfg.seed + k for k in range(K)], cfg, adapter)
    return list(out)
