"""Cold-start rectified-flow training on paired data."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from flowsr.data import Dataset
from flowsr.model import (Architecture, RejectedInput, VelocityModel, backward, forward, load_checkpoint,
                          save_checkpoint)
from flowsr.optim import Adam, cosine_lr


class TrainingDiverged(FloatingPointError):
    pass


def interpolate(x_hr, eps, t):
    x_hr, eps = np.asarray(x_hr), np.asarray(eps)
    if x_hr.shape != eps.shape:
        raise RejectedInput(f"shape mismatch {x_hr.shape} vs {eps.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise RejectedInput("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (x_hr.ndim - 1))
    return (1.0 - t) * x_hr + t * eps


def target_velocity(x_hr, eps):
    x_hr, eps = np.asarray(x_hr), np.asarray(eps)
    if x_hr.shape != eps.shape:
        raise RejectedInput(f"shape mismatch {x_hr.shape} vs {eps.shape}")
    return eps - x_hr


def flow_matching_loss(pred, v, weights=None) -> float:
    """Mean over the batch of the per-image mean squared velocity error, optionally weighted per image."""
    per = np.mean((np.asarray(pred, dtype=np.float64) - v) ** 2, axis=tuple(range(1, np.ndim(v))))
    return float(np.mean(per if weights is None else per * weights))


def prompt_weights(dataset: Dataset, power: float = 1.0) -> np.ndarray:
    """Per-prompt loss weights proportional to (mean cubic-upsample MSE of that prompt) ** -power.

    The weight depends only on the condition, so the optimal velocity field
    is unchanged; it moves capacity toward categories whose errors are small
    in absolute terms but large in dB. Normalised to mean 1 over the dataset.
    """
    err = np.mean((dataset.hr - np.clip(dataset.lr_up(), 0, 1)) ** 2, axis=(1, 2, 3))
    ids = np.asarray(dataset.prompt_ids)
    w = np.ones(int(ids.max()) + 1)
    for k in np.unique(ids):
        w[k] = np.mean(err[ids == k]) ** -power
    return w / np.mean(w[ids])


@dataclass
class FlowSample:
    x_HR: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    v_target: np.ndarray


def draw_times(n: int, rng: np.random.Generator, dist: str = "uniform", mean: float = 0.0,
               std: float = 1.0) -> np.ndarray:
    """Training times: ``uniform`` on [0, 1) or ``logit_normal`` (sigmoid of a normal draw)."""
    if dist == "uniform":
        return rng.uniform(0.0, 1.0, n)
    if dist == "logit_normal":
        return 1.0 / (1.0 + np.exp(-rng.normal(mean, std, n)))
    raise RejectedInput(f"unknown time distribution {dist!r}")


def draw_flow_sample(x_hr: np.ndarray, rng: np.random.Generator, t_dist: str = "uniform",
                     t_mean: float = 0.0, t_std: float = 1.0) -> FlowSample:
    n = x_hr.shape[0]
    t = draw_times(n, rng, t_dist, t_mean, t_std)
    eps = rng.standard_normal(x_hr.shape)
    return FlowSample(x_hr, eps, t, interpolate(x_hr, eps, t), target_velocity(x_hr, eps))


def sft_step(model: VelocityModel, hr: np.ndarray, lr_up: np.ndarray, prompt_ids, rng: np.random.Generator,
             opt: Adam | None, step: int = 0, seed: int | None = None, velocity=None,
             t_dist: str = "uniform", t_mean: float = 0.0, t_std: float = 1.0, weights=None) -> float:
    """One flow-matching update; returns the pre-update batch loss.

    ``velocity`` optionally replaces the network for plug-in checks, in which
    case no update is applied.
    """
    if len(hr) == 0:
        raise RejectedInput("empty batch")
    fs = draw_flow_sample(np.asarray(hr, dtype=np.float64), rng, t_dist, t_mean, t_std)
    if velocity is not None:
        return flow_matching_loss(velocity(fs.x_t, fs.t, lr_up, prompt_ids), fs.v_target)
    pred, cache = forward(model, fs.x_t, fs.t, lr_up, prompt_ids, return_cache=True)
    loss = flow_matching_loss(pred, fs.v_target, weights)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite SFT loss at step {step} (seed={seed}, t={fs.t.tolist()}, "
                               f"|x_t|max={np.abs(fs.x_t).max():.3g})")
    if opt is not None:
        dv = 2.0 * (pred - fs.v_target) / pred.size
        if weights is not None:
            dv = dv * np.asarray(weights).reshape((-1,) + (1,) * (pred.ndim - 1))
        grads = backward(model, cache, dv)
        opt.step(model.params, grads)
    return loss


@dataclass
class SFTConfig:
    steps: int = 5000
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    base_snapshot_step: int = 300
    log_every: int = 25
    checkpoint_every: int = 0
    schedule: str = "cosine"  # or "constant"
    warmup: int = 100
    final_lr_ratio: float = 0.02
    t_dist: str = "uniform"  # or "logit_normal"
    t_mean: float = 0.0
    t_std: float = 1.0
    weight_power: float = 1.0  # 0 = unweighted; see prompt_weights
    ema: float = 0.999  # decay of the weight average saved as the SFT model; 0 = save raw weights

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant":
            return self.learning_rate
        if self.schedule != "cosine":
            raise RejectedInput(f"unknown schedule {self.schedule!r}")
        return cosine_lr(step, self.steps, self.learning_rate, self.warmup, self.learning_rate * self.final_lr_ratio)


def _batch_indices(n, batch, step, seed):
    per_epoch = max(1, n // batch)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, 7, epoch]).permutation(n)
    return perm[pos * batch:(pos + 1) * batch] if n >= batch else perm


def _save_state(path, model, opt, step, stage, lineage, parents=None, ema=None):
    extra = {f"opt/{k}": v for k, v in opt.state().items()}
    extra.update({f"ema/{k}": v for k, v in (ema or {}).items()})
    extra["step"] = np.array(step)
    return save_checkpoint(path, model, stage=stage, seed_lineage=lineage, parents=parents, extra=extra)


def train_sft(dataset: Dataset, cfg: SFTConfig, arch: Architecture | None = None, out_dir=None,
              resume_from=None, init: VelocityModel | None = None, stop_at: int | None = None):
    """Cold-start training. Returns ``(sft_model, base_model, log_rows)``.

    ``base_model`` is the snapshot taken at ``cfg.base_snapshot_step`` (the
    weakly trained model RL adapters are optimised on), or None if training
    ended before that step. With ``out_dir`` the function writes ``base/``,
    ``sft/`` checkpoints and ``loss.jsonl``. ``stop_at`` halts early (for
    resume tests) while keeping the schedule of ``cfg.steps``.
    """
    if not dataset.paired:
        raise RejectedInput("cold start needs a paired dataset")
    arch = arch or Architecture(channels=dataset.lr.shape[-1])
    opt = Adam(cfg.learning_rate)
    start = 0
    base_model = None
    if resume_from is not None:
        model, _, manifest, extra = load_checkpoint(resume_from, expected_arch=arch)
        opt.load_state({k[4:]: v for k, v in extra.items() if k.startswith("opt/")})
        start = int(extra["step"])
        ema = {k[4:]: v.copy() for k, v in extra.items() if k.startswith("ema/")} or None
        if start > cfg.base_snapshot_step and (Path(resume_from).parent / "base").exists():
            base_model = load_checkpoint(Path(resume_from).parent / "base", expected_arch=arch)[0]
    else:
        model = init.copy() if init is not None else VelocityModel.init(arch, np.random.default_rng([cfg.seed, 1]))
        ema = None
    if cfg.ema and ema is None:
        ema = {k: v.astype(np.float64) for k, v in model.params.items()}
    lr_up = dataset.lr_up()
    pw = prompt_weights(dataset, cfg.weight_power) if cfg.weight_power else None
    lineage = [f"sft.seed={cfg.seed}"]
    log: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_f = open(out / "loss.jsonl", "a" if resume_from else "w") if out is not None else None
    t0 = time.time()
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    run_loss, run_n = 0.0, 0
    try:
        for step in range(start, end):
            if step == cfg.base_snapshot_step:
                base_model = model.copy()
                if out is not None:
                    save_checkpoint(out / "base", model, stage="base", seed_lineage=lineage + [f"step={step}"])
            idx = _batch_indices(len(dataset), cfg.batch_size, step, cfg.seed)
            rng = np.random.default_rng([cfg.seed, 11, step])
            opt.lr = cfg.lr_at(step)
            loss = sft_step(model, dataset.hr[idx], lr_up[idx], dataset.prompt_ids[idx], rng, opt, step, cfg.seed,
                            t_dist=cfg.t_dist, t_mean=cfg.t_mean, t_std=cfg.t_std,
                            weights=None if pw is None else pw[dataset.prompt_ids[idx]])
            if ema is not None:
                d = min(cfg.ema, (1.0 + step) / (10.0 + step))  # ramp so short runs are not stuck at init
                for k, v in model.params.items():
                    ema[k] += (1.0 - d) * (v - ema[k])
            run_loss += loss
            run_n += 1
            if (step + 1) % cfg.log_every == 0 or step + 1 == end:
                row = {"step": step + 1, "loss": run_loss / run_n, "lr": opt.lr,
                       "wall": round(time.time() - t0, 3)}
                log.append(row)
                if log_f:
                    log_f.write(json.dumps(row) + "\n")
                    log_f.flush()
                run_loss, run_n = 0.0, 0
            if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                _save_state(out / "resume", model, opt, step + 1, "SFT", lineage, ema=ema)
        if end == cfg.base_snapshot_step and base_model is None:
            base_model = model.copy()
            if out is not None:
                save_checkpoint(out / "base", model, stage="base", seed_lineage=lineage + [f"step={end}"])
    finally:
        if log_f:
            log_f.close()
    if ema is not None and end == cfg.steps:
        model = VelocityModel(model.arch, {k: v.astype(model.dtype) for k, v in ema.items()})
    if out is not None:
        if end < cfg.steps:
            _save_state(out / "resume", model, opt, end, "SFT", lineage, ema=ema)
        else:
            parents = {}
            if (out / "base" / "manifest.json").exists():
                parents["base"] = json.loads((out / "base" / "manifest.json").read_text())["sha256"]
            save_checkpoint(out / "sft", model, stage="SFT", seed_lineage=lineage + [f"steps={end}"],
                            parents=parents, meta={"config": asdict(cfg)})
    return model, base_model, log
