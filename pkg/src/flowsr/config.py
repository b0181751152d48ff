"""Flat, namespaced run configuration.

File format: one ``key = value`` per line, ``#`` starts a comment. Values
are parsed as JSON when possible (numbers, booleans, lists) and kept as bare
strings otherwise. Precedence: built-in defaults < file < ``--set`` flags.
"""

from __future__ import annotations

import json
from pathlib import Path

# key -> (default, unit/notes)
KEYS: dict[str, tuple[object, str]] = {
    "master_seed": (0, "root seed; every stage derives its seed from it"),
    "run_dir": ("", "explicit run directory; empty = <run root>/<subcommand>-<timestamp>"),

    "data.hr_size": (64, "px, HR side"),
    "data.factor": (4, "downscale factor"),
    "data.channels": (1, "1 = grayscale, 3 = RGB"),
    "data.n_train": (200, "paired training images"),
    "data.n_heldout": (32, "paired held-out images"),
    "data.n_unpaired": (64, "LR-only images for the NR stage"),
    "data.blur_min": (0.5, "HR px"), "data.blur_max": (1.5, "HR px"),
    "data.noise_min": (0.0, "LR intensity sigma"), "data.noise_max": (0.06, "LR intensity sigma"),
    "data.block_min": (0.0, "[0,1]"), "data.block_max": (0.5, "[0,1]"),

    "model.width": (64, "channels per hidden layer"),
    "model.depth": (4, "residual blocks"),
    "model.patch": (4, "space-to-depth patch, px"),
    "model.skip_var": (1e-3, "prior variance of the residual around the upsampled input; 0 disables the skip"),
    "model.input": ("posterior", "posterior (skip posterior mean of x) | raw (x_t)"),
    "model.film": (True, "time-dependent scale/shift on hidden layers"),

    "sft.steps": (5000, "optimizer steps"),
    "sft.batch_size": (16, "pairs per step"),
    "sft.learning_rate": (1e-3, "peak Adam step size"),
    "sft.schedule": ("cosine", "cosine | constant"),
    "sft.warmup": (100, "linear warmup steps (cosine only)"),
    "sft.final_lr_ratio": (0.02, "final / peak step size (cosine only)"),
    "sft.t_dist": ("uniform", "training-time distribution: uniform | logit_normal"),
    "sft.weight_power": (1.0, "per-prompt loss weight = (cubic MSE of the prompt) ** -power; 0 = unweighted"),
    "sft.ema": (0.999, "weight-average decay for the saved SFT model; 0 = raw weights"),
    "sft.base_snapshot_step": (300, "step whose weights become the RL base model"),
    "sft.log_every": (25, "steps per loss-log row"),

    "sampler.train_steps": (6, "Euler steps for RL rollouts"),
    "sampler.inference_steps": (40, "Euler steps for evaluation"),
    "sampler.initial_noise_scale": (1.0, "std of the starting noise"),

    "reward.gamma": (7.0, "quality-adaptive exponent divisor"),
    "reward.formulation": ("full", "full | gain_only | gated_gain"),
    "reward.tie_margin": (0.05, "proxy comparator tie band in Q units"),
    "reward.fidelity_weight": (0.5, "SSIM share of the fidelity distance"),

    "rl.lam": (1.0, "implicit-policy mixing lambda"),
    "rl.K": (24, "candidates per group"),
    "rl.mean_threshold": (0.9, "discard if mean above this ..."),
    "rl.var_threshold": (0.05, "... and variance below this"),
    "rl.threshold_scale": ("unit", "unit (divide by 9) | raw"),
    "rl.train_steps_per_rollout": (2, "optimizer steps per rollout round"),
    "rl.learning_rate": (1e-4, "Adam step size"),
    "rl.weight_decay": (1e-4, "L2 on adapter factors"),
    "rl.rank": (32, "adapter rank"),
    "rl.alpha": (64.0, "adapter alpha"),
    "rl.fr_rounds": (60, "FR-stage rollout rounds"),
    "rl.nr_rounds": (60, "NR-stage rollout rounds"),
    "rl.groups_per_round": (2, "LR inputs per rollout round"),
    "rl.policy_init": ("base", "base | sft"),
    "rl.noise_draws": ("group", "group | candidate: one (t, eps) shared within a group, or one per candidate"),
    "rl.merge_scale": (1.0, "multiplier on the adapter delta when merging"),

    "eval.n_images": (32, "held-out images evaluated"),
    "eval.seed": (0, "noise seed of image 0; image i uses seed + i"),
    "eval.ablation_axis": ("gamma", "gamma | reward_formulation | rl_init | stages"),
    "eval.ablation_values": ([5, 7, 9], "list of axis values"),
}

DEFAULTS = {k: v[0] for k, v in KEYS.items()}


class ConfigError(ValueError):
    pass


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _check(key, value, origin):
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r} ({origin})")
    default = KEYS[key][0]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r} ({origin})")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, type(default)):
        raise ConfigError(f"{key} expects {type(default).__name__}, got {value!r} ({origin})")
    return value


def parse_text(text: str, origin: str = "<text>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = _check(k, parse_value(v), f"{origin}:{n}")
    return out


def load(path=None, overrides: list[str] | None = None) -> dict:
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg.update(parse_text(Path(path).read_text(), str(path)))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = _check(k.strip(), parse_value(v), "--set")
    return cfg


def dump(cfg: dict) -> str:
    """Canonical text form; ``parse_text(dump(c))`` reproduces ``c``."""
    return "".join(f"{k} = {json.dumps(cfg[k])}\n" for k in KEYS)


def section(cfg: dict, ns: str) -> dict:
    p = ns + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def documentation() -> str:
    return "".join(f"{k:28s} {json.dumps(v[0]):>10s}  {v[1]}\n" for k, v in KEYS.items())
