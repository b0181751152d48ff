"""Forward-process negative-aware RL on rollout groups.

Per round: snapshot the current policy as ``v_old``, roll out K candidates
per LR input, score them, drop uninformative groups, map rewards to optimal
probabilities ``r``, then regress implicit positive/negative policies built
from ``v_old`` and the trainable policy onto the flow-matching target of each
candidate. Only the low-rank adapter is updated; base weights stay frozen.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from flowsr.data import Dataset
from flowsr.flow import interpolate, target_velocity
from flowsr.model import (LowRankAdapter, RejectedInput, VelocityModel, backward, forward, merge_adapter,
                          save_checkpoint)
from flowsr.optim import Adam
from flowsr.reward import REWARD_MAX, ProxyScorers, ScorerInterface, compass_evaluate
from flowsr.sampler import SampleConfig, sample_batch


class StarvationError(RuntimeError):
    pass


class StageError(RuntimeError):
    pass


class LossDiverged(FloatingPointError):
    pass


@dataclass
class NFTConfig:
    lam: float = 1.0
    K: int = 24
    mean_threshold: float = 0.9
    var_threshold: float = 0.05
    threshold_scale: str = "unit"  # "unit" divides raw rewards by REWARD_MAX first; "raw" does not
    train_steps_per_rollout: int = 2
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    rank: int = 32
    alpha: float = 64.0
    rounds: int = 60
    groups_per_round: int = 2
    rollout_steps: int = 6
    gamma: float = 7.0
    formulation: str = "full"
    policy_init: str = "base"  # "sft" reproduces the RL-on-SFT ablation arms
    noise_draws: str = "group"  # one (t, eps) per group, shared by its candidates; or "candidate"
    seed: int = 0

    def validate(self) -> None:
        if self.lam <= 0:
            raise RejectedInput("lambda must be > 0")
        if self.mean_threshold < 0 or self.var_threshold < 0:
            raise RejectedInput("thresholds must be >= 0")
        if self.threshold_scale not in ("unit", "raw"):
            raise RejectedInput(f"threshold_scale must be 'unit' or 'raw', got {self.threshold_scale!r}")
        if self.K < 2:
            raise RejectedInput("K must be >= 2")
        if self.policy_init not in ("base", "sft"):
            raise RejectedInput("policy_init must be 'base' or 'sft'")
        if self.noise_draws not in ("candidate", "group"):
            raise RejectedInput("noise_draws must be 'candidate' or 'group'")


@dataclass
class FilterVerdict:
    kept: bool
    reason: str
    mean: float
    variance: float


@dataclass
class RolloutGroup:
    lr: np.ndarray
    lr_up: np.ndarray
    prompt_id: int
    candidates: np.ndarray  # (K, H, W, C)
    seeds: list[int]
    raw_rewards: np.ndarray
    verdict: FilterVerdict
    r: np.ndarray | None = None
    normalized_scale: str = "unit"


@dataclass
class StageArtifacts:
    stage: str
    adapter: LowRankAdapter
    v_old_snapshot: str
    logs: list[dict] = field(default_factory=list)
    manifest: dict | None = None


# ---------------------------------------------------------------------------
# group statistics
# ---------------------------------------------------------------------------

def score_group(candidates, x_lr, stage: str, scorers: ScorerInterface | None = None, x_gt=None,
                gamma: float = 7.0, formulation: str = "full") -> np.ndarray:
    """Raw reward of each candidate: reference fidelity in FR, predicted fidelity in NR."""
    if stage == "FR":
        if x_gt is None:
            raise RejectedInput("FR scoring requires the ground-truth HR image")
        mode = "reference"
    elif stage == "NR":
        mode = "predicted"
    else:
        raise RejectedInput(f"unknown stage {stage!r}")
    scorers = scorers or ProxyScorers()
    return np.array([compass_evaluate(x_lr, c, x_gt, scorers, gamma, mode, formulation).R for c in candidates])


def filter_group(s_raw, cfg: NFTConfig) -> FilterVerdict:
    s = np.asarray(s_raw, dtype=np.float64)
    if len(s) < 2:
        raise RejectedInput("a group needs at least 2 rewards")
    if cfg.threshold_scale == "unit":
        s = s / REWARD_MAX
    mean, var = float(s.mean()), float(s.var())
    if np.ptp(s) == 0.0 or not s.std() > 0.0:
        return FilterVerdict(False, "zero variance", mean, var)
    if mean > cfg.mean_threshold and var < cfg.var_threshold:
        return FilterVerdict(False, "high mean, low variance", mean, var)
    return FilterVerdict(True, "kept", mean, var)


def normalize_rewards(s_raw) -> np.ndarray:
    """r = 0.5 + 0.5 * clip((s - mean) / std, -1, 1) with the population std."""
    s = np.asarray(s_raw, dtype=np.float64)
    std = s.std()
    if np.ptp(s) == 0.0 or not std > 0:
        raise RejectedInput("reward normalisation needs std > 0; filter the group first")
    return 0.5 + 0.5 * np.clip((s - s.mean()) / std, -1.0, 1.0)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def implicit_policies(v_theta, v_old, lam: float):
    v_pos = (1.0 - lam) * v_old + lam * v_theta
    v_neg = (1.0 + lam) * v_old - lam * v_theta
    return v_pos, v_neg


def nft_objective(v_theta, v_old, v, r, lam: float = 1.0):
    """Loss and dLoss/dv_theta for a batch.

    Per candidate: ``r * mse(v_pos, v) + (1 - r) * mse(v_neg, v)``, where mse
    is the mean over pixels; the batch loss is the mean over candidates.
    """
    v_theta = np.asarray(v_theta, dtype=np.float64)
    v_old = np.asarray(v_old, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0) or np.any(r > 1):
        raise RejectedInput("optimal probabilities must lie in [0, 1]")
    n = v_theta.shape[0]
    per = v_theta[0].size
    rb = r.reshape((n,) + (1,) * (v_theta.ndim - 1))
    v_pos, v_neg = implicit_policies(v_theta, v_old, lam)
    ep, en = v_pos - v, v_neg - v
    axes = tuple(range(1, v_theta.ndim))
    loss_i = r * np.mean(ep * ep, axis=axes) + (1.0 - r) * np.mean(en * en, axis=axes)
    grad = (2.0 * lam / (n * per)) * (rb * ep - (1.0 - rb) * en)
    return float(loss_i.mean()), grad


def policy_fn(model: VelocityModel, adapter: LowRankAdapter | None = None):
    return lambda x, t, lr, ids: forward(model, x, t, lr, ids, adapter)


def nft_loss(model: VelocityModel, adapter: LowRankAdapter | None, v_old_fn, x_sr, lr_up, prompt_ids, r,
             lam: float = 1.0, rng: np.random.Generator | None = None, t=None, eps=None,
             base_grads: bool = False):
    """NFT loss on rollout samples treated as pseudo-data, with gradients.

    ``t`` and ``eps`` may be given explicitly (one draw per candidate);
    otherwise they are drawn from ``rng``. Returns ``(loss, grads)`` where
    grads cover the adapter factors and, with ``base_grads``, the model.
    """
    x_sr = np.asarray(x_sr, dtype=np.float64)
    n = x_sr.shape[0]
    if t is None:
        t = rng.uniform(0.0, 1.0, n)
    if eps is None:
        eps = rng.standard_normal(x_sr.shape)
    t = np.asarray(t, dtype=np.float64)
    x_t = interpolate(x_sr, eps, t)
    v = target_velocity(x_sr, eps)
    v_old = v_old_fn(x_t, t, lr_up, prompt_ids)
    v_theta, cache = forward(model, x_t, t, lr_up, prompt_ids, adapter, return_cache=True)
    loss, dv = nft_objective(v_theta, v_old, v, r, lam)
    if not np.isfinite(loss):
        raise LossDiverged(f"non-finite NFT loss (r={np.asarray(r).tolist()}, t={t.tolist()})")
    return loss, backward(model, cache, dv, adapter, base_grads=base_grads)


def candidate_draws(seed: int, round_idx: int, step: int, uids, shape):
    """One (t, eps) per candidate keyed by its uid, so batch order is irrelevant."""
    ts, es = [], []
    for u in uids:
        g = np.random.default_rng([seed, 31, round_idx, step, int(u)])
        ts.append(g.uniform(0.0, 1.0))
        es.append(g.standard_normal(shape))
    return np.array(ts), np.stack(es)


# ---------------------------------------------------------------------------
# training stage
# ---------------------------------------------------------------------------

def make_group(policy, adapter, dataset: Dataset, idx: int, cfg: NFTConfig, stage: str, round_idx: int,
               scorers, lr_up=None) -> RolloutGroup:
    lr = dataset.lr[idx]
    up = dataset.lr_up(idx) if lr_up is None else lr_up
    seed0 = int(np.random.default_rng([cfg.seed, 17, round_idx, idx]).integers(0, 2**31 - cfg.K))
    seeds = [seed0 + k for k in range(cfg.K)]
    ups = np.broadcast_to(up, (cfg.K,) + up.shape)
    cands = np.clip(sample_batch(policy, ups, int(dataset.prompt_ids[idx]), seeds,
                                 SampleConfig(steps=cfg.rollout_steps), adapter), 0.0, 1.0)
    gt = dataset.hr[idx] if stage == "FR" else None
    s_raw = score_group(cands, lr, stage, scorers, gt, cfg.gamma, cfg.formulation)
    verdict = filter_group(s_raw, cfg)
    r = normalize_rewards(s_raw) if verdict.kept else None
    return RolloutGroup(lr, up, int(dataset.prompt_ids[idx]), cands, seeds, s_raw, verdict, r, cfg.threshold_scale)


def rl_train_stage(stage: str, base: VelocityModel, dataset: Dataset, cfg: NFTConfig,
                   init_adapter: LowRankAdapter | None = None, scorers: ScorerInterface | None = None,
                   sft: VelocityModel | None = None, out_dir=None) -> StageArtifacts:
    """Run one RL stage ("FR" on paired data, "NR" on LR-only data)."""
    cfg.validate()
    if stage not in ("FR", "NR"):
        raise RejectedInput(f"unknown stage {stage!r}")
    if stage == "NR" and init_adapter is None:
        raise StageError("FR adapter required: the NR stage continues from the FR-stage adapter")
    if stage == "FR" and not dataset.paired:
        raise RejectedInput("the FR stage needs a paired dataset")
    if cfg.policy_init == "sft":
        if sft is None:
            raise RejectedInput("policy_init='sft' needs the SFT model")
        policy = sft
    else:
        policy = base
    scorers = scorers or ProxyScorers()
    if init_adapter is not None:
        adapter = init_adapter.copy()
    else:
        adapter = LowRankAdapter.init(policy, cfg.rank, cfg.alpha, np.random.default_rng([cfg.seed, 3]))
    frozen = {k: v.copy() for k, v in policy.params.items()}
    opt = Adam(cfg.learning_rate, weight_decay=cfg.weight_decay)
    lr_up_all = dataset.lr_up()
    n = len(dataset)
    order_rng = np.random.default_rng([cfg.seed, 5, 0 if stage == "FR" else 1])
    order = order_rng.permutation(n)
    pos = 0
    since_kept = 0
    logs: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_f = open(out / f"rl_{stage.lower()}.jsonl", "w") if out is not None else None
    t0 = time.time()
    snapshot_id = "init"
    try:
        for rnd in range(cfg.rounds):
            old = adapter.copy()
            snapshot_id = f"round{rnd}"
            groups = []
            for _ in range(cfg.groups_per_round):
                if pos == n:
                    order, pos = order_rng.permutation(n), 0
                idx = int(order[pos])
                pos += 1
                groups.append(make_group(policy, old, dataset, idx, cfg, stage, rnd, scorers, lr_up_all[idx]))
            kept = [g for g in groups if g.verdict.kept]
            since_kept = 0 if kept else since_kept + len(groups)
            if since_kept >= n:
                raise StarvationError(
                    f"{stage} stage: {since_kept} consecutive groups discarded (last verdict: "
                    f"{groups[-1].verdict.reason}, mean={groups[-1].verdict.mean:.3f}, "
                    f"var={groups[-1].verdict.variance:.4f}); review rl.mean_threshold / rl.var_threshold")
            loss = float("nan")
            if kept:
                x_sr = np.concatenate([g.candidates for g in kept])
                ups = np.concatenate([np.broadcast_to(g.lr_up, g.candidates.shape) for g in kept])
                ids = np.concatenate([np.full(len(g.candidates), g.prompt_id) for g in kept])
                r = np.concatenate([g.r for g in kept])
                if cfg.noise_draws == "group":
                    uids = np.concatenate([np.full(len(g.seeds), g.seeds[0]) for g in kept])
                else:
                    uids = np.concatenate([g.seeds for g in kept])
                v_old_fn = policy_fn(policy, old)
                losses = []
                for step in range(cfg.train_steps_per_rollout):
                    t, eps = candidate_draws(cfg.seed, rnd, step, uids, x_sr.shape[1:])
                    loss, grads = nft_loss(policy, adapter, v_old_fn, x_sr, ups, ids, r, cfg.lam, t=t, eps=eps)
                    opt.step(adapter.trainable(), grads)
                    losses.append(loss)
                loss = float(np.mean(losses))
            row = {
                "round": rnd + 1,
                "groups_sampled": len(groups),
                "groups_kept": len(kept),
                "mean_raw_reward": float(np.mean([g.raw_rewards.mean() for g in groups])),
                "mean_r": float(np.mean([g.r.mean() for g in kept])) if kept else None,
                "loss": loss if kept else None,
                "adapter_norm": adapter.norm(),
                "wall": round(time.time() - t0, 3),
            }
            logs.append(row)
            if log_f:
                log_f.write(json.dumps(row) + "\n")
                log_f.flush()
    finally:
        if log_f:
            log_f.close()
    for k, v in frozen.items():
        if not np.array_equal(v, policy.params[k]):
            raise AssertionError(f"base parameter {k} changed during RL")
    art = StageArtifacts(stage, adapter, snapshot_id, logs)
    if out is not None:
        art.manifest = save_checkpoint(out / "adapter", None, adapter, stage=f"{stage}-RL", arch=policy.arch,
                                       seed_lineage=[f"rl.seed={cfg.seed}", f"stage={stage}"],
                                       meta={"config": asdict(cfg), "v_old_snapshot": snapshot_id})
    return art


def finalize_policy(sft: VelocityModel, adapter: LowRankAdapter, merge_scale: float = 1.0, out_dir=None,
                    parents: dict | None = None) -> VelocityModel:
    """Merge the final adapter into the cold-start weights for inference."""
    merged = merge_adapter(sft, adapter, merge_scale)
    if out_dir is not None:
        save_checkpoint(out_dir, merged, stage="merged", parents=parents,
                        meta={"merge_scale": merge_scale, "rank": adapter.rank, "alpha": adapter.alpha})
    return merged
