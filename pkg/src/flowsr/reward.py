"""Process-aware reward: fidelity, proxy quality, the composite reward, and the
three-stage annotation (anchor scores, pairwise ranking, rank calibration).

The learned quality/fidelity models are replaced by deterministic proxies
behind :class:`ScorerInterface`; a remote implementation lives in
:mod:`flowsr.remote`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from flowsr.data import upsample
from flowsr.metrics import ssim
from flowsr.model import RejectedInput

DEFAULT_GAMMA = 7.0
Q_MIN, Q_MAX = 1.0, 5.0
REWARD_MAX = 9.0  # max of F*Q_LR + F^(Q_LR/gamma)*(Q_SR - Q_LR) over F in [0,1], Q in [1,5]
FIDELITY_SSIM_WEIGHT = 0.5

FIRST, SECOND, TIE = "first", "second", "tie"
WIN, LOSS, DRAW, SELF = 1, -1, 0, 2


class AnnotationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# fidelity
# ---------------------------------------------------------------------------

def _luma(x):
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=2) if x.ndim == 3 else x


def _grads(y):
    gx = np.zeros_like(y)
    gy = np.zeros_like(y)
    gx[:, :-1] = y[:, 1:] - y[:, :-1]
    gy[:-1, :] = y[1:, :] - y[:-1, :]
    return gx, gy


def gradient_distance(x, y) -> float:
    """Normalised L1 distance between signed gradient fields, in [0, 1]."""
    gxa, gya = _grads(_luma(x))
    gxb, gyb = _grads(_luma(y))
    num = np.abs(gxa - gxb).sum() + np.abs(gya - gyb).sum()
    den = np.abs(gxa).sum() + np.abs(gxb).sum() + np.abs(gya).sum() + np.abs(gyb).sum()
    if den == 0.0:
        return 0.0
    return float(min(1.0, num / den))


def structural_distance(x_sr, x_ref, weight: float = FIDELITY_SSIM_WEIGHT) -> float:
    """D = w * clip(1 - SSIM, 0, 1) + (1 - w) * gradient_distance, in [0, 1]."""
    x_sr, x_ref = np.asarray(x_sr), np.asarray(x_ref)
    if x_sr.shape != x_ref.shape:
        raise RejectedInput(f"shape mismatch {x_sr.shape} vs {x_ref.shape}")
    d_ssim = min(1.0, max(0.0, 1.0 - ssim(x_sr, x_ref)))
    return weight * d_ssim + (1.0 - weight) * gradient_distance(x_sr, x_ref)


def fidelity_from_reference(x_sr, x_ref, weight: float = FIDELITY_SSIM_WEIGHT) -> float:
    return 1.0 - structural_distance(x_sr, x_ref, weight)


# ---------------------------------------------------------------------------
# proxy quality
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QualityConstants:
    """Logistic weights of the proxy quality score.

    Frozen from ``scripts/calibrate_quality.py`` (grid search against
    degradation severity).
    """

    a: float = 60.0   # sharpness weight
    b: float = 150.0  # noise weight
    c: float = 120.0  # blockiness weight
    d: float = -1.0   # offset
    display_size: int = 64
    block_period: int = 16


def quality_features(x, display_size: int = 64, block_period: int = 16) -> tuple[float, float, float]:
    """(sharpness, noise_estimate, blockiness) of the luminance at display size.

    Images smaller than ``display_size`` are cubic-upsampled by the integer
    factor that brings them to it, so LR inputs are judged as displayed.
    """
    x = np.asarray(x, dtype=np.float64)
    h = x.shape[0]
    if h < display_size and display_size % h == 0:
        x = upsample(x, display_size // h)
    y = _luma(x)
    gx, gy = _grads(y)
    sharp = float(np.mean(np.hypot(gx[:-1, :-1], gy[:-1, :-1])))
    # high-pass residual: pixel minus 4-neighbour mean, interior only
    res = y[1:-1, 1:-1] - 0.25 * (y[:-2, 1:-1] + y[2:, 1:-1] + y[1:-1, :-2] + y[1:-1, 2:])
    noise = float(np.median(np.abs(res)))
    dx = np.abs(y[:, 1:] - y[:, :-1])
    dy = np.abs(y[1:, :] - y[:-1, :])
    cols = np.arange(1, y.shape[1]) % block_period == 0
    rows = np.arange(1, y.shape[0]) % block_period == 0
    excess = []
    if cols.any():
        excess.append(dx[:, cols[:]].mean() - dx[:, ~cols].mean())
    if rows.any():
        excess.append(dy[rows, :].mean() - dy[~rows, :].mean())
    block = float(max(0.0, np.mean(excess))) if excess else 0.0
    return sharp, noise, block


def proxy_quality(x, k: QualityConstants = QualityConstants()) -> float:
    """Q = 1 + 4 * sigmoid(a*sharpness - b*noise - c*blockiness + d), in [1, 5]."""
    s, n, b = quality_features(x, k.display_size, k.block_period)
    z = k.a * s - k.b * n - k.c * b + k.d
    return float(1.0 + 4.0 / (1.0 + np.exp(-z)))


# ---------------------------------------------------------------------------
# scorers
# ---------------------------------------------------------------------------

class ScorerInterface(Protocol):
    def quality(self, x: np.ndarray) -> float: ...

    def fidelity(self, x: np.ndarray, ref: np.ndarray) -> float: ...

    def compare(self, a: np.ndarray, b: np.ndarray) -> str: ...


@dataclass(frozen=True)
class ProxyScorers:
    """Deterministic local scorers; the comparator uses a tie margin on Q."""

    constants: QualityConstants = QualityConstants()
    tie_margin: float = 0.05
    fidelity_weight: float = FIDELITY_SSIM_WEIGHT

    def quality(self, x):
        return proxy_quality(x, self.constants)

    def fidelity(self, x, ref):
        return fidelity_from_reference(x, ref, self.fidelity_weight)

    def compare(self, a, b):
        diff = self.quality(a) - self.quality(b)
        if diff > self.tie_margin:
            return FIRST
        if diff < -self.tie_margin:
            return SECOND
        return TIE


# ---------------------------------------------------------------------------
# composite reward
# ---------------------------------------------------------------------------

def _check_domain(F, q_lr, q_sr, gamma):
    if gamma <= 0:
        raise RejectedInput("gamma must be > 0")
    F, q_lr, q_sr = (np.asarray(v, dtype=np.float64) for v in (F, q_lr, q_sr))
    if np.any((F < 0) | (F > 1)) or not np.all(np.isfinite(F)):
        raise RejectedInput("F must lie in [0, 1]")
    for q in (q_lr, q_sr):
        if np.any((q < Q_MIN) | (q > Q_MAX)) or not np.all(np.isfinite(q)):
            raise RejectedInput("quality scores must lie in [1, 5]")
    return F, q_lr, q_sr


def _out(r):
    return float(r) if np.ndim(r) == 0 else r


def compass_reward(F, q_lr, q_sr, gamma: float = DEFAULT_GAMMA):
    """R = F * Q_LR + F^(Q_LR / gamma) * (Q_SR - Q_LR)."""
    F, q_lr, q_sr = _check_domain(F, q_lr, q_sr, gamma)
    return _out(F * q_lr + F ** (q_lr / gamma) * (q_sr - q_lr))


def gain_only_reward(F, q_lr, q_sr, gamma: float = DEFAULT_GAMMA):
    F, q_lr, q_sr = _check_domain(F, q_lr, q_sr, gamma)
    return _out(q_sr - q_lr)


def gated_gain_reward(F, q_lr, q_sr, gamma: float = DEFAULT_GAMMA):
    F, q_lr, q_sr = _check_domain(F, q_lr, q_sr, gamma)
    return _out(F ** (q_lr / gamma) * (q_sr - q_lr))


FORMULATIONS: dict[str, Callable] = {
    "gain_only": gain_only_reward,
    "gated_gain": gated_gain_reward,
    "full": compass_reward,
}


def reward_formulation_variant(kind: str) -> Callable:
    try:
        return FORMULATIONS[kind]
    except KeyError:
        raise RejectedInput(f"unknown reward formulation {kind!r}; choose from {sorted(FORMULATIONS)}") from None


@dataclass(frozen=True)
class RewardBreakdown:
    F: float
    Q_LR: float
    Q_SR: float
    delta_Q: float
    R: float
    gamma: float = DEFAULT_GAMMA
    fidelity_mode: str = "reference"


def compass_evaluate(x_lr, x_sr, x_gt=None, scorers: ScorerInterface | None = None,
                     gamma: float = DEFAULT_GAMMA, fidelity_mode: str = "reference",
                     formulation: str = "full") -> RewardBreakdown:
    """Score one LR -> SR transition.

    ``reference`` mode measures F against ``x_gt``. ``predicted`` mode has no
    GT and uses F(x_SR, upsample(x_LR)) as a deterministic stand-in for a
    learned fidelity head; it penalises any departure from the cubic
    upsample, including genuine detail recovery.
    """
    scorers = scorers or ProxyScorers()
    x_sr = np.asarray(x_sr)
    x_lr = np.asarray(x_lr)
    if fidelity_mode == "reference":
        if x_gt is None:
            raise RejectedInput("reference fidelity mode requires a ground-truth image")
        F = scorers.fidelity(x_sr, x_gt)
    elif fidelity_mode == "predicted":
        factor = x_sr.shape[0] // x_lr.shape[0]
        F = scorers.fidelity(x_sr, upsample(x_lr, factor))
    else:
        raise RejectedInput(f"unknown fidelity mode {fidelity_mode!r}")
    q_lr, q_sr = scorers.quality(x_lr), scorers.quality(x_sr)
    F = min(1.0, max(0.0, float(F)))
    R = reward_formulation_variant(formulation)(F, q_lr, q_sr, gamma)
    return RewardBreakdown(F, q_lr, q_sr, q_sr - q_lr, float(R), gamma, fidelity_mode)


# ---------------------------------------------------------------------------
# annotation pipeline
# ---------------------------------------------------------------------------

def anchor_scores(scorer, images: Sequence[np.ndarray]) -> np.ndarray:
    """Stage 1: global quality score of every image, in input order."""
    if len(images) == 0:
        raise RejectedInput("empty image list")
    q = scorer.quality if hasattr(scorer, "quality") else scorer
    return np.array([q(x) for x in images], dtype=np.float64)


_FLIP = {FIRST: SECOND, SECOND: FIRST, TIE: TIE}


def outcome_matrix(comparator, sr_list: Sequence[np.ndarray]) -> np.ndarray:
    """N x N matrix of WIN/LOSS/DRAW for row vs column, SELF on the diagonal.

    Each pair is compared in both orders; disagreement raises AnnotationError.
    """
    cmp = comparator.compare if hasattr(comparator, "compare") else comparator
    n = len(sr_list)
    M = np.full((n, n), SELF, dtype=np.int8)
    for i in range(n):
        for j in range(i + 1, n):
            ij = cmp(sr_list[i], sr_list[j])
            ji = cmp(sr_list[j], sr_list[i])
            if ij not in _FLIP or ji != _FLIP[ij]:
                raise AnnotationError(f"comparator inconsistent on pair ({i}, {j}): {ij!r} vs reversed {ji!r}")
            M[i, j] = {FIRST: WIN, SECOND: LOSS, TIE: DRAW}[ij]
            M[j, i] = -M[i, j]
    return M


def copeland_scores(M: np.ndarray) -> np.ndarray:
    """Min-max normalised Copeland tally (wins + 0.5 ties); all 0.5 if tied."""
    off = ~np.eye(len(M), dtype=bool)
    c = ((M == WIN) & off).sum(axis=1) + 0.5 * ((M == DRAW) & off).sum(axis=1)
    lo, hi = c.min(), c.max()
    if hi == lo:
        return np.full(len(M), 0.5)
    return (c - lo) / (hi - lo)


def pairwise_rank(comparator, sr_list: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stage 2: returns (rank scores r in [0, 1], outcome matrix)."""
    if len(sr_list) < 2:
        raise RejectedInput("pairwise ranking needs N >= 2")
    M = outcome_matrix(comparator, sr_list)
    return copeland_scores(M), M


def calibrate(r, q) -> tuple[float, float, np.ndarray]:
    """Stage 3: least-squares (alpha, beta) for q ~ alpha*r + beta; Q_hat clamped to [1, 5]."""
    r, q = np.asarray(r, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if r.shape != q.shape or r.ndim != 1:
        raise RejectedInput(f"length mismatch {r.shape} vs {q.shape}")
    if len(r) < 2:
        raise RejectedInput("calibration needs N >= 2")
    rc = r - r.mean()
    var = float(np.mean(rc * rc))
    if var == 0.0:
        alpha, beta = 0.0, float(q.mean())
    else:
        alpha = float(np.mean(rc * (q - q.mean())) / var)
        beta = float(q.mean() - alpha * r.mean())
    return alpha, beta, np.clip(alpha * r + beta, Q_MIN, Q_MAX)


@dataclass
class AnnotationGroup:
    lr: np.ndarray
    sr_list: list[np.ndarray]
    anchor_scores: np.ndarray
    outcome_matrix: np.ndarray
    rank_scores: np.ndarray
    alpha: float
    beta: float
    calibrated: np.ndarray
    ids: list[str] = field(default_factory=list)

    @property
    def alpha_negative(self) -> bool:
        return self.alpha < 0

    def record(self, group_id: str = "") -> dict:
        sym = {WIN: "W", LOSS: "L", DRAW: "T", SELF: "-"}
        return {
            "group": group_id,
            "ids": list(self.ids),
            "anchor_scores": [float(v) for v in self.anchor_scores],
            "outcomes": "".join(sym[int(v)] for v in self.outcome_matrix.ravel()),
            "n": len(self.sr_list),
            "r": [float(v) for v in self.rank_scores],
            "alpha": self.alpha,
            "beta": self.beta,
            "alpha_negative": self.alpha_negative,
            "q_hat": [float(v) for v in self.calibrated],
        }


def annotate_group(lr, sr_list: Sequence[np.ndarray], scorers: ScorerInterface | None = None,
                   ids: Sequence[str] = ()) -> AnnotationGroup:
    scorers = scorers or ProxyScorers()
    q = anchor_scores(scorers, sr_list)
    r, M = pairwise_rank(scorers, sr_list)
    alpha, beta, q_hat = calibrate(r, q)
    return AnnotationGroup(np.asarray(lr), list(sr_list), q, M, r, alpha, beta, q_hat, list(ids))


def write_annotations(path, groups: Sequence[AnnotationGroup]) -> None:
    with open(path, "w") as f:
        for i, g in enumerate(groups):
            f.write(json.dumps(g.record(f"g{i:05d}"), sort_keys=True) + "\n")
