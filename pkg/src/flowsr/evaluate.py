"""Metric reports, ablation grids and curve plots."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from flowsr.data import Dataset
from flowsr.metrics import psnr, ssim
from flowsr.model import LowRankAdapter, RejectedInput, VelocityModel
from flowsr.reward import ProxyScorers, ScorerInterface, compass_evaluate
from flowsr.rl import NFTConfig, finalize_policy, rl_train_stage
from flowsr.sampler import SampleConfig, sample_batch

PROXY_NOTE = ("F = in-repo fidelity proxy (SSIM + gradient-field distance); "
              "Q = in-repo proxy quality (sharpness, noise, blockiness); neither is a learned metric")
FR_METRICS = ("psnr", "ssim", "F", "R_fr")
NR_METRICS = ("Q", "F_pred", "R_nr")
ABLATION_AXES = ("gamma", "reward_formulation", "rl_init", "stages")


@dataclass
class MetricReport:
    rows: list[dict]
    meta: dict = field(default_factory=dict)

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def aggregate(self) -> dict[str, dict[str, float]]:
        out = {}
        for m in self.methods:
            rows = [r for r in self.rows if r["method"] == m]
            keys = [k for k in FR_METRICS + NR_METRICS if k in rows[0]]
            out[m] = {k: float(np.mean([r[k] for r in rows])) for k in keys}
        return out

    def records(self) -> list[dict]:
        recs = [{"kind": "meta", **self.meta, "proxies": PROXY_NOTE}]
        recs += [{"kind": "image", **r} for r in self.rows]
        recs += [{"kind": "aggregate", "method": m, **v} for m, v in self.aggregate().items()]
        return recs

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for rec in self.records():
                f.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")

    def table(self) -> str:
        return format_table(self.aggregate(), title=self.meta.get("label", ""))


def _jsonable(d):
    # json has no infinity; keep the sentinel readable
    return {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}


def format_table(agg: dict[str, dict[str, float]], title: str = "") -> str:
    cols = [k for k in FR_METRICS + NR_METRICS if any(k in v for v in agg.values())]
    w0 = max([len("method")] + [len(m) for m in agg])
    lines = [f"# {title}" if title else None, f"# {PROXY_NOTE}",
             "  ".join(["method".ljust(w0)] + [c.rjust(8) for c in cols])]
    for m, v in agg.items():
        cells = [(f"{v[c]:8.4f}" if c in v else "     N/A") for c in cols]
        lines.append("  ".join([m.ljust(w0)] + cells))
    return "\n".join(x for x in lines if x is not None)


def image_metrics(lr, sr, gt, scorers: ScorerInterface, gamma: float) -> dict:
    row = {}
    if gt is not None:
        b = compass_evaluate(lr, sr, gt, scorers, gamma, "reference")
        row.update(psnr=psnr(sr, gt), ssim=ssim(sr, gt), F=b.F, R_fr=b.R)
    b = compass_evaluate(lr, sr, None, scorers, gamma, "predicted")
    row.update(Q=b.Q_SR, F_pred=b.F, R_nr=b.R)
    return row


def generate(model, dataset: Dataset, cfg: SampleConfig, adapter: LowRankAdapter | None = None,
             chunk: int = 16) -> np.ndarray:
    """One sample per item with seed ``cfg.seed + index``, clipped to [0, 1]."""
    up = dataset.lr_up()
    outs = []
    for s in range(0, len(dataset), chunk):
        idx = np.arange(s, min(s + chunk, len(dataset)))
        outs.append(sample_batch(model, up[idx], dataset.prompt_ids[idx], [cfg.seed + int(i) for i in idx], cfg,
                                 adapter))
    return np.clip(np.concatenate(outs), 0.0, 1.0)


def evaluate_policy(model, dataset: Dataset, cfg: SampleConfig = SampleConfig(),
                    adapter: LowRankAdapter | None = None, scorers: ScorerInterface | None = None,
                    gamma: float = 7.0, label: str = "policy", baseline: bool = True,
                    outputs: np.ndarray | None = None) -> MetricReport:
    """Per-image and mean metrics for a policy, plus the cubic-upsample row.

    Full-reference columns only appear when the dataset carries ground truth.
    """
    if len(dataset) == 0:
        raise RejectedInput("empty evaluation set")
    scorers = scorers or ProxyScorers()
    up = np.clip(dataset.lr_up(), 0.0, 1.0)
    if outputs is None:
        outputs = generate(model, dataset, cfg, adapter)
    methods = ([("bicubic", up)] if baseline else []) + [(label, outputs)]
    rows = []
    for name, imgs in methods:
        for i in range(len(dataset)):
            gt = dataset.hr[i] if dataset.paired else None
            rows.append({"method": name, "index": i, "seed": int(dataset.seeds[i]),
                         **image_metrics(dataset.lr[i], imgs[i], gt, scorers, gamma)})
    meta = {"label": label, "n_images": len(dataset), "paired": dataset.paired, "gamma": gamma,
            "sample": dataclasses.asdict(cfg)}
    return MetricReport(rows, meta)


# ---------------------------------------------------------------------------
# pipeline + ablations
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    adapters: dict[str, LowRankAdapter]
    merged: VelocityModel
    logs: dict[str, list[dict]]


def rl_pipeline(base: VelocityModel, sft: VelocityModel, paired: Dataset, unpaired: Dataset | None,
                cfg: NFTConfig, stages: Sequence[str] = ("FR", "NR"), nr_cfg: NFTConfig | None = None,
                scorers: ScorerInterface | None = None, merge_scale: float = 1.0, out_dir=None) -> PipelineResult:
    """FR then NR RL on the chosen policy, then merge into the SFT weights.

    An "NR"-only run starts NR from a freshly initialised (zero-delta)
    adapter; this exists for the stage ablation only.
    """
    out = Path(out_dir) if out_dir is not None else None
    adapter, adapters, logs = None, {}, {}
    for st in stages:
        c = cfg if st == "FR" or nr_cfg is None else nr_cfg
        data = paired if st == "FR" else (unpaired if unpaired is not None else paired)
        init = adapter
        if st == "NR" and init is None:
            policy = sft if c.policy_init == "sft" else base
            init = LowRankAdapter.init(policy, c.rank, c.alpha, np.random.default_rng([c.seed, 3]))
        art = rl_train_stage(st, base, data, c, init, scorers, sft, out / st.lower() if out else None)
        adapter = art.adapter
        adapters[st], logs[st] = art.adapter, art.logs
    if adapter is None:
        return PipelineResult({}, sft.copy(), {})
    return PipelineResult(adapters, finalize_policy(sft, adapter, merge_scale), logs)


def _arm(axis, value, cfg: NFTConfig, stages):
    if axis == "gamma":
        return dataclasses.replace(cfg, gamma=float(value)), stages
    if axis == "reward_formulation":
        return dataclasses.replace(cfg, formulation=str(value)), stages
    if axis == "rl_init":
        return dataclasses.replace(cfg, policy_init=str(value)), stages
    if axis == "stages":
        st = tuple(s for s in str(value).upper().split("+") if s)
        if not st or any(s not in ("FR", "NR") for s in st):
            raise RejectedInput(f"bad stages value {value!r}; use e.g. 'FR', 'NR' or 'FR+NR'")
        return cfg, st
    raise RejectedInput(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


def ablation_grid(axis: str, values: Sequence, base: VelocityModel, sft: VelocityModel, paired: Dataset,
                  unpaired: Dataset | None, heldout: Dataset, cfg: NFTConfig, stages=("FR", "NR"),
                  nr_cfg: NFTConfig | None = None, sample_cfg: SampleConfig = SampleConfig(),
                  scorers: ScorerInterface | None = None, merge_scale: float = 1.0, out_dir=None):
    """One pipeline run per axis value with shared seeds.

    Returns ``(reports, table)``: a report per value (plus the SFT
    reference) and an aligned comparison table of the means.
    """
    arms = [(v, *_arm(axis, v, cfg, stages)) for v in values]  # validate all before running any
    scorers = scorers or ProxyScorers()
    reports = {"SFT": evaluate_policy(sft, heldout, sample_cfg, scorers=scorers, gamma=cfg.gamma,
                                      label="SFT", baseline=False)}
    for v, c, st in arms:
        nc = dataclasses.replace(nr_cfg, **{k: getattr(c, k) for k in ("gamma", "formulation", "policy_init")}) \
            if nr_cfg is not None else None
        sub = Path(out_dir) / f"{axis}={v}" if out_dir is not None else None
        res = rl_pipeline(base, sft, paired, unpaired, c, st, nc, scorers, merge_scale, sub)
        name = f"{axis}={v}"
        reports[name] = evaluate_policy(res.merged, heldout, sample_cfg, scorers=scorers, gamma=cfg.gamma,
                                        label=name, baseline=False)
    agg = {k: r.aggregate()[k] for k, r in reports.items()}
    return reports, format_table(agg, title=f"ablation over {axis}")


# ---------------------------------------------------------------------------
# plots
# ---------------------------------------------------------------------------

def plot_curves(series: dict[str, tuple[Sequence[float], Sequence[float]]], path, title: str = "",
                xlabel: str = "step", ylabel: str = "") -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "flowsr"  # stable element ids
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, (x, y) in series.items():
        ax.plot(list(x), [np.nan if v is None else v for v in y], label=name)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _read_jsonl(p):
    return [json.loads(line) for line in Path(p).read_text().splitlines() if line.strip()]


def plot_run(run_dir, out_dir=None) -> list[Path]:
    """SVG curves for every loss/RL log found under ``run_dir``."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir or run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    made = []
    for p in sorted(run_dir.rglob("loss.jsonl")):
        rows = _read_jsonl(p)
        made.append(plot_curves({"loss": ([r["step"] for r in rows], [r["loss"] for r in rows])},
                                out_dir / "sft_loss.svg", "flow-matching loss", "step", "loss"))
    for p in sorted(run_dir.rglob("rl_*.jsonl")):
        rows = _read_jsonl(p)
        stage = p.stem.split("_")[1]
        x = [r["round"] for r in rows]
        made.append(plot_curves({"mean raw reward": (x, [r["mean_raw_reward"] for r in rows])},
                                out_dir / f"rl_{stage}_reward.svg", f"{stage.upper()} reward", "round", "R"))
        made.append(plot_curves({"loss": (x, [r["loss"] for r in rows])},
                                out_dir / f"rl_{stage}_loss.svg", f"{stage.upper()} NFT loss", "round", "loss"))
    return made
