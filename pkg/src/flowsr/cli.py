"""Command-line pipeline: synth-data, train-sft, train-rl, annotate, evaluate, ablate, merge, plot.

Every invocation writes a fresh run directory holding ``config.txt`` (the
effective configuration), its artifacts and ``summary.json`` (status plus a
sha256 per artifact). Inputs from earlier runs are passed as run directories.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from flowsr import config as C
from flowsr.data import SpecSampler, build_dataset, build_unpaired_lq, load_dataset, save_dataset
from flowsr.evaluate import ABLATION_AXES, ablation_grid, evaluate_policy, plot_run
from flowsr.flow import SFTConfig, train_sft
from flowsr.model import Architecture, load_checkpoint, merge_adapter, read_manifest, save_checkpoint
from flowsr.reward import ProxyScorers, QualityConstants, annotate_group, write_annotations
from flowsr.rl import NFTConfig, StageError, rl_train_stage
from flowsr.sampler import SampleConfig, sample_batch

RUN_ROOT_ENV = "FLOWSR_RUN_ROOT"
HELDOUT_START = 500_000
UNPAIRED_START = 1_000_000
# logs carry wall-clock times, so they are listed but not digested
UNDIGESTED = {"loss.jsonl", "rl_fr.jsonl", "rl_nr.jsonl", "summary.json"}


class UsageError(RuntimeError):
    pass


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def make_run_dir(cfg: dict, command: str) -> Path:
    if cfg["run_dir"]:
        d = Path(cfg["run_dir"])
        if d.exists() and any(d.iterdir()):
            raise UsageError(f"run directory {d} is not empty; runs never overwrite earlier ones")
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        d = run_root() / f"{command}-{stamp}"
        n = 1
        while d.exists():
            d = run_root() / f"{command}-{stamp}-{n}"
            n += 1
    d.mkdir(parents=True, exist_ok=True)
    # the location lives in summary.json; leaving it out keeps the echo reusable and location-independent
    (d / "config.txt").write_text(C.dump({**cfg, "run_dir": C.DEFAULTS["run_dir"]}))
    return d


def digests(run_dir: Path) -> dict[str, str]:
    out = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name not in UNDIGESTED:
            out[str(p.relative_to(run_dir))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


# ---------------------------------------------------------------------------
# config -> objects
# ---------------------------------------------------------------------------

def spec_sampler(cfg):
    d = C.section(cfg, "data")
    return SpecSampler(blur=(d["blur_min"], d["blur_max"]), noise=(d["noise_min"], d["noise_max"]),
                       block=(d["block_min"], d["block_max"]), factor=d["factor"])


def architecture(cfg):
    m = C.section(cfg, "model")
    return Architecture(channels=cfg["data.channels"], patch=m["patch"], width=m["width"], depth=m["depth"],
                        skip_var=m["skip_var"], input=m["input"], film=m["film"])


def sft_config(cfg):
    s = C.section(cfg, "sft")
    return SFTConfig(steps=s["steps"], batch_size=s["batch_size"], learning_rate=s["learning_rate"],
                     seed=cfg["master_seed"], base_snapshot_step=s["base_snapshot_step"], log_every=s["log_every"],
                     schedule=s["schedule"], warmup=s["warmup"], final_lr_ratio=s["final_lr_ratio"],
                     t_dist=s["t_dist"], weight_power=s["weight_power"], ema=s["ema"])


def nft_config(cfg, stage):
    r = C.section(cfg, "rl")
    return NFTConfig(lam=r["lam"], K=r["K"], mean_threshold=r["mean_threshold"], var_threshold=r["var_threshold"],
                     threshold_scale=r["threshold_scale"], train_steps_per_rollout=r["train_steps_per_rollout"],
                     learning_rate=r["learning_rate"], weight_decay=r["weight_decay"], rank=r["rank"],
                     alpha=r["alpha"], rounds=r["fr_rounds" if stage == "FR" else "nr_rounds"],
                     groups_per_round=r["groups_per_round"], rollout_steps=cfg["sampler.train_steps"],
                     gamma=cfg["reward.gamma"], formulation=cfg["reward.formulation"], policy_init=r["policy_init"],
                     noise_draws=r["noise_draws"], seed=cfg["master_seed"] + (0 if stage == "FR" else 1))


def scorers(cfg):
    return ProxyScorers(QualityConstants(), tie_margin=cfg["reward.tie_margin"],
                        fidelity_weight=cfg["reward.fidelity_weight"])


def eval_sample_config(cfg):
    return SampleConfig(steps=cfg["sampler.inference_steps"], seed=cfg["eval.seed"],
                        initial_noise_scale=cfg["sampler.initial_noise_scale"])


def _need(path, what: str, sub: str) -> Path:
    if path is None:
        raise UsageError(f"{what} required (pass the run directory that produced it)")
    p = Path(path)
    if (p / sub).exists():
        return p / sub
    if (p / "manifest.json").exists() or (p / f"{sub}.jsonl").exists():
        return p
    raise UsageError(f"{what} required: {p / sub} not found")


def _data_root(path) -> Path:
    root = _need(path, "synth-data output", "data")
    if not (root / "train.jsonl").exists():
        raise UsageError(f"synth-data output required: {root / 'train.jsonl'} not found")
    return root


def _load_model(path, sub, what):
    return load_checkpoint(_need(path, what, sub))[0]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth_data(args, cfg, out: Path) -> None:
    d = C.section(cfg, "data")
    sp, seed = spec_sampler(cfg), cfg["master_seed"]
    kw = dict(hr_size=d["hr_size"], spec_sampler=sp, master_seed=seed, channels=d["channels"])
    train = build_dataset(d["n_train"], seed_start=0, **kw)
    held = build_dataset(d["n_heldout"], seed_start=HELDOUT_START, **kw)
    unp = build_unpaired_lq(d["n_unpaired"], seed_start=UNPAIRED_START,
                            paired_ranges=[(0, d["n_train"]), (HELDOUT_START, HELDOUT_START + d["n_heldout"])], **kw)
    for name, ds in (("train", train), ("heldout", held), ("unpaired", unp)):
        save_dataset(ds, out / "data", name)


def cmd_train_sft(args, cfg, out: Path) -> None:
    train = load_dataset(_data_root(args.data), "train")
    train_sft(train, sft_config(cfg), architecture(cfg), out_dir=out)


def cmd_train_rl(args, cfg, out: Path) -> None:
    stage = args.stage.upper()
    init = None
    if stage == "NR":
        if args.fr is None:
            raise StageError("FR adapter required: pass --fr <run dir of train-rl --stage fr>")
        p = Path(args.fr) / "adapter"
        if not (p / "manifest.json").exists() or read_manifest(p)["stage"] != "FR-RL":
            raise StageError(f"FR adapter required: no FR-RL adapter checkpoint at {p}")
        init = load_checkpoint(p)[1]
    root = _data_root(args.data)
    data = load_dataset(root, "train" if stage == "FR" else "unpaired")
    base = _load_model(args.sft, "base", "cold-start base snapshot")
    sft = _load_model(args.sft, "sft", "SFT checkpoint")
    rl_train_stage(stage, base, data, nft_config(cfg, stage), init, scorers(cfg), sft, out)


def cmd_merge(args, cfg, out: Path) -> None:
    sft_dir = _need(args.sft, "SFT checkpoint", "sft")
    ad_dir = _need(args.adapter, "RL adapter", "adapter")
    sft = load_checkpoint(sft_dir)[0]
    adapter = load_checkpoint(ad_dir)[1]
    if adapter is None:
        raise UsageError(f"{ad_dir} holds no adapter")
    merged = merge_adapter(sft, adapter, cfg["rl.merge_scale"])
    save_checkpoint(out / "merged", merged, stage="merged",
                    parents={"sft": read_manifest(sft_dir)["sha256"], "adapter": read_manifest(ad_dir)["sha256"]},
                    meta={"merge_scale": cfg["rl.merge_scale"]})


def _model_for_eval(path):
    p = Path(path)
    for sub in ("merged", "sft"):
        if (p / sub / "manifest.json").exists():
            return load_checkpoint(p / sub)[0], sub
    if (p / "manifest.json").exists():
        return load_checkpoint(p)[0], read_manifest(p)["stage"]
    raise UsageError(f"model checkpoint required: no merged/ or sft/ checkpoint under {p}")


def cmd_evaluate(args, cfg, out: Path) -> None:
    model, label = _model_for_eval(args.model)
    root = _data_root(args.data)
    split = load_dataset(root, args.split)
    split = split.subset(np.arange(min(cfg["eval.n_images"], len(split))))
    rep = evaluate_policy(model, split, eval_sample_config(cfg), scorers=scorers(cfg), gamma=cfg["reward.gamma"],
                          label=label)
    rep.write_jsonl(out / "report.jsonl")
    (out / "report.txt").write_text(rep.table() + "\n")
    print(rep.table())


def cmd_annotate(args, cfg, out: Path) -> None:
    root = _data_root(args.data)
    ds = load_dataset(root, args.split)
    model = _load_model(args.sft, "sft", "SFT checkpoint")
    sc, groups = scorers(cfg), []
    n = min(args.groups, len(ds))
    for i in range(n):
        ups = np.broadcast_to(ds.lr_up(i), (args.group_size,) + ds.lr_up(i).shape)
        seeds = [cfg["master_seed"] * 1000 + i * args.group_size + k for k in range(args.group_size)]
        srs = np.clip(sample_batch(model, ups, int(ds.prompt_ids[i]), seeds,
                                   SampleConfig(steps=cfg["sampler.train_steps"])), 0, 1)
        groups.append(annotate_group(ds.lr[i], list(srs), sc, [f"{args.split}-{i:05d}-s{s}" for s in seeds]))
    write_annotations(out / "annotations.jsonl", groups)


def cmd_ablate(args, cfg, out: Path) -> None:
    root = _data_root(args.data)
    train, held = load_dataset(root, "train"), load_dataset(root, "heldout")
    unp = load_dataset(root, "unpaired")
    held = held.subset(np.arange(min(cfg["eval.n_images"], len(held))))
    base = _load_model(args.sft, "base", "cold-start base snapshot")
    sft = _load_model(args.sft, "sft", "SFT checkpoint")
    axis = cfg["eval.ablation_axis"]
    if axis not in ABLATION_AXES:
        raise C.ConfigError(f"eval.ablation_axis must be one of {ABLATION_AXES}")
    reports, table = ablation_grid(axis, cfg["eval.ablation_values"], base, sft, train, unp, held,
                                   nft_config(cfg, "FR"), nr_cfg=nft_config(cfg, "NR"),
                                   sample_cfg=eval_sample_config(cfg), scorers=scorers(cfg),
                                   merge_scale=cfg["rl.merge_scale"], out_dir=out)
    for name, rep in reports.items():
        rep.write_jsonl(out / f"report_{name}.jsonl")
    (out / "ablation.txt").write_text(table + "\n")
    print(table)


def cmd_plot(args, cfg, out: Path) -> None:
    made = []
    for r in args.runs:
        made += plot_run(r, out / Path(r).name)
    if not made:
        raise UsageError("no loss.jsonl or rl_*.jsonl logs found in the given runs")


COMMANDS = {
    "synth-data": cmd_synth_data, "train-sft": cmd_train_sft, "train-rl": cmd_train_rl, "annotate": cmd_annotate,
    "evaluate": cmd_evaluate, "ablate": cmd_ablate, "merge": cmd_merge, "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowsr", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--list-keys", action="store_true", help="print every config key with its default and exit")
    sub = p.add_subparsers(dest="command")
    sub.add_parser("synth-data", help="generate train / heldout / unpaired splits")
    s = sub.add_parser("train-sft", help="cold-start flow-matching training")
    s.add_argument("--data", required=True)
    s = sub.add_parser("train-rl", help="one RL stage on the base snapshot")
    s.add_argument("--stage", required=True, choices=["fr", "nr", "FR", "NR"])
    s.add_argument("--data", required=True)
    s.add_argument("--sft", required=True, help="train-sft run dir (provides base/ and sft/)")
    s.add_argument("--fr", help="train-rl --stage fr run dir (required for nr)")
    s = sub.add_parser("annotate", help="anchor + pairwise + calibration records for SFT sample groups")
    s.add_argument("--data", required=True)
    s.add_argument("--sft", required=True)
    s.add_argument("--split", default="heldout")
    s.add_argument("--groups", type=int, default=8)
    s.add_argument("--group-size", type=int, default=4)
    s = sub.add_parser("evaluate", help="metric report for a merged or SFT checkpoint")
    s.add_argument("--model", required=True, help="merge or train-sft run dir, or a checkpoint dir")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="heldout")
    s = sub.add_parser("ablate", help="RL pipeline per value of eval.ablation_axis")
    s.add_argument("--data", required=True)
    s.add_argument("--sft", required=True)
    s = sub.add_parser("merge", help="fold an RL adapter into the SFT weights")
    s.add_argument("--sft", required=True)
    s.add_argument("--adapter", required=True, help="train-rl run dir or adapter checkpoint dir")
    s = sub.add_parser("plot", help="SVG curves from run logs")
    s.add_argument("runs", nargs="+")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.list_keys:
        sys.stdout.write(C.documentation())
        return 0
    if args.command is None:
        build_parser().print_usage(sys.stderr)
        return 2
    try:
        cfg = C.load(args.config, args.set)
    except (C.ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        out = make_run_dir(cfg, args.command)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    summary = {"command": args.command, "argv": list(argv if argv is not None else sys.argv[1:]),
               "run_dir": str(out)}
    code = 0
    try:
        COMMANDS[args.command](args, cfg, out)
        summary["status"] = "ok"
    except (UsageError, StageError, C.ConfigError, FileNotFoundError, ValueError, RuntimeError) as e:
        summary.update(status="error", error=f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        if os.environ.get("FLOWSR_DEBUG"):
            traceback.print_exc()
        code = 1
    summary["artifacts"] = digests(out)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
