"""Experiment driver: world/dataset generation, proxy pretraining, RL+IL
fine-tuning, greedy evaluation, ablation matrices, and the gradient-check
release gate. Every command resolves all randomness from one root seed,
writes its outputs under --out, and records every emitted file in an
atomically-written manifest.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import asdict, replace

from . import __version__
from .config import ConfigError, RunConfig, load_config, save_config
from .finetune import RLConfig, evaluate_policy, finetune, write_learning_curve_csv
from .gradcheck import run_gradcheck
from .metrics import EvaluatedEpisode, aggregate, write_report_csv, write_report_json
from .model import (
    CHECKPOINT_VERSION,
    NavModel,
    load_checkpoint,
    save_checkpoint,
)
from .pretrain import (
    MaskingConfig,
    TaskSampler,
    TwoStageSchedule,
    train_proxy,
    write_loss_curves_csv,
)
from .rng import Rng
from .world import (
    generate_world,
    load_dataset,
    make_dataset,
    save_dataset,
    seen_world_seeds,
    unseen_world_seeds,
)

SPLITS = ("train", "val_seen", "val_unseen")

_DASHED = {"temporal-only": "temporal_only", "fine-grained": "fine_grained",
           "last-only": "last_only", "long-horizon": "long_horizon"}


def _undash(value: str) -> str:
    return _DASHED.get(value, value)


class Manifest:
    """Tracks every artifact a command emits; written atomically at run end."""

    def __init__(self, out_dir: str, command: str, config: RunConfig):
        self.out_dir = out_dir
        self.command = command
        self.config = config
        self.started = time.time()
        self.artifacts: list[str] = []
        self.checkpoints: dict[str, str] = {}
        self.extra: dict = {}

    def path(self, *parts: str) -> str:
        full = os.path.join(self.out_dir, *parts)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        rel = os.path.relpath(full, self.out_dir)
        if rel not in self.artifacts:
            self.artifacts.append(rel)
        return full

    def checkpoint(self, phase: str, *parts: str) -> str:
        full = self.path(*parts)
        self.checkpoints[phase] = os.path.relpath(full, self.out_dir)
        return full

    def write(self) -> str:
        finished = time.time()
        obj = {
            "command": self.command,
            "package_version": __version__,
            "checkpoint_format_version": CHECKPOINT_VERSION,
            "config": json.loads(self.config.to_canonical_json()),
            "started_unix": self.started,
            "finished_unix": finished,
            "wall_clock_seconds": finished - self.started,
            "checkpoints": self.checkpoints,
            "artifacts": sorted(self.artifacts),
            **self.extra,
        }
        final = os.path.join(self.out_dir, f"manifest_{self.command}.json")
        tmp = final + ".tmp"
        os.makedirs(self.out_dir, exist_ok=True)
        with open(tmp, "w") as f:
            json.dump(obj, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, final)
        return final


def _dataset_path(cfg: RunConfig, split: str, task: str | None = None) -> str:
    task = task or cfg.data.task
    return os.path.join(cfg.out_dir, "data", f"{task}_{split}.jsonl")


def _build_worlds(cfg: RunConfig):
    max_degree = min(cfg.model.k_views, 8)
    seen = [generate_world(s, cfg.world.n_nodes, cfg.world.k_neighbors, "seen", max_degree)
            for s in seen_world_seeds(cfg.world.seen_worlds)]
    unseen = [generate_world(s, cfg.world.n_nodes, cfg.world.k_neighbors, "unseen", max_degree)
              for s in unseen_world_seeds(cfg.world.unseen_worlds)]
    return seen, unseen


def _generate_datasets(cfg: RunConfig, manifest: Manifest | None, task: str | None = None) -> dict[str, str]:
    task = task or cfg.data.task
    seen, unseen = _build_worlds(cfg)
    root = Rng(cfg.seed)
    paths = {}
    spec = {
        "train": (seen, cfg.data.train_episodes),
        "val_seen": (seen, cfg.data.val_episodes),
        "val_unseen": (unseen, cfg.data.val_episodes),
    }
    for split, (worlds, count) in spec.items():
        per_world = math.ceil(count / len(worlds))
        rng = root.substream(f"data-{task}-{split}")
        episodes = make_dataset(worlds, per_world, task, rng,
                                hop_min=cfg.data.hop_min, hop_max=cfg.data.hop_max,
                                success_radius=cfg.world.success_radius,
                                id_prefix=f"{split}-")[:count]
        path = manifest.path("data", f"{task}_{split}.jsonl") if manifest \
            else _dataset_path(cfg, split, task)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_dataset(path, episodes)
        paths[split] = path
    return paths


def _ensure_data(cfg: RunConfig, task: str | None = None) -> dict[str, list]:
    """Load the three split datasets, generating them first if absent."""
    task = task or cfg.data.task
    if not all(os.path.exists(_dataset_path(cfg, s, task)) for s in SPLITS):
        _generate_datasets(cfg, None, task)
    max_degree = min(cfg.model.k_views, 8)
    cache: dict = {}
    return {s: load_dataset(_dataset_path(cfg, s, task), cfg.world.n_nodes,
                            cfg.world.k_neighbors, max_degree, cache)
            for s in SPLITS}


def _rl_config(cfg: RunConfig, objective: str = "il+rl") -> RLConfig:
    fin = cfg.finetune
    return RLConfig(
        il_weight=fin.il_weight,
        discount=fin.discount,
        lr=fin.lr,
        success_reward=fin.success_reward,
        max_steps=fin.max_steps,
        critic_weight=fin.critic_weight,
        entropy_weight=fin.entropy_weight,
        grad_clip=fin.grad_clip,
        weight_decay=fin.weight_decay,
        freeze_unimodal=fin.freeze_unimodal,
        use_rl=objective in ("rl", "il+rl"),
        use_il=objective in ("il", "il+rl"),
    )


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig, args) -> int:
    manifest = Manifest(cfg.out_dir, "gen", cfg)
    paths = _generate_datasets(cfg, manifest)
    counts = {}
    for split, path in paths.items():
        with open(path) as f:
            counts[split] = sum(1 for line in f if line.strip())
        print(f"gen: {split}: {counts[split]} episodes -> {path}")
    manifest.extra["episode_counts"] = counts
    save_config(manifest.path("config_resolved.json"), cfg)
    print(f"gen: manifest -> {manifest.write()}")
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    manifest = Manifest(cfg.out_dir, "pretrain", cfg)
    data = _ensure_data(cfg)
    model = NavModel(cfg.model, Rng(cfg.seed))
    pt = cfg.pretrain
    sampler = TaskSampler(dict(pt.task_ratio))
    schedule = TwoStageSchedule(
        stage1_iters=pt.stage1_iters, stage2_iters=pt.stage2_iters,
        lr_stage1=pt.lr_stage1, lr_stage2=pt.lr_stage2,
        view_lr_mult=pt.view_lr_mult, weight_decay=pt.weight_decay,
        grad_clip=pt.grad_clip)
    masking = MaskingConfig(mlm_rate=pt.mlm_rate, mrm_rate=pt.mrm_rate,
                            sprel_zero_rate=pt.sprel_zero_rate)

    def progress(it, total, mean_loss):
        print(f"pretrain: iter {it}/{total} mean loss {mean_loss:.4f}", flush=True)

    rows = train_proxy(model, data["train"], sampler, schedule, masking,
                       Rng(cfg.seed).substream("pretrain"), batch_size=pt.batch_size,
                       log_every=max(1, schedule.total_iters // 20), progress=progress)
    ckpt = manifest.checkpoint("pretrained", "checkpoints", "pretrained.ckpt")
    save_checkpoint(ckpt, model)
    write_loss_curves_csv(manifest.path("loss_curves.csv"), rows)
    from .figures import save_loss_curves_figure

    save_loss_curves_figure(rows, manifest.path("loss_curves.png"))
    print(f"pretrain: checkpoint -> {ckpt}")
    print(f"pretrain: manifest -> {manifest.write()}")
    return 0


def cmd_finetune(cfg: RunConfig, args) -> int:
    manifest = Manifest(cfg.out_dir, "finetune", cfg)
    data = _ensure_data(cfg)
    objective = getattr(args, "objective", "il+rl")
    if getattr(args, "from_scratch", False):
        model = NavModel(cfg.model, Rng(cfg.seed))
        rl_cfg = _rl_config(cfg, objective)
        rl_cfg.freeze_unimodal = False
    else:
        init = getattr(args, "init", None) or os.path.join(
            cfg.out_dir, "checkpoints", "pretrained.ckpt")
        if not os.path.exists(init):
            print(f"finetune: no checkpoint at {init}; run pretrain first or "
                  f"pass --from-scratch", file=sys.stderr)
            return 2
        model, _ = load_checkpoint(init)
        rl_cfg = _rl_config(cfg, objective)
    fin = cfg.finetune

    def progress(it, total, row):
        if row:
            print(f"finetune: iter {it}/{total} {row['split']} SR {row['SR']:.3f} "
                  f"SPL {row['SPL']:.3f}", flush=True)

    result = finetune(model, data["train"], rl_cfg, Rng(cfg.seed).substream("finetune"),
                      iters=fin.iters, batch_size=fin.batch_size,
                      success_radius=cfg.world.success_radius,
                      val_seen=data["val_seen"], val_unseen=data["val_unseen"],
                      eval_every=fin.eval_every, eval_episodes=fin.eval_episodes,
                      log_every=1, progress=progress)
    ckpt = manifest.checkpoint("finetuned", "checkpoints", "finetuned.ckpt")
    save_checkpoint(ckpt, model)
    write_learning_curve_csv(manifest.path("learning_curve.csv"), result.curves)
    from .figures import save_learning_curve_figure

    if result.curves:
        save_learning_curve_figure(result.curves, manifest.path("learning_curve.png"))
    manifest.extra["best_unseen_spl"] = result.best_unseen_spl
    manifest.extra["best_iteration"] = result.best_iteration
    print(f"finetune: best unseen SPL {result.best_unseen_spl:.3f} "
          f"at iteration {result.best_iteration}")
    print(f"finetune: checkpoint -> {ckpt}")
    print(f"finetune: manifest -> {manifest.write()}")
    return 0


def _eval_chunk(payload):
    model, chunk, radius, max_steps = payload
    from .finetune import rollout

    cfg = RLConfig(max_steps=max_steps)
    out = []
    for ep, world in chunk:
        ro = rollout(model, world, ep, "greedy", None, cfg, radius)
        out.append((ro.path, ep))
    return out


def _evaluate(model, data, radius, max_steps, workers: int = 1):
    if workers <= 1:
        return evaluate_policy(model, data, radius, max_steps)
    import multiprocessing as mp

    chunks = [data[i::workers] for i in range(workers)]
    ctx = mp.get_context("fork")
    with ctx.Pool(workers) as pool:
        results = pool.map(_eval_chunk, [(model, c, radius, max_steps) for c in chunks])
    # reassemble in original order: chunk i holds episodes i, i+workers, ...
    paths: dict[str, list[int]] = {}
    for res in results:
        for path, ep in res:
            paths[ep.episode_id] = path
    episodes = [EvaluatedEpisode(paths[ep.episode_id], ep.expert_path, world, radius,
                                 ep.task_kind, ep.episode_id)
                for ep, world in data]
    return aggregate(episodes)


def cmd_eval(cfg: RunConfig, args) -> int:
    manifest = Manifest(cfg.out_dir, "eval", cfg)
    ckpt = getattr(args, "checkpoint", None) or os.path.join(
        cfg.out_dir, "checkpoints", "finetuned.ckpt")
    if not os.path.exists(ckpt):
        print(f"eval: checkpoint not found: {ckpt}", file=sys.stderr)
        return 2
    model, _ = load_checkpoint(ckpt)
    data = _ensure_data(cfg)
    workers = getattr(args, "workers", 1)
    reports = {}
    for split in ("val_seen", "val_unseen"):
        reports[split] = _evaluate(model, data[split], cfg.world.success_radius,
                                   cfg.finetune.max_steps, workers)
        means = reports[split].means
        print(f"eval: {split}: " + " ".join(f"{k}={means[k]:.3f}" for k in
                                            ("SR", "SPL", "nDTW", "SDTW", "CLS", "NE")))
    write_report_json(manifest.path("report.json"), reports)
    write_report_csv(manifest.path("report.csv"), reports)
    from .figures import save_metrics_figure

    save_metrics_figure(reports, manifest.path("report.png"))
    manifest.extra["checkpoint_evaluated"] = os.path.abspath(ckpt)
    print(f"eval: manifest -> {manifest.write()}")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    manifest = Manifest(cfg.out_dir, "ablate", cfg)
    variants = [_undash(v) for v in args.variants.split(",")]
    objectives = args.objectives.split(",")
    seeds = [cfg.seed + i for i in range(args.ablate_seeds)]
    data = _ensure_data(cfg)
    pretrain_iters = args.pretrain_iters
    rows = []
    for variant in variants:
        for objective in objectives:
            for seed in seeds:
                cell_cfg = replace(cfg.model, history_variant=variant)
                model = NavModel(cell_cfg, Rng(seed))
                rl_cfg = _rl_config(cfg, objective)
                if pretrain_iters > 0:
                    pt = cfg.pretrain
                    schedule = TwoStageSchedule(
                        stage1_iters=pretrain_iters, stage2_iters=0,
                        lr_stage1=pt.lr_stage1, weight_decay=pt.weight_decay,
                        grad_clip=pt.grad_clip)
                    train_proxy(model, data["train"], TaskSampler(dict(pt.task_ratio)),
                                schedule, MaskingConfig(), Rng(seed).substream("ablate-pre"),
                                batch_size=pt.batch_size)
                else:
                    rl_cfg.freeze_unimodal = False
                finetune(model, data["train"], rl_cfg, Rng(seed).substream("ablate-ft"),
                         iters=cfg.finetune.iters, batch_size=cfg.finetune.batch_size,
                         success_radius=cfg.world.success_radius, eval_every=0)
                report = _evaluate(model, data["val_unseen"][: cfg.finetune.eval_episodes],
                                   cfg.world.success_radius, cfg.finetune.max_steps)
                row = {"variant": variant, "objective": objective, "seed": seed,
                       "SR": report.means["SR"], "SPL": report.means["SPL"],
                       "nDTW": report.means["nDTW"]}
                rows.append(row)
                print(f"ablate: {variant}/{objective}/seed{seed}: "
                      f"SR={row['SR']:.3f} SPL={row['SPL']:.3f}", flush=True)
    import csv as _csv

    with open(manifest.path("ablation.csv"), "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["variant", "objective", "seed", "SR", "SPL", "nDTW"])
        for r in rows:
            writer.writerow([r["variant"], r["objective"], r["seed"],
                             f"{r['SR']:.6f}", f"{r['SPL']:.6f}", f"{r['nDTW']:.6f}"])
    from .figures import save_ablation_figure

    save_ablation_figure(rows, manifest.path("ablation.png"))
    manifest.extra["cells"] = len(rows)
    print(f"ablate: {len(rows)} rows -> {manifest.write()}")
    return 0


def cmd_gradcheck(cfg: RunConfig | None, args) -> int:
    def progress(row):
        mark = "PASS" if row["passed"] else "FAIL"
        print(f"gradcheck: {row['op']:30s} max rel err {row['max_rel_err']:.3e}  {mark}",
              flush=True)

    rows, ok = run_gradcheck(instances=args.instances, progress=progress)
    if cfg is not None and getattr(args, "out", None):
        manifest = Manifest(cfg.out_dir, "gradcheck", cfg)
        import csv as _csv

        with open(manifest.path("gradcheck.csv"), "w", newline="") as f:
            writer = _csv.writer(f)
            writer.writerow(["op", "instances", "max_rel_err", "passed"])
            for r in rows:
                writer.writerow([r["op"], r["instances"], f"{r['max_rel_err']:.3e}", r["passed"]])
        manifest.write()
    print(f"gradcheck: {'all passed' if ok else 'FAILURES PRESENT'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    model = cfg.model
    if getattr(args, "variant", None):
        model = replace(model, history_variant=_undash(args.variant))
    if getattr(args, "encoder", None):
        model = replace(model, encoder_variant=args.encoder)
    cfg = replace(cfg, model=model)
    if getattr(args, "task", None):
        cfg = replace(cfg, data=replace(cfg.data, task=_undash(args.task)))
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histnav",
        description="History-aware multimodal navigation agent: data generation, "
                    "training, evaluation and verification.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run-config JSON (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="root seed override")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel workers for episode evaluation")
        p.add_argument("--variant",
                       choices=["hierarchical", "flattened", "temporal-only", "recurrent"],
                       help="history encoding variant override")
        p.add_argument("--encoder", choices=["full", "encdec"],
                       help="cross-modal encoder variant override")
        p.add_argument("--task",
                       choices=["fine-grained", "last-only", "back", "long-horizon"],
                       help="task kind override")

    common(sub.add_parser("gen", help="generate world datasets (JSONL per split)"))
    common(sub.add_parser("pretrain", help="proxy-task pretraining"))

    p_ft = sub.add_parser("finetune", help="RL+IL fine-tuning from a checkpoint")
    common(p_ft)
    p_ft.add_argument("--init", help="initial checkpoint (default: <out>/checkpoints/pretrained.ckpt)")
    p_ft.add_argument("--from-scratch", action="store_true",
                      help="train from random initialization, nothing frozen")
    p_ft.add_argument("--objective", choices=["il", "rl", "il+rl"], default="il+rl")

    p_ev = sub.add_parser("eval", help="greedy single-run evaluation of a checkpoint")
    common(p_ev)
    p_ev.add_argument("--checkpoint", help="checkpoint to evaluate "
                                           "(default: <out>/checkpoints/finetuned.ckpt)")

    p_ab = sub.add_parser("ablate", help="history-variant x objective comparison matrix")
    common(p_ab)
    p_ab.add_argument("--variants", default="hierarchical,temporal-only,recurrent")
    p_ab.add_argument("--objectives", default="il+rl")
    p_ab.add_argument("--ablate-seeds", type=int, default=2)
    p_ab.add_argument("--pretrain-iters", type=int, default=0,
                      help="per-cell proxy pretraining iterations (0: from scratch)")

    p_gc = sub.add_parser("gradcheck", help="finite-difference verification of every op and loss")
    common(p_gc)
    p_gc.add_argument("--instances", type=int, default=20)
    return parser


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = _apply_overrides(cfg, args)
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, args)
    except Exception as e:  # noqa: BLE001 - CLI boundary: report, nonzero exit
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
