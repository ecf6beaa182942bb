"""Proxy-task pretraining: instruction/observation masking, the six task
losses (masked word prediction, masked panorama prediction, trajectory
matching, action prediction, action regression, spatial relation), ratio
sampling over tasks, and the two-stage schedule that first freezes the view
feature encoder.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, DiffTensor, Tape, backward
from .model import EncodedState, NavModel
from .rng import Rng
from .world import (
    EpisodeSpec,
    HistoryStep,
    RenderedPanorama,
    TrajectoryStep,
    WorldGraph,
    expert_trajectory,
    history_from_steps,
    wrap_angle,
    FIRST_WORD_ID,
    MASK,
)

DEFAULT_TASK_RATIO = {"mlm": 5, "mrm": 2, "itm": 2, "sap": 1, "sar": 1, "sprel": 1}


class TaskUnavailableError(RuntimeError):
    """Requested proxy task is incompatible with the model's history variant."""


@dataclass
class MaskingConfig:
    mlm_rate: float = 0.15
    mrm_rate: float = 0.15
    sprel_zero_rate: float = 0.3

    def __post_init__(self):
        for name in ("mlm_rate", "mrm_rate", "sprel_zero_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass
class TaskSampler:
    ratios: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_TASK_RATIO))

    def __post_init__(self):
        if any(w <= 0 for w in self.ratios.values()):
            raise ValueError("task ratio weights must be positive")
        self.names = sorted(self.ratios)
        self.weights = [self.ratios[n] for n in self.names]

    def draw(self, rng: Rng) -> str:
        return self.names[rng.weighted_choice(self.weights)]


@dataclass
class TwoStageSchedule:
    """Stage 1 trains everything except the frozen view encoder; stage 2
    unfreezes it with a higher learning rate than the rest."""

    stage1_iters: int
    stage2_iters: int
    lr_stage1: float = 1e-3
    lr_stage2: float = 5e-4
    view_lr_mult: float = 5.0
    weight_decay: float = 0.01
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("stage iteration counts must be nonnegative")

    @property
    def total_iters(self) -> int:
        return self.stage1_iters + self.stage2_iters


@dataclass
class Sample:
    episode: EpisodeSpec
    world: WorldGraph
    trajectory: list[TrajectoryStep]

    def full_history(self) -> list[HistoryStep]:
        return history_from_steps(self.trajectory, len(self.trajectory) - 1)

    def final_panorama(self) -> RenderedPanorama:
        return self.trajectory[-1].panorama


class SampleCache:
    """Expert trajectories are deterministic per episode, so compute once."""

    def __init__(self, data: list[tuple[EpisodeSpec, WorldGraph]], k_views: int, mrm_classes: int):
        self.data = data
        self.k_views = k_views
        self.mrm_classes = mrm_classes
        self._cache: dict[str, Sample] = {}

    def __len__(self) -> int:
        return len(self.data)

    def get(self, index: int) -> Sample:
        ep, world = self.data[index]
        if ep.episode_id not in self._cache:
            traj = expert_trajectory(world, ep, self.k_views, self.mrm_classes)
            self._cache[ep.episode_id] = Sample(ep, world, traj)
        return self._cache[ep.episode_id]


# ---------------------------------------------------------------------------
# masking pipelines


def mask_instruction(token_ids: list[int], rng: Rng, rate: float) -> tuple[list[int], list[int], list[int]]:
    """Independently replace non-special tokens with the mask token.

    Returns (masked ids, masked positions, original ids at those positions).
    """
    masked = list(token_ids)
    positions, originals = [], []
    for i, tok in enumerate(token_ids):
        if tok >= FIRST_WORD_ID and rng.bernoulli(rate):
            masked[i] = MASK
            positions.append(i)
            originals.append(tok)
    return masked, positions, originals


def mask_instruction_nonempty(token_ids, rng: Rng, rate: float):
    """Resample until at least one position is masked."""
    for _ in range(10_000):
        masked, positions, originals = mask_instruction(token_ids, rng, rate)
        if positions:
            return masked, positions, originals
    raise RuntimeError("masking produced no positions after 10000 attempts")


def _zeroed_panorama(pano: RenderedPanorama) -> RenderedPanorama:
    out = copy.copy(pano)
    out.views = [copy.copy(v) for v in pano.views]
    for v in out.views:
        v.raw = np.zeros_like(v.raw)
    return out


def mask_observations(history: list[HistoryStep], rng: Rng,
                      rate: float) -> tuple[list[HistoryStep], list[tuple[int, np.ndarray]]]:
    """Zero out whole panoramas of history steps with the given probability.

    Targets pair each masked step index with its panorama-level class
    distribution (the mean of the per-view renderer distributions).
    """
    out = []
    targets = []
    for i, step in enumerate(history):
        if rng.bernoulli(rate):
            out.append(HistoryStep(_zeroed_panorama(step.panorama),
                                   step.turned_heading, step.turned_elevation))
            targets.append((i, step.panorama.class_targets.mean(axis=0)))
        else:
            out.append(step)
    return out, targets


def mask_observations_nonempty(history, rng: Rng, rate: float):
    for _ in range(10_000):
        masked, targets = mask_observations(history, rng, rate)
        if targets:
            return masked, targets
    raise RuntimeError("observation masking produced no targets after 10000 attempts")


# ---------------------------------------------------------------------------
# per-task losses


def _pair_encode(model: NavModel, sample: Sample, history: list[HistoryStep],
                 token_ids: list[int]) -> EncodedState:
    """Forward for pair tasks: instruction with the full-trajectory history and
    the final observation."""
    return model.encode_step(token_ids, history, sample.final_panorama())


def loss_mlm(model: NavModel, sample: Sample, rng: Rng, masking: MaskingConfig) -> DiffTensor:
    """Mean negative log-likelihood of the original words at masked positions."""
    tokens = sample.episode.instruction_tokens
    masked, positions, originals = mask_instruction_nonempty(tokens, rng, masking.mlm_rate)
    enc = _pair_encode(model, sample, sample.full_history(), masked)
    logits = model.head_mlm(enc, positions)
    return ad.cross_entropy(logits, originals)


def _history_output_positions(model: NavModel, step_indices: list[int]) -> list[int]:
    # variants with a leading [cls] shift step outputs by one
    return [i + 1 for i in step_indices]


def loss_mrm(model: NavModel, sample: Sample, rng: Rng, masking: MaskingConfig) -> DiffTensor:
    """Soft cross-entropy between predicted and renderer class distributions
    at masked history steps."""
    variant = model.config.history_variant
    if variant == "recurrent":
        raise TaskUnavailableError("masked panorama prediction needs per-step history outputs")
    history = sample.full_history()
    if not history:
        raise TaskUnavailableError("episode has no history steps")
    masked_hist, targets = mask_observations_nonempty(history, rng, masking.mrm_rate)
    enc = _pair_encode(model, sample, masked_hist, sample.episode.instruction_tokens)
    step_indices = [i for i, _ in targets]
    target_rows = np.stack([t for _, t in targets])
    if variant == "flattened":
        k1 = model.config.k_views + 1
        rows = []
        for i in step_indices:
            start = 1 + i * k1
            rows.append(ad.mean_pool(ad.slice_rows(enc.history, start, start + k1), axis=0))
        pooled = ad.stack(rows, axis=0)
        logits = ad.linear(ad.gelu(ad.linear(pooled, model.mrm_head.w1, model.mrm_head.b1)),
                           model.mrm_head.w2, model.mrm_head.b2)
    else:
        logits = model.head_mrm(enc, _history_output_positions(model, step_indices))
    return ad.soft_cross_entropy(logits, target_rows)


def shuffled_history(history: list[HistoryStep], rng: Rng) -> list[HistoryStep]:
    """Non-identity permutation of the step order (history length >= 2)."""
    if len(history) < 2:
        raise ValueError("cannot shuffle a history shorter than 2 steps")
    perm = rng.shuffled(list(range(len(history))))
    if perm == list(range(len(history))):
        perm = perm[1:] + perm[:1]
    return [history[i] for i in perm]


def sample_itm_negatives(batch: list[Sample], positive_index: int,
                         rng: Rng) -> list[list[HistoryStep]]:
    """Four negative trajectories: two drawn from other episodes in the batch,
    two temporal shuffles of the positive."""
    if len(batch) < 2:
        raise ValueError("trajectory matching needs an in-batch negative, batch >= 2")
    positive = batch[positive_index]
    others = [i for i in range(len(batch)) if
              batch[i].episode.episode_id != positive.episode.episode_id]
    if not others:
        raise ValueError("no other episode ids in batch for negatives")
    negatives = []
    for _ in range(2):
        pick = others[rng.integers(0, len(others))]
        negatives.append(batch[pick].full_history())
    for _ in range(2):
        negatives.append(shuffled_history(positive.full_history(), rng))
    return negatives


def loss_itm(model: NavModel, batch: list[Sample], positive_index: int, rng: Rng) -> DiffTensor:
    """Contrastive alignment: the positive pair scored against four negatives."""
    positive = batch[positive_index]
    tokens = positive.episode.instruction_tokens
    negatives = sample_itm_negatives(batch, positive_index, rng)
    scores = [model.head_itm(_pair_encode(model, positive, positive.full_history(), tokens))]
    for neg_hist in negatives:
        enc = model.encode_step(tokens, neg_hist, positive.final_panorama())
        scores.append(model.head_itm(enc))
    return ad.cross_entropy(ad.stack(scores, axis=0), 0)


def _step_encode(model: NavModel, sample: Sample, t: int) -> tuple[EncodedState, TrajectoryStep]:
    step = sample.trajectory[t]
    history = history_from_steps(sample.trajectory, t)
    enc = model.encode_step(sample.episode.instruction_tokens, history, step.panorama)
    return enc, step

def pick_step(sample: Sample, rng: Rng) -> int:
    return rng.integers(0, len(sample.trajectory))


def loss_sap_terms(model: NavModel, sample: Sample) -> list[DiffTensor]:
    """Per-step teacher-forced action cross-entropies along the expert
    trajectory (histories built incrementally, text encoded once)."""
    tokens = sample.episode.instruction_tokens
    if model.config.encoder_variant == "encdec":
        memories = model.precompute_text_memories(model.encode_text(tokens))
        text = None
    else:
        text = model.encode_text(tokens)
        memories = None
    cache = model.history_cache()
    terms = []
    for step in sample.trajectory:
        h = cache.encode()
        o = model.embed_observation(step.panorama)
        if memories is not None:
            enc = model.cross_modal_encode_encdec(memories, h, o)
        else:
            enc = model.cross_modal_encode(text, h, o)
        logits = model.head_sap_logits(enc)
        terms.append(ad.cross_entropy(logits, step.action, mask=step.panorama.action_mask()))
        cache.append(HistoryStep(step.panorama, step.turned_heading, step.turned_elevation))
    return terms


def loss_sap(model: NavModel, sample: Sample, rng: Rng) -> DiffTensor:
    """Teacher-forced action classification, averaged over every expert step."""
    terms = loss_sap_terms(model, sample)
    total = ad.scale(terms[0], 1.0 / len(terms))
    for term in terms[1:]:
        total = ad.add(total, ad.scale(term, 1.0 / len(terms)))
    return total


def loss_sar(model: NavModel, sample: Sample, rng: Rng) -> DiffTensor:
    """Squared error of regressed action heading/elevation at a sampled step."""
    t = pick_step(sample, rng)
    enc, step = _step_encode(model, sample, t)
    pred = model.head_sar(enc)
    target = np.array([step.turned_heading, step.turned_elevation])
    return ad.sum_squared_error(pred, target)


def loss_sprel(model: NavModel, sample: Sample, rng: Rng, masking: MaskingConfig) -> DiffTensor:
    """Relative heading/elevation regression between two views of one panorama,
    with visual or angle features independently zeroed out."""
    t = pick_step(sample, rng)
    step = sample.trajectory[t]
    pano = step.panorama
    k = pano.k_views
    i = rng.integers(0, k)
    j = rng.integers(0, k)
    modified = copy.copy(pano)
    modified.views = [copy.copy(v) for v in pano.views]
    for idx in {i, j}:
        if rng.bernoulli(masking.sprel_zero_rate):
            modified.views[idx].raw = np.zeros_like(modified.views[idx].raw)
        if rng.bernoulli(masking.sprel_zero_rate):
            modified.views[idx].angle = np.zeros_like(modified.views[idx].angle)
    history = history_from_steps(sample.trajectory, t)
    enc = model.encode_step(sample.episode.instruction_tokens, history, modified)
    pred = model.head_sprel(enc, i, j)
    target = np.array([
        wrap_angle(pano.views[j].rel_heading - pano.views[i].rel_heading),
        pano.views[j].rel_elevation - pano.views[i].rel_elevation,
    ])
    return ad.sum_squared_error(pred, target)


def task_loss(model: NavModel, task: str, batch: list[Sample], positive_index: int,
              rng: Rng, masking: MaskingConfig) -> DiffTensor:
    sample = batch[positive_index]
    if task == "mlm":
        return loss_mlm(model, sample, rng, masking)
    if task == "mrm":
        return loss_mrm(model, sample, rng, masking)
    if task == "itm":
        return loss_itm(model, batch, positive_index, rng)
    if task == "sap":
        return loss_sap(model, sample, rng)
    if task == "sar":
        return loss_sar(model, sample, rng)
    if task == "sprel":
        return loss_sprel(model, sample, rng, masking)
    raise ValueError(f"unknown proxy task {task!r}")


# ---------------------------------------------------------------------------
# training loop


def effective_sampler(sampler: TaskSampler, model: NavModel) -> TaskSampler:
    """Drop tasks the history variant cannot support (keeping the others'
    relative ratio)."""
    if model.config.history_variant == "recurrent" and "mrm" in sampler.ratios:
        ratios = {k: v for k, v in sampler.ratios.items() if k != "mrm"}
        return TaskSampler(ratios)
    return sampler


def train_proxy(model: NavModel, data: list[tuple[EpisodeSpec, WorldGraph]],
                sampler: TaskSampler, schedule: TwoStageSchedule,
                masking: MaskingConfig, rng: Rng, batch_size: int = 2,
                log_every: int = 0, progress=None) -> list[dict]:
    """Ratio-sampled proxy-task training with the two-stage freeze schedule.

    Returns one loss-curve row per iteration: iteration, task, loss, stage.
    """
    if not data:
        raise ValueError("empty training dataset")
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 (trajectory matching negatives)")
    cache = SampleCache(data, model.config.k_views, model.config.mrm_class_count)
    sampler = effective_sampler(sampler, model)
    opt = AdamW(model.parameter_groups(), lr=schedule.lr_stage1,
                weight_decay=schedule.weight_decay)
    opt.set_lr_mult("view_encoder", 0.0)
    task_rng = rng.substream("proxy-tasks")
    batch_rng = rng.substream("proxy-batch")
    loss_rng = rng.substream("proxy-loss")
    rows = []
    for it in range(schedule.total_iters):
        if it == schedule.stage1_iters:
            opt.lr = schedule.lr_stage2
            opt.set_lr_mult("view_encoder", schedule.view_lr_mult)
        stage = 1 if it < schedule.stage1_iters else 2
        task = sampler.draw(task_rng)
        idx = batch_rng.integers(0, len(cache), batch_size)
        batch = [cache.get(int(i)) for i in idx]
        model.zero_grad()
        tape = Tape()
        with tape:
            parts = [task_loss(model, task, batch, b, loss_rng, masking)
                     for b in range(batch_size)]
            loss = ad.scale(parts[0], 1.0 / batch_size)
            for p in parts[1:]:
                loss = ad.add(loss, ad.scale(p, 1.0 / batch_size))
        backward(tape, loss)
        ad.clip_grad_norm(model.params, schedule.grad_clip)
        opt.step()
        rows.append({"iteration": it, "task": task, "loss": float(loss.values), "stage": stage})
        if log_every and (it + 1) % log_every == 0 and progress:
            recent = [r["loss"] for r in rows[-log_every:]]
            progress(it + 1, schedule.total_iters, sum(recent) / len(recent))
    return rows


def write_loss_curves_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "task", "loss", "stage"])
        for r in rows:
            writer.writerow([r["iteration"], r["task"], f"{r['loss']:.8f}", r["stage"]])
