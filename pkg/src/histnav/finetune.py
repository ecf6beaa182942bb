"""Sequential action-prediction fine-tuning: policy rollouts (sampled, greedy
and teacher-forced), distance-plus-alignment rewards with fixed stop bonuses,
discounted returns, and the combined actor-critic + imitation update applied
as one optimizer step. Includes the return-trip protocol where the agent must
stop twice (midpoint, then start) and a wrong first stop ends the episode.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, DiffTensor, Tape, backward
from .metrics import EvaluatedEpisode, MetricsReport, aggregate, ndtw
from .model import NavModel
from .rng import Rng
from .world import (
    AgentState,
    EpisodeSpec,
    HistoryStep,
    WorldGraph,
    expert_trajectory,
    render_panorama,
    step as world_step,
)

ROLLOUT_MODES = ("sample", "greedy", "teacher")


@dataclass
class RLConfig:
    il_weight: float = 0.2
    discount: float = 0.9
    lr: float = 1e-4
    success_reward: float = 2.0
    max_steps: int = 15
    reward_scale: float | None = None  # None: the episode's initial geodesic
    critic_weight: float = 0.5
    entropy_weight: float = 0.0
    grad_clip: float = 5.0
    weight_decay: float = 0.01
    freeze_unimodal: bool = True
    use_rl: bool = True
    use_il: bool = True

    def __post_init__(self):
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must be in [0, 1), got {self.discount}")
        if self.il_weight < 0:
            raise ValueError("il_weight must be nonnegative")


@dataclass
class RolloutStep:
    state_summary: np.ndarray
    action: int
    log_prob: DiffTensor  # graph-connected while a tape is active
    reward: float
    value: DiffTensor
    alignment: float
    entropy: DiffTensor | None = None
    was_stop: bool = False


@dataclass
class Rollout:
    steps: list[RolloutStep]
    terminal: str  # "stopped", "budget", "wrong_stop"
    path: list[int]
    episode: EpisodeSpec

    def rewards(self) -> list[float]:
        return [s.reward for s in self.steps]


def discounted_returns(rewards: list[float], discount: float) -> list[float]:
    """Suffix sums R_t = r_t + discount * R_{t+1}."""
    if not rewards:
        raise ValueError("empty reward sequence")
    out = [0.0] * len(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + discount * acc
        out[i] = acc
    return out


def alignment_score(world: WorldGraph, path: list[int], reference: list[int],
                    radius: float) -> float:
    return ndtw(world, path, reference, radius)


def compute_reward(world: WorldGraph, ep: EpisodeSpec, prev_state: AgentState,
                   action_was_stop: bool, new_state: AgentState,
                   alignment_before: float, alignment_after: float,
                   cfg: RLConfig, target_node: int, scale: float,
                   success_radius: float = 1.0) -> float:
    """Stop: +success_reward within the radius of the target, else its negative.
    Move: scaled reduction of geodesic distance to the target plus (for path
    tasks) the change in alignment with the expert trajectory."""
    if action_was_stop:
        at_target = world.geodesic(new_state.node, target_node) <= success_radius
        return cfg.success_reward if at_target else -cfg.success_reward
    reduced = world.geodesic(prev_state.node, target_node) - world.geodesic(new_state.node, target_node)
    reward = reduced / scale
    if ep.task_kind in ("fine_grained", "long_horizon"):
        reward += alignment_after - alignment_before
    return reward


def _phase_targets(ep: EpisodeSpec) -> list[int]:
    if ep.task_kind == "back":
        return [ep.midpoint, ep.start.node]
    return [ep.goal_node]


def rollout(model: NavModel, world: WorldGraph, ep: EpisodeSpec, mode: str,
            rng: Rng | None, cfg: RLConfig, success_radius: float = 1.0) -> Rollout:
    """Run one episode under the policy. Teacher mode follows the expert
    trajectory (including the return-trip double stop); sample and greedy
    modes act from the predicted distribution. The return-trip task switches
    its reward target after a correct midpoint stop and ends on a wrong one.
    """
    if mode not in ROLLOUT_MODES:
        raise ValueError(f"unknown rollout mode {mode!r}")
    cfgm = model.config

    teacher_actions = None
    if mode == "teacher":
        teacher_actions = [s.action for s in expert_trajectory(world, ep, cfgm.k_views,
                                                               cfgm.mrm_class_count)]

    targets = _phase_targets(ep)
    phase = 0
    scale = max(world.geodesic(ep.start.node, targets[0]), success_radius) \
        if cfg.reward_scale is None else cfg.reward_scale

    if cfg.freeze_unimodal:
        with ad.no_grad():
            text = model.encode_text(ep.instruction_tokens)
            memories = model.precompute_text_memories(text) \
                if cfgm.encoder_variant == "encdec" else None
    else:
        text = model.encode_text(ep.instruction_tokens)
        memories = model.precompute_text_memories(text) \
            if cfgm.encoder_variant == "encdec" else None

    state = AgentState(ep.start.node, ep.start.heading)
    cache = model.history_cache()
    path = [state.node]
    steps: list[RolloutStep] = []
    terminal = "budget"
    align = alignment_score(world, path, ep.expert_path, success_radius) \
        if ep.task_kind in ("fine_grained", "long_horizon") else 0.0
    budget = min(cfg.max_steps, cfgm.max_history_len)

    for t in range(budget):
        pano = render_panorama(world, state, cfgm.k_views, cfgm.mrm_class_count)
        if cfg.freeze_unimodal:
            with ad.no_grad():
                h = cache.encode()
                o = model.embed_observation(pano)
        else:
            h = cache.encode()
            o = model.embed_observation(pano)
        if cfgm.encoder_variant == "encdec":
            enc = model.cross_modal_encode_encdec(memories, h, o)
        else:
            enc = model.cross_modal_encode(text, h, o)
        logits = model.head_sap_logits(enc)
        mask = pano.action_mask()
        probs = ad.softmax(logits, axis=-1, mask=mask)

        if mode == "teacher":
            action = teacher_actions[t] if t < len(teacher_actions) else pano.stop_index
        elif mode == "greedy":
            action = int(np.argmax(probs.values))
        else:
            u = rng.uniform()
            acc = 0.0
            action = int(np.flatnonzero(mask)[-1])
            for i in np.flatnonzero(mask):
                acc += probs.values[i]
                if u < acc:
                    action = int(i)
                    break

        log_prob = ad.scale(ad.cross_entropy(logits, action, mask=mask), -1.0)
        value = model.head_critic(enc)
        ent = ad.entropy(logits, mask=mask) if cfg.entropy_weight > 0 else None
        was_stop = action == pano.stop_index

        if was_stop:
            new_state = state
        else:
            new_state = world_step(world, state, action, pano)
            path.append(new_state.node)
        align_after = alignment_score(world, path, ep.expert_path, success_radius) \
            if ep.task_kind in ("fine_grained", "long_horizon") else 0.0
        reward = compute_reward(world, ep, state, was_stop, new_state, align, align_after,
                                cfg, targets[phase], scale, success_radius)
        align = align_after

        view = pano.views[action] if action < pano.stop_index else None
        hist_step = HistoryStep(pano,
                                view.rel_heading if view else 0.0,
                                view.rel_elevation if view else 0.0)
        if cfg.freeze_unimodal:
            with ad.no_grad():
                cache.append(hist_step)
        else:
            cache.append(hist_step)
        steps.append(RolloutStep(
            state_summary=enc.x_cls().values.copy().reshape(-1),
            action=action,
            log_prob=log_prob,
            reward=reward,
            value=value,
            alignment=align_after,
            entropy=ent,
            was_stop=was_stop,
        ))
        state = new_state

        if was_stop:
            if ep.task_kind == "back" and phase == 0:
                at_mid = world.geodesic(state.node, targets[0]) <= success_radius
                if at_mid:
                    phase = 1
                    continue
                terminal = "wrong_stop"
                break
            terminal = "stopped"
            break

    return Rollout(steps=steps, terminal=terminal, path=path, episode=ep)


def rollout_back_task(model: NavModel, world: WorldGraph, ep: EpisodeSpec, mode: str,
                      rng: Rng | None, cfg: RLConfig, success_radius: float = 1.0) -> Rollout:
    if ep.task_kind != "back":
        raise ValueError(f"episode task is {ep.task_kind!r}, not 'back'")
    return rollout(model, world, ep, mode, rng, cfg, success_radius)


# ---------------------------------------------------------------------------
# update


def finetune_loss(rl: Rollout | None, il: Rollout | None, cfg: RLConfig):
    """Combined objective: policy-gradient term with the advantage held
    constant, critic regression to the returns, and the teacher-forced
    imitation term weighted by il_weight."""
    total = None
    parts = {"actor": 0.0, "critic": 0.0, "il": 0.0, "mean_reward": 0.0}

    def accumulate(term):
        nonlocal total
        total = term if total is None else ad.add(total, term)

    if rl is not None and rl.steps and cfg.use_rl:
        returns = discounted_returns(rl.rewards(), cfg.discount)
        t_count = len(rl.steps)
        actor = None
        for s, ret in zip(rl.steps, returns):
            advantage = ret - float(s.value.values)
            term = ad.scale(s.log_prob, -advantage / t_count)
            actor = term if actor is None else ad.add(actor, term)
        accumulate(actor)
        critic = None
        for s, ret in zip(rl.steps, returns):
            diff = ad.sum_squared_error(ad.reshape(s.value, (1,)), np.array([ret]))
            term = ad.scale(diff, cfg.critic_weight / t_count)
            critic = term if critic is None else ad.add(critic, term)
        accumulate(critic)
        if cfg.entropy_weight > 0:
            for s in rl.steps:
                accumulate(ad.scale(s.entropy, -cfg.entropy_weight / t_count))
        parts["actor"] = float(actor.values)
        parts["critic"] = float(critic.values)
        parts["mean_reward"] = sum(rl.rewards()) / t_count

    if il is not None and il.steps and cfg.use_il and cfg.il_weight > 0:
        t_star = len(il.steps)
        il_term = None
        for s in il.steps:
            term = ad.scale(s.log_prob, -cfg.il_weight / t_star)
            il_term = term if il_term is None else ad.add(il_term, term)
        accumulate(il_term)
        parts["il"] = float(il_term.values)

    if total is None:
        raise ValueError("no loss terms: both rollouts empty or disabled")
    return total, parts


def make_optimizer(model: NavModel, cfg: RLConfig) -> AdamW:
    opt = AdamW(model.parameter_groups(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.freeze_unimodal:
        for group in model.UNIMODAL_GROUPS:
            if group in opt.groups:
                opt.set_lr_mult(group, 0.0)
    return opt


def a3c_il_update(model: NavModel, optimizer: AdamW, world: WorldGraph, ep: EpisodeSpec,
                  cfg: RLConfig, rng: Rng, success_radius: float = 1.0) -> dict:
    """One combined update for a single episode: sampled rollout for the RL
    terms, teacher rollout for imitation, one optimizer step."""
    model.zero_grad()
    tape = Tape()
    with tape:
        rl = rollout(model, world, ep, "sample", rng, cfg, success_radius) if cfg.use_rl else None
        il = rollout(model, world, ep, "teacher", rng, cfg, success_radius) if cfg.use_il else None
        loss, parts = finetune_loss(rl, il, cfg)
    backward(tape, loss)
    ad.clip_grad_norm(model.params, cfg.grad_clip)
    optimizer.step()
    parts["loss"] = float(loss.values)
    return parts


# ---------------------------------------------------------------------------
# evaluation and the training loop


def evaluate_policy(model: NavModel, data: list[tuple[EpisodeSpec, WorldGraph]],
                    success_radius: float = 1.0, max_steps: int = 15,
                    mode: str = "greedy", rng: Rng | None = None) -> MetricsReport:
    """Greedy single-run inference over a dataset, scored with the full
    metric suite against the expert paths."""
    cfg = RLConfig(max_steps=max_steps)
    episodes = []
    for ep, world in data:
        ro = rollout(model, world, ep, mode, rng, cfg, success_radius)
        episodes.append(EvaluatedEpisode(
            predicted_path=ro.path,
            reference_path=ep.expert_path,
            world=world,
            success_radius=success_radius,
            task_kind=ep.task_kind,
            episode_id=ep.episode_id,
        ))
    return aggregate(episodes)


@dataclass
class FinetuneResult:
    curves: list[dict]
    best_unseen_spl: float
    best_iteration: int
    iterations_to_threshold: dict[float, int]


def finetune(model: NavModel, data: list[tuple[EpisodeSpec, WorldGraph]], cfg: RLConfig,
             rng: Rng, iters: int, batch_size: int = 2, success_radius: float = 1.0,
             val_seen: list | None = None, val_unseen: list | None = None,
             eval_every: int = 500, eval_episodes: int = 60,
             sr_thresholds: tuple[float, ...] = (), stop_at_threshold: float | None = None,
             log_every: int = 0, progress=None) -> FinetuneResult:
    """Mini-batched mixed RL+IL training. Unimodal parameter groups stay
    frozen by default; the best parameters by unseen-split SPL are restored
    at the end when validation data is provided.
    """
    if not data:
        raise ValueError("empty training dataset")
    opt = make_optimizer(model, cfg)
    batch_rng = rng.substream("finetune-batch")
    act_rng = rng.substream("finetune-action")
    curves: list[dict] = []
    best_spl = -1.0
    best_iter = -1
    best_values = None
    to_threshold: dict[float, int] = {}
    window: list[dict] = []

    def run_eval(it: int) -> None:
        nonlocal best_spl, best_iter, best_values
        mean_parts = {k: (sum(w[k] for w in window) / len(window) if window else 0.0)
                      for k in ("actor", "critic", "il", "mean_reward")}
        for split, dataset in (("val_seen", val_seen), ("val_unseen", val_unseen)):
            if not dataset:
                continue
            subset = dataset[:eval_episodes]
            report = evaluate_policy(model, subset, success_radius, cfg.max_steps)
            row = {"iteration": it, "split": split,
                   "SR": report.means["SR"], "SPL": report.means["SPL"],
                   "mean_reward": mean_parts["mean_reward"],
                   "actor_loss": mean_parts["actor"],
                   "critic_loss": mean_parts["critic"],
                   "il_loss": mean_parts["il"]}
            curves.append(row)
            if split == "val_unseen":
                for thr in sr_thresholds:
                    if report.means["SR"] >= thr and thr not in to_threshold:
                        to_threshold[thr] = it
                if report.means["SPL"] > best_spl:
                    best_spl = report.means["SPL"]
                    best_iter = it
                    best_values = model.copy_values()
        window.clear()

    for it in range(iters):
        idx = batch_rng.integers(0, len(data), batch_size)
        model.zero_grad()
        tape = Tape()
        with tape:
            total = None
            merged = {"actor": 0.0, "critic": 0.0, "il": 0.0, "mean_reward": 0.0}
            for i in idx:
                ep, world = data[int(i)]
                rl = rollout(model, world, ep, "sample", act_rng, cfg, success_radius) \
                    if cfg.use_rl else None
                il = rollout(model, world, ep, "teacher", act_rng, cfg, success_radius) \
                    if cfg.use_il else None
                loss, parts = finetune_loss(rl, il, cfg)
                scaled = ad.scale(loss, 1.0 / batch_size)
                total = scaled if total is None else ad.add(total, scaled)
                for k in merged:
                    merged[k] += parts[k] / batch_size
        backward(tape, total)
        ad.clip_grad_norm(model.params, cfg.grad_clip)
        opt.step()
        window.append(merged)
        if eval_every and (it + 1) % eval_every == 0:
            run_eval(it + 1)
            if log_every and progress:
                progress(it + 1, iters, curves[-1] if curves else None)
            if stop_at_threshold is not None and stop_at_threshold in to_threshold:
                break

    if (val_seen or val_unseen) and eval_every and iters % eval_every != 0:
        run_eval(iters)
    if best_values is not None:
        model.load_values(best_values)
    return FinetuneResult(curves=curves, best_unseen_spl=best_spl,
                          best_iteration=best_iter, iterations_to_threshold=to_threshold)


def write_learning_curve_csv(path, rows: list[dict]) -> None:
    cols = ["iteration", "split", "SR", "SPL", "mean_reward",
            "actor_loss", "critic_loss", "il_loss"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for r in rows:
            writer.writerow([r["iteration"], r["split"]] +
                            [f"{r[c]:.6f}" for c in cols[2:]])
