"""Release-gate gradient verification: every differentiable op and every
training loss is checked against central finite differences on randomized
small instances, reporting the worst relative error per op.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from . import pretrain as P
from .autodiff import DiffTensor, Tape, backward, finite_diff_grad
from .finetune import RLConfig, discounted_returns, finetune_loss, rollout
from .model import ModelConfig, NavModel
from .pretrain import MaskingConfig, SampleCache
from .rng import Rng
from .world import generate_world, make_dataset

DEFAULT_TOLERANCE = 1e-4
FD_STEP = 1e-5


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-3)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def _check(build_loss, x: DiffTensor) -> float:
    """Backward gradient of build_loss(x) vs finite differences on x."""
    x.zero_grad()
    tape = Tape()
    with tape:
        loss = build_loss(x)
    backward(tape, loss)
    fd = finite_diff_grad(build_loss, x, FD_STEP)
    return _rel_err(x.grad, fd)


def _op_cases():
    """name -> (input factory, loss builder); builders call ops through the
    module so injected (monkeypatched) backward bugs are exercised."""

    def weighted(out, w):
        return ad.sum_all(ad.mul(out, DiffTensor(w)))

    def case_matmul(rng):
        x = DiffTensor(rng.normal((3, 4)), requires_grad=True)
        b = rng.normal((4, 2))
        return x, lambda t: ad.sum_all(ad.matmul(t, DiffTensor(b)))

    def case_linear(rng):
        x = DiffTensor(rng.normal((3, 4)), requires_grad=True)
        w, b = rng.normal((4, 5)), rng.normal((5,))
        return x, lambda t: ad.sum_all(ad.linear(t, DiffTensor(w), DiffTensor(b)))

    def case_add(rng):
        x = DiffTensor(rng.normal((3, 4)), requires_grad=True)
        o, w = rng.normal((3, 4)), rng.normal((3, 4))
        return x, lambda t: weighted(ad.add(t, DiffTensor(o)), w)

    def case_sub(rng):
        x = DiffTensor(rng.normal((3, 4)), requires_grad=True)
        o, w = rng.normal((3, 4)), rng.normal((3, 4))
        return x, lambda t: weighted(ad.sub(DiffTensor(o), t), w)

    def case_mul(rng):
        x = DiffTensor(rng.normal((3, 4)), requires_grad=True)
        o, w = rng.normal((3, 4)), rng.normal((3, 4))
        return x, lambda t: weighted(ad.mul(t, DiffTensor(o)), w)

    def case_scale(rng):
        x = DiffTensor(rng.normal((5,)), requires_grad=True)
        w = rng.normal((5,))
        return x, lambda t: weighted(ad.scale(t, 1.7), w)

    def case_gelu(rng):
        x = DiffTensor(rng.normal((6,)), requires_grad=True)
        w = rng.normal((6,))
        return x, lambda t: weighted(ad.gelu(t), w)

    def case_layer_norm(rng):
        x = DiffTensor(rng.normal((3, 6)) * 2, requires_grad=True)
        g, b, w = rng.normal((6,)), rng.normal((6,)), rng.normal((3, 6))
        return x, lambda t: weighted(ad.layer_norm(t, DiffTensor(g), DiffTensor(b), 1e-5), w)

    def case_softmax(rng):
        x = DiffTensor(rng.normal((3, 5)), requires_grad=True)
        keep = np.ones((3, 5), dtype=bool)
        keep[:, 4] = False
        w = rng.normal((3, 5))
        return x, lambda t: weighted(ad.softmax(t, axis=-1, mask=keep), w)

    def case_mean_pool(rng):
        x = DiffTensor(rng.normal((4, 3)), requires_grad=True)
        w = rng.normal((3,))
        return x, lambda t: weighted(ad.mean_pool(t, axis=0), w)

    def case_embedding(rng):
        x = DiffTensor(rng.normal((5, 3)), requires_grad=True)
        w = rng.normal((4, 3))
        return x, lambda t: weighted(ad.embedding_lookup(t, [0, 0, 2, 4]), w[:4])

    def case_gather(rng):
        x = DiffTensor(rng.normal((5, 3)), requires_grad=True)
        w = rng.normal((3, 3))
        return x, lambda t: weighted(ad.gather_rows(t, [1, 1, 4]), w)

    def case_take_per_row(rng):
        x = DiffTensor(rng.normal((3, 4, 2)), requires_grad=True)
        w = rng.normal((3, 2))
        return x, lambda t: weighted(ad.take_per_row(t, [0, 3, 2]), w)

    def case_structural(rng):
        x = DiffTensor(rng.normal((4, 6)), requires_grad=True)
        w = rng.normal((2, 12))

        def f(t):
            r = ad.reshape(t, (2, 2, 6))
            s = ad.swapaxes(r, 0, 1)
            c = ad.concat([ad.slice_rows(s, 0, 1), ad.slice_rows(s, 1, 2)], axis=0)
            return weighted(ad.reshape(c, (2, 12)), w)

        return x, f

    def case_stack(rng):
        x = DiffTensor(rng.normal((4,)), requires_grad=True)
        w = rng.normal((2, 4))
        return x, lambda t: weighted(ad.stack([t, ad.scale(t, 0.5)], axis=0), w)

    def case_cross_entropy(rng):
        x = DiffTensor(rng.normal((7,)), requires_grad=True)
        keep = np.array([True, True, False, True, True, True, False])
        return x, lambda t: ad.cross_entropy(t, 3, mask=keep)

    def case_soft_cross_entropy(rng):
        x = DiffTensor(rng.normal((2, 5)), requires_grad=True)
        q = np.abs(rng.normal((2, 5))) + 0.1
        q /= q.sum(axis=-1, keepdims=True)
        return x, lambda t: ad.soft_cross_entropy(t, q)

    def case_mse(rng):
        x = DiffTensor(rng.normal((6,)), requires_grad=True)
        y = rng.normal((6,))
        return x, lambda t: ad.mse(t, DiffTensor(y))

    def case_sum_squared(rng):
        x = DiffTensor(rng.normal((4,)), requires_grad=True)
        y = rng.normal((4,))
        return x, lambda t: ad.sum_squared_error(t, y)

    def case_entropy(rng):
        x = DiffTensor(rng.normal((6,)), requires_grad=True)
        keep = np.array([True] * 5 + [False])
        return x, lambda t: ad.entropy(t, mask=keep)

    def case_dropout(rng):
        x = DiffTensor(rng.normal((8,)), requires_grad=True)
        w = rng.normal((8,))
        seed = rng.integers(0, 10_000)
        return x, lambda t: weighted(ad.dropout(t, 0.4, Rng(seed)), w)

    def case_attention(rng):
        reg = {}
        p = nn.init_attention(reg, "a", 8, 2, rng)
        x = DiffTensor(rng.normal((4, 8)), requires_grad=True)
        mask = np.array([True, True, True, False])
        w = rng.normal((4, 8))
        return x, lambda t: weighted(nn.multi_head_attention(t, t, mask, p), w)

    def case_transformer_layer(rng):
        reg = {}
        p = nn.init_transformer_layer(reg, "l", 8, 2, 2, rng)
        x = DiffTensor(rng.normal((3, 8)), requires_grad=True)
        w = rng.normal((3, 8))
        return x, lambda t: weighted(nn.transformer_layer(t, None, p), w)

    def case_cross_modal_layer(rng):
        reg = {}
        p = nn.init_cross_modal_layer(reg, "x", 8, 2, 2, rng)
        text = rng.normal((3, 8))
        x = DiffTensor(rng.normal((4, 8)), requires_grad=True)
        w = rng.normal((4, 8))

        def f(t):
            _, vis = nn.cross_modal_layer(DiffTensor(text), None, t, None, p)
            return weighted(vis, w)

        return x, f

    def case_decoder_layer(rng):
        reg = {}
        p = nn.init_cross_modal_layer(reg, "x", 8, 2, 2, rng)
        mem = rng.normal((3, 8))
        x = DiffTensor(rng.normal((4, 8)), requires_grad=True)
        w = rng.normal((4, 8))
        return x, lambda t: weighted(
            nn.cross_modal_layer_decoder_variant(DiffTensor(mem), None, t, None, p), w)

    return {
        "matmul": case_matmul,
        "linear": case_linear,
        "add": case_add,
        "sub": case_sub,
        "mul": case_mul,
        "scale": case_scale,
        "gelu": case_gelu,
        "layer_norm": case_layer_norm,
        "softmax": case_softmax,
        "mean_pool": case_mean_pool,
        "embedding_lookup": case_embedding,
        "gather_rows": case_gather,
        "take_per_row": case_take_per_row,
        "structural": case_structural,
        "stack": case_stack,
        "cross_entropy": case_cross_entropy,
        "soft_cross_entropy": case_soft_cross_entropy,
        "mse": case_mse,
        "sum_squared_error": case_sum_squared,
        "entropy": case_entropy,
        "dropout": case_dropout,
        "attention": case_attention,
        "transformer_layer": case_transformer_layer,
        "cross_modal_layer": case_cross_modal_layer,
        "decoder_layer": case_decoder_layer,
    }


def _tiny_setup(seed: int = 990):
    config = ModelConfig(d_model=8, head_count=2, n_language_layers=1, n_panoramic_layers=1,
                         n_cross_layers=1, k_views=4, view_feature_dim=6,
                         max_instruction_len=40, max_history_len=12)
    worlds = [generate_world(400 + i, 10, 2, "seen", max_degree=4) for i in range(2)]
    episodes = make_dataset(worlds, 3, "fine_grained", Rng(seed), hop_min=2, hop_max=3)
    cache = {w.seed: w for w in worlds}
    data = [(ep, cache[ep.world_seed]) for ep in episodes]
    model = NavModel(config, Rng(seed + 1))
    samples = SampleCache(data, config.k_views, config.mrm_class_count)
    return model, data, [samples.get(i) for i in range(len(samples))]


def _sample_param_entries(model: NavModel, rng: Rng, per_check: int = 4,
                          trainable_only: bool = False) -> list[tuple[str, tuple]]:
    names = sorted(model.params)
    if trainable_only:
        skip = model.UNIMODAL_GROUPS
        names = [n for n in names if n.split(".")[0] not in skip]
    out = []
    for _ in range(per_check):
        name = names[rng.integers(0, len(names))]
        arr = model.params[name].values
        flat = rng.integers(0, arr.size)
        out.append((name, np.unravel_index(flat, arr.shape) if arr.ndim else ()))
    return out


def _check_loss_entries(model: NavModel, build_loss, entries) -> float:
    model.zero_grad()
    tape = Tape()
    with tape:
        loss = build_loss()
    backward(tape, loss)
    worst = 0.0
    with ad.no_grad():
        for name, idx in entries:
            p = model.params[name]
            ad_grad = p.grad[idx] if idx else float(p.grad)
            orig = p.values[idx]
            p.values[idx] = orig + FD_STEP
            up = float(build_loss().values)
            p.values[idx] = orig - FD_STEP
            down = float(build_loss().values)
            p.values[idx] = orig
            fd = (up - down) / (2 * FD_STEP)
            denom = max(abs(ad_grad), abs(fd), 1e-3)
            worst = max(worst, abs(ad_grad - fd) / denom)
    return worst


def _loss_cases(model, data, samples):
    masking = MaskingConfig()

    def mk(task):
        def build(rng_seed):
            def loss():
                return P.task_loss(model, task, samples[:2], 0, Rng(rng_seed), masking)

            return loss

        return build

    cases = {t: mk(t) for t in ("mlm", "mrm", "itm", "sap", "sar", "sprel")}

    def actor_build(rng_seed):
        cfg = RLConfig(max_steps=6, il_weight=0.2, critic_weight=0.0)
        ep, world = data[rng_seed % len(data)]
        frozen = {}

        def loss():
            rl = rollout(model, world, ep, "sample", Rng(rng_seed), cfg)
            il = rollout(model, world, ep, "teacher", None, cfg)
            if "adv" not in frozen:
                rets = discounted_returns(rl.rewards(), cfg.discount)
                frozen["adv"] = [r - float(s.value.values) for s, r in zip(rl.steps, rets)]
            total = None
            for s, adv in zip(rl.steps, frozen["adv"]):
                term = ad.scale(s.log_prob, -adv / len(rl.steps))
                total = term if total is None else ad.add(total, term)
            for s in il.steps:
                total = ad.add(total, ad.scale(s.log_prob, -cfg.il_weight / len(il.steps)))
            return total

        return loss

    def critic_build(rng_seed):
        cfg = RLConfig(max_steps=6)
        ep, world = data[rng_seed % len(data)]
        frozen = {}

        def loss():
            rl = rollout(model, world, ep, "sample", Rng(rng_seed), cfg)
            if "ret" not in frozen:
                frozen["ret"] = discounted_returns(rl.rewards(), cfg.discount)
            total = None
            for s, ret in zip(rl.steps, frozen["ret"]):
                diff = ad.sum_squared_error(ad.reshape(s.value, (1,)), np.array([ret]))
                term = ad.scale(diff, 1.0 / len(rl.steps))
                total = term if total is None else ad.add(total, term)
            return total

        return loss

    cases["actor_frozen_advantage"] = actor_build
    cases["critic"] = critic_build
    return cases


def run_gradcheck(instances: int = 20, tolerance: float = DEFAULT_TOLERANCE,
                  progress=None) -> tuple[list[dict], bool]:
    """Returns (rows, all_passed); each row reports the op's worst relative
    error across `instances` randomized checks."""
    rows = []
    for name, factory in _op_cases().items():
        worst = 0.0
        for i in range(instances):
            rng = Rng(17_000 + 31 * i + len(name))
            x, build = factory(rng)
            worst = max(worst, _check(build, x))
        rows.append({"op": name, "instances": instances,
                     "max_rel_err": worst, "passed": worst < tolerance})
        if progress:
            progress(rows[-1])

    model, data, samples = _tiny_setup()
    entry_rng = Rng(55_000)
    for name, builder in _loss_cases(model, data, samples).items():
        trainable_only = name in ("actor_frozen_advantage", "critic")
        worst = 0.0
        for i in range(instances):
            build = builder(23_000 + i)
            entries = _sample_param_entries(model, entry_rng, per_check=3,
                                            trainable_only=trainable_only)
            worst = max(worst, _check_loss_entries(model, build, entries))
        rows.append({"op": f"loss/{name}", "instances": instances,
                     "max_rel_err": worst, "passed": worst < tolerance})
        if progress:
            progress(rows[-1])
    return rows, all(r["passed"] for r in rows)
