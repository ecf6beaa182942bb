"""The navigation network: instruction encoder, observation embedding, the
four history encoders (hierarchical, flattened, temporal-only, recurrent), a
dual-stream cross-modal encoder with an encoder-decoder variant, prediction
heads for every training objective, and binary checkpoint serialization.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import DiffTensor
from .rng import Rng
from .world import (
    HistoryStep,
    RenderedPanorama,
    embed_angle,
    raw_feature_dim,
    vocab_size,
)

HISTORY_VARIANTS = ("hierarchical", "flattened", "temporal_only", "recurrent")
ENCODER_VARIANTS = ("full", "encdec")

TYPE_TEXT, TYPE_OBSERVATION, TYPE_HISTORY = 0, 1, 2


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    """Desk-scale defaults; full_size() mirrors the large-model layout
    (9 language / 2 panoramic / 4 cross-modal layers, 36 views)."""

    d_model: int = 32
    head_count: int = 4
    n_language_layers: int = 2
    n_panoramic_layers: int = 1
    n_cross_layers: int = 2
    k_views: int = 8
    vocab_size: int = field(default_factory=vocab_size)
    max_instruction_len: int = 80
    max_history_len: int = 24
    view_feature_dim: int = 16
    raw_feature_dim: int = field(default_factory=raw_feature_dim)
    mrm_class_count: int = 16
    history_variant: str = "hierarchical"
    encoder_variant: str = "full"
    ffn_mult: int = 4
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_model % self.head_count:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.head_count} heads")
        if self.history_variant not in HISTORY_VARIANTS:
            raise ValueError(f"unknown history variant {self.history_variant!r}")
        if self.encoder_variant not in ENCODER_VARIANTS:
            raise ValueError(f"unknown encoder variant {self.encoder_variant!r}")

    @classmethod
    def full_size(cls, **overrides) -> "ModelConfig":
        base = dict(n_language_layers=9, n_panoramic_layers=2, n_cross_layers=4,
                    k_views=36, d_model=768, head_count=12)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class EncodedState:
    """Cross-modal outputs for text, history and observation streams."""

    text: DiffTensor
    history: DiffTensor
    observation: DiffTensor

    def x_cls(self) -> DiffTensor:
        return ad.slice_rows(self.text, 0, 1)

    def h_cls(self) -> DiffTensor:
        return ad.slice_rows(self.history, 0, 1)


@dataclass
class HeadParams:
    w1: DiffTensor
    b1: DiffTensor
    w2: DiffTensor
    b2: DiffTensor


def _two_layer(x: DiffTensor, p: HeadParams) -> DiffTensor:
    return ad.linear(ad.gelu(ad.linear(x, p.w1, p.b1)), p.w2, p.b2)


class NavModel:
    """History-aware multimodal transformer policy over graph panoramas."""

    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        self.params: dict[str, DiffTensor] = {}
        self.text_encode_calls = 0
        self._build(rng.substream("model-init"))

    # ------------------------------------------------------------------
    # construction

    def _param(self, name: str, values: np.ndarray) -> DiffTensor:
        t = DiffTensor(values, requires_grad=True)
        self.params[name] = t
        return t

    def _build(self, rng: Rng) -> None:
        cfg = self.config
        d, f = cfg.d_model, cfg.view_feature_dim
        reg = self.params

        def xavier(fan_in, fan_out):
            return rng.normal((fan_in, fan_out), std=np.sqrt(2.0 / (fan_in + fan_out)))

        self.word_emb = self._param("text.word_emb", rng.normal((cfg.vocab_size, d), std=0.05))
        self.pos_emb = self._param("text.pos_emb", rng.normal((cfg.max_instruction_len, d), std=0.05))
        self.type_emb = self._param("embed.type_emb", rng.normal((3, d), std=0.05))
        self.text_layers = [
            nn.init_transformer_layer(reg, f"text.layer{i}", d, cfg.head_count, cfg.ffn_mult, rng)
            for i in range(cfg.n_language_layers)
        ]

        self.view_w1 = self._param("view_encoder.w1", xavier(cfg.raw_feature_dim, f))
        self.view_b1 = self._param("view_encoder.b1", np.zeros(f))
        self.view_w2 = self._param("view_encoder.w2", xavier(f, f))
        self.view_b2 = self._param("view_encoder.b2", np.zeros(f))

        self.obs_wv = self._param("obs.wv", xavier(f, d))
        self.obs_ln_v = nn.init_layer_norm(reg, "obs.ln_v", d)
        self.obs_wa = self._param("obs.wa", xavier(4, d))
        self.obs_ln_a = nn.init_layer_norm(reg, "obs.ln_a", d)
        self.nav_emb = self._param("obs.nav_emb", rng.normal((3, d), std=0.05))
        self.stop_feature = self._param("obs.stop_feature", rng.normal((f,), std=0.05))

        self.hist_wv = self._param("hist.wv", xavier(d, d))
        self.hist_ln_v = nn.init_layer_norm(reg, "hist.ln_v", d)
        self.hist_wa = self._param("hist.wa", xavier(4, d))
        self.hist_ln_a = nn.init_layer_norm(reg, "hist.ln_a", d)
        self.step_emb = self._param("hist.step_emb", rng.normal((cfg.max_history_len + 1, d), std=0.05))
        self.hist_cls = self._param("hist.cls", np.zeros(d))

        variant = cfg.history_variant
        self.pano_layers = []
        self.temporal_layers = []
        self.recurrent_cell = None
        if variant == "hierarchical":
            self.pano_layers = [
                nn.init_transformer_layer(reg, f"hist.pano{i}", d, cfg.head_count, cfg.ffn_mult, rng)
                for i in range(cfg.n_panoramic_layers)
            ]
        if variant in ("hierarchical", "flattened", "temporal_only"):
            self.temporal_layers = [
                nn.init_transformer_layer(reg, f"hist.temporal{i}", d, cfg.head_count, cfg.ffn_mult, rng)
                for i in range(cfg.n_panoramic_layers)
            ]
        if variant == "recurrent":
            self.recurrent_state = self._param("hist.recurrent_state", rng.normal((d,), std=0.05))
            self.recurrent_cell = nn.init_transformer_layer(
                reg, "hist.recurrent_cell", d, cfg.head_count, cfg.ffn_mult, rng)

        self.cross_layers = [
            nn.init_cross_modal_layer(reg, f"cross.layer{i}", d, cfg.head_count, cfg.ffn_mult, rng)
            for i in range(cfg.n_cross_layers)
        ]

        def head(name, in_dim, out_dim):
            return HeadParams(
                w1=self._param(f"heads.{name}.w1", xavier(in_dim, d)),
                b1=self._param(f"heads.{name}.b1", np.zeros(d)),
                w2=self._param(f"heads.{name}.w2", xavier(d, out_dim)),
                b2=self._param(f"heads.{name}.b2", np.zeros(out_dim)),
            )

        self.sap_head = head("sap", d, 1)
        self.sar_head = head("sar", d, 2)
        self.sprel_head = head("sprel", 2 * d, 2)
        self.mlm_head = head("mlm", d, cfg.vocab_size)
        self.mrm_head = head("mrm", d, cfg.mrm_class_count)
        self.itm_head = head("itm", d, 1)
        self.critic_head = head("critic", d, 1)

    # ------------------------------------------------------------------
    # parameter plumbing

    def parameter_groups(self) -> dict[str, dict[str, DiffTensor]]:
        groups: dict[str, dict[str, DiffTensor]] = {}
        for name, t in self.params.items():
            groups.setdefault(name.split(".")[0], {})[name] = t
        return groups

    UNIMODAL_GROUPS = ("text", "embed", "view_encoder", "obs", "hist")

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            self.params[name].values[...] = arr

    # ------------------------------------------------------------------
    # unimodal encoders

    def encode_text(self, token_ids, keep: np.ndarray | None = None) -> DiffTensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        cfg = self.config
        if ids.size > cfg.max_instruction_len:
            raise ValueError(f"instruction length {ids.size} exceeds {cfg.max_instruction_len}")
        if ids.min(initial=0) < 0 or ids.max(initial=0) >= cfg.vocab_size:
            raise ValueError(f"unknown token id in {ids}")
        self.text_encode_calls += 1
        x = ad.embedding_lookup(self.word_emb, ids)
        x = ad.add(x, ad.slice_rows(self.pos_emb, 0, ids.size))
        x = ad.add(x, ad.slice_rows(self.type_emb, TYPE_TEXT, TYPE_TEXT + 1))
        for layer in self.text_layers:
            x = nn.transformer_layer(x, keep, layer)
        return x

    def encode_view_features(self, raw) -> DiffTensor:
        """Trainable stand-in for an image backbone: raw renderer features to
        view features, frozen as its own group during stage-1 training."""
        x = raw if isinstance(raw, DiffTensor) else DiffTensor(np.asarray(raw, dtype=np.float64))
        h = ad.gelu(ad.linear(x, self.view_w1, self.view_b1))
        return ad.linear(h, self.view_w2, self.view_b2)

    def _observation_tokens(self, feats: DiffTensor, angles: np.ndarray,
                            nav_types: np.ndarray) -> DiffTensor:
        """Token = LN(W_v v) + LN(W_a angle) + navigable-type + modality-type."""
        proj_v = ad.layer_norm(ad.linear(feats, self.obs_wv), self.obs_ln_v.gain, self.obs_ln_v.bias)
        proj_a = ad.layer_norm(ad.linear(DiffTensor(angles), self.obs_wa),
                               self.obs_ln_a.gain, self.obs_ln_a.bias)
        tok = ad.add(proj_v, proj_a)
        tok = ad.add(tok, ad.embedding_lookup(self.nav_emb, nav_types))
        return ad.add(tok, ad.slice_rows(self.type_emb, TYPE_OBSERVATION, TYPE_OBSERVATION + 1))

    def _panorama_features(self, raws: np.ndarray) -> DiffTensor:
        """Encode real views and append the learned stop feature.

        raws: (K, raw_dim) or (B, K, raw_dim); output gains the stop slot.
        """
        feats = self.encode_view_features(raws)
        f = self.config.view_feature_dim
        if raws.ndim == 2:
            stop = ad.reshape(self.stop_feature, (1, f))
            return ad.concat([feats, stop], axis=0)
        b = raws.shape[0]
        stop = ad.reshape(self.stop_feature, (1, 1, f))
        stop = ad.add(stop, DiffTensor(np.zeros((b, 1, f))))
        return ad.concat([feats, stop], axis=1)

    def embed_observation(self, pano: RenderedPanorama) -> DiffTensor:
        """Panorama to K+1 observation tokens (stop token last)."""
        raws = pano.raw_stack()[:-1]
        feats = self._panorama_features(raws)
        return self._observation_tokens(feats, pano.angle_stack(), pano.nav_types())

    # ------------------------------------------------------------------
    # history encoders

    def _check_history(self, history: list[HistoryStep]) -> None:
        if len(history) > self.config.max_history_len:
            raise ValueError(f"history length {len(history)} exceeds {self.config.max_history_len}")

    def _history_cls(self) -> DiffTensor:
        return ad.reshape(self.hist_cls, (1, self.config.d_model))

    def _temporal_wrap(self, pooled: DiffTensor, history: list[HistoryStep]) -> DiffTensor:
        """Per-step temporal token: LN(W_v v) + LN(W_a turned-angle) + step + type."""
        t1 = len(history)
        act = np.stack([s.action_angle() for s in history])
        tok = ad.layer_norm(ad.linear(pooled, self.hist_wv), self.hist_ln_v.gain, self.hist_ln_v.bias)
        ang = ad.layer_norm(ad.linear(DiffTensor(act), self.hist_wa),
                            self.hist_ln_a.gain, self.hist_ln_a.bias)
        tok = ad.add(tok, ang)
        tok = ad.add(tok, ad.embedding_lookup(self.step_emb, np.arange(t1)))
        return ad.add(tok, ad.slice_rows(self.type_emb, TYPE_HISTORY, TYPE_HISTORY + 1))

    def _temporal_wrap_single(self, pooled: DiffTensor, step: HistoryStep,
                              index: int) -> DiffTensor:
        act = step.action_angle().reshape(1, 4)
        tok = ad.layer_norm(ad.linear(pooled, self.hist_wv), self.hist_ln_v.gain, self.hist_ln_v.bias)
        ang = ad.layer_norm(ad.linear(DiffTensor(act), self.hist_wa),
                            self.hist_ln_a.gain, self.hist_ln_a.bias)
        tok = ad.add(tok, ang)
        tok = ad.add(tok, ad.embedding_lookup(self.step_emb, np.array([index])))
        return ad.add(tok, ad.slice_rows(self.type_emb, TYPE_HISTORY, TYPE_HISTORY + 1))

    def _recurrent_update(self, state: DiffTensor, panorama: RenderedPanorama) -> DiffTensor:
        cell = self.recurrent_cell
        raws = panorama.raw_stack()[:-1]
        feats = self._panorama_features(raws)
        tokens = self._observation_tokens(feats, panorama.angle_stack(), panorama.nav_types())
        att = nn.multi_head_attention(state, tokens, None, cell.attn)
        state = ad.layer_norm(ad.add(state, att), cell.ln_attn.gain, cell.ln_attn.bias)
        ff = ad.linear(ad.gelu(ad.linear(state, cell.ffn.w1, cell.ffn.b1)), cell.ffn.w2, cell.ffn.b2)
        return ad.layer_norm(ad.add(state, ff), cell.ln_ffn.gain, cell.ln_ffn.bias)

    def _temporal_stack(self, seq: DiffTensor, keep: np.ndarray | None) -> DiffTensor:
        for layer in self.temporal_layers:
            seq = nn.transformer_layer(seq, keep, layer)
        return seq

    def _stacked_panorama_tokens(self, history: list[HistoryStep]) -> DiffTensor:
        raws = np.stack([s.panorama.raw_stack()[:-1] for s in history])
        angles = np.stack([s.panorama.angle_stack() for s in history])
        navs = np.stack([s.panorama.nav_types() for s in history])
        feats = self._panorama_features(raws)
        return self._observation_tokens(feats, angles, navs)

    def encode_history_hierarchical(self, history: list[HistoryStep],
                                    keep: np.ndarray | None = None) -> DiffTensor:
        """Per-step panoramic self-attention (parameters shared across steps),
        pooled with an oriented-view residual, then a temporal stack over the
        step tokens behind a learned zero-initialized [cls]."""
        self._check_history(history)
        if not history:
            return self._history_cls()
        tokens = self._stacked_panorama_tokens(history)
        for layer in self.pano_layers:
            tokens = nn.transformer_layer(tokens, None, layer)
        pooled = ad.mean_pool(tokens, axis=1)
        oriented = ad.take_per_row(tokens, [s.panorama.oriented_index for s in history])
        step_tokens = self._temporal_wrap(ad.add(pooled, oriented), history)
        seq = ad.concat([self._history_cls(), step_tokens], axis=0)
        return self._temporal_stack(seq, keep)

    def encode_history_flattened(self, history: list[HistoryStep],
                                 keep: np.ndarray | None = None) -> DiffTensor:
        """Every view token of every step in one self-attention sequence."""
        self._check_history(history)
        if not history:
            return self._history_cls()
        t1 = len(history)
        k1 = self.config.k_views + 1
        tokens = self._stacked_panorama_tokens(history)
        steps = ad.reshape(ad.embedding_lookup(self.step_emb, np.arange(t1)),
                           (t1, 1, self.config.d_model))
        tokens = ad.add(tokens, steps)
        flat = ad.reshape(tokens, (t1 * k1, self.config.d_model))
        seq = ad.concat([self._history_cls(), flat], axis=0)
        return self._temporal_stack(seq, keep)

    def encode_history_temporal_only(self, history: list[HistoryStep],
                                     keep: np.ndarray | None = None) -> DiffTensor:
        """One token per step from the oriented view only."""
        self._check_history(history)
        if not history:
            return self._history_cls()
        raws = np.stack([s.panorama.views[s.panorama.oriented_index].raw for s in history])
        angles = np.stack([s.panorama.views[s.panorama.oriented_index].angle for s in history])
        navs = np.array([s.panorama.views[s.panorama.oriented_index].nav_type for s in history])
        feats = self.encode_view_features(raws)
        oriented = self._observation_tokens(feats, angles, navs)
        step_tokens = self._temporal_wrap(oriented, history)
        seq = ad.concat([self._history_cls(), step_tokens], axis=0)
        return self._temporal_stack(seq, keep)

    def encode_history_recurrent(self, history: list[HistoryStep],
                                 keep: np.ndarray | None = None) -> DiffTensor:
        """Single state token updated per step by attending that step's
        observation tokens; the output sequence is just the state."""
        self._check_history(history)
        state = ad.reshape(self.recurrent_state, (1, self.config.d_model))
        for s in history:
            state = self._recurrent_update(state, s.panorama)
        return state

    def encode_history(self, history: list[HistoryStep],
                       keep: np.ndarray | None = None) -> DiffTensor:
        variant = self.config.history_variant
        return {
            "hierarchical": self.encode_history_hierarchical,
            "flattened": self.encode_history_flattened,
            "temporal_only": self.encode_history_temporal_only,
            "recurrent": self.encode_history_recurrent,
        }[variant](history, keep)

    def history_cache(self) -> "HistoryCache":
        return HistoryCache(self)

    # ------------------------------------------------------------------
    # cross-modal encoders

    def cross_modal_encode(self, text: DiffTensor, history: DiffTensor, obs: DiffTensor,
                           text_keep: np.ndarray | None = None,
                           hist_keep: np.ndarray | None = None,
                           obs_keep: np.ndarray | None = None) -> EncodedState:
        n_hist = history.shape[0]
        n_obs = obs.shape[0]
        vis = ad.concat([history, obs], axis=0)
        vis_keep = None
        if hist_keep is not None or obs_keep is not None:
            hk = np.ones(n_hist, dtype=bool) if hist_keep is None else np.asarray(hist_keep, dtype=bool)
            ok = np.ones(n_obs, dtype=bool) if obs_keep is None else np.asarray(obs_keep, dtype=bool)
            vis_keep = np.concatenate([hk, ok])
        for layer in self.cross_layers:
            text, vis = nn.cross_modal_layer(text, text_keep, vis, vis_keep, layer)
        return EncodedState(text=text,
                            history=ad.slice_rows(vis, 0, n_hist),
                            observation=ad.slice_rows(vis, n_hist, n_hist + n_obs))

    def precompute_text_memories(self, text: DiffTensor,
                                 text_keep: np.ndarray | None = None) -> list[DiffTensor]:
        """Per-layer text memories for the decoder variant, computed once per
        episode: each entry is what the full stack's text stream would be with
        a zero text-to-vision cross-attention contribution."""
        memories = [text]
        for layer in self.cross_layers:
            memories.append(nn.cross_modal_layer_text_half(memories[-1], text_keep, layer))
        return memories

    def cross_modal_encode_encdec(self, text_memories: list[DiffTensor],
                                  history: DiffTensor, obs: DiffTensor,
                                  text_keep: np.ndarray | None = None,
                                  hist_keep: np.ndarray | None = None,
                                  obs_keep: np.ndarray | None = None) -> EncodedState:
        n_hist = history.shape[0]
        n_obs = obs.shape[0]
        vis = ad.concat([history, obs], axis=0)
        vis_keep = None
        if hist_keep is not None or obs_keep is not None:
            hk = np.ones(n_hist, dtype=bool) if hist_keep is None else np.asarray(hist_keep, dtype=bool)
            ok = np.ones(n_obs, dtype=bool) if obs_keep is None else np.asarray(obs_keep, dtype=bool)
            vis_keep = np.concatenate([hk, ok])
        for i, layer in enumerate(self.cross_layers):
            vis = nn.cross_modal_layer_decoder_variant(text_memories[i], text_keep, vis, vis_keep, layer)
        return EncodedState(text=text_memories[-1],
                            history=ad.slice_rows(vis, 0, n_hist),
                            observation=ad.slice_rows(vis, n_hist, n_hist + n_obs))

    def encode_step(self, token_ids, history: list[HistoryStep], pano: RenderedPanorama,
                    text_memories: list[DiffTensor] | None = None) -> EncodedState:
        """Full forward for one decision step under the configured variant."""
        h = self.encode_history(history)
        o = self.embed_observation(pano)
        if self.config.encoder_variant == "encdec":
            if text_memories is None:
                text_memories = self.precompute_text_memories(self.encode_text(token_ids))
            return self.cross_modal_encode_encdec(text_memories, h, o)
        x = self.encode_text(token_ids)
        return self.cross_modal_encode(x, h, o)

    # ------------------------------------------------------------------
    # heads

    def head_sap_logits(self, enc: EncodedState) -> DiffTensor:
        """Per-view action logits from observation tokens gated by the text [cls]."""
        gated = ad.mul(enc.observation, enc.x_cls())
        return ad.reshape(_two_layer(gated, self.sap_head), (enc.observation.shape[0],))

    def head_sap(self, enc: EncodedState, pano: RenderedPanorama) -> tuple[DiffTensor, np.ndarray]:
        """Action distribution over candidate views plus stop; non-candidates
        receive exactly zero probability."""
        logits = self.head_sap_logits(enc)
        mask = pano.action_mask()
        return ad.softmax(logits, axis=-1, mask=mask), mask

    def head_sar(self, enc: EncodedState) -> DiffTensor:
        return ad.reshape(_two_layer(enc.x_cls(), self.sar_head), (2,))

    def head_sprel(self, enc: EncodedState, i: int, j: int) -> DiffTensor:
        oi = ad.slice_rows(enc.observation, i, i + 1)
        oj = ad.slice_rows(enc.observation, j, j + 1)
        return ad.reshape(_two_layer(ad.concat([oi, oj], axis=1), self.sprel_head), (2,))

    def head_mlm(self, enc: EncodedState, positions) -> DiffTensor:
        rows = ad.gather_rows(enc.text, positions)
        return _two_layer(rows, self.mlm_head)

    def head_mrm(self, enc: EncodedState, positions) -> DiffTensor:
        rows = ad.gather_rows(enc.history, positions)
        return _two_layer(rows, self.mrm_head)

    def head_itm(self, enc: EncodedState) -> DiffTensor:
        gated = ad.mul(enc.x_cls(), enc.h_cls())
        return ad.reshape(_two_layer(gated, self.itm_head), ())

    def head_critic(self, enc: EncodedState) -> DiffTensor:
        gated = ad.mul(enc.x_cls(), enc.h_cls())
        return ad.reshape(_two_layer(gated, self.critic_head), ())


class HistoryCache:
    """Incrementally built history encoding for rollouts.

    Per-step work under every variant is independent of earlier steps (the
    panoramic stage shares parameters but never attends across steps), so a
    rollout can embed each new panorama exactly once and rerun only the cheap
    temporal stage per decision. Appending inside an active tape keeps the
    cached tokens graph-connected, so gradients still flow through shared
    subexpressions.
    """

    def __init__(self, model: NavModel):
        self.model = model
        self.variant = model.config.history_variant
        self.tokens: list[DiffTensor] = []
        self.state: DiffTensor | None = None  # recurrent variant only
        self.length = 0

    def append(self, step: HistoryStep) -> None:
        m = self.model
        if self.length >= m.config.max_history_len:
            raise ValueError(f"history length {self.length + 1} exceeds "
                             f"{m.config.max_history_len}")
        index = self.length
        self.length += 1
        if self.variant == "recurrent":
            prev = self.state if self.state is not None else ad.reshape(
                m.recurrent_state, (1, m.config.d_model))
            self.state = m._recurrent_update(prev, step.panorama)
            return
        if self.variant == "hierarchical":
            tokens = m._stacked_panorama_tokens([step])
            for layer in m.pano_layers:
                tokens = nn.transformer_layer(tokens, None, layer)
            pooled = ad.mean_pool(tokens, axis=1)
            oriented = ad.take_per_row(tokens, [step.panorama.oriented_index])
            self.tokens.append(m._temporal_wrap_single(ad.add(pooled, oriented), step, index))
        elif self.variant == "temporal_only":
            view = step.panorama.views[step.panorama.oriented_index]
            feats = m.encode_view_features(view.raw.reshape(1, -1))
            tok = m._observation_tokens(feats, view.angle.reshape(1, -1),
                                        np.array([view.nav_type]))
            self.tokens.append(m._temporal_wrap_single(tok, step, index))
        elif self.variant == "flattened":
            tokens = m._stacked_panorama_tokens([step])
            steps_emb = ad.reshape(ad.embedding_lookup(m.step_emb, np.array([index])),
                                   (1, 1, m.config.d_model))
            tokens = ad.add(tokens, steps_emb)
            self.tokens.append(ad.reshape(tokens, (m.config.k_views + 1, m.config.d_model)))
        else:
            raise ValueError(f"unknown history variant {self.variant!r}")

    def encode(self) -> DiffTensor:
        m = self.model
        if self.variant == "recurrent":
            return self.state if self.state is not None else ad.reshape(
                m.recurrent_state, (1, m.config.d_model))
        if not self.tokens:
            return m._history_cls()
        seq = ad.concat([m._history_cls()] + self.tokens, axis=0)
        return m._temporal_stack(seq, None)


# ---------------------------------------------------------------------------
# checkpoint serialization

CHECKPOINT_MAGIC = b"HAMT"
CHECKPOINT_VERSION = 1


def _config_json(config: ModelConfig) -> bytes:
    return json.dumps(asdict(config), sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, model: NavModel, optimizer=None) -> None:
    """Binary format: magic, u16 version, length-prefixed config JSON, then
    parameter records sorted by name (u32 name length, name, u32 ndim, u32
    extents, little-endian float64 values), then an optional optimizer block.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    cfg = _config_json(model.config)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    names = sorted(model.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        t = model.params[name]
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", t.values.ndim))
        for ext in t.values.shape:
            buf.write(struct.pack("<I", ext))
        buf.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
    if optimizer is None:
        buf.write(struct.pack("<B", 0))
    else:
        state = optimizer.state_arrays()
        buf.write(struct.pack("<B", 1))
        meta = json.dumps(state["meta"], sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf.write(struct.pack("<I", len(meta)))
        buf.write(meta)
        buf.write(struct.pack("<I", len(state["arrays"])))
        for key in sorted(state["arrays"]):
            m, v = state["arrays"][key]
            kb = key.encode("utf-8")
            buf.write(struct.pack("<I", len(kb)))
            buf.write(kb)
            buf.write(struct.pack("<I", m.size))
            buf.write(np.ascontiguousarray(m, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.read(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.read(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.read(1))[0]

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        raw = self.read(8 * n)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    def done(self) -> bool:
        return self.pos == len(self.data)


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    """Rebuild a model (and optional optimizer payload) from a checkpoint.

    Returns (model, optimizer_state_or_None). Raises CheckpointError on a bad
    magic, truncation, trailing bytes, or when expected_config disagrees with
    the stored one.
    """
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.read(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version = r.u16()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    cfg_obj = json.loads(r.read(r.u32()).decode("utf-8"))
    config = ModelConfig.from_dict(cfg_obj)
    if expected_config is not None and asdict(expected_config) != asdict(config):
        diffs = [k for k, v in asdict(config).items() if asdict(expected_config).get(k) != v]
        raise CheckpointError(f"{path}: config mismatch on {diffs}")
    model = NavModel(config, Rng(0))
    n_params = r.u32()
    if n_params != len(model.params):
        raise CheckpointError(f"{path}: {n_params} parameters stored, model has {len(model.params)}")
    for _ in range(n_params):
        name = r.read(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        if name not in model.params:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        if model.params[name].values.shape != shape:
            raise CheckpointError(f"{path}: parameter {name!r} shape {shape} != "
                                  f"{model.params[name].values.shape}")
        model.params[name].values[...] = r.array(shape)
    opt_state = None
    if r.u8() == 1:
        meta = json.loads(r.read(r.u32()).decode("utf-8"))
        arrays = {}
        for _ in range(r.u32()):
            key = r.read(r.u32()).decode("utf-8")
            size = r.u32()
            m = r.array((size,))
            v = r.array((size,))
            arrays[key] = (m, v)
        opt_state = {"meta": meta, "arrays": arrays}
    if not r.done():
        raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")
    return model, opt_state


def restore_optimizer_state(optimizer, opt_state: dict, model: NavModel) -> None:
    """Reshape flat checkpointed moments back onto the optimizer's parameters."""
    arrays = {}
    for key, (m, v) in opt_state["arrays"].items():
        shape = optimizer.m[key].shape
        arrays[key] = (m.reshape(shape), v.reshape(shape))
    optimizer.load_state_arrays({"meta": opt_state["meta"], "arrays": arrays})
