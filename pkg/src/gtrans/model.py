"""The full model: embeddings, encoder and decoder stacks, fusion and output heads."""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .autograd import (
    Tensor,
    default_dtype,
    embedding,
    exp,
    gather_last,
    get_default_dtype,
    log_softmax,
)
from .fusion import (
    FusionParams,
    GroupScheme,
    decoder_group_fuse,
    encoder_group_fuse,
    fusion_prob_weights,
    group_boundaries,
    init_fusion,
    probability_fuse,
)
from .layers import (
    DecoderLayerParams,
    EncoderLayerParams,
    ForwardContext,
    LNParams,
    causal_mask,
    decoder_layer_forward,
    encoder_layer_forward,
    init_decoder_layer,
    init_encoder_layer,
    init_ln,
    maybe_drop,
    named_tensors,
    padding_mask,
    sinusoidal_positions,
    xavier_uniform,
)
from .rng import INIT, make_rng

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid or incompatible configuration; ``violations`` lists every problem."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration: " + "; ".join(self.violations))


class VocabError(IndexError):
    """Token id outside the vocabulary."""


def check_keys(cls, data: dict[str, Any]) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError([f"unknown {cls.__name__} key {k!r}" for k in unknown])


@dataclass(kw_only=True)
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    enc_layers: int = 6
    dec_layers: int = 6
    enc_group: int = 3
    dec_group: int = 2
    d_model: int = 512
    ffn_dim: int = 1024
    heads: int = 8
    dropout: float = 0.3
    norm_style: str = "post"
    fusion: bool = True
    tie_embeddings: bool = True
    share_embeddings: bool = True
    tau: float | None = None
    max_len: int = 128
    ln_eps: float = 1e-5

    def violations(self) -> list[str]:
        problems = []
        for name in ("enc_layers", "dec_layers", "enc_group", "dec_group",
                     "d_model", "ffn_dim", "heads", "max_len"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("src_vocab", "tgt_vocab"):
            if getattr(self, name) < 5:
                problems.append(f"{name} must be >= 5")
        if self.heads >= 1 and self.d_model % self.heads:
            problems.append(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must be in [0, 1)")
        if self.norm_style not in ("post", "pre"):
            problems.append("norm_style must be 'post' or 'pre'")
        if self.tau is not None and not self.tau > 0:
            problems.append("tau must be positive")
        if self.ln_eps <= 0:
            problems.append("ln_eps must be positive")
        return problems

    def validate(self) -> "ModelConfig":
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def temperature(self) -> float:
        return math.sqrt(self.d_model) if self.tau is None else self.tau

    @property
    def shares_embeddings(self) -> bool:
        return self.share_embeddings and self.src_vocab == self.tgt_vocab

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        check_keys(cls, data)
        try:
            return cls(**data)
        except TypeError as err:
            raise ConfigError([str(err)]) from None


@dataclass
class EncoderOutput:
    states: list[Tensor]
    fused: Tensor
    mask: np.ndarray  # (..., 1, S) key mask over source positions


@dataclass
class GroupPrediction:
    fused_states: list[Tensor]
    group_log_probs: list[Tensor]
    psi: Tensor

    @functools.cached_property
    def group_probs(self) -> list[Tensor]:
        return [exp(lp) for lp in self.group_log_probs]

    @functools.cached_property
    def fused_probs(self) -> Tensor:
        return probability_fuse(self.group_probs, self.psi)

    def fused_log_probs(self) -> np.ndarray:
        """``log sum_i psi_i P_i`` in float64, via log-sum-exp (no autodiff)."""
        stacked = np.stack([lp.data.astype(np.float64) for lp in self.group_log_probs])
        with np.errstate(divide="ignore"):
            log_psi = np.log(self.psi.data.astype(np.float64))
        stacked += log_psi.reshape((-1,) + (1,) * (stacked.ndim - 1))
        top = stacked.max(axis=0)
        return top + np.log(np.exp(stacked - top).sum(axis=0))


class Model:
    """Parameter container; the forward pass lives in :func:`encode` / :func:`decode`."""

    def __init__(self, config: ModelConfig, src_embed: Tensor, tgt_embed: Tensor,
                 out_proj: Tensor | None, encoder: list[EncoderLayerParams],
                 decoder: list[DecoderLayerParams], fusion: FusionParams | None,
                 enc_final_ln: LNParams | None = None, dec_final_ln: LNParams | None = None):
        self.config = config
        self.src_embed = src_embed
        self.tgt_embed = tgt_embed
        self.out_proj = out_proj
        self.encoder = encoder
        self.decoder = decoder
        self.fusion = fusion
        self.enc_final_ln = enc_final_ln
        self.dec_final_ln = dec_final_ln
        self.enc_scheme = group_boundaries(config.enc_layers, config.enc_group)
        self.dec_scheme = group_boundaries(config.dec_layers, config.dec_group)
        self._positions = sinusoidal_positions(config.max_len + 2, config.d_model).astype(src_embed.dtype)

    @property
    def dtype(self):
        return self.src_embed.dtype

    def positions(self, length: int) -> np.ndarray:
        if length > len(self._positions):
            self._positions = sinusoidal_positions(length, self.config.d_model).astype(self.dtype)
        return self._positions[:length]

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        seen: set[int] = set()
        groups = [
            ("src_embed", self.src_embed), ("tgt_embed", self.tgt_embed),
            ("out_proj", self.out_proj), ("encoder", self.encoder), ("decoder", self.decoder),
            ("fusion", self.fusion), ("enc_final_ln", self.enc_final_ln),
            ("dec_final_ln", self.dec_final_ln),
        ]
        for prefix, obj in groups:
            if obj is None:
                continue
            for name, t in named_tensors(obj, prefix):
                if id(t) not in seen:
                    seen.add(id(t))
                    out[name] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def output_matrix(self) -> Tensor:
        """``W_o`` of shape ``(D, V)``; the transposed target embedding when tied."""
        return self.tgt_embed.T if self.out_proj is None else self.out_proj

    @property
    def num_enc_groups(self) -> int:
        return self.enc_scheme.num_groups

    @property
    def num_dec_groups(self) -> int:
        return self.dec_scheme.num_groups if self.config.fusion else 1


def build_model(config: ModelConfig, seed: int = 0, dtype=None) -> Model:
    """Deterministically initialize a model from ``(config, seed)``."""
    config.validate()
    rng = make_rng(seed, INIT)
    d = config.d_model
    with default_dtype(dtype or get_default_dtype()):

        def embed_table(vocab: int) -> Tensor:
            return Tensor(rng.normal(0.0, d ** -0.5, size=(vocab, d)), requires_grad=True)

        tgt_embed = embed_table(config.tgt_vocab)
        src_embed = tgt_embed if config.shares_embeddings else embed_table(config.src_vocab)
        out_proj = None if config.tie_embeddings else xavier_uniform(rng, d, config.tgt_vocab)
        encoder = [init_encoder_layer(rng, d, config.ffn_dim, config.ln_eps)
                   for _ in range(config.enc_layers)]
        decoder = [init_decoder_layer(rng, d, config.ffn_dim, config.ln_eps)
                   for _ in range(config.dec_layers)]
        fusion = enc_ln = dec_ln = None
        if config.fusion:
            fusion = init_fusion(
                group_boundaries(config.enc_layers, config.enc_group).num_groups,
                config.dec_layers,
                group_boundaries(config.dec_layers, config.dec_group).num_groups,
                d, config.tau, config.ln_eps)
        elif config.norm_style == "pre":
            enc_ln, dec_ln = init_ln(d, config.ln_eps), init_ln(d, config.ln_eps)
    return Model(config, src_embed, tgt_embed, out_proj, encoder, decoder, fusion, enc_ln, dec_ln)


def _check_ids(ids: np.ndarray, vocab: int, side: str) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"{side} ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise VocabError(f"{side} token id out of range [0, {vocab})")
    return ids


def _embed(model: Model, table: Tensor, ids: np.ndarray, ctx: ForwardContext | None) -> Tensor:
    x = embedding(table, ids) * math.sqrt(model.config.d_model)
    x = x + Tensor(model.positions(ids.shape[-1]), dtype=model.dtype)
    return maybe_drop(x, ctx)


def encode(model: Model, src_ids: np.ndarray, ctx: ForwardContext | None = None,
           encoder_keep: int | None = None) -> EncoderOutput:
    """Run the encoder on ``(S,)`` or ``(B, S)`` ids.

    ``encoder_keep`` runs only the bottom layers and fuses over the groups
    whose boundaries survive (mean over the kept groups).
    """
    cfg = model.config
    src_ids = _check_ids(src_ids, cfg.src_vocab, "source")
    keep = cfg.enc_layers if encoder_keep is None else encoder_keep
    mask = padding_mask(src_ids, PAD_ID)
    x = _embed(model, model.src_embed, src_ids, ctx)
    states = []
    for layer in model.encoder[:keep]:
        x = encoder_layer_forward(x, layer, mask, cfg.heads, cfg.norm_style, ctx)
        states.append(x)
    if cfg.fusion:
        if keep == cfg.enc_layers:
            scheme, weights = model.enc_scheme, model.fusion.enc_weights
        else:
            scheme = group_boundaries(keep, cfg.enc_group)
            weights = model.fusion.enc_weights[: scheme.num_groups]
        fused = encoder_group_fuse(states, weights, model.fusion.ln, scheme)
    elif model.enc_final_ln is not None:
        fused = model.enc_final_ln(states[-1])
    else:
        fused = states[-1]
    return EncoderOutput(states, fused, mask)


def decode(model: Model, tgt_in: np.ndarray, enc: EncoderOutput, ctx: ForwardContext | None = None,
           decoder_groups: tuple[int, int] | None = None, last_only: bool = False) -> GroupPrediction:
    """Run the decoder on a target prefix and produce per-group distributions.

    ``decoder_groups=(a, b)`` restricts prediction to groups ``a..b``
    (1-based, inclusive) with the mixture weights re-normalized over them;
    layers above group ``b`` are not evaluated. ``last_only`` projects only
    the final position (for incremental decoding).
    """
    cfg = model.config
    tgt_in = _check_ids(tgt_in, cfg.tgt_vocab, "target")
    n = model.num_dec_groups
    a, b = decoder_groups or (1, n)
    depth = model.dec_scheme.boundaries[b - 1] if cfg.fusion else cfg.dec_layers
    self_mask = causal_mask(tgt_in.shape[-1])
    y = _embed(model, model.tgt_embed, tgt_in, ctx)
    states = []
    for layer in model.decoder[:depth]:
        y = decoder_layer_forward(y, enc.fused, layer, self_mask, enc.mask, cfg.heads, cfg.norm_style, ctx)
        states.append(y)
    if cfg.fusion:
        if depth == cfg.dec_layers:
            scheme, rep_w = model.dec_scheme, model.fusion.dec_rep_weights
        else:
            scheme = group_boundaries(depth, cfg.dec_group)
            rep_w = model.fusion.dec_rep_weights[:depth]
        fused_states = decoder_group_fuse(states, rep_w, scheme)[a - 1: b]
        prob_w = model.fusion.dec_prob_weights
        if (a, b) != (1, n):
            prob_w = prob_w[a - 1: b]
        psi = fusion_prob_weights(prob_w, model.fusion.tau)
    else:
        last = states[-1] if model.dec_final_ln is None else model.dec_final_ln(states[-1])
        fused_states = [last]
        psi = Tensor(np.ones(1), dtype=model.dtype)
    if last_only:
        fused_states = [h[..., -1:, :] for h in fused_states]
    w_o = model.output_matrix()
    log_probs = [log_softmax(h @ w_o) for h in fused_states]
    return GroupPrediction(fused_states, log_probs, psi)


def multi_level_loss(pred: GroupPrediction, targets: np.ndarray, pad_id: int = PAD_ID,
                     label_smoothing: float = 0.0) -> Tensor:
    """Mixture-weighted sum of per-group NLLs, averaged over non-pad positions.

    Note this weights per-group log-likelihoods; it is not the log of the
    mixed distribution used at inference time.
    """
    targets = np.asarray(targets)
    keep = targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("every target position is padding")
    safe = np.where(keep, targets, 0)
    total = None
    for i, lp in enumerate(pred.group_log_probs):
        nll = -gather_last(lp, safe)
        if label_smoothing > 0:
            nll = nll * (1.0 - label_smoothing) - lp.mean(axis=-1) * label_smoothing
        term = pred.psi[i] * nll
        total = term if total is None else total + term
    weights = Tensor(keep, dtype=total.dtype)
    return (total * weights).sum() * (1.0 / count)
