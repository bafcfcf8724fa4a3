"""Greedy and beam decoding over the mixed distribution, plus inference-time pruning."""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import no_grad
from .data import pad_matrix
from .model import (BOS_ID, EOS_ID, PAD_ID, EncoderOutput, GroupPrediction, Model, build_model, decode,
                    encode)


class PruneError(ValueError):
    pass


@dataclass(frozen=True)
class PruneSpec:
    """Which layers survive at inference.

    ``encoder_keep``: run only the bottom ``K`` encoder layers (a multiple of
    the encoder group size, or all of them). ``decoder_groups``: 1-based
    inclusive range ``(a, b)`` of decoder groups whose distributions are mixed.
    """

    encoder_keep: int | None = None
    decoder_groups: tuple[int, int] | None = None

    def validate(self, model: Model) -> "PruneSpec":
        cfg = model.config
        if self.encoder_keep is not None:
            k = self.encoder_keep
            if k < 1 or k > cfg.enc_layers:
                raise PruneError(f"encoder_keep must be in [1, {cfg.enc_layers}], got {k}")
            if cfg.fusion and k % cfg.enc_group and k != cfg.enc_layers:
                raise PruneError(
                    f"encoder_keep={k} must be a multiple of the group size {cfg.enc_group} "
                    f"or equal {cfg.enc_layers}")
        if self.decoder_groups is not None:
            a, b = self.decoder_groups
            n = model.num_dec_groups
            if not 1 <= a <= b <= n:
                raise PruneError(f"decoder group range {a}:{b} invalid for {n} groups")
        return self

    @property
    def is_identity(self) -> bool:
        return self.encoder_keep is None and self.decoder_groups is None


def parse_group_range(text: str) -> tuple[int, int]:
    """Parse ``"a:b"`` into a pair of ints."""
    parts = text.split(":")
    if len(parts) != 2:
        raise PruneError(f"decoder group range must look like a:b, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise PruneError(f"decoder group range must look like a:b, got {text!r}") from None


@dataclass
class PrunedModel:
    """A read-only view of ``model`` that evaluates only the kept layers."""

    model: Model
    spec: PruneSpec = field(default_factory=PruneSpec)

    @property
    def config(self):
        return self.model.config

    def encode(self, src_ids: np.ndarray) -> EncoderOutput:
        return encode(self.model, src_ids, encoder_keep=self.spec.encoder_keep)

    def decode(self, tgt_in: np.ndarray, enc: EncoderOutput, last_only: bool = False) -> GroupPrediction:
        return decode(self.model, tgt_in, enc, decoder_groups=self.spec.decoder_groups,
                      last_only=last_only)


_FLOAT64_COPIES: "weakref.WeakKeyDictionary[Model, Model]" = weakref.WeakKeyDictionary()


def _float64_copy(model: Model) -> Model:
    """``model`` with float64 weights, so decoding scores do not depend on batch shape."""
    if model.dtype == np.float64:
        return model
    twin = _FLOAT64_COPIES.get(model)
    if twin is None or twin.config != model.config:
        twin = _FLOAT64_COPIES[model] = build_model(model.config, dtype=np.float64)
    # refreshed on every call since the source may have been trained since
    dst = twin.named_parameters()
    for name, t in model.named_parameters().items():
        dst[name].data[...] = t.data
    return twin


def apply_prune(model: Model, spec: PruneSpec | None = None) -> PrunedModel:
    """A decoding view of ``model`` (float64, optionally pruned)."""
    spec = spec or PruneSpec()
    return PrunedModel(_float64_copy(model), spec.validate(model))


def _view(model, prune: PruneSpec | None) -> PrunedModel:
    if isinstance(model, PrunedModel):
        if prune is not None and not prune.is_identity:
            raise PruneError("model is already pruned")
        return model
    return apply_prune(model, prune)


def default_max_len(src_len: int, model_max: int) -> int:
    return min(model_max, 2 * src_len + 10)


def greedy_decode(model, src_ids: Sequence[int], max_len: int | None = None,
                  prune: PruneSpec | None = None) -> list[int]:
    """Append the argmax of the mixed distribution until eos or ``max_len`` tokens.

    Returns generated ids (bos excluded, eos included when produced).
    """
    view = _view(model, prune)
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    limit = max_len or default_max_len(src.shape[1], view.config.max_len)
    out: list[int] = []
    with no_grad():
        enc = view.encode(src)
        prefix = [BOS_ID]
        for _ in range(limit):
            logp = view.decode(np.array([prefix]), enc, last_only=True).fused_log_probs()[0, -1]
            tok = int(np.argmax(logp))
            out.append(tok)
            prefix.append(tok)
            if tok == EOS_ID:
                break
    return out


def greedy_decode_batch(model, sources: Sequence[Sequence[int]], max_len: int | None = None,
                        prune: PruneSpec | None = None, batch_size: int = 256) -> list[list[int]]:
    """Greedy decoding of many sentences at once (padded batches)."""
    view = _view(model, prune)
    results: list[list[int]] = []
    with no_grad():
        for start in range(0, len(sources), batch_size):
            chunk = sources[start: start + batch_size]
            src = pad_matrix(chunk)
            limit = max_len or default_max_len(src.shape[1], view.config.max_len)
            enc = view.encode(src)
            prefix = np.full((len(chunk), 1), BOS_ID, dtype=np.int64)
            done = np.zeros(len(chunk), dtype=bool)
            for _ in range(limit):
                logp = view.decode(prefix, enc, last_only=True).fused_log_probs()[:, -1]
                tok = np.where(done, PAD_ID, logp.argmax(axis=-1))
                prefix = np.concatenate([prefix, tok[:, None]], axis=1)
                done |= tok == EOS_ID
                if done.all():
                    break
            for row in prefix[:, 1:]:
                ids = [int(t) for t in row if t != PAD_ID]
                if EOS_ID in ids:
                    ids = ids[: ids.index(EOS_ID) + 1]
                results.append(ids)
    return results


@dataclass
class Hypothesis:
    tokens: list[int]  # generated ids, bos excluded
    log_prob: float
    finished: bool = False

    def score(self, length_penalty: float = 1.0) -> float:
        return self.log_prob / max(len(self.tokens), 1) ** length_penalty


@dataclass
class _Beam:
    width: int
    live: list[Hypothesis]
    finished: list[Hypothesis] = field(default_factory=list)
    done: bool = False

    def step(self, logp: np.ndarray) -> None:
        """Advance by one token given log-probs for each live row."""
        scores = np.array([h.log_prob for h in self.live])[:, None] + logp
        parent, token = np.divmod(np.arange(scores.size), scores.shape[1])
        order = np.lexsort((parent, token, -scores.ravel()))
        live: list[Hypothesis] = []
        for rank, idx in enumerate(order):
            if len(live) == self.width or rank >= 2 * self.width:
                break
            p, t = int(parent[idx]), int(token[idx])
            hyp = Hypothesis(self.live[p].tokens + [t], float(scores.flat[idx]))
            if t == EOS_ID:
                if rank < self.width:
                    hyp.finished = True
                    self.finished.append(hyp)
            else:
                live.append(hyp)
        self.live = live
        # log P only falls as a hypothesis grows, so no live one can overtake
        best_live = max((h.log_prob for h in live), default=-np.inf)
        if not live or (self.finished and max(h.log_prob for h in self.finished) >= best_live):
            self.done = True


def beam_search(model, src_ids: Sequence[int], width: int = 8, max_len: int | None = None,
                length_penalty: float = 1.0, prune: PruneSpec | None = None) -> Hypothesis:
    """Beam search over log mixed probabilities.

    Candidates are ranked by cumulative log-probability with ties going to
    the smaller token id, then the higher-ranked parent. A candidate ending in
    eos inside the top ``k`` finishes; ``k`` live hypotheses are kept
    regardless. A beam stops once its best finished log P is at least that of
    every live hypothesis; at ``max_len`` its live hypotheses count as
    complete. Width 1 is exactly greedy.

    Beams of every width ``k <= width`` run in lockstep (shared prefixes are
    decoded once) and the best ``log P / len ** length_penalty`` among all
    their finished hypotheses is returned. This makes the result monotone in
    ``width``, which a single beam does not guarantee.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    view = _view(model, prune)
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    limit = max_len or default_max_len(src.shape[1], view.config.max_len)
    beams = [_Beam(k, [Hypothesis([], 0.0)]) for k in range(1, width + 1)]
    with no_grad():
        enc = view.encode(src)
        for _ in range(limit):
            active = [b for b in beams if not b.done]
            if not active:
                break
            rows: dict[tuple[int, ...], int] = {}
            for b in active:
                for h in b.live:
                    rows.setdefault(tuple(h.tokens), len(rows))
            prefix = np.array([[BOS_ID, *key] for key in rows], dtype=np.int64)
            logp = view.decode(prefix, enc, last_only=True).fused_log_probs()[:, -1]
            for b in active:
                b.step(logp[[rows[tuple(h.tokens)] for h in b.live]])
    # hypotheses still live at max_len count as complete, as in greedy decoding
    pool = [h for b in beams for h in b.finished + ([] if b.done else b.live)]
    best = pool[0]
    for h in pool[1:]:
        if h.score(length_penalty) > best.score(length_penalty):
            best = h
    return best
