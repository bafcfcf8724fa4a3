"""Adam with inverse-square-root warmup, gradient clipping and the epoch loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .analysis import (
    GradientReport,
    WeightTrace,
    export_weight_trace,
    gradient_csv,
    layer_grad_norms,
    weight_snapshot,
)
from .autograd import NonFiniteError, Tape, backward, no_grad
from .data import Batch, SentencePair, make_batches
from .layers import ForwardContext
from .model import (
    PAD_ID,
    ConfigError,
    Model,
    check_keys,
    decode,
    encode,
    multi_level_loss,
)
from .rng import DROPOUT, make_rng

logger = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    """A gradient contains NaN or Inf; ``param`` names the offending tensor."""

    def __init__(self, param: str):
        self.param = param
        super().__init__(f"non-finite gradient in parameter {param!r}")


@dataclass(kw_only=True)
class TrainConfig:
    warmup_steps: int = 4000
    lr_scale: float = 1.0
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    clip_norm: float = 1.0
    label_smoothing: float = 0.1
    epochs: int = 20
    batch_tokens: int = 4096
    seed: int = 1
    log_every: int = 10

    def violations(self) -> list[str]:
        problems = []
        if self.warmup_steps < 1:
            problems.append("warmup_steps must be >= 1")
        if self.lr_scale <= 0:
            problems.append("lr_scale must be positive")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            problems.append("betas must be two values in [0, 1)")
        if self.eps <= 0:
            problems.append("eps must be positive")
        if self.clip_norm < 0:
            problems.append("clip_norm must be >= 0 (0 disables clipping)")
        if not 0.0 <= self.label_smoothing < 1.0:
            problems.append("label_smoothing must be in [0, 1)")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_tokens < 1:
            problems.append("batch_tokens must be >= 1")
        if self.log_every < 1:
            problems.append("log_every must be >= 1")
        return problems

    def validate(self) -> "TrainConfig":
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        check_keys(cls, data)
        data = dict(data)
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        try:
            return cls(**data)
        except TypeError as err:
            raise ConfigError([str(err)]) from None


def lr_at_step(step: int, d_model: int, warmup: int) -> float:
    """``d^-0.5 * min(step^-0.5, step * warmup^-1.5)``."""
    if step < 1:
        raise ValueError("step counts from 1")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    rng: np.random.Generator | None = None
    best_valid: float = math.inf

    @classmethod
    def fresh(cls, seed: int) -> "TrainState":
        return cls(rng=make_rng(seed, DROPOUT))


def adam_step(params: dict[str, "Tensor"], state: TrainState, lr: float,
              betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-9) -> None:
    """Bias-corrected Adam update of every parameter holding a gradient."""
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteGradientError(name)
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


def clip_grad_norm(params: Sequence["Tensor"], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; return the norm before."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.ravel()
            sq += float(np.dot(g, g))
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class DivergenceReport:
    step: int
    reason: str
    encoder_grad_norms: list[float]
    decoder_grad_norms: list[float]


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    steps: int
    lr: float
    grad_norm_mean: float
    grad_norm_max: float
    psi: list[float]
    grad_log: list[GradientReport]
    weight_log: list[WeightTrace]
    divergence: DivergenceReport | None = None


def _psi(model: Model) -> list[float]:
    return weight_snapshot(model, 0).psi if model.fusion is not None else [1.0]


def train_epoch(model: Model, batches: Sequence[Batch], state: TrainState,
                config: TrainConfig) -> EpochReport:
    """One pass over ``batches``: forward, loss, backward, clip, Adam, zero grads.

    Divergence (non-finite loss or gradient) stops the epoch and is returned in
    ``report.divergence`` instead of raising.
    """
    params = model.named_parameters()
    plist = list(params.values())
    if state.rng is None:
        state.rng = make_rng(config.seed, DROPOUT)
    ctx = ForwardContext(model.config.dropout, state.rng)
    state.epoch += 1
    losses, weights_, norms = [], [], []
    grad_log: list[GradientReport] = []
    weight_log: list[WeightTrace] = []
    lr = 0.0
    divergence = None
    for batch in batches:
        step = state.step + 1
        try:
            with Tape():
                enc = encode(model, batch.src, ctx)
                pred = decode(model, batch.tgt_in, enc, ctx)
                loss = multi_level_loss(pred, batch.tgt_out, PAD_ID, config.label_smoothing)
            backward(loss)
            norms_now = None
            if step % config.log_every == 0 or step == 1:
                norms_now = layer_grad_norms(model, step)
            gnorm = clip_grad_norm(plist, config.clip_norm)
            lr = lr_at_step(step, model.config.d_model, config.warmup_steps) * config.lr_scale
            adam_step(params, state, lr, config.betas, config.eps)
        except (NonFiniteError, NonFiniteGradientError, FloatingPointError) as err:
            report = layer_grad_norms(model, step)
            divergence = DivergenceReport(step, str(err), report.encoder, report.decoder)
            logger.warning("training diverged at step %d: %s", step, err)
            model.zero_grad()
            break
        model.zero_grad()
        ntok = batch.num_tokens
        losses.append(loss.item() * ntok)
        weights_.append(ntok)
        norms.append(gnorm)
        if norms_now is not None:
            grad_log.append(norms_now)
            if model.fusion is not None:
                weight_log.append(weight_snapshot(model, state.step))
    mean_loss = float(sum(losses) / sum(weights_)) if weights_ else math.nan
    return EpochReport(
        epoch=state.epoch,
        train_loss=mean_loss,
        steps=len(weights_),
        lr=lr,
        grad_norm_mean=float(np.mean(norms)) if norms else math.nan,
        grad_norm_max=float(np.max(norms)) if norms else math.nan,
        psi=_psi(model),
        grad_log=grad_log,
        weight_log=weight_log,
        divergence=divergence,
    )


def evaluate(model: Model, batches: Sequence[Batch], decoder_groups=None,
             encoder_keep: int | None = None) -> tuple[float, float]:
    """Teacher-forced ``(mean L_MT without smoothing, token accuracy)``.

    Accuracy takes the argmax of the mixed distribution at each non-pad position.
    """
    total_loss = 0.0
    correct = count = 0
    with no_grad():
        for batch in batches:
            enc = encode(model, batch.src, encoder_keep=encoder_keep)
            pred = decode(model, batch.tgt_in, enc, decoder_groups=decoder_groups)
            n = batch.num_tokens
            total_loss += multi_level_loss(pred, batch.tgt_out, PAD_ID).item() * n
            guess = pred.fused_log_probs().argmax(axis=-1)
            keep = batch.tgt_out != PAD_ID
            correct += int(((guess == batch.tgt_out) & keep).sum())
            count += n
    return total_loss / count, correct / count


@dataclass
class TrainResult:
    history: list[dict]
    divergence: DivergenceReport | None
    state: TrainState
    grad_log: list[GradientReport]
    weight_log: list[WeightTrace]
    initial_valid_loss: float

    @property
    def diverged(self) -> bool:
        return self.divergence is not None


def _json_float(x: float):
    return x if math.isfinite(x) else None


def train(model: Model, train_pairs: Sequence[SentencePair], valid_pairs: Sequence[SentencePair],
          config: TrainConfig, out_dir: str | Path | None = None, vocab=None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Full training run with per-epoch validation.

    With ``out_dir`` set, writes ``metrics.jsonl``, ``weights.csv``,
    ``grad_norms.csv`` and the ``best.gtrn`` / ``last.gtrn`` checkpoints.
    """
    from .checkpoint import save_checkpoint

    config.validate()
    state = TrainState.fresh(config.seed)
    valid_batches = make_batches(valid_pairs, config.batch_tokens, shuffle=False)
    initial_valid, _ = evaluate(model, valid_batches)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8")
    history, grad_log, weight_log = [], [], []
    divergence = None
    try:
        for epoch in range(1, config.epochs + 1):
            batches = make_batches(train_pairs, config.batch_tokens, seed=config.seed * 100_003 + epoch)
            rep = train_epoch(model, batches, state, config)
            grad_log.extend(rep.grad_log)
            weight_log.extend(rep.weight_log)
            if rep.divergence is not None:
                valid_loss, valid_acc = math.nan, math.nan
            else:
                try:
                    valid_loss, valid_acc = evaluate(model, valid_batches)
                except NonFiniteError:
                    valid_loss, valid_acc = math.nan, math.nan
            record = {
                "epoch": epoch,
                "step": state.step,
                "train_loss": _json_float(rep.train_loss),
                "valid_loss": _json_float(valid_loss),
                "valid_token_acc": _json_float(valid_acc),
                "lr": rep.lr,
                "psi": rep.psi,
                "grad_norm_mean": _json_float(rep.grad_norm_mean),
                "grad_norm_max": _json_float(rep.grad_norm_max),
                "diverged": rep.divergence is not None,
            }
            history.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                metrics_fh.flush()
            if on_epoch is not None:
                on_epoch(record)
            logger.info("epoch %d train %.4f valid %.4f acc %.4f", epoch,
                        rep.train_loss, valid_loss, valid_acc)
            if rep.divergence is not None or not math.isfinite(valid_loss):
                divergence = rep.divergence or DivergenceReport(
                    state.step, "non-finite validation loss", [], [])
                break
            if valid_loss < state.best_valid:
                state.best_valid = valid_loss
                if out is not None:
                    save_checkpoint(out / "best.gtrn", model, state, vocab)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out is not None:
        if divergence is None:
            save_checkpoint(out / "last.gtrn", model, state, vocab)
        (out / "grad_norms.csv").write_text(
            gradient_csv(grad_log, model.config.enc_layers, model.config.dec_layers), encoding="utf-8")
        if weight_log:
            (out / "weights.csv").write_text(export_weight_trace(weight_log), encoding="utf-8")
    return TrainResult(history, divergence, state, grad_log, weight_log, initial_valid)
