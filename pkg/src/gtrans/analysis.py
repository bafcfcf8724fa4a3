"""BLEU-4, per-layer gradient norms and fusion-weight traces."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .autograd import Tape, Tensor, backward, default_dtype, no_grad, sigmoid, softmax
from .layers import named_tensors
from .model import Model, decode, encode, multi_level_loss


@dataclass
class BleuReport:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def to_dict(self) -> dict:
        return asdict(self)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> BleuReport:
    """Corpus BLEU-4 against a single reference per hypothesis.

    Modified precisions are clipped by reference counts and pooled over the
    corpus. For n >= 2 a zero matched count is smoothed by adding one to both
    numerator and denominator; a zero unigram match gives score 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise ValueError("BLEU needs a non-empty corpus")
    matched = [0] * 4
    possible = [0] * 4
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matched[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            possible[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = []
    for n in range(4):
        m, p = matched[n], possible[n]
        if n > 0 and m == 0 and p > 0:
            m, p = m + 1, p + 1
        precisions.append(m / p if p else 0.0)
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / 4.0)
    return BleuReport(min(score, 100.0), precisions, bp, hyp_len, ref_len)


# gradient norms


@dataclass
class GradientReport:
    step: int
    encoder: list[float]
    decoder: list[float]
    total: float  # norm over every encoder and decoder layer parameter

    def row(self) -> list:
        return [self.step, *self.encoder, *self.decoder]


def _layer_sq_norm(params) -> float:
    total = 0.0
    for _, t in named_tensors(params):
        if t.grad is not None:
            g = t.grad.astype(np.float64)
            total += float(np.dot(g.ravel(), g.ravel()))
    return total


def layer_grad_norms(model: Model, step: int = 0) -> GradientReport:
    """L2 norm of the current ``.grad`` buffers grouped by layer.

    A layer whose parameters do not require gradients reports exactly 0.
    """
    enc = [math.sqrt(_layer_sq_norm(layer)) for layer in model.encoder]
    dec = [math.sqrt(_layer_sq_norm(layer)) for layer in model.decoder]
    grads = [t.grad.astype(np.float64).ravel()
             for layer in [*model.encoder, *model.decoder]
             for _, t in named_tensors(layer) if t.grad is not None]
    total = float(np.linalg.norm(np.concatenate(grads))) if grads else 0.0
    return GradientReport(step, enc, dec, total)


def gradient_norm_report(model: Model, batch, label_smoothing: float = 0.0,
                         step: int = 0) -> GradientReport:
    """One eval-mode forward/backward of the training loss, then per-layer norms.

    Existing gradients are cleared first and cleared again afterwards.
    """
    model.zero_grad()
    with Tape():
        pred = decode(model, batch.tgt_in, encode(model, batch.src))
        loss = multi_level_loss(pred, batch.tgt_out, label_smoothing=label_smoothing)
    backward(loss)
    report = layer_grad_norms(model, step)
    model.zero_grad()
    return report


def gradient_csv(reports: Sequence[GradientReport], num_enc: int, num_dec: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", *[f"enc_{i + 1}" for i in range(num_enc)],
                *[f"dec_{i + 1}" for i in range(num_dec)]])
    for r in reports:
        w.writerow([r.step, *[f"{v:.9g}" for v in r.encoder + r.decoder]])
    return buf.getvalue()


# fusion weight traces


@dataclass
class WeightTrace:
    step: int
    enc_gates: list[float]
    dec_gates: list[float]
    psi: list[float]


def weight_snapshot(model: Model, step: int) -> WeightTrace:
    if model.fusion is None:
        raise ValueError("model has no fusion weights")
    f = model.fusion
    # float64 so the mixture weights sum to 1 well below float32 resolution
    with default_dtype(np.float64), no_grad():
        def gate(t):
            return sigmoid(Tensor(t.data)).data.tolist()

        psi = softmax(Tensor(f.dec_prob_weights.data), tau=f.tau).data.tolist()
        return WeightTrace(step, gate(f.enc_weights), gate(f.dec_rep_weights), psi)


def export_weight_trace(history: Sequence[WeightTrace]) -> str:
    """CSV text: ``step``, then one column per gate / mixture weight."""
    if not history:
        raise ValueError("no logged steps to export")
    first = history[0]
    header = (["step"] + [f"enc_sigma_{i + 1}" for i in range(len(first.enc_gates))]
              + [f"dec_sigma_{i + 1}" for i in range(len(first.dec_gates))]
              + [f"psi_{i + 1}" for i in range(len(first.psi))])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for t in history:
        w.writerow([t.step, *[f"{v:.9g}" for v in t.enc_gates + t.dec_gates + t.psi]])
    return buf.getvalue()
