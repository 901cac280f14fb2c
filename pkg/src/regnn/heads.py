"""Classification heads on top of the graph encoder.

Single-label: a linear map of the graph vector. Multi-label: an LSTM
decoder that emits one label per step, attending over the final node
states, until it produces END or hits ``max_labels``.

Decoder label ids: ``0..K-1`` are labels, ``K`` is END in the output space;
the label embedding table has two extra rows, START at ``K`` and END at
``K+1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .model import ModelParams
from .tensor import Tensor


def single_logits(g: Tensor, params: ModelParams) -> Tensor:
    return T.matmul(g, params["W_out"])


def classify_single(g: Tensor, params: ModelParams) -> tuple[int, np.ndarray]:
    """``argmax`` of the logits, smallest index on ties (numpy's rule)."""
    W = params["W_out"]
    if g.shape[-1] != W.shape[0]:
        raise DimensionError(f"graph vector {g.shape} does not fit W_out {W.shape}")
    logits = single_logits(g, params).data
    return int(np.argmax(logits)), logits


def loss_single(logits: Tensor, gold: int) -> Tensor:
    k = logits.shape[-1]
    if not 0 <= gold < k:
        raise ContractError(f"gold label {gold} outside [0, {k})")
    return T.cross_entropy(logits, gold)


@dataclass
class DecodeTrace:
    """What a decoding run produced, step by step."""

    labels: list[int] = field(default_factory=list)
    logits: list[Tensor] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list)


class Decoder:
    """Stepwise view of the multi-label decoder parameters."""

    def __init__(self, params: ModelParams):
        self.p = params
        self.n_labels = params.config.n_labels
        self.max_labels = params.config.max_labels

    @property
    def end(self) -> int:
        return self.n_labels

    @property
    def start_input(self) -> int:
        return self.n_labels

    def step(self, t: Tensor, c: Tensor, prev: int, HL: Tensor):
        """One decoder step: returns ``(t, c, logits (K+1,), attention (m,))``."""
        p = self.p
        e = T.gather(p["E_lab"], np.array([prev]))
        z = T.concat([t, e], axis=1)

        def lin(name):
            return T.add(T.matmul(z, p["dec_W_" + name]), p["dec_b_" + name])

        i = T.sigmoid(lin("i"))
        f = T.sigmoid(lin("f"))
        o = T.sigmoid(lin("o"))
        u = T.tanh(lin("u"))
        c = T.add(T.mul(f, c), T.mul(i, u))
        t = T.mul(o, T.tanh(c))
        q = T.reshape(T.matmul(t, p["W_att"]), (-1,))
        att = T.softmax(T.matmul(HL, q))
        ctx = T.matmul(T.reshape(att, (1, -1)), HL)
        logits = T.add(T.matmul(T.concat([t, ctx], axis=1), p["W_dec"]), p["b_dec"])
        return t, c, T.reshape(logits, (-1,)), att.data

    def initial(self, g: Tensor) -> tuple[Tensor, Tensor]:
        t0 = T.reshape(g, (1, -1))
        return t0, Tensor(np.zeros_like(t0.data))


def decode_multi(g: Tensor, HL: Tensor, params: ModelParams, gold: Sequence[int] | None = None) -> DecodeTrace:
    """Greedy decode, or teacher-forced when ``gold`` is given.

    Emitted labels are masked from later steps. Emission stops at END or after
    ``max_labels`` labels. Under teacher forcing the gold labels feed the next
    step instead of the prediction; the trace still records the predictions.
    """
    if HL.shape[0] < 1:
        raise ContractError("decoder needs at least one node state")
    dec = Decoder(params)
    t, c = dec.initial(g)
    prev = dec.start_input
    trace = DecodeTrace()
    emitted: set[int] = set()
    for step in range(dec.max_labels):
        t, c, logits, att = dec.step(t, c, prev, HL)
        trace.logits.append(logits)
        trace.attention.append(att)
        masked = logits.data.copy()
        if emitted:
            masked[list(emitted)] = -np.inf
        y = int(np.argmax(masked))
        if y == dec.end:
            break
        trace.labels.append(y)
        emitted.add(y)
        prev = int(gold[step]) if gold is not None and step < len(gold) else y
    return trace


def teacher_forced_logits(g: Tensor, HL: Tensor, params: ModelParams, gold: Sequence[int]) -> Tensor:
    """Stacked step logits ``(len(gold)+1, K+1)``: START and each gold label fed in turn."""
    dec = Decoder(params)
    t, c = dec.initial(g)
    rows = []
    for prev in [dec.start_input, *gold]:
        t, c, logits, _ = dec.step(t, c, int(prev), HL)
        rows.append(T.reshape(logits, (1, -1)))
    return T.concat(rows, axis=0)


def loss_multi(step_logits: Tensor, gold: Sequence[int]) -> Tensor:
    """Mean per-step cross entropy against ``gold + [END]``."""
    k = step_logits.shape[-1] - 1
    target = [int(y) for y in gold] + [k]
    if step_logits.shape[0] != len(target):
        raise DimensionError(f"{step_logits.shape[0]} decoder steps for {len(target)} targets")
    return T.cross_entropy(step_logits, target)


def evaluate_multilabel(pred: Sequence[Iterable], gold: Sequence[Iterable]) -> tuple[float, float, float]:
    """Micro-averaged precision, recall and F1; 0 wherever a denominator is 0."""
    if len(pred) != len(gold):
        raise ContractError(f"{len(pred)} predictions for {len(gold)} gold sets")
    hit = npred = ngold = 0
    for p, g in zip(pred, gold):
        p, g = set(p), set(g)
        hit += len(p & g)
        npred += len(p)
        ngold += len(g)
    prec = hit / npred if npred else 0.0
    rec = hit / ngold if ngold else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return prec, rec, f1


def write_predictions(path, preds: Sequence[Sequence[str]], golds: Sequence[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, (p, g) in enumerate(zip(preds, golds)):
            fh.write(json.dumps({"id": i, "pred": list(p), "gold": list(g)}) + "\n")
