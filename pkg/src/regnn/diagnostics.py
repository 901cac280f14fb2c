"""Analysis outputs: layer-wise over-smoothing, decoder attention maps, neighbour sweeps."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import heads
from .errors import ContractError
from .model import AblationFlags, ModelParams, forward, graph_vector
from .textgraph import Document
from .training import Example, Prepared, TrainConfig, evaluate, headline, make_examples, train


def avg_cosine_distance(H) -> float:
    """Mean of ``1 - cos(a, b)`` over all unordered row pairs.

    A pair involving a zero row counts as distance 1 and triggers a
    ``RuntimeWarning``.
    """
    H = np.asarray(getattr(H, "data", H), dtype=np.float64)
    m = H.shape[0]
    if m < 2:
        raise ContractError("need at least two rows")
    norms = np.linalg.norm(H, axis=1)
    zero = norms == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero-norm rows; their pairs count as distance 1", RuntimeWarning, stacklevel=2)
    unit = H / np.where(zero, 1.0, norms)[:, None]
    cos = unit @ unit.T
    dist = 1.0 - cos
    dist[zero, :] = 1.0
    dist[:, zero] = 1.0
    iu = np.triu_indices(m, k=1)
    return float(np.clip(dist[iu], 0.0, 2.0).mean())


@dataclass
class SmoothingProfile:
    variant: str
    mean: list[float]
    std: list[float]
    documents: int

    def rows(self):
        for layer, (mu, sd) in enumerate(zip(self.mean, self.std)):
            yield layer, mu, sd, self.variant


def smoothing_profile(
    params: ModelParams,
    examples: Sequence[Example],
    L: int | None = None,
    variant: AblationFlags | None = None,
    tag: str | None = None,
    min_docs: int = 10,
) -> SmoothingProfile:
    """Per-layer mean (and std across documents) of the node cosine distance, layers ``0..L``."""
    usable = [ex for ex in examples if ex.graph.size >= 2]
    if not usable:
        raise ContractError("every document has a single node; nothing to profile")
    if len(usable) < min_docs:
        raise ContractError(f"need at least {min_docs} documents with two or more nodes, got {len(usable)}")
    variant = variant or params.config.variant
    L = params.config.layers if L is None else L
    per_doc = np.empty((len(usable), L + 1))
    for k, ex in enumerate(usable):
        _, states = forward(ex.graph, params, L, variant)
        per_doc[k] = [avg_cosine_distance(s.H.data) for s in states]
    return SmoothingProfile(tag or variant.tag, per_doc.mean(axis=0).tolist(), per_doc.std(axis=0).tolist(), len(usable))


def write_profiles(path, profiles: Sequence[SmoothingProfile]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "mean_distance", "std", "variant"])
        for prof in profiles:
            for layer, mu, sd, tag in prof.rows():
                w.writerow([layer, repr(mu), repr(sd), tag])


def attention_heatmap(params: ModelParams, example: Example, step: int, teacher_forced: bool = False) -> list[dict]:
    """Decoder attention over the document's tokens at decoding ``step`` (0-based)."""
    if params.config.task != "multi":
        raise ContractError("attention heat maps need a multi-label checkpoint")
    state, _ = forward(example.graph, params)
    gold = example.labels if teacher_forced else None
    trace = heads.decode_multi(graph_vector(state, params), state.H, params, gold=gold)
    if not 0 <= step < len(trace.attention):
        raise ContractError(f"step {step} beyond decode length {len(trace.attention)}")
    return [{"token": tok, "score": float(s)} for tok, s in zip(example.tokens, trace.attention[step])]


def write_heatmap(path, rows: Sequence[Sequence[dict]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")


@dataclass
class SweepResult:
    n: int
    metric: float
    graphs_signature: int = field(default=0, repr=False)


def neighbor_sweep(
    cfg: TrainConfig,
    data: Prepared,
    n_values: Sequence[int],
    train_docs: Sequence[Document],
    dev_docs: Sequence[Document],
    eval_docs: Sequence[Document],
) -> list[SweepResult]:
    """Rebuild graphs with each ``max_neighbors`` value, train with the shared seed, evaluate.

    The vocabulary, labels and PMI table of ``data`` are reused, so only the
    graphs change between runs. Training is deterministic given the seed, so
    an ``n`` whose graphs equal those of an earlier ``n`` reuses its metric.
    """
    if any(n < 2 for n in n_values):
        raise ContractError("neighbour counts must be >= 2")
    out = []
    seen: dict[int, float] = {}
    for n in n_values:
        c = TrainConfig.from_dict({**cfg.to_dict(), "max_neighbors": int(n)})
        tr = make_examples(train_docs, data.vocab, data.pmi, data.labels, c)
        dv = make_examples(dev_docs, data.vocab, data.pmi, data.labels, c)
        ev = make_examples(eval_docs, data.vocab, data.pmi, data.labels, c)
        sig = hash(tuple(tuple(map(tuple, ex.graph.neighbors)) for ex in tr + dv + ev))
        if sig not in seen:
            res = train(c, tr, dv, len(data.vocab), len(data.labels))
            seen[sig] = headline(evaluate(res.params, ev, c.workers))
        out.append(SweepResult(int(n), seen[sig], sig))
    return out


def write_sweep(path, rows: Sequence[SweepResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "metric"])
        for r in rows:
            w.writerow([r.n, repr(r.metric)])
