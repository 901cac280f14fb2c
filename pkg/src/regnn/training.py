"""Optimisation loop: Adam with per-epoch learning-rate halving and dev selection."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import heads
from . import tensor as T
from .errors import ConfigError, ContractError, NumericError
from .model import AblationFlags, ModelConfig, ModelParams, forward, graph_vector, init_params, load_checkpoint, save_checkpoint
from .textgraph import (
    DEFAULT_WINDOW,
    MAX_TOKENS,
    Document,
    PmiTable,
    TextGraph,
    Vocab,
    build_graph,
    build_vocab,
    compute_pmi,
    document_tokens,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    hidden: int = 300
    layers: int = 6
    max_neighbors: int = 5
    lr0: float = 0.001
    lr_decay: float = 0.5
    epochs: int = 20
    batch_size: int = 10
    seed: int = 0
    task: str = "single"
    lstm: bool = True
    attention: bool = True
    global_node: bool = True
    positions: bool = True
    window: int = DEFAULT_WINDOW
    min_count: int = 5
    max_labels: int = 8
    symmetrize: bool = False
    shared_layers: bool = True
    clip_norm: float | None = None
    freeze_embeddings: bool = False
    dev_fraction: float = 0.1
    workers: int = 1

    def __post_init__(self):
        for name in ("hidden", "layers", "epochs", "batch_size", "window", "min_count", "max_labels", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_neighbors < 2:
            raise ConfigError("max_neighbors must be >= 2")
        if self.lr0 <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr0 must be positive and lr_decay in (0, 1]")
        if self.task not in ("single", "multi"):
            raise ConfigError(f"task must be 'single' or 'multi', got {self.task!r}")
        if not 0 < self.dev_fraction < 1:
            raise ConfigError("dev_fraction must be in (0, 1)")

    @property
    def variant(self) -> AblationFlags:
        return AblationFlags(self.lstm, self.attention, self.global_node)

    def lr(self, epoch: int) -> float:
        """Learning rate of 0-based ``epoch``."""
        return self.lr0 * self.lr_decay**epoch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# data


@dataclass
class Example:
    graph: TextGraph
    labels: list[int]
    tokens: list[str]


@dataclass
class Prepared:
    """Vocabulary, label set, PMI table and graph-built splits."""

    vocab: Vocab
    labels: list[str]
    pmi: PmiTable
    train: list[Example]
    dev: list[Example]
    test: list[Example] = field(default_factory=list)

    def label_index(self) -> dict[str, int]:
        return {lab: i for i, lab in enumerate(self.labels)}


def split_dev(docs: Sequence, fraction: float, rng: np.random.Generator) -> tuple[list, list]:
    """Seeded random ``(train, dev)`` split holding out ``fraction`` of ``docs``."""
    order = rng.permutation(len(docs))
    k = max(1, int(round(fraction * len(docs))))
    dev = sorted(order[:k].tolist())
    keep = sorted(order[k:].tolist())
    return [docs[i] for i in keep], [docs[i] for i in dev]


def make_examples(docs: Sequence[Document], vocab: Vocab, pmi: PmiTable, labels: Sequence[str], cfg: TrainConfig) -> list[Example]:
    index = {lab: i for i, lab in enumerate(labels)}
    out = []
    for d in docs:
        toks = document_tokens(d.text, MAX_TOKENS)
        if not toks:
            continue
        unknown = [lab for lab in d.labels if lab not in index]
        if unknown:
            raise ContractError(f"labels {unknown} not in the label set")
        graph = build_graph(vocab.ids(toks), pmi, cfg.max_neighbors, symmetrize=cfg.symmetrize)
        ys = [index[lab] for lab in d.labels]
        if cfg.task == "single":
            ys = ys[:1]
        out.append(Example(graph, ys, toks))
    return out


def prepare(cfg: TrainConfig, train_docs: Sequence[Document], dev_docs: Sequence[Document] | None = None, test_docs: Sequence[Document] = ()) -> Prepared:
    """Build vocabulary (train text), PMI (all supplied text) and graphs for each split.

    Without ``dev_docs`` a seeded ``dev_fraction`` of the training documents
    is held out.
    """
    train_docs = list(train_docs)
    if dev_docs is None:
        train_docs, dev_docs = split_dev(train_docs, cfg.dev_fraction, np.random.default_rng([cfg.seed, 1]))
    dev_docs, test_docs = list(dev_docs), list(test_docs)
    vocab = build_vocab((d.text for d in train_docs), cfg.min_count)
    texts = [d.text for d in train_docs + dev_docs + test_docs]
    pmi = compute_pmi(texts, vocab, cfg.window)
    labels = sorted({lab for d in train_docs + dev_docs + test_docs for lab in d.labels})
    return Prepared(
        vocab,
        labels,
        pmi,
        make_examples(train_docs, vocab, pmi, labels, cfg),
        make_examples(dev_docs, vocab, pmi, labels, cfg),
        make_examples(test_docs, vocab, pmi, labels, cfg),
    )


def model_config(cfg: TrainConfig, vocab_size: int, n_labels: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        n_labels=n_labels,
        hidden=cfg.hidden,
        task=cfg.task,
        positions=cfg.positions,
        variant=cfg.variant,
        shared_layers=cfg.shared_layers,
        layers=cfg.layers,
        max_labels=cfg.max_labels,
    )


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ModelParams, state: AdamState, lr: float, frozen: Sequence[str] = ()) -> None:
    """One bias-corrected Adam update from the accumulated ``.grad`` of each parameter.

    A missing gradient counts as zero. Raises before touching anything if a
    gradient is not finite.
    """
    for name in params.names():
        g = params[name].grad
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name in params.names():
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if name in frozen:
            continue
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if norm > max_norm:
        f = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(f)
    return norm


# ---------------------------------------------------------------------------
# loss and prediction


def example_loss(ex: Example, params: ModelParams) -> T.Tensor:
    state, _ = forward(ex.graph, params)
    gvec = graph_vector(state, params)
    if params.config.task == "single":
        return heads.loss_single(heads.single_logits(gvec, params), ex.labels[0])
    gold = ex.labels[: params.config.max_labels]
    return heads.loss_multi(heads.teacher_forced_logits(gvec, state.H, params, gold), gold)


def predict(ex: Example, params: ModelParams) -> list[int]:
    state, _ = forward(ex.graph, params)
    gvec = graph_vector(state, params)
    if params.config.task == "single":
        return [heads.classify_single(gvec, params)[0]]
    return heads.decode_multi(gvec, state.H, params).labels


def predict_all(examples: Sequence[Example], params: ModelParams, workers: int = 1) -> list[list[int]]:
    if workers <= 1 or len(examples) < 2:
        return [predict(ex, params) for ex in examples]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda ex: predict(ex, params), examples))


def metrics(pred: Sequence[Sequence[int]], gold: Sequence[Sequence[int]], task: str) -> dict:
    if len(pred) != len(gold):
        raise ContractError("prediction and gold lists differ in length")
    if task == "single":
        acc = sum(int(p[0] == g[0]) for p, g in zip(pred, gold)) / len(gold) if gold else 0.0
        return {"accuracy": acc}
    p, r, f = heads.evaluate_multilabel(pred, gold)
    return {"precision": p, "recall": r, "f1": f}


def headline(m: dict) -> float:
    """Dev-selection metric: accuracy, or micro-F1 for label sets."""
    return m["accuracy"] if "accuracy" in m else m["f1"]


def evaluate(params: ModelParams, examples: Sequence[Example], workers: int = 1) -> dict:
    pred = predict_all(examples, params, workers)
    return metrics(pred, [ex.labels for ex in examples], params.config.task)


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    dev_metric: float


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochLog]
    best_epoch: int
    best_metric: float
    config: TrainConfig

    def write_log(self, path) -> None:
        write_log(path, self.log)


def write_log(path, rows: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "dev_metric"])
        for r in rows:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.dev_metric)])


def train(
    cfg: TrainConfig,
    train_set: Sequence[Example],
    dev_set: Sequence[Example],
    vocab_size: int,
    n_labels: int,
    embeddings: np.ndarray | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Train for ``cfg.epochs`` epochs and keep the parameters that scored best on dev.

    Gradients of ``batch_size`` documents are summed before each Adam step.
    Epoch ``e`` (0-based) runs at ``lr0 * lr_decay**e``.
    """
    if not dev_set:
        raise ConfigError("training needs a non-empty dev set")
    if not train_set:
        raise ConfigError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    init_rng, shuffle_rng = rng.spawn(2)
    params = init_params(model_config(cfg, vocab_size, n_labels), init_rng)
    if embeddings is not None:
        if embeddings.shape != params["E_word"].shape:
            raise ConfigError(f"embedding table {embeddings.shape} does not match {params['E_word'].shape}")
        params["E_word"].data = embeddings.astype(params.dtype)
    frozen = ("E_word",) if cfg.freeze_embeddings else ()
    adam = AdamState()
    best = None
    best_metric, best_epoch = -math.inf, -1
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr(epoch)
        order = shuffle_rng.permutation(len(train_set))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            params.zero_grad()
            for k in order[start : start + cfg.batch_size]:
                with T.Tape() as tape:
                    loss = example_loss(train_set[k], params)
                T.backward(tape, loss)
                total += float(loss.data)
            if cfg.clip_norm:
                clip_gradients(params, cfg.clip_norm)
            adam_step(params, adam, lr, frozen)
        params.zero_grad()
        dev = headline(evaluate(params, dev_set, cfg.workers))
        row = EpochLog(epoch, lr, total / len(train_set), dev)
        history.append(row)
        log.info("epoch %d lr %.3g train_loss %.4f dev %.4f", epoch, lr, row.train_loss, dev)
        if on_epoch:
            on_epoch(row)
        if dev > best_metric:
            best_metric, best_epoch = dev, epoch
            best = params.copy()
    return TrainResult(best, history, best_epoch, best_metric, cfg)


def save_trained(path, result: TrainResult, data: Prepared, extra: dict | None = None) -> None:
    header = {
        "train_config": result.config.to_dict(),
        "seed": result.config.seed,
        "vocab": data.vocab.tokens,
        "labels": data.labels,
        "best_epoch": result.best_epoch,
        "best_dev_metric": result.best_metric,
    }
    if extra:
        header.update(extra)
    save_checkpoint(path, result.params, header)


def load_trained(path, data: Prepared | None = None) -> tuple[ModelParams, dict]:
    """Load a checkpoint, checking its vocabulary and labels against ``data``."""
    params, header = load_checkpoint(path)
    if data is not None:
        if header.get("vocab") != data.vocab.tokens:
            raise ContractError("checkpoint vocabulary does not match the data vocabulary")
        if header.get("labels") != data.labels:
            raise ContractError("checkpoint label set does not match the data labels")
    return params, header


def run_seeds(cfg: TrainConfig, data: Prepared, seeds: Sequence[int], split: str = "test") -> dict:
    """Train once per seed and report mean and sample std of each test metric."""
    runs = []
    for s in seeds:
        c = TrainConfig.from_dict({**cfg.to_dict(), "seed": int(s)})
        res = train(c, data.train, data.dev, len(data.vocab), len(data.labels))
        runs.append(evaluate(res.params, getattr(data, split)))
    out = {"runs": runs}
    for key in runs[0]:
        vals = np.array([r[key] for r in runs])
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
    return out


# ---------------------------------------------------------------------------
# embeddings


def load_embeddings(path, vocab: Vocab, dim: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Embedding table for ``vocab`` from a ``token v1 ... vd`` text file.

    Rows without a match (including the special tokens) keep the default
    uniform initialisation. Returns the table and the fraction of regular
    vocabulary tokens found in the file.
    """
    bound = 1.0 / math.sqrt(dim)
    table = rng.uniform(-bound, bound, size=(len(vocab), dim))
    found = np.zeros(len(vocab), dtype=bool)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            parts = line.rstrip("\n").rstrip().split(" ")
            if lineno == 0 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if len(parts) < 2:
                continue
            tok, vals = parts[0], parts[1:]
            if len(vals) != dim:
                raise ConfigError(f"{path}:{lineno + 1}: vector of size {len(vals)}, hidden size is {dim}")
            i = vocab.index.get(tok)
            if i is None or i < 4:
                continue
            table[i] = np.asarray(vals, dtype=np.float64)
            found[i] = True
    regular = max(len(vocab) - 4, 1)
    return table, float(found[4:].sum()) / regular
