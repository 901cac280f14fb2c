"""Corpus text to vocabulary, PMI statistics and per-document graphs.

Each document becomes a graph whose nodes are its token occurrences. A node
is wired to its sequence neighbours and to the same-document tokens it has
the highest positive PMI with, up to ``n`` neighbours in total.
"""

from __future__ import annotations

import itertools
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, IngestionError, VocabLookupError

MAX_TOKENS = 200
DEFAULT_WINDOW = 10

UNK, PAD, START, END = "<unk>", "<pad>", "<start>", "<end>"
SPECIALS = (UNK, PAD, START, END)
UNK_ID, PAD_ID, START_ID, END_ID = 0, 1, 2, 3

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_TERMINAL = {".", "!", "?"}


def tokenize(text: str, window: int = DEFAULT_WINDOW, max_tokens: int | None = MAX_TOKENS) -> list[list[str]]:
    """Split text into co-occurrence spans.

    Tokens are lowercased words and detached punctuation marks. When the text
    contains terminal punctuation the spans are its sentences (the terminal
    marks themselves are dropped); otherwise they are stride-1 windows of
    ``window`` tokens. ``max_tokens`` truncates the token stream first.
    """
    raw = _TOKEN_RE.findall(text.lower())
    if not raw:
        return []
    if any(t in _TERMINAL for t in raw):
        spans, cur, kept = [], [], 0
        for tok in raw:
            if tok in _TERMINAL:
                if cur:
                    spans.append(cur)
                    cur = []
                continue
            if max_tokens is not None and kept >= max_tokens:
                break
            cur.append(tok)
            kept += 1
        if cur:
            spans.append(cur)
        return spans
    if max_tokens is not None:
        raw = raw[:max_tokens]
    if window < 1:
        raise ConfigError("window must be >= 1")
    if len(raw) <= window:
        return [raw]
    return [raw[i : i + window] for i in range(len(raw) - window + 1)]


def document_tokens(text: str, max_tokens: int | None = MAX_TOKENS) -> list[str]:
    """The node sequence of a document: its tokens in order, terminal marks dropped, truncated."""
    toks = [t for t in _TOKEN_RE.findall(text.lower()) if t not in _TERMINAL]
    return toks if max_tokens is None else toks[:max_tokens]


@dataclass
class Vocab:
    tokens: list[str]
    counts: list[int]
    min_count: int = 5
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError("special tokens must occupy ids 0-3")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        get = self.index.get
        return [get(t, UNK_ID) for t in tokens]

    def token(self, i: int) -> str:
        if not 0 <= i < len(self.tokens):
            raise VocabLookupError(i)
        return self.tokens[i]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok, c in zip(self.tokens, self.counts):
                fh.write(f"{tok}\t{c}\n")

    @classmethod
    def load(cls, path, min_count: int = 5) -> "Vocab":
        tokens, counts = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                tok, c = line.rstrip("\n").split("\t")
                tokens.append(tok)
                counts.append(int(c))
        return cls(tokens, counts, min_count)


def build_vocab(corpus: Iterable[str], min_count: int = 5) -> Vocab:
    """Frequency-ranked vocabulary; tokens seen fewer than ``min_count`` times map to UNK."""
    freq: Counter[str] = Counter()
    ndocs = 0
    for text in corpus:
        ndocs += 1
        freq.update(document_tokens(text, max_tokens=None))
    if ndocs == 0:
        raise IngestionError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in freq.items() if c >= min_count and t not in SPECIALS), key=lambda t: (-freq[t], t))
    unk = sum(c for t, c in freq.items() if c < min_count)
    return Vocab(list(SPECIALS) + kept, [unk, 0, 0, 0] + [freq[t] for t in kept], min_count)


@dataclass
class PmiTable:
    """Span-level occurrence counts and the PMI they induce.

    ``pairs`` is keyed by ``(i, j)`` with ``i < j``; the symmetric lookup is
    handled by :meth:`pair_count`.
    """

    unigram: np.ndarray
    pairs: dict[tuple[int, int], int]
    spans: int

    def pair_count(self, i: int, j: int) -> int:
        if i > j:
            i, j = j, i
        return self.pairs.get((i, j), 0)

    def pmi(self, i: int, j: int) -> float:
        """Natural-log PMI; ``-inf`` for pairs never seen together or for i == j."""
        if i == j:
            return -math.inf
        c = self.pair_count(i, j)
        if c == 0:
            return -math.inf
        return math.log(c * self.spans / (float(self.unigram[i]) * float(self.unigram[j])))

    def merge(self, other: "PmiTable") -> "PmiTable":
        size = max(len(self.unigram), len(other.unigram))
        uni = np.zeros(size, dtype=np.int64)
        uni[: len(self.unigram)] += self.unigram
        uni[: len(other.unigram)] += other.unigram
        pairs = Counter(self.pairs)
        pairs.update(other.pairs)
        return PmiTable(uni, dict(pairs), self.spans + other.spans)

    def summary(self) -> dict:
        positive = sum(1 for (i, j) in self.pairs if self.pmi(i, j) > 0)
        return {"spans": self.spans, "pairs": len(self.pairs), "positive_pairs": positive}

    def save(self, path) -> None:
        keys = sorted(self.pairs)
        ij = np.array(keys, dtype=np.int64).reshape(-1, 2)
        counts = np.array([self.pairs[k] for k in keys], dtype=np.int64)
        with open(path, "wb") as fh:
            np.savez(fh, unigram=self.unigram, ij=ij, counts=counts, spans=np.int64(self.spans))

    @classmethod
    def load(cls, path) -> "PmiTable":
        try:
            z = np.load(path)
        except (OSError, ValueError) as exc:
            raise IngestionError(f"{path}: cannot read PMI table ({exc})") from exc
        pairs = {(int(i), int(j)): int(c) for (i, j), c in zip(z["ij"], z["counts"])}
        return cls(z["unigram"].astype(np.int64), pairs, int(z["spans"]))


def count_spans(spans: Iterable[Sequence[int]], vocab_size: int) -> PmiTable:
    """Count each distinct id and each distinct unordered id pair once per span."""
    uni = np.zeros(vocab_size, dtype=np.int64)
    pairs: Counter[tuple[int, int]] = Counter()
    n = 0
    for span in spans:
        n += 1
        ids = sorted(set(span))
        uni[ids] += 1
        pairs.update(itertools.combinations(ids, 2))
    return PmiTable(uni, dict(pairs), n)


def compute_pmi(corpus: Iterable[str], vocab: Vocab, window: int = DEFAULT_WINDOW) -> PmiTable:
    """Corpus-wide PMI statistics over every span of every (untruncated) document."""

    def spans():
        for text in corpus:
            for span in tokenize(text, window=window, max_tokens=None):
                yield vocab.ids(span)

    return count_spans(spans(), len(vocab))


@dataclass
class TextGraph:
    token_ids: list[int]
    positions: list[int]
    neighbors: list[list[int]]
    max_neighbors: int
    _padded: tuple | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def size(self) -> int:
        return len(self.token_ids)

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i, nb in enumerate(self.neighbors) for j in nb]

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """Neighbour index matrix ``(m, K)`` and its validity mask."""
        if self._padded is None:
            m = self.size
            k = max((len(nb) for nb in self.neighbors), default=0) or 1
            idx = np.zeros((m, k), dtype=np.intp)
            mask = np.zeros((m, k), dtype=bool)
            for i, nb in enumerate(self.neighbors):
                idx[i, : len(nb)] = nb
                mask[i, : len(nb)] = True
            self._padded = (idx, mask)
        return self._padded

    def permuted(self, perm: Sequence[int]) -> "TextGraph":
        """Same graph with node ``k`` of the result being node ``perm[k]`` of this one."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        return TextGraph(
            [self.token_ids[p] for p in perm],
            [self.positions[p] for p in perm],
            [[inv[j] for j in self.neighbors[p]] for p in perm],
            self.max_neighbors,
        )

    def to_json(self, vocab: Vocab | None = None) -> dict:
        nodes = [vocab.token(t) for t in self.token_ids] if vocab else list(self.token_ids)
        return {"nodes": nodes, "edges": [list(e) for e in self.edges()]}


def positive_candidate_counts(tokens: Sequence[int], pmi: PmiTable) -> list[int]:
    """Per node, how many other nodes of the document have positive PMI with it."""
    scores = _pmi_matrix(tokens, pmi)
    return [int(np.sum(scores[i] > 0)) for i in range(len(tokens))]


def _pmi_matrix(tokens: Sequence[int], pmi: PmiTable) -> np.ndarray:
    uniq = sorted(set(tokens))
    pos = {t: k for k, t in enumerate(uniq)}
    table = np.full((len(uniq), len(uniq)), -np.inf)
    for a, b in itertools.combinations(range(len(uniq)), 2):
        table[a, b] = table[b, a] = pmi.pmi(uniq[a], uniq[b])
    rows = [pos[t] for t in tokens]
    return table[np.ix_(rows, rows)]


def build_graph(tokens: Sequence[int], pmi: PmiTable, n: int, symmetrize: bool = False) -> TextGraph:
    """Wire each node to its sequence neighbours plus top positive-PMI partners.

    Direct neighbours always come first. The remaining ``n - |direct|`` slots
    go to same-document nodes with positive PMI, highest first, ties to the
    smaller node index.
    """
    if n < 2:
        raise ConfigError(f"max_neighbors must be >= 2, got {n}")
    m = len(tokens)
    if m == 0:
        raise ConfigError("cannot build a graph for an empty document")
    scores = _pmi_matrix(tokens, pmi)
    neighbors = []
    for i in range(m):
        direct = [j for j in (i - 1, i + 1) if 0 <= j < m]
        room = n - len(direct)
        cands = [j for j in np.flatnonzero(scores[i] > 0).tolist() if j not in direct]
        cands.sort(key=lambda j: (-scores[i, j], j))
        neighbors.append(direct + cands[:room])
    if symmetrize:
        for i in range(m):
            for j in list(neighbors[i]):
                if i not in neighbors[j]:
                    neighbors[j].append(i)
    return TextGraph(list(tokens), list(range(m)), neighbors, n)


# ---------------------------------------------------------------------------
# corpus files


@dataclass
class Document:
    labels: list[str]
    text: str


def read_corpus(path) -> list[Document]:
    """Read ``label<TAB>text`` lines; multiple labels are ``|``-separated."""
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot read corpus {path}: {exc.strerror}") from exc
    docs = []
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise IngestionError(f"{path}:{lineno}: expected label<TAB>text")
            label, text = line.split("\t", 1)
            labels = [lab for lab in label.split("|") if lab]
            if not labels:
                raise IngestionError(f"{path}:{lineno}: empty label field")
            docs.append(Document(labels, text))
    return docs


def write_corpus(path, docs: Iterable[Document]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            text = " ".join(d.text.split())
            fh.write("|".join(d.labels) + "\t" + text + "\n")


def write_graphs(path, graphs: Iterable[TextGraph], vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(json.dumps(g.to_json(vocab), ensure_ascii=False) + "\n")


def read_graphs(path, vocab: Vocab, max_neighbors: int) -> Iterator[TextGraph]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            ids = vocab.ids(obj["nodes"])
            nbrs: list[list[int]] = [[] for _ in ids]
            for i, j in obj["edges"]:
                nbrs[i].append(j)
            yield TextGraph(ids, list(range(len(ids))), nbrs, max_neighbors)
