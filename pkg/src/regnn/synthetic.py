"""Seeded keyword-family corpora whose labels are recoverable by exact lookup.

A family is a small set of keyword pairs. A document belongs to a family when
both words of one of its pairs occur in the same sentence. Documents also
carry lone keywords from other families as distractors, so single words are
not enough to tell the label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .textgraph import Document


@dataclass
class KeywordTask:
    families: list[list[tuple[str, str]]]
    fillers: list[str]

    @property
    def keywords(self) -> set[str]:
        return {w for fam in self.families for pair in fam for w in pair}

    def label_name(self, f: int) -> str:
        return f"family{f}"

    def oracle(self, text: str) -> list[str]:
        """Labels by exact lookup: families with a pair inside one sentence."""
        sentences = [set(s.split()) for s in text.split(".") if s.strip()]
        out = []
        for f, fam in enumerate(self.families):
            if any(a in s and b in s for a, b in fam for s in sentences):
                out.append(self.label_name(f))
        return out


def keyword_task(vocab_size: int = 200, families: int = 4, pairs_per_family: int = 2) -> KeywordTask:
    words = [f"w{i:03d}" for i in range(vocab_size)]
    nkw = families * pairs_per_family * 2
    kws = iter(words[:nkw])
    fams = [[(next(kws), next(kws)) for _ in range(pairs_per_family)] for _ in range(families)]
    return KeywordTask(fams, words[nkw:])


def generate(
    n_docs: int,
    task: str = "single",
    seed: int = 0,
    spec: KeywordTask | None = None,
    min_len: int = 20,
    max_len: int = 40,
    max_families: int = 3,
    distractor_prob: float = 0.5,
) -> tuple[list[Document], KeywordTask]:
    """Documents of ``min_len..max_len`` words split into sentences of 5-10 words.

    ``task="single"`` plants one family per document; ``"multi"`` plants
    1..``max_families`` distinct families, labels listed in family order.
    """
    spec = spec or keyword_task()
    rng = np.random.default_rng(seed)
    nfam = len(spec.families)
    docs = []
    for _ in range(n_docs):
        length = int(rng.integers(min_len, max_len + 1))
        words = list(rng.choice(spec.fillers, size=length))
        cuts, pos = [], 0
        while pos < length:
            size = int(rng.integers(5, 11))
            cuts.append((pos, min(pos + size, length)))
            pos += size
        if task == "single":
            chosen = [int(rng.integers(nfam))]
        else:
            k = int(rng.integers(1, max_families + 1))
            chosen = sorted(rng.choice(nfam, size=k, replace=False).tolist())
        used: set[int] = set()
        sentence_order = rng.permutation(len(cuts)).tolist()
        for j, f in enumerate(chosen):
            a, b = spec.families[f][int(rng.integers(len(spec.families[f])))]
            lo, hi = cuts[sentence_order[j % len(cuts)]]
            slots = [p for p in range(lo, hi) if p not in used]
            if len(slots) < 2:
                slots = [p for p in range(length) if p not in used][:2]
            pa, pb = rng.choice(slots, size=2, replace=False).tolist()
            words[pa], words[pb] = a, b
            used.update((pa, pb))
        others = [f for f in range(nfam) if f not in chosen]
        if others and rng.random() < distractor_prob:
            f = others[int(rng.integers(len(others)))]
            pair = spec.families[f][int(rng.integers(len(spec.families[f])))]
            free = [p for p in range(length) if p not in used]
            words[int(rng.choice(free))] = pair[int(rng.integers(2))]
        text = " . ".join(" ".join(words[lo:hi]) for lo, hi in cuts) + " ."
        docs.append(Document([spec.label_name(f) for f in chosen], text))
    return docs, spec
