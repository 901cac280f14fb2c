"""
From sentences to a text graph
==============================

Word pairs are scored by PMI over spans (sentences, or sliding windows when
a document has no sentence marks). Each token occurrence becomes a node tied
to its neighbours in the sequence plus the same-document tokens with the
highest positive PMI.
"""

import math

from regnn.textgraph import build_graph, build_vocab, compute_pmi, document_tokens, tokenize

corpus = ["a b c. a b. c d. a d."]
print(tokenize(corpus[0]))  # four spans, terminal marks dropped

vocab = build_vocab(corpus, min_count=1)
pmi = compute_pmi(corpus, vocab)
a, b, d = vocab.id("a"), vocab.id("b"), vocab.id("d")
# a and b share 2 of 4 spans, each appears in 3 (a) and 2 (b): ln(2*4 / (3*2))
print("PMI(a,b) =", pmi.pmi(a, b), " ln(4/3) =", math.log(4 / 3))
print("PMI(a,d) =", pmi.pmi(a, d), "(negative: never a graph edge unless adjacent)")

# a longer document and its graph with at most 4 neighbours per node
text = "the cat sat on the mat . the dog sat on the log . a cat and a dog ."
vocab = build_vocab([text], min_count=1)
pmi = compute_pmi([text], vocab, window=4)
tokens = document_tokens(text)
graph = build_graph(vocab.ids(tokens), pmi, n=4)
for i, nb in enumerate(graph.neighbors):
    print(f"{i:2d} {tokens[i]:>4} -> " + " ".join(f"{tokens[j]}@{j}" for j in nb))
