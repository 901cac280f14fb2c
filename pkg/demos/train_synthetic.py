"""
Training on a keyword-family task
=================================

Each synthetic document plants one keyword pair inside a sentence; the pair
decides the label. Lone keywords from other families are mixed in, so a
model has to notice which two words co-occur.
"""

import logging

from regnn.synthetic import generate
from regnn.training import TrainConfig, evaluate, prepare, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

docs, spec = generate(600, "single", seed=1)
print(docs[0].labels, docs[0].text[:90], "...")
print("oracle agrees with labels:", all(spec.oracle(d.text) == d.labels for d in docs))

cfg = TrainConfig(hidden=32, layers=4, max_neighbors=5, epochs=8, lr0=0.005, min_count=1, seed=0)
data = prepare(cfg, docs[:500], None, docs[500:])
print(f"{len(data.train)} train / {len(data.dev)} dev / {len(data.test)} test, vocab {len(data.vocab)}")

result = train(cfg, data.train, data.dev, len(data.vocab), len(data.labels))
print("best epoch", result.best_epoch, "dev accuracy", result.best_metric)
print("test", evaluate(result.params, data.test))
