"""
What the label decoder looks at
===============================

The multi-label head emits labels one at a time. At every step it attends
over the final node states; on the keyword task the mass should sit on the
planted pair that licenses the label being emitted.
"""

from regnn.diagnostics import attention_heatmap
from regnn.synthetic import generate
from regnn.training import TrainConfig, evaluate, prepare, train

docs, spec = generate(600, "multi", seed=3)
cfg = TrainConfig(task="multi", hidden=32, layers=4, epochs=8, lr0=0.005, min_count=1)
data = prepare(cfg, docs[:500], None, docs[500:])
res = train(cfg, data.train, data.dev, len(data.vocab), len(data.labels))
print("test", evaluate(res.params, data.test))

ex = data.test[0]
print("gold:", [data.labels[y] for y in ex.labels])
for step in range(len(ex.labels)):
    rows = attention_heatmap(res.params, ex, step, teacher_forced=True)
    top = sorted(rows, key=lambda r: -r["score"])[:4]
    keys = [r for r in top if r["token"] in spec.keywords]
    print(f"step {step} ({data.labels[ex.labels[step]]}):", " ".join(f"{r['token']}:{r['score']:.2f}" for r in top), f"[{len(keys)} keywords in top 4]")
