"""
How fast do node states collapse?
=================================

Mean pairwise cosine distance between node states, layer by layer. Layers
share parameters, so a model trained at depth 4 can be run deeper. The
gated update keeps the nodes apart; the plain ``tanh`` update lets them
drift together.
"""

from regnn.diagnostics import smoothing_profile, write_profiles
from regnn.synthetic import generate
from regnn.training import TrainConfig, prepare, train

docs, _ = generate(500, "multi", seed=2)
profiles = []
for lstm in (True, False):
    cfg = TrainConfig(task="multi", hidden=32, layers=4, epochs=6, lr0=0.005, min_count=1, lstm=lstm)
    data = prepare(cfg, docs[:400], None, docs[400:])
    res = train(cfg, data.train, data.dev, len(data.vocab), len(data.labels))
    profiles.append(smoothing_profile(res.params, data.test, L=10))

for prof in profiles:
    print(f"{prof.variant:>8}: " + " ".join(f"{m:.3f}" for m in prof.mean))
write_profiles("smoothing.csv", profiles)

try:
    import matplotlib.pyplot as plt
except ImportError:
    plt = None
if plt is not None:
    for prof in profiles:
        plt.errorbar(range(len(prof.mean)), prof.mean, yerr=prof.std, label=prof.variant, capsize=2)
    plt.xlabel("layer")
    plt.ylabel("mean cosine distance")
    plt.legend()
    plt.savefig("smoothing.png", dpi=120)
