"""Small builders shared by the unit and acceptance tests."""

import numpy as np

from regnn.model import AblationFlags, ModelConfig, ModelParams, init_params
from regnn.tensor import Tensor
from regnn.textgraph import TextGraph


def random_graph(rng, m, vocab_size=12, max_neighbors=4):
    """Chain plus random extra edges, capped at ``max_neighbors`` per node."""
    neighbors = [[j for j in (i - 1, i + 1) if 0 <= j < m] for i in range(m)]
    for i in range(m):
        others = [j for j in range(m) if j != i and j not in neighbors[i]]
        room = max_neighbors - len(neighbors[i])
        if others and room > 0:
            extra = rng.choice(others, size=min(room, len(others), int(rng.integers(0, room + 1))), replace=False)
            neighbors[i] += [int(j) for j in extra]
    tokens = rng.integers(4, vocab_size, size=m).tolist()
    return TextGraph(tokens, list(range(m)), neighbors, max_neighbors)


def make_params(rng, d=4, vocab_size=12, n_labels=3, task="single", variant=None, layers=2, dtype=np.float64, scale=1.0, **kw):
    """Random parameters; ``scale`` inflates weights so gates leave their linear zone."""
    cfg = ModelConfig(
        vocab_size=vocab_size,
        n_labels=n_labels,
        hidden=d,
        task=task,
        variant=variant or AblationFlags(),
        layers=layers,
        max_positions=32,
        **kw,
    )
    params = init_params(cfg, rng, dtype=dtype)
    for name, t in params.tensors.items():
        # biases start at zero; give them values so their gradients are exercised
        if t.data.ndim == 1 and np.all(t.data == 0):
            t.data = rng.uniform(-0.5, 0.5, size=t.shape).astype(dtype)
        t.data = (t.data * scale).astype(dtype)
    return params


def swap(params, names, tensors):
    """Copy of ``params`` with ``names`` replaced by ``tensors`` (for grad checks)."""
    new = dict(params.tensors)
    for n, t in zip(names, tensors):
        new[n] = t if isinstance(t, Tensor) else Tensor(t)
    return ModelParams(params.config, new)
