"""
Reverse-mode gradients on a tape
================================

Operations run eagerly on numpy arrays. Inside a ``Tape`` block each one
also records how to push a gradient back to its inputs; ``backward`` walks
the records in reverse.
"""

import numpy as np

from regnn import tensor as T
from regnn.tensor import Tape, Tensor, backward, grad_check

# a tiny LSTM-style gate: sigmoid(x W + b)
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(1, 3)))
W = Tensor(rng.normal(size=(3, 2)), requires_grad=True, name="W")
b = Tensor(np.zeros(2), requires_grad=True, name="b")

with Tape() as tape:
    gate = T.sigmoid(T.add(T.matmul(x, W), b))
    loss = T.total(gate)
print("recorded ops:", len(tape))

backward(tape, loss)
print("dloss/db =", b.grad)
s = gate.data[0]
print("by hand    ", s * (1 - s))  # sigmoid' = s (1 - s)

# leaf gradients accumulate until cleared, the way a batch sums them
with Tape() as tape:
    loss = T.total(T.sigmoid(T.add(T.matmul(x, W), b)))
backward(tape, loss)
print("after a second pass:", b.grad)

# central differences in float64 against the tape
err = grad_check(lambda w, c: T.total(T.tanh(T.add(T.matmul(x, w), c))), [W.data, b.data])
print(f"max relative error vs finite differences: {err:.2e}")
