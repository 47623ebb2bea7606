"""
A tape of array ops
===================

Every forward op is recorded; ``backward`` walks the tape in reverse.
``grad_check`` compares the result with central differences.
"""

import numpy as np

from hatesage.ndiff import Tape, backward, forward_op, grad_check

x = np.array([[1.0, -2.0], [0.5, 3.0], [2.0, 0.0]])
w0 = np.array([[0.3], [-0.7]])

t = Tape()
w = t.leaf(w0, "w")
z = t.matmul(t.leaf(x), w)
offsets = np.array([0, 2, 3])               # two segments: rows 0-1 and row 2
pooled = forward_op(t, "segment_max", (z,), segment_spec=offsets)
loss = t.sum(t.sigmoid(pooled))
print("loss", t.value(loss).item())
print("dloss/dw", backward(t, loss)[w].ravel())


def build(tape, ids):
    z = tape.matmul(tape.leaf(x), ids["w"])
    return tape.sum(tape.sigmoid(forward_op(tape, "segment_max", (z,), segment_spec=offsets)))


print("max relative error", grad_check(build, {"w": w0}))
