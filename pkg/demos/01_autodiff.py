"""
Reverse-mode autodiff and finite-difference checks
===================================================

Every layer in the package is built on a small tape-based tensor.  This
walk-through records a graph, runs backward and compares against central
differences.
"""

import numpy as np

from scrnet.tensor import Tensor, backward, grad_check, no_grad, sigmoid, softmax

rng = np.random.default_rng(0)

# leaves that ask for gradients record every op applied to them
x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
loss = sigmoid(x @ w).sum()
backward(loss)
print("d loss / d w =\n", w.grad)

# the same gradient by central differences, coordinate by coordinate
report = grad_check(lambda t: sigmoid(x @ t).sum(), w, h=1e-5, tol=1e-6)
print(report)

# softmax rows are probability vectors
p = softmax(Tensor(rng.normal(scale=10, size=(2, 5))), axis=1)
print("row sums:", p.data.sum(axis=1))

# inside no_grad nothing is recorded, which is what evaluation uses
with no_grad():
    y = x * 2.0
print("recorded under no_grad:", y.requires_grad)

# the registered suite covers every op and the composite blocks
from scrnet.gradcheck_suite import format_table, run_suite  # noqa: E402

print(format_table(run_suite(["softmax", "conv2d", "shift", "attention", "spatial_gate"])))
