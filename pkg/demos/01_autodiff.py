"""Tour of the tensor engine: forward ops, gradients, and the FD oracle."""

import numpy as np

from fedinv import tensor as T
from fedinv.tensor import Tensor, backward_pass, finite_difference_check

rng = np.random.default_rng(0)

# a small computation: y = softmax(x W) against a fixed target direction
x = Tensor(rng.normal(0, 1, (3, 4)), requires_grad=True)
w = Tensor(rng.normal(0, 1, (4, 4)))
target = Tensor(rng.normal(0, 1, (3, 4)))

probs = T.softmax(T.matmul(x, w), axis=1)
loss = T.tsum(T.mul(probs, target))
backward_pass(loss)
print("loss:", round(loss.item(), 6))
print("gradient wrt x (first row):", x.grad[0].round(4))

# every row of a softmax sums to one
print("softmax row sums:", probs.data.sum(axis=1))

# the finite-difference oracle agrees with the recorded gradients
def f(t):
    return T.tsum(T.mul(T.softmax(T.matmul(t, w), axis=1), target))

err = finite_difference_check(f, Tensor(x.data.copy()), h=1e-5)
print(f"finite-difference max relative error: {err:.2e}")

# gradients are rejected when they would silently accumulate
loss2 = T.tsum(T.mul(x, x))
try:
    backward_pass(loss2)
except RuntimeError as exc:
    print("second backward without zero_grad ->", type(exc).__name__)
x.zero_grad()
backward_pass(T.tsum(T.mul(x, x)))
print("after zero_grad, d(sum x^2)/dx == 2x:",
      np.allclose(x.grad, 2 * x.data))
