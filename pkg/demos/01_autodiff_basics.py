"""Walk through the tensor tape: forward ops, backward, gradient checking.

Run:  python demos/01_autodiff_basics.py
"""

import numpy as np

from mivhead import autodiff as ad

# Every computation lives on a Tape. Leaves are constants (no gradient) or
# named parameters (trainable). Ops are free functions returning new nodes.
tape = ad.Tape()
w = tape.parameter("w", np.array([[0.5, -1.0, 2.0]]))
x = tape.constant(np.array([[1.0], [2.0], [3.0]]))

y = ad.matmul(w, x)              # (1, 1)
loss = ad.reshape(y, ())
tape.backward(loss)
print("w @ x =", y.value, " dloss/dw =", w.grad)

# The op set is exactly what the classification head needs. A few of the
# interesting ones:
t2 = ad.Tape()
v = t2.constant([1.0, 1.0, 4.0])
print("softmax      ", ad.softmax(v, axis=0).value)
print("logsumexp    ", ad.logsumexp(v, axis=0).value)
print("l2_normalize ", ad.l2_normalize(v, axis=0).value)

# Adaptive max pooling shrinks a patch grid to a target shape; each output
# cell is the max over its input region.
grid = t2.constant(np.arange(16.0).reshape(4, 4, 1))
pooled = ad.adaptive_max_pool_2d(grid, 2, 2)
print("max-pooled 4x4 -> 2x2:", pooled.value[:, :, 0].tolist())

# Reductions along an axis accumulate in a canonical order (sorted by
# absolute value), so sums are invariant to permutations of the reduced axis
# bit for bit. That property is what later makes prototypes exactly
# permutation-invariant in the head.
rng = np.random.default_rng(0)
data = rng.normal(size=32) * 1e5
perm = rng.permutation(32)
print("ordered_sum invariant:",
      ad.ordered_sum(data, axis=0) == ad.ordered_sum(data[perm], axis=0))

# Gradient checking drives the whole test suite: every backward rule is
# compared against central finite differences. The loss builder must be a
# pure function of the parameter values (it is re-run for every perturbed
# evaluation), so fixed inputs are drawn up front.
features = rng.normal(size=(4, 3))

def build(tape, params):
    h = ad.sigmoid(ad.matmul(params["w1"], tape.constant(features)))
    return ad.logsumexp(ad.reshape(h, (-1,)), axis=0)

report = ad.grad_check(build, {"w1": rng.normal(size=(2, 4))})
print(f"grad check: {report.n_checked} scalars, max relative error "
      f"{report.max_rel_err:.2e}, passed={report.passed}")
