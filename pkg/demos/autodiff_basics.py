"""A walk through the reverse-mode tape.

Builds a few small expressions, pulls gradients back through them, and
cross-checks one against central finite differences.  Run it directly:

    python3 demos/autodiff_basics.py
"""

import numpy as np

from progdiff import tensor as T

# Every differentiable value is a Tensor wrapping a float64 array.
# Operations record themselves on a global tape; backward() replays
# the tape once, accumulating gradients into the leaves.

x = T.parameter(np.array([1.0, 2.0, 3.0]))
y = T.tensor_sum(T.mul(x, x))  # y = sum(x^2)
T.backward(y)
print("d/dx sum(x^2)    =", x.grad, "(expect 2x = [2, 4, 6])")

# The tape is consumed by backward; reset it before the next graph.
T.reset_tape()

# A slightly deeper graph: a tiny linear layer and a softplus readout.
w = T.parameter(np.array([[0.4, -0.3], [0.1, 0.8], [-0.5, 0.2]]))
v = T.Tensor(np.array([[0.9, -1.1, 0.3]]))
h = T.matmul(v, w)
loss = T.mean(T.softplus(h))
T.backward(loss)
print("loss             =", float(loss.data))
print("dloss/dw         =\n", w.grad)

# Check the (0, 0) entry against a central difference.
eps = 1e-5


def loss_at(delta):
    with T.no_grad():  # evaluation only, nothing recorded
        wp = w.data.copy()
        wp[0, 0] += delta
        return float(T.mean(T.softplus(
            T.matmul(v, T.Tensor(wp)))).data)


fd = (loss_at(eps) - loss_at(-eps)) / (2 * eps)
print("finite difference=", fd)
print("analytic         =", w.grad[0, 0])
print("abs error        =", abs(fd - w.grad[0, 0]))

# Broadcasting follows a strict suffix rule: a (3,) bias can meet a
# (2, 3) matrix, but a (3, 1) column against (3, 4) is rejected so
# silent shape bugs fail loudly.
T.reset_tape()
b = T.parameter(np.array([0.1, -0.2, 0.3]))
m = T.Tensor(np.ones((2, 3)))
out = T.tensor_sum(T.add(m, b))
T.backward(out)
print("bias grad        =", b.grad, "(each entry fed by 2 rows)")

try:
    T.add(T.Tensor(np.ones((3, 1))), T.Tensor(np.ones((3, 4))))
except T.ShapeMismatch as e:
    print("rejected as designed:", e)
