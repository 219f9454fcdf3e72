"""Tour of the tensor engine: build a tiny attention-shaped graph by hand,
backprop through it, and confirm every gradient against central finite
differences in double precision.

Run:  python3 demos/01_autograd.py
"""

import numpy as np

from duovision import tensor as T

rng = np.random.default_rng(0)


# A scaled-dot-product attention block written directly against the op set.
def attention(q, k, v):
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(4.0))
    return T.matmul(T.softmax(scores, axis=-1), v)


def loss_fn(q, k, v, w):
    out = attention(q, k, v)
    return T.mean_(T.mul(T.matmul(out, w), T.matmul(out, w)))


leaves = [T.Tensor(rng.normal(size=s), requires_grad=True, dtype=np.float64)
          for s in ((2, 5, 4), (2, 5, 4), (2, 5, 4), (4, 3))]

# Forward + reverse pass under a tape.
with T.Tape() as tape:
    loss = loss_fn(*leaves)
    tape.backward(loss)
print(f"loss {loss.data:.6f}")
for name, leaf in zip("qkvw", leaves):
    print(f"  d loss / d {name}: shape {leaf.grad.shape}, "
          f"|grad| {np.abs(leaf.grad).max():.4f}")

# The same graph, checked numerically. gradcheck perturbs every input
# element twice, so keep the tensors small.
worst = T.gradcheck(loss_fn, leaves, tol=1e-5)
print(f"finite-difference check passed, worst relative error {worst:.3e}")

# Gradients accumulate additively across fan-out and reuse.
x = T.Tensor([2.0], requires_grad=True, dtype=np.float64)
with T.Tape() as tape:
    y = T.add(T.mul(x, x), T.mul(x, x))  # 2x^2, dy/dx = 4x
    tape.backward(T.sum_(y))
print(f"fan-out gradient at x=2: {x.grad[0]:.1f} (expect 8.0)")
