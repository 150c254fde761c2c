# coding: utf-8
# A short tour of the tape-based autodiff core.
#
# Every differentiable op records itself on the active Tape; backward() then
# walks the tape in reverse and accumulates .grad on each input tensor.
# Run with:  python demos/01_autodiff_tour.py

# %%
import numpy as np

from biranet import tensor as T
from biranet.gradcheck import grad_check, numeric_gradient
from biranet.tensor import Tape, Tensor

rng = np.random.default_rng(0)

# %% [markdown]
# A scalar function of a matrix: f(W) = sum(relu(W x)).  The gradient wrt W
# is the outer product of the ReLU mask with x, which we can write down by hand.

# %%
W = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
x = Tensor(rng.normal(size=(4, 1)))

with Tape() as tape:
    f = T.sum_all(T.relu(T.matmul(W, x)))
tape.backward(f)

mask = (W.data @ x.data > 0).astype(float)
print("f =", f.item())
print("autodiff grad:\n", W.grad)
print("by hand:\n", mask @ x.data.T)

# %% [markdown]
# The same gradient by central differences.  grad_check reports the worst
# relative error, floored so tiny entries do not blow it up.

# %%
fn = lambda: T.sum_all(T.relu(T.matmul(W, x)))  # noqa: E731
print("numeric:\n", numeric_gradient(fn, W))
print("grad_check worst rel. error: %.2e" % grad_check(fn, [W]))

# %% [markdown]
# Division is guarded: a denominator smaller than 1e-8 in magnitude is moved
# out to +-1e-8 (keeping its sign) and the event is counted.

# %%
T.diagnostics.reset()
num = Tensor(np.array([1.0, 1.0, 1.0]))
den = Tensor(np.array([2.0, 1e-12, -1e-12]))
print("guarded division:", T.div(num, den).data)
print("diagnostics:", T.diagnostics.snapshot())

# %% [markdown]
# Fan-out: a tensor used twice gets both contributions.

# %%
a = Tensor(np.array([1.5, -2.0]), requires_grad=True)
with Tape() as tape:
    g = T.sum_all(T.mul(a, a))
tape.backward(g)
print("d/da sum(a*a) =", a.grad, "(expected", 2 * a.data, ")")
