# coding: utf-8
# The three pieces that sit on top of the backbone: the attention quotient,
# bilinear pooling and the distance-weighted grading loss.
# Run with:  python demos/02_attention_bilinear_loss.py

# %%
import numpy as np

from biranet.attention import attention_output
from biranet.bilinear import bilinear_pool, m_operator
from biranet.loss import cross_entropy_baseline, grading_loss, weight_table
from biranet.tensor import Tensor

rng = np.random.default_rng(1)

# %% [markdown]
# ## Attention output
# Per channel, GAP(A) / GAP(A * F).  With A == 1 this is one over the
# channel mean of F; `inverted=True` gives the mask-weighted mean instead.

# %%
A = Tensor(np.ones((1, 2, 2, 2)))
F = Tensor(np.array([[[[1, 3], [2, 2]], [[4, 4], [0, 8]]]], dtype=float))
print("A == 1            :", attention_output(A, F).data)
print("A == 1, inverted  :", attention_output(A, F, inverted=True).data)

a = rng.uniform(0.1, 0.9, size=(1, 3, 4, 4))
f = rng.uniform(0.5, 2.0, size=(1, 3, 4, 4))
base = attention_output(Tensor(a), Tensor(f)).data
for alpha in (0.5, 2.0, 10.0):
    scaled = attention_output(Tensor(a), Tensor(alpha * f)).data
    print(f"F -> {alpha:>4}F : output * alpha / base = {(scaled * alpha / base).ravel()}")

# %% [markdown]
# ## Bilinear pooling
# z z^T, signed square root, then L2 normalisation.  For z = [3, 4]:
# zz^T = [[9, 12], [12, 16]] -> sqrt -> [3, sqrt 12, sqrt 12, 4] / 7.

# %%
z = Tensor(np.array([[3.0, 4.0]]))
v = bilinear_pool(z).data
print("pool([3, 4]) =", v, " norm", np.linalg.norm(v))
print("scale-free   :", np.abs(bilinear_pool(Tensor(3.0 * z.data)).data - v).max())

x, y = Tensor(np.array([[2.0, 4.0]])), Tensor(np.array([[4.0, 8.0]]))
print("M(x, y)      =", m_operator(x, y).data)

# %% [markdown]
# ## Grading loss
# Cross-entropy scaled by (|argmax - y| + 1) / M(y).  Row y of the table holds
# the weight for every possible argmax; each row sums to one.

# %%
for y, row in enumerate(weight_table(5)):
    print(f"y={y}: " + "  ".join(f"{w!s:>5}" for w in row))

logits = Tensor(np.array([[0.0, 0.0, 0.0, 0.0, 3.0]]))
print("argmax 4, true 0: CE %.4f  grading %.4f" % (cross_entropy_baseline(logits, [0]).item(),
                                                    grading_loss(logits, [0]).item()))
print("argmax 4, true 3: CE %.4f  grading %.4f" % (cross_entropy_baseline(logits, [3]).item(),
                                                    grading_loss(logits, [3]).item()))
