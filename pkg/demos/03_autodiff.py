"""
Gradients through a small graph
===============================

The reverse-mode engine behind the trainable prompts, checked against
central differences.
"""
import numpy as np

from mixforge import autodiff as ad
from mixforge.autodiff import GraphError, Tensor, grad_check

rng = np.random.default_rng(0)
w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
x = Tensor(rng.normal(size=(5, 3)))          # no grad: acts like a frozen input

loss = ad.mean(ad.gelu(x @ w))
loss.backward()
print("loss", loss.item())
print("grad shape", w.grad.shape, "x.grad", x.grad)

# a second backward over the consumed graph is refused
try:
    loss.backward()
except GraphError as e:
    print("GraphError:", e)

# a plain sum of a layer norm is constant, so weight the outputs first
v = Tensor(rng.normal(size=(5, 4)))
rep = grad_check(lambda t: ad.sum_(ad.layer_norm(ad.sigmoid(x @ t)) * v), w, tol=1e-6)
print("grad check passed", rep.passed, "max rel err", rep.max_rel_error)
