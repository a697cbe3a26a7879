"""Reverse-mode autodiff walkthrough.

Builds a tiny computation out of deskml tensors, asks for gradients,
and cross-checks one of them against central finite differences.

Run: python3 demos/01_autodiff.py
"""

import numpy as np

from deskml import rng as R
from deskml import tensor as T
from deskml.tensor import Tensor

# Every array is a Tensor; operations record a tape behind the scenes.
key = R.RngKey.from_seed(0)
kw, kx = R.split(key, 2)
params = {
    "w": Tensor(R.normal(kw, (3, 2))),
    "b": Tensor(np.zeros(2)),
}
x = Tensor(R.normal(kx, (5, 3)))


def loss_fn(p):
    """A small network ending in a scalar: mean of a softmax-gated gelu."""
    h = T.gelu(x @ p["w"] + p["b"])
    return T.tmean(T.softmax(h, axis=-1) * h)


# value_and_grad runs the forward pass, then walks the tape backwards.
value, grads = T.value_and_grad(loss_fn, params)
print(f"loss value            : {value.item():.6f}")
print(f"grad wrt w (analytic) :\n{grads['w'].data}")

# Sanity check one entry with central differences.
h = 1e-6
bumped = {k: Tensor(v.data.copy()) for k, v in params.items()}
bumped["w"].data[0, 0] += h
up = loss_fn(bumped).item()
bumped["w"].data[0, 0] -= 2 * h
down = loss_fn(bumped).item()
numeric = (up - down) / (2 * h)
print(f"grad[0,0] analytic={grads['w'].data[0, 0]:.8f} numeric={numeric:.8f}")
assert abs(grads["w"].data[0, 0] - numeric) < 1e-5
print("analytic gradient matches finite differences")
