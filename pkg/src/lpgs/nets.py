"""Small dense networks and closed-form encodings used by the attribute heads.

Everything here is plain numpy with hand-written backward passes. Forward
methods return a cache that the matching backward consumes; parameter
gradients are accumulated into a caller-supplied dict keyed by parameter
name, so several trees / batches can share one gradient buffer.
"""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y, grad_y):
    # y is the forward output
    return grad_y * y * (1.0 - y)


class MLP2:
    """Two-layer perceptron: dense -> ReLU -> dense.

    Hidden width defaults to 64. Parameters live in ``self.params`` under
    the keys W1, b1, W2, b2; ``name`` prefixes them in gradient dicts.
    """

    HIDDEN = 64

    def __init__(self, name, in_dim, out_dim, rng=None, hidden=None, dtype=np.float32):
        self.name = name
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.hidden = int(hidden or self.HIDDEN)
        if rng is None:
            rng = np.random.default_rng(0)
        # He init for the ReLU layer, Glorot-ish for the linear output
        w1 = rng.normal(0.0, np.sqrt(2.0 / max(self.in_dim, 1)),
                        size=(self.in_dim, self.hidden))
        w2 = rng.normal(0.0, np.sqrt(1.0 / self.hidden),
                        size=(self.hidden, self.out_dim))
        self.W1 = w1.astype(dtype)
        self.b1 = np.zeros(self.hidden, dtype=dtype)
        self.W2 = w2.astype(dtype)
        self.b2 = np.zeros(self.out_dim, dtype=dtype)

    @property
    def dtype(self):
        return self.W1.dtype

    def astype(self, dtype):
        for attr in ("W1", "b1", "W2", "b2"):
            setattr(self, attr, getattr(self, attr).astype(dtype))
        return self

    def param_items(self):
        return [(f"{self.name}.W1", self.W1), (f"{self.name}.b1", self.b1),
                (f"{self.name}.W2", self.W2), (f"{self.name}.b2", self.b2)]

    def set_param(self, key, value):
        attr = key.split(".")[-1]
        setattr(self, attr, value)

    def forward(self, x):
        """x: (..., in_dim) -> (y, cache); y: (..., out_dim)."""
        pre = x @ self.W1 + self.b1
        h = np.maximum(pre, 0.0)
        y = h @ self.W2 + self.b2
        return y, (x, pre, h)

    def backward(self, cache, grad_y, grads):
        """Accumulates parameter grads into `grads`, returns grad wrt x."""
        x, pre, h = cache
        lead = h.reshape(-1, self.hidden)
        gy = grad_y.reshape(-1, self.out_dim)
        grads[f"{self.name}.W2"] += lead.T @ gy
        grads[f"{self.name}.b2"] += gy.sum(axis=0)
        gh = grad_y @ self.W2.T
        gh = gh * (pre > 0)
        gx = gh @ self.W1.T
        xf = x.reshape(-1, self.in_dim)
        ghf = gh.reshape(-1, self.hidden)
        grads[f"{self.name}.W1"] += xf.T @ ghf
        grads[f"{self.name}.b1"] += ghf.sum(axis=0)
        return gx


# Real spherical-harmonic basis constants, bands 0..3.
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)


def sh_basis_dim(degree):
    return (degree + 1) ** 2


def sh_basis(dirs, degree):
    """Real SH basis values for unit directions, bands 0..degree (<= 3).

    dirs: (..., 3) unit vectors. Returns (..., (degree+1)^2).
    """
    if degree < 0 or degree > 3:
        raise ValueError(f"unsupported SH degree {degree}")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (sh_basis_dim(degree),), dtype=dirs.dtype)
    out[..., 0] = _C0
    if degree >= 1:
        out[..., 1] = -_C1 * y
        out[..., 2] = _C1 * z
        out[..., 3] = -_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = _C2[0] * x * y
        out[..., 5] = _C2[1] * y * z
        out[..., 6] = _C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = _C2[3] * x * z
        out[..., 8] = _C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 9] = _C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = _C3[1] * x * y * z
        out[..., 11] = _C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = _C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = _C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = _C3[5] * z * (xx - yy)
        out[..., 15] = _C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_backward(dirs, degree, grad_out):
    """Gradient of sh_basis wrt the (unnormalized-unit) direction components."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    gx = np.zeros_like(x)
    gy = np.zeros_like(y)
    gz = np.zeros_like(z)
    # band 0 is constant
    if degree >= 1:
        gy += -_C1 * grad_out[..., 1]
        gz += _C1 * grad_out[..., 2]
        gx += -_C1 * grad_out[..., 3]
    if degree >= 2:
        g4, g5, g6, g7, g8 = (grad_out[..., i] for i in range(4, 9))
        gx += _C2[0] * y * g4 + _C2[2] * (-2.0 * x) * g6 + _C2[3] * z * g7 \
            + _C2[4] * 2.0 * x * g8
        gy += _C2[0] * x * g4 + _C2[1] * z * g5 + _C2[2] * (-2.0 * y) * g6 \
            + _C2[4] * (-2.0 * y) * g8
        gz += _C2[1] * y * g5 + _C2[2] * 4.0 * z * g6 + _C2[3] * x * g7
    if degree >= 3:
        g = [grad_out[..., i] for i in range(9, 16)]
        gx += _C3[0] * 6.0 * x * y * g[0]
        gy += _C3[0] * (3.0 * x * x - 3.0 * y * y) * g[0]
        gx += _C3[1] * y * z * g[1]
        gy += _C3[1] * x * z * g[1]
        gz += _C3[1] * x * y * g[1]
        gx += _C3[2] * (-2.0 * x * y) * g[2]
        gy += _C3[2] * (4.0 * z * z - x * x - 3.0 * y * y) * g[2]
        gz += _C3[2] * 8.0 * y * z * g[2]
        gx += _C3[3] * (-6.0 * x * z) * g[3]
        gy += _C3[3] * (-6.0 * y * z) * g[3]
        gz += _C3[3] * (6.0 * z * z - 3.0 * x * x - 3.0 * y * y) * g[3]
        gx += _C3[4] * (4.0 * z * z - 3.0 * x * x - y * y) * g[4]
        gy += _C3[4] * (-2.0 * x * y) * g[4]
        gz += _C3[4] * 8.0 * x * z * g[4]
        gx += _C3[5] * 2.0 * x * z * g[5]
        gy += _C3[5] * (-2.0 * y * z) * g[5]
        gz += _C3[5] * (x * x - y * y) * g[5]
        gx += _C3[6] * (3.0 * x * x - 3.0 * y * y) * g[6]
        gy += _C3[6] * (-6.0 * x * y) * g[6]
    return np.stack([gx, gy, gz], axis=-1)


def normalize_rows(v, eps=0.0):
    """Unit-normalize the last axis; returns (unit, norm)."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if eps:
        n = np.maximum(n, eps)
    return v / n, n


def normalize_rows_backward(unit, norm, grad_unit):
    # d(v/|v|)/dv = (I - u u^T)/|v|
    dot = np.sum(grad_unit * unit, axis=-1, keepdims=True)
    return (grad_unit - unit * dot) / norm
