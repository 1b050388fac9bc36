"""Pure-numpy implementations of the hot per-layer kernels.

This is the fallback backend; the compiled extension in ``_ckernels.pyx``
implements the same five functions with identical signatures. All arrays
are float64 and batch-major: ``x`` is (batch, fan_in), weights are
(fan_in, fan_out), biases are (fan_out,).
"""

import numpy as np

NAME = "numpy"

# activation codes shared with the compiled backend
LINEAR, RELU, SIGMOID, SOFTMAX = 0, 1, 2, 3


def affine_forward(x, w, b):
    """a = x @ w + b, shape (batch, fan_out)."""
    return x @ w + b


def affine_backward(g, x, w):
    """Gradients of an affine layer given g = dL/da.

    Returns (dw, db, dx) with dw = x.T @ g, db = column sums of g,
    dx = g @ w.T.
    """
    dw = x.T @ g
    db = g.sum(axis=0)
    dx = g @ w.T
    return dw, db, dx


def act_forward(a, kind):
    """Apply the activation coded by ``kind`` elementwise (softmax rowwise)."""
    if kind == LINEAR:
        return a.copy()
    if kind == RELU:
        return np.maximum(a, 0.0)
    if kind == SIGMOID:
        # split by sign to avoid overflow in exp
        out = np.empty_like(a)
        pos = a >= 0.0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out
    if kind == SOFTMAX:
        z = a - a.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    raise ValueError(f"unknown activation code {kind}")


def act_backward(g, a, h, kind):
    """da = dL/da given g = dL/dh, the pre-activation a and output h.

    The relu derivative at exactly 0 is defined as 0 so results are
    reproducible across backends.
    """
    if kind == LINEAR:
        return g.copy()
    if kind == RELU:
        return np.where(a > 0.0, g, 0.0)
    if kind == SIGMOID:
        return g * h * (1.0 - h)
    if kind == SOFTMAX:
        # rowwise Jacobian: da = h * (g - <g, h>)
        dot = (g * h).sum(axis=1, keepdims=True)
        return h * (g - dot)
    raise ValueError(f"unknown activation code {kind}")


def adam_update(param, grad, m, v, t, lr, beta1, beta2, eps):
    """One bias-corrected Adam step, in place on param/m/v. t is 1-based."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
