# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled per-layer kernels.

Same contract as numpy_backend; small dense layers spend most of their
time in Python/numpy dispatch, which these typed loops avoid.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

NAME = "cython"

LINEAR, RELU, SIGMOID, SOFTMAX = 0, 1, 2, 3


def affine_forward(cnp.ndarray[cnp.float64_t, ndim=2] x,
                   cnp.ndarray[cnp.float64_t, ndim=2] w,
                   cnp.ndarray[cnp.float64_t, ndim=1] b):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], m = w.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a = np.empty((n, m))
    cdef double[:, ::1] xv = np.ascontiguousarray(x)
    cdef double[:, ::1] wv = np.ascontiguousarray(w)
    cdef double[::1] bv = np.ascontiguousarray(b)
    cdef double[:, ::1] av = a
    cdef Py_ssize_t i, j, p
    cdef double acc
    for i in range(n):
        for j in range(m):
            acc = bv[j]
            for p in range(k):
                acc += xv[i, p] * wv[p, j]
            av[i, j] = acc
    return a


def affine_backward(cnp.ndarray[cnp.float64_t, ndim=2] g,
                    cnp.ndarray[cnp.float64_t, ndim=2] x,
                    cnp.ndarray[cnp.float64_t, ndim=2] w):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], m = w.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dw = np.zeros((k, m))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] db = np.zeros(m)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dx = np.empty((n, k))
    cdef double[:, ::1] gv = np.ascontiguousarray(g)
    cdef double[:, ::1] xv = np.ascontiguousarray(x)
    cdef double[:, ::1] wv = np.ascontiguousarray(w)
    cdef double[:, ::1] dwv = dw
    cdef double[::1] dbv = db
    cdef double[:, ::1] dxv = dx
    cdef Py_ssize_t i, j, p
    cdef double acc, gij
    for i in range(n):
        for j in range(m):
            gij = gv[i, j]
            dbv[j] += gij
            for p in range(k):
                dwv[p, j] += xv[i, p] * gij
    for i in range(n):
        for p in range(k):
            acc = 0.0
            for j in range(m):
                acc += gv[i, j] * wv[p, j]
            dxv[i, p] = acc
    return dw, db, dx


def act_forward(cnp.ndarray[cnp.float64_t, ndim=2] a, int kind):
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] h = np.empty((n, m))
    cdef double[:, ::1] av = np.ascontiguousarray(a)
    cdef double[:, ::1] hv = h
    cdef Py_ssize_t i, j
    cdef double val, mx, s, e
    if kind == 0:
        for i in range(n):
            for j in range(m):
                hv[i, j] = av[i, j]
    elif kind == 1:
        for i in range(n):
            for j in range(m):
                val = av[i, j]
                hv[i, j] = val if val > 0.0 else 0.0
    elif kind == 2:
        for i in range(n):
            for j in range(m):
                val = av[i, j]
                if val >= 0.0:
                    hv[i, j] = 1.0 / (1.0 + exp(-val))
                else:
                    e = exp(val)
                    hv[i, j] = e / (1.0 + e)
    elif kind == 3:
        for i in range(n):
            mx = av[i, 0]
            for j in range(1, m):
                if av[i, j] > mx:
                    mx = av[i, j]
            s = 0.0
            for j in range(m):
                e = exp(av[i, j] - mx)
                hv[i, j] = e
                s += e
            for j in range(m):
                hv[i, j] /= s
    else:
        raise ValueError(f"unknown activation code {kind}")
    return h


def act_backward(cnp.ndarray[cnp.float64_t, ndim=2] g,
                 cnp.ndarray[cnp.float64_t, ndim=2] a,
                 cnp.ndarray[cnp.float64_t, ndim=2] h,
                 int kind):
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] da = np.empty((n, m))
    cdef double[:, ::1] gv = np.ascontiguousarray(g)
    cdef double[:, ::1] av = np.ascontiguousarray(a)
    cdef double[:, ::1] hv = np.ascontiguousarray(h)
    cdef double[:, ::1] dav = da
    cdef Py_ssize_t i, j
    cdef double dot
    if kind == 0:
        for i in range(n):
            for j in range(m):
                dav[i, j] = gv[i, j]
    elif kind == 1:
        for i in range(n):
            for j in range(m):
                dav[i, j] = gv[i, j] if av[i, j] > 0.0 else 0.0
    elif kind == 2:
        for i in range(n):
            for j in range(m):
                dav[i, j] = gv[i, j] * hv[i, j] * (1.0 - hv[i, j])
    elif kind == 3:
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot += gv[i, j] * hv[i, j]
            for j in range(m):
                dav[i, j] = hv[i, j] * (gv[i, j] - dot)
    else:
        raise ValueError(f"unknown activation code {kind}")
    return da


def adam_update(cnp.ndarray param, cnp.ndarray grad,
                cnp.ndarray m, cnp.ndarray v,
                int t, double lr, double beta1, double beta2, double eps):
    cdef double[::1] pv = param.ravel()
    cdef double[::1] gv = np.ascontiguousarray(grad).ravel()
    cdef double[::1] mv = m.ravel()
    cdef double[::1] vv = v.ravel()
    cdef Py_ssize_t i, n = pv.shape[0]
    cdef double c1 = 1.0 - beta1 ** t
    cdef double c2 = 1.0 - beta2 ** t
    cdef double mhat, vhat, gi
    for i in range(n):
        gi = gv[i]
        mv[i] = beta1 * mv[i] + (1.0 - beta1) * gi
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * gi * gi
        mhat = mv[i] / c1
        vhat = vv[i] / c2
        pv[i] -= lr * mhat / (sqrt(vhat) + eps)
