# cython: boundscheck=False, wraparound=False, cdivision=True
# Compiled kernels for the training inner loop. Same contract as
# cvrlab._kernels.pykernels; per-element arithmetic mirrors it exactly.

import numpy as np

cimport cython
from libc.math cimport exp, log, sqrt

NAME = "c"


cdef inline double _sigmoid(double z) nogil:
    cdef double ez
    if z >= 0.0:
        return 1.0 / (1.0 + exp(-z))
    ez = exp(z)
    return ez / (1.0 + ez)


def sigmoid(z):
    z = np.ascontiguousarray(z, dtype=np.float64)
    out = np.empty_like(z)
    cdef double[::1] zv = z.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = zv.shape[0]
    for i in range(n):
        ov[i] = _sigmoid(zv[i])
    return out


def leaky_relu(z, double slope):
    z = np.ascontiguousarray(z, dtype=np.float64)
    out = np.empty_like(z)
    cdef double[::1] zv = z.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = zv.shape[0]
    for i in range(n):
        ov[i] = zv[i] if zv[i] > 0.0 else slope * zv[i]
    return out


def leaky_relu_grad(z, gout, double slope):
    z = np.ascontiguousarray(z, dtype=np.float64)
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    gin = np.empty_like(z)
    cdef double[::1] zv = z.ravel()
    cdef double[::1] gv = gout.ravel()
    cdef double[::1] ov = gin.ravel()
    cdef Py_ssize_t i, n = zv.shape[0]
    for i in range(n):
        ov[i] = gv[i] if zv[i] > 0.0 else slope * gv[i]
    return gin


def bce_loss_grad(logits, labels, weights, double eps):
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    grad = np.empty_like(logits)
    cdef double[::1] zv = logits
    cdef double[::1] yv = labels
    cdef double[::1] wv = weights
    cdef double[::1] gv = grad
    cdef Py_ssize_t i, n = zv.shape[0]
    cdef double loss = 0.0
    cdef double p, pc, hi = 1.0 - eps
    for i in range(n):
        p = _sigmoid(zv[i])
        pc = p
        if pc < eps:
            pc = eps
        elif pc > hi:
            pc = hi
        loss -= wv[i] * (yv[i] * log(pc) + (1.0 - yv[i]) * log(1.0 - pc))
        if eps < p < hi:
            gv[i] = wv[i] * (p - yv[i])
        else:
            gv[i] = 0.0
    return loss, grad


def adam_update(param, grad, m, v, Py_ssize_t step, double lr,
                double beta1, double beta2, double eps):
    cdef double[::1] pv = param.ravel()
    cdef double[::1] gv = np.ascontiguousarray(grad, dtype=np.float64).ravel()
    cdef double[::1] mv = m.ravel()
    cdef double[::1] vv = v.ravel()
    cdef Py_ssize_t i, n = pv.shape[0]
    cdef double c1 = 1.0 - beta1 ** step
    cdef double c2 = 1.0 - beta2 ** step
    cdef double mhat, vhat
    for i in range(n):
        mv[i] = beta1 * mv[i] + (1.0 - beta1) * gv[i]
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * (gv[i] * gv[i])
        mhat = mv[i] / c1
        vhat = vv[i] / c2
        pv[i] = pv[i] - lr * (mhat / (sqrt(vhat) + eps))


def gather_rows(table, ids):
    table = np.ascontiguousarray(table, dtype=np.float64)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    cdef double[:, ::1] tv = table
    cdef long long[::1] iv = ids
    cdef Py_ssize_t i, j, n = iv.shape[0], d = tv.shape[1]
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] ov = out
    for i in range(n):
        for j in range(d):
            ov[i, j] = tv[iv[i], j]
    return out


def scatter_add_rows(acc, ids, rows):
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    cdef double[:, ::1] av = acc
    cdef long long[::1] iv = ids
    cdef double[:, ::1] rv = rows
    cdef Py_ssize_t i, j, n = iv.shape[0], d = av.shape[1]
    for i in range(n):
        for j in range(d):
            av[iv[i], j] += rv[i, j]
