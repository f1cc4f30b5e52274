"""Independent reference computations used by the tests.

Deliberately naive: explicit loops and closed forms, sharing no code with the package.
"""

import math

import numpy as np


def conv2d_loop(x, k, b, stride, padding):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for r in range(ho):
                for s in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ci, r * stride + u, s * stride + v] * k[o, ci, u, v]
                    out[i, o, r, s] = acc
    return out


def conv2d_jacobian(in_shape, k, stride, padding):
    """Jacobian of the (bias-free) loop convolution w.r.t. its input, via basis vectors."""
    size = int(np.prod(in_shape))
    zero_b = np.zeros(k.shape[0])
    cols = []
    for i in range(size):
        e = np.zeros(size)
        e[i] = 1.0
        cols.append(conv2d_loop(e.reshape(in_shape), k, zero_b, stride, padding).ravel())
    return np.stack(cols, axis=1)


def matmul_loop(a, b):
    n, d = a.shape
    _, u = b.shape
    out = np.zeros((n, u))
    for i in range(n):
        for j in range(u):
            s = 0.0
            for t in range(d):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def cross_entropy_direct(logits, labels):
    total = 0.0
    for row, y in zip(np.asarray(logits, dtype=np.float64), labels):
        total += -(row[y] - math.log(sum(math.exp(v) for v in row)))
    return total / len(labels)


def confusion_counting(preds, labels, k):
    cm = [[0] * k for _ in range(k)]
    for p, y in zip(preds, labels):
        cm[y][p] += 1
    return np.array(cm)


def balanced_counting(preds, labels, k):
    recalls = []
    for c in range(k):
        members = [i for i, y in enumerate(labels) if y == c]
        hits = sum(1 for i in members if preds[i] == c)
        recalls.append(hits / len(members))
    return sum(recalls) / k


def standard_counting(preds, labels):
    return sum(1 for p, y in zip(preds, labels) if p == y) / len(labels)


def adam_scalar(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta
