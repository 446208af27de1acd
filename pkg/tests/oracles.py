"""Brute-force loop oracles shared by the unit and acceptance tests."""

import math

import numpy as np

from replayseg.types import IGNORE


def loop_confusion(pred, truth, c):
    cm = np.zeros((c, c), dtype=np.int64)
    for p, t in zip(pred.ravel(), truth.ravel()):
        if t != IGNORE:
            cm[t, p] += 1
    return cm


def loop_miou(cm, subset):
    vals = []
    for c in subset:
        inter = cm[c, c]
        union = sum(cm[c, :]) + sum(cm[:, c]) - inter
        if union > 0:
            vals.append(inter / union)
    return sum(vals) / len(vals) if vals else None


def loop_entropy(p):
    total = 0.0
    for row in p:
        total += -sum(v * math.log(v) for v in row if v > 0)
    return total / len(p)


def loop_tv_image(image):
    lum = image.mean(axis=0)
    h, w = lum.shape
    t = 0.0
    for i in range(h):
        for j in range(w):
            if i + 1 < h:
                t += abs(lum[i + 1, j] - lum[i, j])
            if j + 1 < w:
                t += abs(lum[i, j + 1] - lum[i, j])
    return t


def loop_tv_label(y):
    h, w = y.shape
    n = 0
    for i in range(h):
        for j in range(w):
            n += int(i + 1 < h and y[i + 1, j] != y[i, j])
            n += int(j + 1 < w and y[i, j + 1] != y[i, j])
    return n


def loop_histogram(y, c):
    counts = [0] * c
    for v in np.asarray(y).ravel():
        if v != IGNORE:
            counts[int(v)] += 1
    return counts


def fd_check(model, loss_fn, g, n_coords=240, delta=1e-4):
    """Max relative error of analytic vs central-difference gradient on random coordinates."""
    theta = model.flat().astype(np.float64)
    analytic = loss_fn(model, grad=True)
    coords = g.choice(theta.size, size=n_coords, replace=False)
    worst = 0.0
    for i in coords:
        plus, minus = theta.copy(), theta.copy()
        plus[i] += delta
        minus[i] -= delta
        num = (loss_fn(model.with_flat(plus)) - loss_fn(model.with_flat(minus))) / (2 * delta)
        a = analytic[i]
        scale = max(abs(a), abs(num), 1e-6)
        worst = max(worst, abs(a - num) / scale)
    return worst
