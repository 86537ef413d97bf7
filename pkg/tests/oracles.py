"""Independent reference implementations used as test oracles.

Everything here is written with plain loops or the standard library so it
shares no code path with the package under test.
"""

from __future__ import annotations

import math
import statistics

import numpy as np

import waterline.tensor as T


# ---------------------------------------------------------------------------
# operators

def conv2d_loop(x, w, b, stride=1, groups=1, padding="same"):
    c, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if padding == "same":
        oh, ow = -(-h // stride), -(-wd // stride)
        pt = max((oh - 1) * stride + kh - h, 0) // 2
        pl = max((ow - 1) * stride + kw - wd, 0) // 2
    else:
        oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
        pt = pl = 0
    out = np.zeros((cout, oh, ow))
    per_out = cout // groups
    for o in range(cout):
        g = o // per_out
        for i in range(oh):
            for j in range(ow):
                acc = 0.0 if b is None else b[o]
                for ci in range(cin_g):
                    for u in range(kh):
                        for v in range(kw):
                            yy = i * stride + u - pt
                            xx = j * stride + v - pl
                            if 0 <= yy < h and 0 <= xx < wd:
                                acc += w[o, ci, u, v] * x[g * cin_g + ci, yy, xx]
                out[o, i, j] = acc
    return out


def shuffle_loop(x, groups):
    c = x.shape[0]
    per = c // groups
    out = np.empty_like(x)
    for g in range(groups):
        for k in range(per):
            out[k * groups + g] = x[g * per + k]
    return out


def gap_loop(x):
    c, h, w = x.shape
    out = np.zeros((c, 1, 1))
    for k in range(c):
        total = 0.0
        for i in range(h):
            for j in range(w):
                total += x[k, i, j]
        out[k, 0, 0] = total / (h * w)
    return out


def fc_loop(x, w, b):
    out = np.zeros(w.shape[0])
    for o in range(w.shape[0]):
        acc = b[o]
        for i in range(w.shape[1]):
            acc += w[o, i] * x[i]
        out[o] = acc
    return out


def scale_loop(x, s):
    out = np.empty_like(x)
    c, h, w = x.shape
    for k in range(c):
        for i in range(h):
            for j in range(w):
                out[k, i, j] = x[k, i, j] * s[k]
    return out


# ---------------------------------------------------------------------------
# metrics

def dist_to_set(p, pts):
    return min(math.hypot(p[0] - q[0], p[1] - q[1]) for q in pts)


def precision_bf(est, anchors, lam):
    if not est:
        return None
    return sum(1 for e in est if dist_to_set(e, anchors) <= lam) / len(est)


def recall_bf(est, anchors, gt, lam):
    return sum(1 for e in est if dist_to_set(e, anchors) <= lam) / len(gt)


def coverage_bf(est, gt, lam):
    if not est:
        return 0.0
    return sum(1 for g in gt if dist_to_set(g, est) <= lam) / len(gt)


def fp_bf(est, anchors, lam):
    d = [dist_to_set(e, anchors) for e in est]
    return [v for v in d if v > lam]


def skew_bf(d):
    n = len(d)
    if n < 3:
        return None
    mean = sum(d) / n
    m2 = sum((v - mean) ** 2 for v in d) / n
    m3 = sum((v - mean) ** 3 for v in d) / n
    if m2 == 0:
        return None
    return math.sqrt(n * (n - 1)) / (n - 2) * m3 / m2 ** 1.5


def f1_bf(p, r):
    if p is None or r is None:
        return None
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def stability_bf(xs):
    sd = statistics.stdev(xs)
    if sd == 0:
        return 0.0
    return (statistics.fmean(xs) - statistics.median(xs)) / sd


# ---------------------------------------------------------------------------
# geometry

def dda_line(p0, p1):
    """Symmetric digital differential analyser: one pixel per step of the major axis."""
    (x0, y0), (x1, y1) = p0, p1
    n = max(abs(x1 - x0), abs(y1 - y0))
    if n == 0:
        return [(x0, y0)]
    return [(x0 + round((x1 - x0) * k / n), y0 + round((y1 - y0) * k / n)) for k in range(n + 1)]


def square_meets_boundary_bf(params, cx, cy, s, samples=4001):
    """Dense sampling of the boundary over the closed square's column span."""
    xs = np.linspace(cx - s / 2, cx + s / 2, samples)
    ys = params.boundary_y(xs)
    return int(np.any((ys >= cy - s / 2) & (ys <= cy + s / 2)))


# ---------------------------------------------------------------------------
# network gradient checking

class ReluRecorder:
    """Records the on/off pattern of every relu evaluated while active."""

    def __init__(self, monkeypatch):
        self.masks = []
        original = T.relu

        def relu(x):
            self.masks.append(x > 0)
            return original(x)

        monkeypatch.setattr(T, "relu", relu)

    def run(self, fn):
        self.masks = []
        value = fn()
        return value, self.masks


def network_grad_check(network, loss_fn, grads, recorder, rng, per_tensor=4, eps=1e-5,
                       max_redraws=20):
    """Worst relative FD error over sampled parameter elements of every tensor.

    An element is only compared when neither the +eps nor the -eps evaluation
    flips any relu on or off relative to the unperturbed pass: a central
    difference straddling a kink does not estimate the derivative at the
    point. Such elements are redrawn. Returns ``(worst, checked, skipped)``.
    """
    _, base = recorder.run(loss_fn)
    worst, checked, skipped = 0.0, 0, 0
    for name, p in network.params.items():
        flat = p.reshape(-1)
        ga = grads[name].reshape(-1)
        taken = 0
        redraws = 0
        tried = set()
        while taken < min(per_tensor, flat.size) and len(tried) < flat.size:
            i = int(rng.integers(flat.size))
            if i in tried:
                continue
            tried.add(i)
            orig = flat[i]
            flat[i] = orig + eps
            fp, mp = recorder.run(loss_fn)
            flat[i] = orig - eps
            fm, mm = recorder.run(loss_fn)
            flat[i] = orig
            if any((a != b).any() for a, b in zip(base, mp)) or \
                    any((a != b).any() for a, b in zip(base, mm)):
                skipped += 1
                redraws += 1
                if redraws > max_redraws:
                    raise AssertionError(f"{name}: too many relu crossings")
                continue
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(num - ga[i]) / max(abs(num), abs(ga[i]), 1e-8))
            taken += 1
            checked += 1
    return worst, checked, skipped
