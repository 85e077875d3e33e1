"""Straight-line reference implementations used as independent test oracles.

Everything here works index by index on plain numpy arrays and never calls
into mffunet's operators.
"""
import math
from fractions import Fraction

import numpy as np


def conv2d(x, w, b, pad):
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((n, co, ho, wo))
    for s in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(ci):
                        for di in range(k):
                            for dj in range(k):
                                r, q = i + di - pad, j + dj - pad
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += x[s, c, r, q] * w[o, c, di, dj]
                    out[s, o, i, j] = acc
    return out


def conv_transpose2d(x, w, b):
    n, ci, h, wd = x.shape
    co = w.shape[1]
    out = np.zeros((n, co, 2 * h, 2 * wd))
    for s in range(n):
        for o in range(co):
            out[s, o] += b[o]
            for c in range(ci):
                for i in range(h):
                    for j in range(wd):
                        for a in range(2):
                            for bb in range(2):
                                out[s, o, 2 * i + a, 2 * j + bb] += x[s, c, i, j] * w[c, o, a, bb]
    return out


def batch_norm_train(x, gamma, beta, eps=1e-5):
    n, c, h, w = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for ch in range(c):
        vals = [x[s, ch, i, j] for s in range(n) for i in range(h) for j in range(w)]
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        for s in range(n):
            for i in range(h):
                for j in range(w):
                    out[s, ch, i, j] = gamma[ch] * (x[s, ch, i, j] - mu) / math.sqrt(var + eps) + beta[ch]
    return out


def relu(x):
    out = np.array(x, dtype=np.float64)
    for idx in np.ndindex(out.shape):
        if out[idx] < 0:
            out[idx] = 0.0
    return out


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def mff(x, p):
    """``p`` maps local parameter names to numpy arrays."""
    h = x
    stages = []
    for i in (1, 2, 3):
        pre = f"block{i}."
        y = batch_norm_train(conv2d(h, p[pre + "conv.w"], p[pre + "conv.b"], 1), p[pre + "bn.gamma"], p[pre + "bn.beta"])
        if pre + "proj.w" in p:
            sc = conv2d(h, p[pre + "proj.w"], np.zeros(p[pre + "proj.w"].shape[0]), 0)
        else:
            sc = h
        h = relu(y + sc)
        stages.append(h)
    n, _, hh, ww = x.shape
    total = sum(s.shape[1] for s in stages)
    cat = np.zeros((n, total, hh, ww))
    off = 0
    for s in stages:
        for c in range(s.shape[1]):
            cat[:, off + c] = s[:, c]
        off += s.shape[1]
    fused = batch_norm_train(cat, p["fuse_bn.gamma"], p["fuse_bn.beta"])
    side = conv2d(x, p["path1x1.w"], p["path1x1.b"], 0)
    return relu(fused + side)


def cca(x, p):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h, w))
    attn = np.zeros((n, c))
    for s in range(n):
        desc = []
        for ch in range(c):
            total = 0.0
            for i in range(h):
                for j in range(w):
                    total += x[s, ch, i, j]
            desc.append(p["w"][ch] * total / (h * w))
        for ch in range(c):
            acc = p["bias"][0]
            for t in range(3):
                src = ch + t - 1
                if 0 <= src < c:
                    acc += p["kernel"][t] * desc[src]
            attn[s, ch] = sigmoid(acc)
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    out[s, ch, i, j] = x[s, ch, i, j] * attn[s, ch]
    return out, attn


def augmented_skip(s, p):
    return relu(conv2d(s, p["conv3.w"], p["conv3.b"], 1) + conv2d(s, p["conv1.w"], p["conv1.b"], 0))


def soft_dice_loss(probs, target, eps=1e-6):
    n, k, h, w = probs.shape
    scores = []
    for c in range(1, k):
        inter = psum = tsum = 0.0
        for s in range(n):
            for i in range(h):
                for j in range(w):
                    t = 1.0 if target[s, i, j] == c else 0.0
                    inter += probs[s, c, i, j] * t
                    psum += probs[s, c, i, j]
                    tsum += t
        scores.append((2 * inter + eps) / (psum + tsum + eps))
    return 1.0 - sum(scores) / len(scores)


def overlap_counts(preds, trues, num_classes):
    """Per-class (intersection, predicted, true) pixel counts over a list of masks."""
    inter = [0] * num_classes
    pred = [0] * num_classes
    true = [0] * num_classes
    for pm, tm in zip(preds, trues):
        for idx in np.ndindex(pm.shape):
            a, b = int(pm[idx]), int(tm[idx])
            pred[a] += 1
            true[b] += 1
            if a == b:
                inter[a] += 1
    return inter, pred, true


def dice_and_jaccard(inter, pred, true):
    if pred + true == 0:
        return 1.0, 1.0
    return 2 * inter / (pred + true), inter / (pred + true - inter)


def resize_nearest(img, out_h, out_w):
    h, w = img.shape
    out = np.zeros((out_h, out_w), dtype=img.dtype)
    for i in range(out_h):
        for j in range(out_w):
            r = math.floor(Fraction(i * h, out_h))
            c = math.floor(Fraction(j * w, out_w))
            out[i, j] = img[r, c]
    return out


def adam(theta, grads, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam over a sequence of gradients; returns the parameter after each step."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(theta)
    return out


def param_count_formula(base, num_classes, in_channels=1):
    """Closed-form trainable parameter count of the network for ``base`` width."""
    def conv(ci, co, k):
        return co * ci * k * k + co

    def bn(c):
        return 2 * c

    def mff(ci, c):
        c1, c2, c3 = c // 2, c // 4, c // 4
        total = conv(ci, c1, 3) + bn(c1) + (ci * c1 if ci != c1 else 0)
        total += conv(c1, c2, 3) + bn(c2) + c1 * c2
        total += conv(c2, c3, 3) + bn(c3)
        return total + bn(c) + conv(ci, c, 1)

    total = 0
    prev = in_channels
    widths = [base, 2 * base, 4 * base, 8 * base]
    for c in widths:
        total += mff(prev, c) + (c + 3 + 1) + conv(c, c, 3) + conv(c, c, 1)
        prev = c
    bridge = 16 * base
    total += conv(prev, bridge, 3) + bn(bridge) + conv(bridge, bridge, 3) + bn(bridge)
    prev = bridge
    for c in reversed(widths):
        total += prev * c * 4 + c + conv(2 * c, c, 3) + bn(c) + conv(c, c, 3) + bn(c)
        prev = c
    return total + conv(base, num_classes, 1)
