"""Independent reference implementations used to check the library's kernels."""

import itertools

import numpy as np

from owtc import nn


def conv_oracle(x, w, b):
    """Triple loop: out[i, k] = b[k] + sum_t sum_c w[t, c, k] * x[i + t, c]."""
    length, channels = x.shape
    width, _, kernels = w.shape
    out = np.zeros((length - width + 1, kernels))
    for i in range(length - width + 1):
        for k in range(kernels):
            acc = b[k]
            for t in range(width):
                for c in range(channels):
                    acc += w[t, c, k] * x[i + t, c]
            out[i, k] = acc
    return out


def small_mlp(seed, n_in=12, hidden=(10, 6), m=4):
    rng = np.random.default_rng(seed)
    layers, tap, width = [], None, n_in
    for h in hidden:
        tap = len(layers)
        layers += [nn.init_dense(rng, width, h), nn.Layer("relu")]
        width = h
    layers += [nn.init_dense(rng, width, m), nn.Layer("softmax")]
    model = nn.NeuralModel(layers, (n_in,), m, tap)
    for layer in model.layers:
        if layer.has_params:
            layer.bias = rng.normal(0, 0.1, layer.bias.shape)
    return model


def small_cnn(seed, length=20, kernels=2, width=3, m=3):
    rng = np.random.default_rng(seed)
    lout = length - 2 * (width - 1)
    layers = [nn.init_conv1d(rng, width, 1, kernels), nn.Layer("relu"),
              nn.init_conv1d(rng, width, kernels, kernels), nn.Layer("relu"), nn.Layer("flatten"),
              nn.init_dense(rng, lout * kernels, 8), nn.Layer("relu"),
              nn.init_dense(rng, 8, m), nn.Layer("softmax")]
    model = nn.NeuralModel(layers, (length, 1), m, 5)
    for layer in model.layers:
        if layer.has_params:
            layer.bias = rng.normal(0, 0.1, layer.bias.shape)
    return model


def jacobi_eigh(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi rotations for a symmetric matrix; returns (values, vectors as columns)."""
    a = np.array(a, dtype=np.float64)
    n = len(a)
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < tol * max(1.0, np.abs(a).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1)) if theta else 1.0
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    return np.diag(a).copy(), v


def rand_index_pairs(truth, predicted):
    """Rand index by enumerating every pair."""
    agree = total = 0
    for i, j in itertools.combinations(range(len(truth)), 2):
        agree += (truth[i] == truth[j]) == (predicted[i] == predicted[j])
        total += 1
    return agree / total


def equidistant_blobs(k, seed, per=40, dim=8, scale=6.0):
    """``k`` unit-variance Gaussian blobs centred on orthogonal directions, so every pair of
    centres is ``scale * sqrt(2)`` apart."""
    rng = np.random.default_rng([seed, k])
    basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    centers = scale * basis[:k]
    points = np.concatenate([c + rng.normal(0, 1, (per, dim)) for c in centers])
    return points, np.repeat(np.arange(k), per), centers
