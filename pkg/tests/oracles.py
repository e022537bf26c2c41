"""Independent reference implementations used by the test-suite.

Everything here is deliberately naive (explicit loops, no shared code with
the package) so that agreement is meaningful.
"""

from __future__ import annotations

import math

import numpy as np


# --- SVM dual ---------------------------------------------------------------


def _project_box_hyperplane(v, y, C):
    """Euclidean projection of v onto {0 <= a <= C, y.a = 0}.

    a(mu) = clip(v - mu*y, 0, C) is monotone in mu, piecewise linear with
    breakpoints where a coordinate hits a bound; bracket the root among the
    breakpoints and interpolate exactly.
    """
    def h(mu):
        return float(np.dot(y, np.clip(v - mu * y, 0.0, C)))

    bps = np.unique(np.concatenate([v * y, (v - C) * y]))
    vals = np.array([h(m) for m in bps])
    # h is non-increasing in mu and changes sign between the extreme breakpoints
    idx = np.flatnonzero(vals <= 0)
    j = idx[0]
    if vals[j] == 0 or j == 0:
        mu = bps[j]
    else:
        m0, m1, h0, h1 = bps[j - 1], bps[j], vals[j - 1], vals[j]
        mu = m0 + (m1 - m0) * h0 / (h0 - h1)
    return np.clip(v - mu * y, 0.0, C)


def dual_value(a, y, K):
    s = 0.0
    n = len(a)
    for i in range(n):
        for j in range(n):
            s += a[i] * a[j] * y[i] * y[j] * K[i][j]
    return float(sum(a) - 0.5 * s)


def projected_gradient_dual(K, y, C, max_iter=200_000, tol=1e-15):
    """Maximize the SVM dual by accelerated projected gradient until a fixed point."""
    K = np.asarray(K, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    Q = (y[:, None] * y[None, :]) * K
    L = max(np.linalg.eigvalsh(Q).max(), 1e-12)
    step = 1.0 / L
    a = np.zeros(len(y))
    z = a.copy()
    t = 1.0
    for _ in range(max_iter):
        grad = 1.0 - Q @ z
        a_new = _project_box_hyperplane(z + step * grad, y, C)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        z = a_new + ((t - 1.0) / t_new) * (a_new - a)
        # restart momentum when the objective would decrease
        if np.dot(1.0 - Q @ a_new, a_new - a) < 0:
            z = a_new.copy()
            t_new = 1.0
        if np.max(np.abs(a_new - a)) < tol:
            a = a_new
            break
        a, t = a_new, t_new
    return a


def rbf_gram_naive(X, gamma):
    n = len(X)
    K = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            d = sum((X[i][k] - X[j][k]) ** 2 for k in range(len(X[i])))
            K[i][j] = math.exp(-gamma * d)
    return np.array(K)


# --- patches ----------------------------------------------------------------


def _mirror_index(i, n):
    """Edge-repeating reflection of an out-of-range index (... 1 0 | 0 1 ... n-1 | n-1 n-2 ...)."""
    period = 2 * n
    i = i % period
    return i if i < n else period - 1 - i


def brute_force_patches(values, labels, p, policy):
    """Dict (row, col) -> (label, patch) built by explicit per-pixel loops."""
    rows, cols = len(labels), len(labels[0])
    h = p // 2
    out = {}
    for r in range(rows):
        for c in range(cols):
            if labels[r][c] == 0:
                continue
            inside = h <= r < rows - h and h <= c < cols - h
            if policy == "skip" and not inside:
                continue
            patch = np.empty((p, p, values.shape[2]), dtype=values.dtype)
            for dr in range(-h, h + 1):
                for dc in range(-h, h + 1):
                    rr = _mirror_index(r + dr, rows)
                    cc = _mirror_index(c + dc, cols)
                    patch[dr + h, dc + h] = values[rr, cc]
            out[(r, c)] = (int(labels[r][c]), patch)
    return out


# --- CNN pieces -------------------------------------------------------------


def naive_conv_same(x, w, b):
    """Quadruple-loop same-padded cross-correlation + bias (no activation).

    x: (H, W, Cin), w: (k, k, Cin, Cout), b: (Cout,)
    """
    H, W, Cin = x.shape
    k = w.shape[0]
    h = k // 2
    Cout = w.shape[3]
    out = np.zeros((H, W, Cout), dtype=np.float64)
    for i in range(H):
        for j in range(W):
            for f in range(Cout):
                s = float(b[f])
                for di in range(k):
                    for dj in range(k):
                        ii, jj = i + di - h, j + dj - h
                        if 0 <= ii < H and 0 <= jj < W:
                            for c in range(Cin):
                                s += float(x[ii, jj, c]) * float(w[di, dj, c, f])
                out[i, j, f] = s
    return out


def naive_maxpool(x):
    """2x2/2 max-pool by window scan; returns (out, list of argmax (row, col) in input coords)."""
    H, W, C = x.shape
    Ho, Wo = H // 2, W // 2
    out = np.zeros((Ho, Wo, C), dtype=x.dtype)
    where = {}
    for i in range(Ho):
        for j in range(Wo):
            for c in range(C):
                best, pos = None, None
                for di in range(2):
                    for dj in range(2):
                        v = x[2 * i + di, 2 * j + dj, c]
                        if best is None or v > best:
                            best, pos = v, (2 * i + di, 2 * j + dj)
                out[i, j, c] = best
                where[(i, j, c)] = pos
    return out, where


def naive_cnn_probs(model, patch):
    """Forward pass of a CnnModel built only from the naive oracles above."""
    a = np.asarray(patch, dtype=np.float64)
    for layer in model.conv_layers:
        a = np.maximum(naive_conv_same(a, layer.weights, layer.biases), 0.0)
        if a.shape[0] >= 2 and a.shape[1] >= 2:
            a, _ = naive_maxpool(a)
    v = a.reshape(-1)
    n = len(model.fc_weights)
    for i, (W, b) in enumerate(zip(model.fc_weights, model.fc_biases)):
        z = [float(b[j]) + sum(float(v[k]) * float(W[k, j]) for k in range(len(v))) for j in range(W.shape[1])]
        v = np.array(z)
        if i < n - 1:
            v = np.maximum(v, 0.0)
    e = np.exp(v - v.max())
    return e / e.sum()


def naive_mlp_probs(weights, biases, x):
    v = [float(t) for t in x]
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = []
        for j in range(W.shape[1]):
            s = float(b[j])
            for k in range(len(v)):
                s += v[k] * float(W[k, j])
            z.append(s)
        v = [max(t, 0.0) for t in z] if i < len(weights) - 1 else z
    m = max(v)
    e = [math.exp(t - m) for t in v]
    s = sum(e)
    return np.array([t / s for t in e])


# --- finite differences -----------------------------------------------------


def central_difference(f, params, h=1e-5):
    """Numerical gradient of scalar f() w.r.t. every entry of every array in params (in place).

    The default step sits near the cube root of float64 epsilon, where the
    truncation error (~h^2) and the rounding error (~eps/h) are balanced.
    At h=1e-6 rounding noise alone reaches ~1e-10, which is already a 1e-4
    relative error on gradient entries of size 1e-6.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p, dtype=np.float64)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            fp = f()
            p[idx] = old - h
            fm = f()
            p[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst


# --- PPM --------------------------------------------------------------------


def parse_ppm(blob: bytes):
    """Minimal P6 parser: returns (width, height, maxval, (h, w, 3) uint8 array)."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    assert magic == b"P6"
    data = np.frombuffer(blob[pos:], dtype=np.uint8)
    assert data.size == w * h * 3
    return w, h, maxval, data.reshape(h, w, 3)
