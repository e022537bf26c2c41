"""Soft-margin RBF support vector machines.

Binary machines are trained with Platt's sequential minimal optimization
(full error cache, second multiplier chosen by maximal |E1 - E2|). The
multiclass model is one-vs-one: one machine per class pair, majority vote.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from patchland.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

# Minimum relative change of a multiplier for a step to count as progress.
_STEP_EPS = 1e-12


@dataclass(frozen=True)
class SvmHyperparams:
    C: float = 10.0
    gamma: float = 0.3
    tol: float = 1e-3
    max_passes: int = 200

    def __post_init__(self):
        if not self.C > 0 or not self.gamma > 0 or not self.tol > 0:
            raise ConfigError(f"C, gamma and tol must be positive: {self}")
        if self.max_passes < 1:
            raise ConfigError("max_passes must be >= 1")


@dataclass
class BinarySvm:
    support_vectors: np.ndarray
    alphas: np.ndarray
    sv_labels: np.ndarray
    bias: float
    gamma: float
    converged: bool = True
    passes: int = 0

    def to_json(self) -> dict:
        return {
            "alphas": self.alphas.tolist(),
            "sv_labels": self.sv_labels.astype(int).tolist(),
            "bias": float(self.bias),
            "gamma": float(self.gamma),
            "support_vectors": self.support_vectors.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "BinarySvm":
        sv = np.array(doc["support_vectors"], dtype=np.float64)
        if sv.ndim == 1:
            sv = sv.reshape(0, 0) if sv.size == 0 else sv.reshape(1, -1)
        return cls(
            support_vectors=sv,
            alphas=np.array(doc["alphas"], dtype=np.float64),
            sv_labels=np.array(doc["sv_labels"], dtype=np.float64),
            bias=float(doc["bias"]),
            gamma=float(doc["gamma"]),
        )


def rbf_kernel(x, y, gamma: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError(f"kernel arguments differ in length: {x.shape} vs {y.shape}")
    if not gamma > 0:
        raise ConfigError("gamma must be positive")
    d = x - y
    return float(np.exp(-gamma * np.dot(d, d)))


def sq_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances between rows of A and rows of B."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
    np.maximum(d, 0.0, out=d)
    return d


def rbf_gram(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * sq_distances(A, B))


def dual_objective(alphas: np.ndarray, y: np.ndarray, K: np.ndarray) -> float:
    """W(a) = sum(a) - 1/2 sum_ij a_i a_j y_i y_j K_ij."""
    ay = alphas * y
    return float(alphas.sum() - 0.5 * ay @ K @ ay)


class _Smo:
    def __init__(self, K: np.ndarray, y: np.ndarray, C: float, tol: float, rng: np.random.Generator):
        self.K = K
        self.y = y
        self.C = C
        self.tol = tol
        self.rng = rng
        n = y.shape[0]
        self.n = n
        self.alpha = np.zeros(n)
        self.b = 0.0
        # E_i = f(x_i) - y_i with f = sum_j a_j y_j K_ij + b
        self.E = -y.astype(np.float64).copy()

    def _non_bound(self) -> np.ndarray:
        a = self.alpha
        return np.flatnonzero((a > 0) & (a < self.C))

    def take_step(self, i1: int, i2: int) -> bool:
        if i1 == i2:
            return False
        K, y, C = self.K, self.y, self.C
        a1, a2 = self.alpha[i1], self.alpha[i2]
        y1, y2 = y[i1], y[i2]
        E1, E2 = self.E[i1], self.E[i2]
        s = y1 * y2
        if y1 != y2:
            L, H = max(0.0, a2 - a1), min(C, C + a2 - a1)
        else:
            L, H = max(0.0, a1 + a2 - C), min(C, a1 + a2)
        if H - L <= 0.0:
            return False
        k11, k12, k22 = K[i1, i1], K[i1, i2], K[i2, i2]
        eta = k11 + k22 - 2.0 * k12
        if eta > 0:
            a2n = a2 + y2 * (E1 - E2) / eta
            a2n = min(max(a2n, L), H)
        else:
            # eta <= 0: compare the (negated) dual objective at both segment ends
            f1 = y1 * (E1 - self.b) - a1 * k11 - s * a2 * k12
            f2 = y2 * (E2 - self.b) - s * a1 * k12 - a2 * k22
            L1 = a1 + s * (a2 - L)
            H1 = a1 + s * (a2 - H)
            obj_l = L1 * f1 + L * f2 + 0.5 * L1 * L1 * k11 + 0.5 * L * L * k22 + s * L * L1 * k12
            obj_h = H1 * f1 + H * f2 + 0.5 * H1 * H1 * k11 + 0.5 * H * H * k22 + s * H * H1 * k12
            if obj_l < obj_h - 1e-12:
                a2n = L
            elif obj_l > obj_h + 1e-12:
                a2n = H
            else:
                a2n = a2
        if abs(a2n - a2) < _STEP_EPS * (a2n + a2 + _STEP_EPS):
            return False
        a1n = a1 + s * (a2 - a2n)
        if a1n < 0.0:
            a2n += s * a1n
            a1n = 0.0
        elif a1n > C:
            a2n += s * (a1n - C)
            a1n = C
        # snap round-off onto the box
        a1n = 0.0 if a1n < 1e-14 * C else (C if a1n > C * (1 - 1e-14) else a1n)
        a2n = 0.0 if a2n < 1e-14 * C else (C if a2n > C * (1 - 1e-14) else a2n)

        d1 = y1 * (a1n - a1)
        d2 = y2 * (a2n - a2)
        b1 = self.b - E1 - d1 * k11 - d2 * k12
        b2 = self.b - E2 - d1 * k12 - d2 * k22
        if 0.0 < a1n < C:
            bn = b1
        elif 0.0 < a2n < C:
            bn = b2
        else:
            bn = 0.5 * (b1 + b2)
        self.E += d1 * K[:, i1] + d2 * K[:, i2] + (bn - self.b)
        self.alpha[i1] = a1n
        self.alpha[i2] = a2n
        self.b = bn
        return True

    def examine(self, i2: int) -> bool:
        y2 = self.y[i2]
        a2 = self.alpha[i2]
        r2 = self.E[i2] * y2
        if not ((r2 < -self.tol and a2 < self.C) or (r2 > self.tol and a2 > 0)):
            return False
        nb = self._non_bound()
        if nb.size > 1:
            i1 = int(nb[np.argmax(np.abs(self.E[nb] - self.E[i2]))])
            if self.take_step(i1, i2):
                return True
        if nb.size:
            start = int(self.rng.integers(nb.size))
            for i1 in np.roll(nb, -start):
                if self.take_step(int(i1), i2):
                    return True
        start = int(self.rng.integers(self.n))
        for i1 in np.roll(np.arange(self.n), -start):
            if self.take_step(int(i1), i2):
                return True
        return False


def _final_bias(alpha: np.ndarray, y: np.ndarray, g: np.ndarray, C: float) -> float:
    """Average of y_i - g_i over free vectors; midpoint of the feasible interval otherwise.

    ``g`` is the kernel expansion without bias at each training point.
    """
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return float(np.mean(y[free] - g[free]))
    r = y - g
    # y_i f_i >= 1 at alpha = 0 and y_i f_i <= 1 at alpha = C bound b from each side
    lower_mask = ((y > 0) & (alpha == 0)) | ((y < 0) & (alpha == C))
    upper_mask = ((y > 0) & (alpha == C)) | ((y < 0) & (alpha == 0))
    lo = r[lower_mask].max() if lower_mask.any() else -np.inf
    hi = r[upper_mask].min() if upper_mask.any() else np.inf
    if np.isfinite(lo) and np.isfinite(hi):
        return float(0.5 * (lo + hi))
    return float(lo if np.isfinite(lo) else hi)


@dataclass
class SmoResult:
    alphas: np.ndarray
    bias: float
    converged: bool
    passes: int


def kkt_satisfied(alpha: np.ndarray, y: np.ndarray, f: np.ndarray, C: float, tol: float) -> bool:
    """KKT conditions on the margins y_i f(x_i), with bounds-aware one-sided checks."""
    m = y * f
    at_zero = alpha <= 0
    at_c = alpha >= C
    free = ~(at_zero | at_c)
    return bool(
        np.all(m[at_zero] >= 1 - tol) and np.all(m[at_c] <= 1 + tol) and np.all(np.abs(m[free] - 1) <= tol)
    )


# how often the working tolerance may be halved to reconcile the final bias
_MAX_REFINEMENTS = 30


def solve_smo(K: np.ndarray, y: np.ndarray, hp: SvmHyperparams, seed: int = 0) -> SmoResult:
    """Run SMO on a precomputed Gram matrix. Returns full-length multipliers.

    Platt's stopping test measures KKT violations against the solver's running
    bias, while the reported bias is the average over free vectors. The two
    can disagree by up to about 2*tol, so after convergence the conditions are
    re-checked with the reported bias; if they fail, optimisation resumes with
    a halved working tolerance.
    """
    y = np.asarray(y, dtype=np.float64)
    smo = _Smo(np.asarray(K, dtype=np.float64), y, float(hp.C), float(hp.tol), np.random.default_rng(seed))
    examine_all = True
    full_sweeps = 0
    steps = 0
    refinements = 0
    max_steps = max(100_000, 500 * smo.n)
    converged = True
    while True:
        changed = 0
        if examine_all:
            if full_sweeps >= hp.max_passes:
                converged = False
                break
            full_sweeps += 1
            for i in range(smo.n):
                changed += smo.examine(i)
        else:
            for i in smo._non_bound():
                changed += smo.examine(int(i))
        steps += changed
        if steps > max_steps:
            converged = False
            break
        if examine_all:
            if changed == 0:
                g = smo.K @ (smo.alpha * y)
                bias = _final_bias(smo.alpha, y, g, hp.C)
                if kkt_satisfied(smo.alpha, y, g + bias, hp.C, hp.tol):
                    break
                if refinements >= _MAX_REFINEMENTS:
                    converged = False
                    break
                refinements += 1
                smo.tol *= 0.5
                # refresh the error cache to drop accumulated round-off
                smo.E = g + smo.b - y
                continue
            examine_all = False
        elif changed == 0:
            examine_all = True
    if not converged:
        logger.warning("SMO stopped after %d sweeps without meeting the KKT tolerance", full_sweeps)
    g = smo.K @ (smo.alpha * y)
    bias = _final_bias(smo.alpha, y, g, hp.C)
    return SmoResult(smo.alpha.copy(), bias, converged, full_sweeps)


def train_binary_smo(X, y, hp: SvmHyperparams, seed: int = 0) -> BinarySvm:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DataError("X must be (n, d) with one label per row")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DataError("labels must be -1 or +1")
    if not ((y > 0).any() and (y < 0).any()):
        raise DataError("binary training needs at least one example of each sign")
    K = rbf_gram(X, X, hp.gamma)
    res = solve_smo(K, y, hp, seed)
    keep = res.alphas > 0
    return BinarySvm(
        support_vectors=X[keep].copy(),
        alphas=res.alphas[keep],
        sv_labels=y[keep],
        bias=res.bias,
        gamma=float(hp.gamma),
        converged=res.converged,
        passes=res.passes,
    )


def decision(m: BinarySvm, x) -> float | np.ndarray:
    """sum_i a_i y_i K(sv_i, x) + b for one vector or each row of a matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if m.support_vectors.size and X.shape[1] != m.support_vectors.shape[1]:
        raise DataError(f"feature length {X.shape[1]} does not match {m.support_vectors.shape[1]}")
    if m.alphas.size == 0:
        out = np.full(X.shape[0], m.bias)
    else:
        out = rbf_gram(X, m.support_vectors, m.gamma) @ (m.alphas * m.sv_labels) + m.bias
    return float(out[0]) if single else out


@dataclass
class SvmModel:
    class_ids: tuple[int, ...]
    feature_length: int
    machines: dict[tuple[int, int], BinarySvm] = field(default_factory=dict)

    def decision_matrix(self, X) -> np.ndarray:
        """Decision values, one column per pair in sorted pair order."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.feature_length:
            raise DataError(f"expected {self.feature_length} features, got {X.shape[1]}")
        pairs = sorted(self.machines)
        return np.stack([decision(self.machines[pr], X) for pr in pairs], axis=1)

    def predict_batch(self, X) -> np.ndarray:
        D = self.decision_matrix(X)
        return vote(D, self.class_ids)

    def predict_patches(self, patches: np.ndarray) -> np.ndarray:
        return self.predict_batch(np.asarray(patches).reshape(len(patches), -1))

    def to_json(self) -> dict:
        return {
            "class_ids": list(self.class_ids),
            "feature_length": self.feature_length,
            "machines": [
                {"pair": list(pr), **self.machines[pr].to_json()} for pr in sorted(self.machines)
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SvmModel":
        machines = {}
        for m in doc["machines"]:
            bm = BinarySvm.from_json(m)
            if bm.support_vectors.size == 0:
                bm.support_vectors = np.zeros((0, doc["feature_length"]))
            machines[tuple(int(c) for c in m["pair"])] = bm
        return cls(tuple(int(c) for c in doc["class_ids"]), int(doc["feature_length"]), machines)


def vote(D: np.ndarray, class_ids) -> np.ndarray:
    """One-vs-one vote over a decision matrix whose columns follow sorted pair order.

    A decision >= 0 votes for the higher class id of the pair. Ties in the
    vote count go to the class with the largest summed |decision| over the
    machines it takes part in, then to the lowest class id.
    """
    class_ids = tuple(class_ids)
    k = len(class_ids)
    pairs = list(combinations(range(k), 2))
    n = D.shape[0]
    votes = np.zeros((n, k), dtype=np.int64)
    magnitude = np.zeros((n, k))
    for col, (a, b) in enumerate(pairs):
        d = D[:, col]
        pos = d >= 0
        votes[:, b] += pos
        votes[:, a] += ~pos
        magnitude[:, a] += np.abs(d)
        magnitude[:, b] += np.abs(d)
    best = votes.max(axis=1, keepdims=True)
    tied = votes == best
    score = np.where(tied, magnitude, -np.inf)
    top = score.max(axis=1, keepdims=True)
    # argmax returns the first (lowest id) class among exact magnitude ties
    winner = np.argmax(tied & (score == top), axis=1)
    return np.asarray(class_ids, dtype=np.int64)[winner]


def predict(model: SvmModel, x) -> int:
    return int(model.predict_batch(np.asarray(x)[None, :] if np.ndim(x) == 1 else x)[0])


def train_ovo(X, labels, hp: SvmHyperparams, seed: int = 0, threads: int = 1, class_ids=None) -> SvmModel:
    """Train one binary machine per class pair on that pair's samples only.

    The lower class id of a pair is mapped to -1 and the higher to +1.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    if class_ids is None:
        class_ids = tuple(int(c) for c in np.unique(labels))
    class_ids = tuple(sorted(int(c) for c in class_ids))
    if len(class_ids) < 2:
        raise DataError("one-vs-one training needs at least two classes")
    pairs = list(combinations(class_ids, 2))

    def fit(pair):
        a, b = pair
        idx = np.flatnonzero((labels == a) | (labels == b))
        y = np.where(labels[idx] == b, 1.0, -1.0)
        return train_binary_smo(X[idx], y, hp, seed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fitted = list(pool.map(fit, pairs))
    else:
        fitted = [fit(pr) for pr in pairs]
    return SvmModel(class_ids, X.shape[1], dict(zip(pairs, fitted)))
