"""Vector geometry, contrastive loss, linear assignment, linear probes and ARI.

Every function here is pure; arrays passed in are never modified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_DIM = 512
DEFAULT_TAU = 0.07
PROBE_LR = 0.5
PROBE_EPOCHS = 500


class DegenerateFeatureError(ValueError):
    """A feature vector has no direction (zero or non-finite norm)."""


def normalize(v) -> np.ndarray:
    """Return ``v`` scaled to unit L2 norm."""
    arr = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DegenerateFeatureError("feature has non-finite entries")
    norm = float(np.linalg.norm(arr))
    if norm == 0.0 or not math.isfinite(norm):
        raise DegenerateFeatureError("cannot normalize a zero-norm feature")
    return arr / norm


def cos_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two unit-norm features (their dot product)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"feature length mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def cos_matrix(rows: Sequence[np.ndarray], cols: Sequence[np.ndarray]) -> np.ndarray:
    """Score matrix of pairwise cosine similarities, shape (len(rows), len(cols))."""
    if len(rows) == 0 or len(cols) == 0:
        return np.zeros((len(rows), len(cols)))
    a = np.vstack(rows)
    b = np.vstack(cols)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature length mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a @ b.T


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------


def _nce_logits(q, k_pos, negatives, tau):
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if len(negatives) == 0:
        raise ValueError("InfoNCE needs at least one negative")
    q = np.asarray(q, dtype=np.float64)
    keys = np.vstack([np.asarray(k_pos, dtype=np.float64)] + [np.asarray(k, dtype=np.float64) for k in negatives])
    if keys.shape[1] != q.shape[0]:
        raise ValueError("feature length mismatch between query and keys")
    return q, keys, keys @ q / tau


def info_nce(q, k_pos, negatives, tau: float = DEFAULT_TAU) -> float:
    """InfoNCE loss of query ``q`` against one positive and K negatives.

    The softmax denominator runs over the positive and all negatives
    (K + 1 terms). Inputs are expected to be unit-norm, so the dot
    product is the cosine similarity.
    """
    _, _, logits = _nce_logits(q, k_pos, negatives, tau)
    top = logits.max()
    lse = top + math.log(float(np.exp(logits - top).sum()))
    return float(lse - logits[0])


def info_nce_grad(q, k_pos, negatives, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Analytic gradient of :func:`info_nce` with respect to ``q``.

    ``q`` is treated as a free vector: no renormalization is differentiated.
    """
    _, keys, logits = _nce_logits(q, k_pos, negatives, tau)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    return (p @ keys - keys[0]) / tau


# ---------------------------------------------------------------------------
# Linear assignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Assignment:
    pairs: list[tuple[int, int]]
    unmatched_rows: list[int]
    unmatched_cols: list[int]

    def total(self, scores) -> float:
        scores = np.asarray(scores, dtype=np.float64)
        return float(sum(scores[i, j] for i, j in self.pairs))


def _hungarian_min(cost: np.ndarray):
    """Shortest-augmenting-path Hungarian method on a square cost matrix.

    Returns (row_to_col, u, v) where u, v are optimal dual potentials:
    ``cost[i, j] - u[i] - v[j] >= 0`` everywhere, with equality on the
    returned matching.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: 1-based row owning column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lex_min_matching(tight: np.ndarray, match: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching inside the tight-edge graph.

    ``match`` must already be a perfect matching on tight edges. Rows are
    fixed in order; each takes the lowest column that still admits a
    perfect matching, found as an alternating cycle through unfixed rows.
    """
    n = len(match)
    match = match.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[match] = np.arange(n)
    tight_cols = [np.flatnonzero(tight[r]) for r in range(n)]

    for r in range(n):
        target = match[r]
        for c in tight_cols[r]:
            if c >= target:
                break
            if owner[c] < r:
                continue
            seen_cols = {c}
            path = _alternating_path(owner[c], target, r, tight_cols, owner, seen_cols)
            if path is None:
                continue
            # path: [(row, new_col), ...] ending at target
            for row, col in path:
                match[row] = col
                owner[col] = row
            match[r] = c
            owner[c] = r
            break
    return match


def _alternating_path(row, target, locked_below, tight_cols, owner, seen_cols):
    stack = [(row, iter(tight_cols[row]))]
    chosen: list[tuple[int, int]] = []
    while stack:
        cur_row, it = stack[-1]
        advanced = False
        for col in it:
            if col in seen_cols:
                continue
            if col == target:
                return chosen + [(cur_row, col)]
            nxt = owner[col]
            if nxt <= locked_below:
                continue
            seen_cols.add(col)
            chosen.append((cur_row, col))
            stack.append((nxt, iter(tight_cols[nxt])))
            advanced = True
            break
        if not advanced:
            stack.pop()
            if chosen:
                chosen.pop()
    return None


def max_assignment(scores) -> Assignment:
    """Maximum-total-score one-to-one matching of rows to columns.

    Rectangular inputs are padded with a constant sentinel, so exactly
    ``min(rows, cols)`` pairs are returned. Among optimal matchings the
    lexicographically smallest (by row, then column) is chosen.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError("score matrix must be 2-D")
    if not np.all(np.isfinite(scores)):
        raise ValueError("score matrix has non-finite entries")
    n_rows, n_cols = scores.shape
    if n_rows == 0 or n_cols == 0:
        return Assignment([], list(range(n_rows)), list(range(n_cols)))

    n = max(n_rows, n_cols)
    sentinel = float(scores.min()) - 1.0
    padded = np.full((n, n), sentinel)
    padded[:n_rows, :n_cols] = scores
    cost = -padded

    match, u, v = _hungarian_min(cost)
    tol = 1e-9 * (1.0 + float(np.abs(cost).max())) * n
    tight = (cost - u[:, None] - v[None, :]) <= tol
    match = _lex_min_matching(tight, match)

    pairs = [(i, int(match[i])) for i in range(n_rows) if match[i] < n_cols]
    matched_cols = {j for _, j in pairs}
    return Assignment(
        pairs=pairs,
        unmatched_rows=[i for i in range(n_rows) if match[i] >= n_cols],
        unmatched_cols=[j for j in range(n_cols) if j not in matched_cols],
    )


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeModel:
    weights: np.ndarray  # (num_classes, L)
    bias: np.ndarray  # (num_classes,)
    loss_history: list[float] = field(default_factory=list)

    def logits(self, features) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights.T + self.bias

    def predict(self, features) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. the lowest class id on ties
        return np.argmax(self.logits(features), axis=1)


def probe_loss_grad(weights, bias, features, labels):
    """Mean multinomial cross-entropy and its gradients w.r.t. weights and bias."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    logits = x @ weights.T + bias
    logits = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(logits).sum(axis=1))
    n = len(y)
    loss = float(np.mean(log_z - logits[np.arange(n), y]))
    probs = np.exp(logits - log_z[:, None])
    probs[np.arange(n), y] -= 1.0
    probs /= n
    return loss, probs.T @ x, probs.sum(axis=0)


def _check_dataset(features, labels):
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(y) == 0 or x.size == 0:
        raise ValueError("probe dataset is empty")
    if x.ndim != 2 or x.shape[0] != len(y):
        raise ValueError(f"{x.shape[0] if x.ndim == 2 else '?'} features but {len(y)} labels")
    return x, y


def train_probe(
    features,
    labels,
    num_classes: int,
    lr: float = PROBE_LR,
    epochs: int = PROBE_EPOCHS,
) -> ProbeModel:
    """Fit a softmax linear classifier by full-batch gradient descent from zero init."""
    x, y = _check_dataset(features, labels)
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    w = np.zeros((num_classes, x.shape[1]))
    b = np.zeros(num_classes)
    history = []
    for _ in range(epochs):
        loss, gw, gb = probe_loss_grad(w, b, x, y)
        history.append(loss)
        w -= lr * gw
        b -= lr * gb
    return ProbeModel(w, b, history)


def probe_accuracy(model: ProbeModel, features, labels) -> float:
    x, y = _check_dataset(features, labels)
    return float(np.mean(model.predict(x) == y))


# ---------------------------------------------------------------------------
# Adjusted Rand Index
# ---------------------------------------------------------------------------


def adjusted_rand_index(pred, truth) -> float:
    """Pair-counting Adjusted Rand Index between two flat clusterings."""
    pred = list(pred)
    truth = list(truth)
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} vs {len(truth)}")
    n = len(pred)
    if n < 2:
        raise ValueError("ARI needs at least two items")

    table: dict[tuple, int] = {}
    rows: dict = {}
    cols: dict = {}
    for a, b in zip(pred, truth):
        table[(a, b)] = table.get((a, b), 0) + 1
        rows[a] = rows.get(a, 0) + 1
        cols[b] = cols.get(b, 0) + 1

    index = sum(math.comb(c, 2) for c in table.values())
    sum_rows = sum(math.comb(c, 2) for c in rows.values())
    sum_cols = sum(math.comb(c, 2) for c in cols.values())
    total = math.comb(n, 2)
    expected = sum_rows * sum_cols / total
    max_index = (sum_rows + sum_cols) / 2
    if max_index == expected:
        # both partitions all-singletons or both a single cluster
        return 1.0
    return float((index - expected) / (max_index - expected))
