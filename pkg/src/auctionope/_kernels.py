"""Hot numeric loops: tree split search, tree traversal and KDE sums.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with the same signature.  The public names at the bottom of the
module are bound to one or the other at import time.  Set
``AUCTIONOPE_NUMBA=0`` to force the numpy path (useful for debugging and
for platforms without numba); ``benchmarks/bench_kernels.py`` compares
the two.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("AUCTIONOPE_NUMBA", "1").strip().lower() not in (
    "0",
    "false",
    "no",
    "off",
)

# kernel kind codes shared with models.kde
GAUSSIAN, EPANECHNIKOV, TRIANGULAR, UNIFORM = 0, 1, 2, 3

_INV_SQRT_2PI = 0.3989422804014327

# a split must improve the criterion by more than this (relative to the parent)
_MIN_GAIN = 1e-12


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def kernel_eval_numpy(u: np.ndarray, kind: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if kind == GAUSSIAN:
        return _INV_SQRT_2PI * np.exp(-0.5 * u * u)
    a = np.abs(u)
    if kind == EPANECHNIKOV:
        return np.where(a <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    if kind == TRIANGULAR:
        return np.where(a <= 1.0, 1.0 - a, 0.0)
    if kind == UNIFORM:
        return np.where(a <= 1.0, 0.5, 0.0)
    raise ValueError(f"unknown kernel code {kind}")


def split_regression_numpy(X, y, idx, features, min_leaf):
    """Best variance-reduction split of rows ``idx``.

    Returns ``(feature, threshold, gain)``; feature is -1 when no admissible
    split improves on the parent.
    """
    m = idx.shape[0]
    best_f, best_thr, best_score = -1, 0.0, -np.inf
    if m < 2 * min_leaf:
        return best_f, best_thr, 0.0
    yy = y[idx]
    total = yy.sum()
    parent = total * total / m
    n_left = np.arange(1, m, dtype=np.float64)
    lo, hi = min_leaf - 1, m - min_leaf  # positions k in [lo, hi)
    for f in features:
        vals = X[idx, f]
        order = np.argsort(vals, kind="mergesort")
        v = vals[order]
        s = np.cumsum(yy[order])[:-1]
        score = s * s / n_left + (total - s) ** 2 / (m - n_left)
        valid = v[:-1] < v[1:]
        valid[:lo] = False
        valid[hi:] = False
        if not valid.any():
            continue
        score = np.where(valid, score, -np.inf)
        k = int(np.argmax(score))
        if score[k] > best_score:
            best_score = score[k]
            best_f = int(f)
            best_thr = 0.5 * (v[k] + v[k + 1])
    if best_f < 0 or best_score - parent <= _MIN_GAIN * max(abs(parent), 1.0):
        return -1, 0.0, 0.0
    return best_f, float(best_thr), float(best_score - parent)


def split_gini_numpy(X, labels, idx, features, min_leaf, n_classes):
    """Best Gini split of rows ``idx`` (same return convention as the regression split)."""
    m = idx.shape[0]
    best_f, best_thr, best_score = -1, 0.0, -np.inf
    if m < 2 * min_leaf:
        return best_f, best_thr, 0.0
    lab = labels[idx]
    onehot = np.zeros((m, n_classes))
    onehot[np.arange(m), lab] = 1.0
    totals = onehot.sum(axis=0)
    parent = (totals * totals).sum() / m
    n_left = np.arange(1, m, dtype=np.float64)
    lo, hi = min_leaf - 1, m - min_leaf
    for f in features:
        vals = X[idx, f]
        order = np.argsort(vals, kind="mergesort")
        v = vals[order]
        c = np.cumsum(onehot[order], axis=0)[:-1]
        r = totals - c
        score = (c * c).sum(axis=1) / n_left + (r * r).sum(axis=1) / (m - n_left)
        valid = v[:-1] < v[1:]
        valid[:lo] = False
        valid[hi:] = False
        if not valid.any():
            continue
        score = np.where(valid, score, -np.inf)
        k = int(np.argmax(score))
        if score[k] > best_score:
            best_score = score[k]
            best_f = int(f)
            best_thr = 0.5 * (v[k] + v[k + 1])
    if best_f < 0 or best_score - parent <= _MIN_GAIN * max(abs(parent), 1.0):
        return -1, 0.0, 0.0
    return best_f, float(best_thr), float(best_score - parent)


def tree_apply_numpy(X, feature, threshold, left, right):
    node = np.zeros(X.shape[0], dtype=np.int64)
    rows = np.arange(X.shape[0])
    active = feature[node] >= 0
    while active.any():
        r = rows[active]
        nd = node[r]
        go_left = X[r, feature[nd]] <= threshold[nd]
        node[r] = np.where(go_left, left[nd], right[nd])
        active = feature[node] >= 0
    return node


def _node_features(keys_row, k):
    return np.sort(np.argsort(keys_row, kind="mergesort")[:k]).astype(np.int64)


def grow_tree_numpy(X, y, labels, classification, n_classes, rows, keys, k, max_depth, min_leaf):
    """Grow one CART tree on ``rows`` (bootstrap indices, sorted).

    ``keys[j]`` are uniform draws whose ``k`` smallest positions give the
    candidate features of the j-th node created.  Returns flat arrays
    ``(feature, threshold, left, right, value)``.
    """
    n_out = n_classes if classification else 1
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        if classification:
            value.append(np.bincount(labels[idx], minlength=n_classes).astype(np.float64))
        else:
            value.append(np.array([y[idx].sum() / idx.shape[0]]))
        return len(feature) - 1

    stack = [(new_node(rows), rows, 0)]
    while stack:
        node, idx, depth = stack.pop()
        if depth >= max_depth or idx.shape[0] < 2 * min_leaf:
            continue
        feats = _node_features(keys[node], k)
        if classification:
            f, thr, _ = split_gini_numpy(X, labels, idx, feats, min_leaf, n_classes)
        else:
            f, thr, _ = split_regression_numpy(X, y, idx, feats, min_leaf)
        if f < 0:
            continue
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        if li.size == 0 or ri.size == 0:
            continue
        feature[node] = int(f)
        threshold[node] = float(thr)
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return (
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.vstack(value).reshape(len(feature), n_out),
    )


def kde_sums_numpy(train_x, train_t, hx, ht, query_x, query_t, kind):
    """Joint and marginal product-kernel sums for each query row.

    ``joint[q] = sum_i prod_j K((x_qj - X_ij)/h_j)/h_j * K((t_q - T_i)/h_t)/h_t``
    and ``marginal[q]`` is the same without the action factor.  Both are
    un-normalised (not divided by n).
    """
    nq = query_x.shape[0]
    joint = np.empty(nq)
    marginal = np.empty(nq)
    chunk = max(1, 2_000_000 // max(1, train_x.shape[0] * max(1, train_x.shape[1])))
    for start in range(0, nq, chunk):
        stop = min(nq, start + chunk)
        u = (query_x[start:stop, None, :] - train_x[None, :, :]) / hx
        w = np.prod(kernel_eval_numpy(u, kind) / hx, axis=2)
        kt = kernel_eval_numpy((query_t[start:stop, None] - train_t[None, :]) / ht, kind) / ht
        marginal[start:stop] = w.sum(axis=1)
        joint[start:stop] = (w * kt).sum(axis=1)
    return joint, marginal


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def _kernel_scalar(u, kind):
        if kind == 0:
            return _INV_SQRT_2PI * np.exp(-0.5 * u * u)
        a = abs(u)
        if a > 1.0:
            return 0.0
        if kind == 1:
            return 0.75 * (1.0 - u * u)
        if kind == 2:
            return 1.0 - a
        return 0.5

    @_jit
    def split_regression_numba(X, y, idx, features, min_leaf):
        m = idx.shape[0]
        best_f = -1
        best_thr = 0.0
        best_score = -np.inf
        if m < 2 * min_leaf:
            return best_f, best_thr, 0.0
        yy = np.empty(m)
        total = 0.0
        for i in range(m):
            yy[i] = y[idx[i]]
            total += yy[i]
        parent = total * total / m
        vals = np.empty(m)
        for f in features:
            for i in range(m):
                vals[i] = X[idx[i], f]
            order = np.argsort(vals, kind="mergesort")
            s = 0.0
            for k in range(m - 1):
                s += yy[order[k]]
                if k < min_leaf - 1 or k >= m - min_leaf:
                    continue
                v0 = vals[order[k]]
                v1 = vals[order[k + 1]]
                if not v0 < v1:
                    continue
                nl = k + 1.0
                score = s * s / nl + (total - s) * (total - s) / (m - nl)
                if score > best_score:
                    best_score = score
                    best_f = f
                    best_thr = 0.5 * (v0 + v1)
        if best_f < 0 or best_score - parent <= _MIN_GAIN * max(abs(parent), 1.0):
            return -1, 0.0, 0.0
        return best_f, best_thr, best_score - parent

    @_jit
    def split_gini_numba(X, labels, idx, features, min_leaf, n_classes):
        m = idx.shape[0]
        best_f = -1
        best_thr = 0.0
        best_score = -np.inf
        if m < 2 * min_leaf:
            return best_f, best_thr, 0.0
        totals = np.zeros(n_classes)
        for i in range(m):
            totals[labels[idx[i]]] += 1.0
        sq_total = 0.0
        for c in range(n_classes):
            sq_total += totals[c] * totals[c]
        parent = sq_total / m
        vals = np.empty(m)
        left = np.zeros(n_classes)
        for f in features:
            for i in range(m):
                vals[i] = X[idx[i], f]
            order = np.argsort(vals, kind="mergesort")
            left[:] = 0.0
            sl = 0.0  # sum of squared left counts
            sr = sq_total  # sum of squared right counts
            for k in range(m - 1):
                c = labels[idx[order[k]]]
                lc = left[c]
                rc = totals[c] - lc
                sl += 2.0 * lc + 1.0
                sr -= 2.0 * rc - 1.0
                left[c] = lc + 1.0
                if k < min_leaf - 1 or k >= m - min_leaf:
                    continue
                v0 = vals[order[k]]
                v1 = vals[order[k + 1]]
                if not v0 < v1:
                    continue
                nl = k + 1.0
                score = sl / nl + sr / (m - nl)
                if score > best_score:
                    best_score = score
                    best_f = f
                    best_thr = 0.5 * (v0 + v1)
        if best_f < 0 or best_score - parent <= _MIN_GAIN * max(abs(parent), 1.0):
            return -1, 0.0, 0.0
        return best_f, best_thr, best_score - parent

    @_jit
    def tree_apply_numba(X, feature, threshold, left, right):
        n = X.shape[0]
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            node = 0
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i] = node
        return out

    @_jit
    def grow_tree_numba(X, y, labels, classification, n_classes, rows, keys, k, max_depth, min_leaf):
        m = rows.shape[0]
        cap = keys.shape[0]
        n_out = n_classes if classification else 1
        feature = np.full(cap, -1, dtype=np.int64)
        threshold = np.zeros(cap)
        left = np.full(cap, -1, dtype=np.int64)
        right = np.full(cap, -1, dtype=np.int64)
        value = np.zeros((cap, n_out))
        seg_start = np.zeros(cap, dtype=np.int64)
        seg_end = np.zeros(cap, dtype=np.int64)
        depth_of = np.zeros(cap, dtype=np.int64)
        idx = rows.copy()
        buf = np.empty(m, dtype=np.int64)
        stack = np.empty(cap, dtype=np.int64)

        n_nodes = 1
        seg_start[0] = 0
        seg_end[0] = m
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            a = seg_start[node]
            b = seg_end[node]
            # leaf value for every node (internal nodes keep theirs too)
            if classification:
                for i in range(a, b):
                    value[node, labels[idx[i]]] += 1.0
            else:
                s = 0.0
                for i in range(a, b):
                    s += y[idx[i]]
                value[node, 0] = s / (b - a)
            if depth_of[node] >= max_depth or b - a < 2 * min_leaf:
                continue
            feats = np.sort(np.argsort(keys[node], kind="mergesort")[:k])
            seg = idx[a:b]
            if classification:
                f, thr, gain = split_gini_numba(X, labels, seg, feats, min_leaf, n_classes)
            else:
                f, thr, gain = split_regression_numba(X, y, seg, feats, min_leaf)
            if f < 0:
                continue
            # stable partition of the segment
            nl = 0
            for i in range(a, b):
                if X[idx[i], f] <= thr:
                    buf[nl] = idx[i]
                    nl += 1
            if nl == 0 or nl == b - a:
                continue
            j = nl
            for i in range(a, b):
                if not X[idx[i], f] <= thr:
                    buf[j] = idx[i]
                    j += 1
            for i in range(b - a):
                idx[a + i] = buf[i]
            if n_nodes + 2 > cap:
                continue
            lc = n_nodes
            rc = n_nodes + 1
            n_nodes += 2
            feature[node] = f
            threshold[node] = thr
            left[node] = lc
            right[node] = rc
            seg_start[lc] = a
            seg_end[lc] = a + nl
            seg_start[rc] = a + nl
            seg_end[rc] = b
            depth_of[lc] = depth_of[node] + 1
            depth_of[rc] = depth_of[node] + 1
            stack[sp] = rc
            sp += 1
            stack[sp] = lc
            sp += 1
        return (
            feature[:n_nodes].copy(),
            threshold[:n_nodes].copy(),
            left[:n_nodes].copy(),
            right[:n_nodes].copy(),
            value[:n_nodes].copy(),
        )

    @_jit
    def kde_sums_numba(train_x, train_t, hx, ht, query_x, query_t, kind):
        nq = query_x.shape[0]
        n = train_x.shape[0]
        d = train_x.shape[1]
        joint = np.zeros(nq)
        marginal = np.zeros(nq)
        for q in range(nq):
            sj = 0.0
            sm = 0.0
            for i in range(n):
                w = 1.0
                for j in range(d):
                    w *= _kernel_scalar((query_x[q, j] - train_x[i, j]) / hx[j], kind) / hx[j]
                    if w == 0.0:
                        break
                if w == 0.0:
                    continue
                sm += w
                sj += w * _kernel_scalar((query_t[q] - train_t[i]) / ht, kind) / ht
            joint[q] = sj
            marginal[q] = sm
        return joint, marginal


if USE_NUMBA:
    split_regression = split_regression_numba
    split_gini = split_gini_numba
    tree_apply = tree_apply_numba
    grow_tree = grow_tree_numba
    kde_sums = kde_sums_numba
else:
    split_regression = split_regression_numpy
    split_gini = split_gini_numpy
    tree_apply = tree_apply_numpy
    grow_tree = grow_tree_numpy
    kde_sums = kde_sums_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
