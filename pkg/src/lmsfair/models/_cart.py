"""Compiled CART kernels shared by the tree families.

One builder serves classification and regression: for 0/1 targets the Gini
impurity of a node is exactly twice its variance, so minimising the summed
within-child squared error picks the same split as minimising weighted Gini.

Rows are presorted once per feature; a tree works on row multiplicities
(bootstrap counts, or all ones), so a bootstrap replicate behaves exactly like
the duplicated-row sample without copying it. Each node owns the same
[start, end) window in every feature's order array, and a split stably
partitions those windows.

Trees are stored as flat arrays (feature, threshold, left, right, value,
weight); leaves carry feature == -1.
"""

import numpy as np
from numba import njit

LEAF = -1


def presort(X):
    """Column-major copy of X and the stable per-feature row order."""
    Xt = np.ascontiguousarray(np.asarray(X, dtype=np.float64).T)
    order = np.empty(Xt.shape, dtype=np.int32)
    for f in range(Xt.shape[0]):
        order[f] = np.argsort(Xt[f], kind="stable")
    return Xt, order


@njit(cache=True, nogil=True)
def _splitmix64(state):
    state = state + np.uint64(0x9E3779B97F4A7C15)
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return state, z


@njit(cache=True, nogil=True)
def _pick_features(n_features, max_features, state, perm, out):
    """Draw max_features distinct feature indices into out, ascending."""
    for i in range(n_features):
        perm[i] = i
    for i in range(max_features):
        state, r = _splitmix64(state)
        j = i + np.int64(r % np.uint64(n_features - i))
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    chosen = np.sort(perm[:max_features])
    for i in range(max_features):
        out[i] = chosen[i]
    return state


@njit(cache=True, nogil=True)
def build_tree(Xt, order_all, y, weight, max_depth, min_leaf, max_features, seed):
    """Grow one tree.

    Xt : (n_features, n_rows) feature values, column-major.
    order_all : (n_features, n_rows) stable argsort of each feature row.
    y : targets; weight : non-negative integer multiplicity per row.
    max_depth < 0 means unbounded; max_features < n_features turns on
    per-node feature subsampling driven by ``seed``.
    """
    n_features = Xt.shape[0]
    n_rows = Xt.shape[1]

    n_active = 0
    for r in range(n_rows):
        if weight[r] > 0:
            n_active += 1

    order = np.empty((n_features, n_active), dtype=np.int32)
    for f in range(n_features):
        k = 0
        for i in range(n_rows):
            r = order_all[f, i]
            if weight[r] > 0:
                order[f, k] = r
                k += 1

    capacity = 2 * n_active + 1
    feature = np.full(capacity, LEAF, dtype=np.int64)
    threshold = np.zeros(capacity, dtype=np.float64)
    left = np.full(capacity, LEAF, dtype=np.int64)
    right = np.full(capacity, LEAF, dtype=np.int64)
    value = np.zeros(capacity, dtype=np.float64)
    node_weight = np.zeros(capacity, dtype=np.float64)

    goes_left = np.zeros(n_rows, dtype=np.bool_)
    buf = np.empty(n_active, dtype=np.int32)
    perm = np.empty(n_features, dtype=np.int64)
    feats = np.empty(n_features, dtype=np.int64)
    state = np.uint64(seed)

    stack = np.empty((capacity, 4), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n_active
    stack[0, 3] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]

        W = 0.0
        S = 0.0
        SS = 0.0
        for i in range(start, end):
            r = order[0, i]
            wr = weight[r]
            W += wr
            S += wr * y[r]
            SS += wr * y[r] * y[r]
        value[node] = S / W
        node_weight[node] = W
        parent_imp = SS - S * S / W

        if max_depth >= 0 and depth >= max_depth:
            continue
        if W < 2 * min_leaf or parent_imp <= 1e-12:
            continue

        if max_features < n_features:
            state = _pick_features(n_features, max_features, state, perm, feats)
            n_cand = max_features
        else:
            for f in range(n_features):
                feats[f] = f
            n_cand = n_features

        best_imp = parent_imp - 1e-12
        best_f = -1
        best_thr = 0.0
        for c in range(n_cand):
            f = feats[c]
            wl = 0.0
            sl = 0.0
            ssl = 0.0
            for i in range(start, end - 1):
                r = order[f, i]
                wr = weight[r]
                wl += wr
                sl += wr * y[r]
                ssl += wr * y[r] * y[r]
                a = Xt[f, r]
                b = Xt[f, order[f, i + 1]]
                if a == b:
                    continue
                wr_right = W - wl
                if wl < min_leaf or wr_right < min_leaf:
                    continue
                sr = S - sl
                ssr = SS - ssl
                imp = (ssl - sl * sl / wl) + (ssr - sr * sr / wr_right)
                if imp < best_imp:
                    best_imp = imp
                    best_f = f
                    thr = 0.5 * (a + b)
                    if thr >= b:
                        thr = a
                    best_thr = thr

        if best_f < 0:
            continue

        n_left = 0
        for i in range(start, end):
            r = order[best_f, i]
            flag = Xt[best_f, r] <= best_thr
            goes_left[r] = flag
            if flag:
                n_left += 1

        for f in range(n_features):
            kl = 0
            kr = n_left
            for i in range(start, end):
                r = order[f, i]
                if goes_left[r]:
                    buf[kl] = r
                    kl += 1
                else:
                    buf[kr] = r
                    kr += 1
            for i in range(end - start):
                order[f, start + i] = buf[i]

        lchild = n_nodes
        rchild = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lchild
        right[node] = rchild

        stack[top, 0] = rchild
        stack[top, 1] = start + n_left
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = lchild
        stack[top, 1] = start
        stack[top, 2] = start + n_left
        stack[top, 3] = depth + 1
        top += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        node_weight[:n_nodes].copy(),
    )


@njit(cache=True, nogil=True)
def leaf_index(X, feature, threshold, left, right):
    out = np.empty(X.shape[0], dtype=np.int64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] != LEAF:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@njit(cache=True, nogil=True)
def apply_tree(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0], dtype=np.float64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] != LEAF:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out
