import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def knn_positive_fraction(X_train, y_train, X_query, k):
    """Fraction of positive labels among the k nearest training rows.

    Exact squared Euclidean distances; equal distances keep the lower training
    index because rows are scanned in index order and only a strictly closer
    row displaces the current k-th neighbour.
    """
    n_train, n_feat = X_train.shape
    k = min(k, n_train)
    out = np.empty(X_query.shape[0], dtype=np.float64)
    best_d = np.empty(k, dtype=np.float64)
    best_i = np.empty(k, dtype=np.int64)
    for q in range(X_query.shape[0]):
        filled = 0
        for r in range(n_train):
            d = 0.0
            for f in range(n_feat):
                diff = X_train[r, f] - X_query[q, f]
                d += diff * diff
            if filled < k:
                pos = filled
                filled += 1
            elif d < best_d[k - 1]:
                pos = k - 1
            else:
                continue
            while pos > 0 and best_d[pos - 1] > d:
                best_d[pos] = best_d[pos - 1]
                best_i[pos] = best_i[pos - 1]
                pos -= 1
            best_d[pos] = d
            best_i[pos] = r
        pos_count = 0.0
        for j in range(k):
            pos_count += y_train[best_i[j]]
        out[q] = pos_count / k
    return out


@njit(cache=True, nogil=True)
def knn_neighbors(X_train, X_query, k):
    n_train, n_feat = X_train.shape
    k = min(k, n_train)
    out = np.empty((X_query.shape[0], k), dtype=np.int64)
    best_d = np.empty(k, dtype=np.float64)
    best_i = np.empty(k, dtype=np.int64)
    for q in range(X_query.shape[0]):
        filled = 0
        for r in range(n_train):
            d = 0.0
            for f in range(n_feat):
                diff = X_train[r, f] - X_query[q, f]
                d += diff * diff
            if filled < k:
                pos = filled
                filled += 1
            elif d < best_d[k - 1]:
                pos = k - 1
            else:
                continue
            while pos > 0 and best_d[pos - 1] > d:
                best_d[pos] = best_d[pos - 1]
                best_i[pos] = best_i[pos - 1]
                pos -= 1
            best_d[pos] = d
            best_i[pos] = r
        for j in range(k):
            out[q, j] = best_i[j]
    return out
