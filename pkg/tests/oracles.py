"""Independent slow reference implementations the tests compare against."""

import numpy as np


def brute_knn(points, q, k):
    """k nearest indices by exhaustive search; ties broken by lower index."""
    d = ((np.asarray(points) - np.asarray(q)) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(d)), d))
    return order[:k], np.sqrt(d[order[:k]])


def brute_radius(points, q, r):
    d = ((np.asarray(points) - np.asarray(q)) ** 2).sum(axis=1)
    return np.flatnonzero(d <= r * r)


def union_find_clusters(points, indices, radius):
    """Connected components under the link-radius graph via union-find
    over all O(n^2) pairs."""
    indices = np.unique(np.asarray(indices))
    parent = list(range(indices.size))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    pts = np.asarray(points)[indices]
    for i in range(indices.size):
        d = ((pts[i + 1:] - pts[i]) ** 2).sum(axis=1)
        for j in np.flatnonzero(d <= radius * radius) + i + 1:
            a, b = find(i), find(int(j))
            if a != b:
                parent[max(a, b)] = min(a, b)
    groups = {}
    for i in range(indices.size):
        groups.setdefault(find(i), []).append(indices[i])
    return sorted((np.array(sorted(g)) for g in groups.values()), key=lambda g: g[0])


def jacobi_eigh(S, sweeps=100, tol=1e-15):
    """Cyclic Jacobi rotations for a symmetric matrix. Returns eigenvalues
    in descending order and eigenvectors as columns."""
    A = np.array(S, dtype=np.float64)
    n = A.shape[0]
    V = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt((np.tril(A, -1) ** 2).sum())
        if off < tol * max(1.0, np.abs(A).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if A[p, q] == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * A[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1)) if theta else 1.0
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                R = np.eye(n)
                R[p, p] = R[q, q] = c
                R[p, q], R[q, p] = s, -s
                A = R.T @ A @ R
                V = V @ R
    w = np.diag(A)
    order = np.argsort(-w)
    return w[order], V[:, order]


def confusion_iou(pred, gt, c):
    """IoU from an explicit per-point tally."""
    tp = fp = fn = 0
    for p, g in zip(pred, gt):
        tp += p == c and g == c
        fp += p == c and g != c
        fn += p != c and g == c
    return float("nan") if tp + fp + fn == 0 else tp / (tp + fp + fn)


def fd_column_sums(value_fn, shape, h=1e-6):
    """Central differences of d/dt value_fn(offset = t * e_col) for every
    column: the derivative of the objective w.r.t. shifting a whole channel,
    which equals the column sum of the gradient."""
    out = np.zeros(shape[1])
    for k in range(shape[1]):
        off = np.zeros(shape)
        off[:, k] = h
        out[k] = (value_fn(off) - value_fn(-off)) / (2 * h)
    return out
