"""Slow, obviously-correct reference implementations used by the tests."""

import numpy as np


def walk(node, x):
    while not node.is_leaf:
        node = node.left if x[node.split_feature] <= node.split_value else node.right
    return node


def naive_predict(forest, X, y):
    out = np.zeros(len(X))
    B = forest.num_trees
    for b in range(B):
        root = forest.tree(b)
        for q, x in enumerate(X):
            leaf = walk(root, x)
            out[q] += np.mean(y[leaf.leaf_members]) / B
    return out


def naive_weights(forest, x, n):
    w = np.zeros(n)
    B = forest.num_trees
    for b in range(B):
        leaf = walk(forest.tree(b), x)
        for i in leaf.leaf_members:
            w[i] += 1.0 / (B * len(leaf.leaf_members))
    return w


def cart(X, y, rows, min_leaf):
    """Exhaustive CART on one feature set; returns a nested tuple tree."""
    rows = np.asarray(rows)
    m = len(rows)
    if m < 2 * min_leaf:
        return ("leaf", sorted(rows.tolist()))
    yy = y[rows]
    base = np.sum((yy - yy.mean()) ** 2)
    best = None
    for f in range(X.shape[1]):
        vals = np.unique(X[rows, f])
        for lo, hi in zip(vals[:-1], vals[1:]):
            thr = 0.5 * (lo + hi)
            left = rows[X[rows, f] <= thr]
            right = rows[X[rows, f] > thr]
            if len(left) < min_leaf or len(right) < min_leaf:
                continue
            sse = (np.sum((y[left] - y[left].mean()) ** 2)
                   + np.sum((y[right] - y[right].mean()) ** 2))
            gain = base - sse
            if gain > 1e-12 and (best is None or gain > best[0] + 1e-12):
                best = (gain, f, thr, left, right)
    if best is None:
        return ("leaf", sorted(rows.tolist()))
    _, f, thr, left, right = best
    return ("split", f, thr, cart(X, y, left, min_leaf), cart(X, y, right, min_leaf))


def as_tuple(node):
    if node.is_leaf:
        return ("leaf", sorted(node.leaf_members.tolist()))
    return ("split", node.split_feature, node.split_value, as_tuple(node.left),
            as_tuple(node.right))


def best_causal_split(X, a, b, min_leaf):
    """Root split maximizing n_L n_R (d_L - d_R)^2 by brute force."""
    n = len(a)
    best = (0.0, None, None)
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for lo, hi in zip(vals[:-1], vals[1:]):
            thr = 0.5 * (lo + hi)
            L = X[:, f] <= thr
            nl = L.sum()
            if nl < min_leaf or n - nl < min_leaf:
                continue
            dl = np.sum(a[L] * b[L]) / np.sum(b[L] ** 2)
            dr = np.sum(a[~L] * b[~L]) / np.sum(b[~L] ** 2)
            score = nl * (n - nl) * (dl - dr) ** 2
            if score > best[0]:
                best = (score, f, thr)
    return best
