"""Compiled kernels for growing and walking trees.

Trees are flat arrays. ``feature[node] == -1`` marks a leaf; for internal nodes
points with ``X[:, feature] <= threshold`` go to ``left``. Node ids are assigned
in creation order, so a parent always has a smaller id than its children.
"""

import numpy as np
from numba import njit

REGRESSION = 0
CAUSAL = 1

RIDGE = 1e-12


@njit(cache=True, nogil=True)
def _route(X, i, feature, threshold, left, right):
    node = 0
    while feature[node] >= 0:
        if X[i, feature[node]] <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@njit(cache=True, nogil=True)
def grow_tree(X, a, b, treated, split_idx, est_idx, kind, mtry, min_leaf,
              min_treated, min_control, penalty, honest, seed):
    """Grow one tree on ``split_idx`` and populate its leaves with ``est_idx``.

    ``kind == REGRESSION`` maximizes the decrease in squared error of ``a``.
    ``kind == CAUSAL`` maximizes ``n_L n_R (d_L - d_R)^2`` where ``d`` is the
    no-intercept slope of ``a`` on ``b`` within each child.
    """
    np.random.seed(seed)
    n_s = split_idx.shape[0]
    d = X.shape[1]
    max_nodes = 2 * n_s + 1
    feature = np.full(max_nodes, -1, np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    start = np.zeros(max_nodes, np.int64)
    end = np.zeros(max_nodes, np.int64)

    idx = split_idx.copy()
    buf = np.empty(n_s, np.int64)
    vals = np.empty(n_s)
    feats = np.arange(d)
    stack = np.empty(max_nodes, np.int64)

    den_floor = 0.0
    if kind == CAUSAL and n_s > 0:
        root_den = 0.0
        for t in range(n_s):
            root_den += b[idx[t]] * b[idx[t]]
        den_floor = 1e-8 * root_den / n_s

    n_nodes = 1
    start[0] = 0
    end[0] = n_s
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        s = start[node]
        e = end[node]
        m = e - s
        if m < 2 * min_leaf:
            continue

        tot_a = 0.0
        tot_aa = 0.0
        tot_ab = 0.0
        tot_bb = 0.0
        tot_t = 0
        for t in range(s, e):
            i = idx[t]
            if kind == REGRESSION:
                tot_a += a[i]
                tot_aa += a[i] * a[i]
            else:
                tot_ab += a[i] * b[i]
                tot_bb += b[i] * b[i]
                tot_t += treated[i]
        if kind == REGRESSION:
            sse = tot_aa - tot_a * tot_a / m
            if sse <= 1e-12 * tot_aa or sse <= 0.0:
                continue
        else:
            if tot_bb < den_floor or tot_bb <= 0.0:
                continue
            if tot_t < 2 * min_treated or (m - tot_t) < 2 * min_control:
                continue

        for j in range(mtry):
            r = j + np.random.randint(d - j)
            tmp = feats[j]
            feats[j] = feats[r]
            feats[r] = tmp

        best_score = 0.0
        best_f = -1
        best_thr = 0.0
        for jj in range(mtry):
            f = feats[jj]
            for t in range(m):
                vals[t] = X[idx[s + t], f]
            order = np.argsort(vals[:m], kind="mergesort")
            acc_a = 0.0
            acc_ab = 0.0
            acc_bb = 0.0
            acc_t = 0
            for t in range(m - 1):
                i = idx[s + order[t]]
                if kind == REGRESSION:
                    acc_a += a[i]
                else:
                    acc_ab += a[i] * b[i]
                    acc_bb += b[i] * b[i]
                    acc_t += treated[i]
                v_lo = vals[order[t]]
                v_hi = vals[order[t + 1]]
                if not v_lo < v_hi:
                    continue
                n_l = t + 1
                n_r = m - n_l
                if n_l < min_leaf or n_r < min_leaf:
                    continue
                if kind == REGRESSION:
                    sum_r = tot_a - acc_a
                    gain = (acc_a * acc_a / n_l + sum_r * sum_r / n_r
                            - tot_a * tot_a / m)
                    score = gain - penalty * sse * abs(n_l - n_r) / m
                else:
                    t_r = tot_t - acc_t
                    if acc_t < min_treated or t_r < min_treated:
                        continue
                    if n_l - acc_t < min_control or n_r - t_r < min_control:
                        continue
                    bb_r = tot_bb - acc_bb
                    if acc_bb < den_floor or bb_r < den_floor:
                        continue
                    d_l = acc_ab / (acc_bb + RIDGE)
                    d_r = (tot_ab - acc_ab) / (max(bb_r, 0.0) + RIDGE)
                    score = n_l * n_r * (d_l - d_r) ** 2
                    score -= penalty * abs(n_l - n_r) * abs(acc_t / n_l - t_r / n_r)
                if score > best_score:
                    best_score = score
                    best_f = f
                    thr = 0.5 * (v_lo + v_hi)
                    if thr >= v_hi:
                        thr = v_lo
                    best_thr = thr

        if best_f < 0:
            continue

        n_l = 0
        n_r = 0
        for t in range(s, e):
            i = idx[t]
            if X[i, best_f] <= best_thr:
                idx[s + n_l] = i
                n_l += 1
            else:
                buf[n_r] = i
                n_r += 1
        for t in range(n_r):
            idx[s + n_l + t] = buf[t]

        feature[node] = best_f
        threshold[node] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        start[lc] = s
        end[lc] = s + n_l
        start[rc] = s + n_l
        end[rc] = e
        stack[top] = rc
        stack[top + 1] = lc
        top += 2

    if honest:
        # collapse splits that leave a child without estimation points
        cnt = np.zeros(n_nodes, np.int64)
        for t in range(est_idx.shape[0]):
            i = est_idx[t]
            node = 0
            cnt[0] += 1
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
                cnt[node] += 1
        for node in range(n_nodes):
            if feature[node] >= 0:
                if cnt[left[node]] == 0 or cnt[right[node]] == 0:
                    feature[node] = -1

    reach = np.zeros(n_nodes, np.bool_)
    reach[0] = True
    new_id = np.full(n_nodes, -1, np.int64)
    k = 0
    for node in range(n_nodes):
        if reach[node]:
            new_id[node] = k
            k += 1
            if feature[node] >= 0:
                reach[left[node]] = True
                reach[right[node]] = True
    o_feature = np.full(k, -1, np.int64)
    o_threshold = np.zeros(k)
    o_left = np.full(k, -1, np.int64)
    o_right = np.full(k, -1, np.int64)
    for node in range(n_nodes):
        q = new_id[node]
        if q < 0:
            continue
        if feature[node] >= 0:
            o_feature[q] = feature[node]
            o_threshold[q] = threshold[node]
            o_left[q] = new_id[left[node]]
            o_right[q] = new_id[right[node]]

    est_leaf = np.empty(est_idx.shape[0], np.int64)
    for t in range(est_idx.shape[0]):
        est_leaf[t] = _route(X, est_idx[t], o_feature, o_threshold, o_left, o_right)
    split_leaf = np.empty(n_s, np.int64)
    for t in range(n_s):
        split_leaf[t] = _route(X, split_idx[t], o_feature, o_threshold, o_left, o_right)
    return o_feature, o_threshold, o_left, o_right, est_leaf, split_leaf


@njit(cache=True, nogil=True)
def apply_trees(Xq, roots, feature, threshold, left, right):
    """Global leaf id reached by every query row in every tree, shape (m, B)."""
    m = Xq.shape[0]
    n_trees = roots.shape[0]
    out = np.empty((m, n_trees), np.int64)
    for q in range(m):
        for t in range(n_trees):
            node = roots[t]
            while feature[node] >= 0:
                if Xq[q, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[q, t] = node
    return out


@njit(cache=True, nogil=True)
def accumulate_weights(leaves, tree_mask, mstart, mcount, members, n):
    """Forest kernel weights for one query given its leaf in each tree."""
    w = np.zeros(n)
    used = 0
    for t in range(leaves.shape[0]):
        if tree_mask[t]:
            used += 1
    if used == 0:
        return w
    for t in range(leaves.shape[0]):
        if not tree_mask[t]:
            continue
        node = leaves[t]
        c = mcount[node]
        share = 1.0 / (used * c)
        for j in range(mstart[node], mstart[node] + c):
            w[members[j]] += share
    return w
