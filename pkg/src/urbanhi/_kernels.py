"""Numba kernels for CART growth and tree-ensemble prediction."""
import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, nogil=True)
def _splitmix_next(state):
    state[0] += _GOLDEN
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _randbelow(state, n):
    return np.int64(_splitmix_next(state) % np.uint64(n))


@njit(cache=True, nogil=True)
def quantile_sorted(v, q):
    # linear interpolation between order statistics (numpy's default method)
    n = v.shape[0]
    if n == 1:
        return v[0]
    pos = q * (n - 1)
    lo = int(np.floor(pos))
    if lo >= n - 1:
        return v[n - 1]
    frac = pos - lo
    return v[lo] + (v[lo + 1] - v[lo]) * frac


@njit(cache=True, nogil=True)
def build_tree(X, y_split, y_leaf, idx, max_features, min_samples_leaf, max_depth, leaf_tau, seed):
    """Grow one regression tree by exhaustive variance-reduction splits.

    ``idx`` holds training row indices (duplicates allowed, e.g. a bootstrap)
    and is reordered in place. Splits are scored on ``y_split``; leaf values
    come from ``y_leaf`` (mean when ``leaf_tau < 0``, else its tau-quantile).
    ``max_depth < 0`` means unlimited depth.
    """
    n_total = idx.shape[0]
    d = X.shape[1]
    cap = 2 * n_total + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, dtype=np.int64)

    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed)
    feats = np.arange(d)
    tmp = np.empty(n_total, dtype=np.int64)

    stack_node = np.empty(cap, dtype=np.int64)
    stack_start = np.empty(cap, dtype=np.int64)
    stack_end = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    sp = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = n_total
    stack_depth[0] = 0
    sp = 1
    n_nodes = 1
    depth_used = 0

    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        start = stack_start[sp]
        end = stack_end[sp]
        depth = stack_depth[sp]
        n = end - start
        count[node] = n
        if depth > depth_used:
            depth_used = depth

        ymin = np.inf
        ymax = -np.inf
        total = 0.0
        for i in range(start, end):
            v = y_split[idx[i]]
            total += v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        mean = total / n

        best_f = -1
        best_thr = 0.0
        best_gain = 0.0
        can_split = n >= 2 * min_samples_leaf and ymax > ymin and (max_depth < 0 or depth < max_depth)
        if can_split:
            # partial Fisher-Yates draw of the candidate feature subset
            for k in range(max_features):
                j = k + _randbelow(state, d - k)
                t = feats[k]
                feats[k] = feats[j]
                feats[j] = t
            xs = np.empty(n)
            ys = np.empty(n)
            for k in range(max_features):
                f = feats[k]
                for i in range(n):
                    xs[i] = X[idx[start + i], f]
                order = np.argsort(xs, kind="mergesort")
                sx = xs[order]
                if sx[0] == sx[n - 1]:
                    continue
                for i in range(n):
                    ys[i] = y_split[idx[start + order[i]]] - mean
                lsum = 0.0
                for i in range(n - 1):
                    lsum += ys[i]
                    nl = i + 1
                    nr = n - nl
                    if nl < min_samples_leaf:
                        continue
                    if nr < min_samples_leaf:
                        break
                    if sx[i] == sx[i + 1]:
                        continue
                    gain = lsum * lsum / nl + lsum * lsum / nr
                    thr = 0.5 * (sx[i] + sx[i + 1])
                    if thr >= sx[i + 1]:
                        thr = sx[i]
                    if gain > best_gain or (
                        gain == best_gain and best_f >= 0 and (f < best_f or (f == best_f and thr < best_thr))
                    ):
                        best_gain = gain
                        best_f = f
                        best_thr = thr

        if best_f < 0:
            if leaf_tau < 0:
                s = 0.0
                for i in range(start, end):
                    s += y_leaf[idx[i]]
                value[node] = s / n
            else:
                buf = np.empty(n)
                for i in range(n):
                    buf[i] = y_leaf[idx[start + i]]
                buf.sort()
                value[node] = quantile_sorted(buf, leaf_tau)
            continue

        # stable partition of idx[start:end] on the chosen split
        nl = 0
        for i in range(start, end):
            if X[idx[i], best_f] <= best_thr:
                nl += 1
        a = start
        b = start + nl
        for i in range(start, end):
            r = idx[i]
            if X[r, best_f] <= best_thr:
                tmp[a] = r
                a += 1
            else:
                tmp[b] = r
                b += 1
        for i in range(start, end):
            idx[i] = tmp[i]

        feature[node] = best_f
        threshold[node] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        # right pushed first so the left subtree is grown first
        stack_node[sp] = rc
        stack_start[sp] = start + nl
        stack_end[sp] = end
        stack_depth[sp] = depth + 1
        sp += 1
        stack_node[sp] = lc
        stack_start[sp] = start
        stack_end[sp] = start + nl
        stack_depth[sp] = depth + 1
        sp += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        count[:n_nodes].copy(),
        depth_used,
    )


@njit(cache=True, nogil=True)
def predict_tree(X, feature, threshold, left, right, value):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@njit(cache=True, nogil=True)
def predict_packed(X, offsets, feature, threshold, left, right, value):
    """Sum of tree outputs for trees packed back to back; child indices are tree-local."""
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.zeros(n)
    # tree-outer order keeps one tree hot in cache while every row walks it
    for t in range(n_trees):
        base = offsets[t]
        for i in range(n):
            node = 0
            while feature[base + node] >= 0:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            out[i] += value[base + node]
    return out


@njit(cache=True, nogil=True)
def interventional_shap(X, R, rw, offsets, feature, threshold, left, right, value, WX, WR):
    """Exact interventional Shapley values of a sum of trees.

    For every row of ``X`` and every reference row of ``R`` (weights ``rw``),
    the game v(S) = f(x_S, r_~S) is expanded leaf by leaf. A leaf reached with
    feature sets A (followed x where x and r disagree) and B (followed r) adds
    value * WX[|A|, |B|] to each feature in A and subtracts value * WR[|A|, |B|]
    from each feature in B. Returns the (n, d) attribution matrix; the caller
    applies any output scaling.
    """
    n, d = X.shape
    n_trees = offsets.shape[0] - 1
    phi = np.zeros((n, d))
    max_nodes = 1
    for t in range(n_trees):
        if offsets[t + 1] - offsets[t] > max_nodes:
            max_nodes = offsets[t + 1] - offsets[t]
    cap = 2 * max_nodes + 2
    st_node = np.empty(cap, dtype=np.int64)
    st_feat = np.empty(cap, dtype=np.int64)
    st_side = np.empty(cap, dtype=np.int64)
    st_kind = np.empty(cap, dtype=np.int64)
    state = np.zeros(d, dtype=np.int64)
    a_feat = np.empty(d, dtype=np.int64)
    a_side = np.empty(d, dtype=np.int64)

    for i in range(n):
        for t in range(n_trees):
            base = offsets[t]
            for k in range(R.shape[0]):
                w = rw[k]
                if w == 0.0:
                    continue
                sp = 0
                st_node[0] = 0
                st_feat[0] = -1
                st_side[0] = 0
                st_kind[0] = 0
                sp = 1
                na = 0
                nx = 0
                nr = 0
                while sp > 0:
                    sp -= 1
                    if st_kind[sp] == 1:
                        na -= 1
                        state[a_feat[na]] = 0
                        if a_side[na] == 1:
                            nx -= 1
                        else:
                            nr -= 1
                        continue
                    node = st_node[sp]
                    fa = st_feat[sp]
                    if fa >= 0:
                        side = st_side[sp]
                        state[fa] = side
                        a_feat[na] = fa
                        a_side[na] = side
                        na += 1
                        if side == 1:
                            nx += 1
                        else:
                            nr += 1
                        st_kind[sp] = 1
                        sp += 1
                    f = feature[base + node]
                    if f < 0:
                        v = value[base + node] * w
                        if na > 0:
                            wx = WX[nx, nr] * v
                            wr = WR[nx, nr] * v
                            for j in range(na):
                                if a_side[j] == 1:
                                    phi[i, a_feat[j]] += wx
                                else:
                                    phi[i, a_feat[j]] -= wr
                        continue
                    thr = threshold[base + node]
                    xl = X[i, f] <= thr
                    rl = R[k, f] <= thr
                    lc = left[base + node]
                    rc = right[base + node]
                    if xl == rl or state[f] != 0:
                        go_left = xl
                        if xl != rl and state[f] == 2:
                            go_left = rl
                        st_node[sp] = lc if go_left else rc
                        st_feat[sp] = -1
                        st_kind[sp] = 0
                        sp += 1
                    else:
                        st_node[sp] = lc if xl else rc
                        st_feat[sp] = f
                        st_side[sp] = 1
                        st_kind[sp] = 0
                        sp += 1
                        st_node[sp] = lc if rl else rc
                        st_feat[sp] = f
                        st_side[sp] = 2
                        st_kind[sp] = 0
                        sp += 1
    return phi
