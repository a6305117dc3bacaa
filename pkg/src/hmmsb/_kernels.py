"""numba kernels behind :class:`hmmsb.gibbs.SamplerState`.

Tree layout: node 0 is the root; every other live node has a parent, a depth
and an occupancy count, and siblings form a doubly linked list.  Freed node
ids go on a stack for reuse.  B-entry counts live in dense ``(M, M)`` arrays
indexed by (donor-child node, receiver-child node); only sibling pairs are
ever non-zero.

``lg1[n] = lgamma(lambda1 + n)``, ``lg2[n] = lgamma(lambda2 + n)`` and
``lg12[n] = lgamma(lambda1 + lambda2 + n)`` are precomputed tables.

Kernels draw from numba's internal generator; callers seed it first with
``seed_rng`` so every call is reproducible from the caller's numpy stream.
"""
import math

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def seed_rng(seed):
    np.random.seed(seed)


# ---------------------------------------------------------------------------
# tree maintenance
# ---------------------------------------------------------------------------

@njit(**_JIT)
def new_node(parent_node, tree_parent, tree_depth, tree_count, first_child,
             next_sib, prev_sib, free_stack, n_free):
    if n_free[0] == 0:
        raise RuntimeError("node capacity exhausted")
    n_free[0] -= 1
    v = free_stack[n_free[0]]
    tree_parent[v] = parent_node
    tree_depth[v] = tree_depth[parent_node] + 1
    tree_count[v] = 0
    first_child[v] = -1
    head = first_child[parent_node]
    next_sib[v] = head
    prev_sib[v] = -1
    if head >= 0:
        prev_sib[head] = v
    first_child[parent_node] = v
    return v


@njit(**_JIT)
def free_node(v, tree_parent, first_child, next_sib, prev_sib, free_stack, n_free):
    p = tree_parent[v]
    nx = next_sib[v]
    pv = prev_sib[v]
    if pv >= 0:
        next_sib[pv] = nx
    else:
        first_child[p] = nx
    if nx >= 0:
        prev_sib[nx] = pv
    tree_parent[v] = -1
    next_sib[v] = -1
    prev_sib[v] = -1
    free_stack[n_free[0]] = v
    n_free[0] += 1


@njit(**_JIT)
def detach_actor(i, K, node_of, tree_parent, tree_count, first_child, next_sib,
                 prev_sib, free_stack, n_free):
    tree_count[0] -= 1
    for k in range(K, 0, -1):
        v = node_of[i, k]
        tree_count[v] -= 1
        if tree_count[v] < 0:
            raise RuntimeError("negative node occupancy")
        if tree_count[v] == 0:
            if first_child[v] >= 0:
                raise RuntimeError("freeing a node that still has children")
            free_node(v, tree_parent, first_child, next_sib, prev_sib, free_stack, n_free)
        node_of[i, k] = -1


@njit(**_JIT)
def attach_along(i, K, end_node, fresh_from, node_of, tree_parent, tree_depth,
                 tree_count, first_child, next_sib, prev_sib, free_stack, n_free):
    """Seat actor i on the path through ``end_node``; when ``fresh_from`` > 0
    the path leaves the tree below ``end_node`` (depth ``fresh_from - 1``)
    through freshly created nodes."""
    if fresh_from == 0:
        v = end_node
        for k in range(K, 0, -1):
            node_of[i, k] = v
            v = tree_parent[v]
    else:
        v = end_node
        for k in range(fresh_from - 1, 0, -1):
            node_of[i, k] = v
            v = tree_parent[v]
        p = end_node
        for k in range(fresh_from, K + 1):
            p = new_node(p, tree_parent, tree_depth, tree_count, first_child,
                         next_sib, prev_sib, free_stack, n_free)
            node_of[i, k] = p
    node_of[i, 0] = 0
    tree_count[0] += 1
    for k in range(1, K + 1):
        tree_count[node_of[i, k]] += 1


# ---------------------------------------------------------------------------
# pair bookkeeping
# ---------------------------------------------------------------------------

@njit(**_JIT)
def pair_update(i, j, sign, E, donor, recv, node_of, ones, zeros):
    """Add (sign=1) or remove (sign=-1) the pair's count; incompatible pairs
    carry no count."""
    zc = min(donor[i, j], recv[i, j])
    if node_of[i, zc - 1] != node_of[j, zc - 1]:
        return
    a = node_of[i, zc]
    b = node_of[j, zc]
    if E[i, j]:
        ones[a, b] += sign
        if ones[a, b] < 0:
            raise RuntimeError("B-entry count of present edges below zero")
    else:
        zeros[a, b] += sign
        if zeros[a, b] < 0:
            raise RuntimeError("B-entry count of absent edges below zero")


@njit(**_JIT)
def rebuild_stats(E, donor, recv, node_of, ones, zeros):
    ones[:, :] = 0
    zeros[:, :] = 0
    n = E.shape[0]
    for i in range(n):
        for j in range(n):
            if i != j:
                pair_update(i, j, 1, E, donor, recv, node_of, ones, zeros)


@njit(**_JIT)
def count_incompatible_edges(E, donor, recv, node_of):
    n = E.shape[0]
    bad = 0
    for i in range(n):
        for j in range(n):
            if i != j and E[i, j]:
                zc = min(donor[i, j], recv[i, j])
                if node_of[i, zc - 1] != node_of[j, zc - 1]:
                    bad += 1
    return bad


# ---------------------------------------------------------------------------
# level updates
# ---------------------------------------------------------------------------

@njit(**_JIT)
def level_weights(i, j, side, K, m, pi, l1, l2, E, donor, recv, lc, node_of,
                  ones, zeros, w):
    """Unnormalised conditional of one indicator into ``w[1..K]``; the pair
    and the indicator must already be removed from the counts."""
    actor = i if side == 0 else j
    other = recv[i, j] if side == 0 else donor[i, j]
    ge = 0
    for k in range(1, K + 1):
        ge += lc[actor, k]
    prod = 1.0
    e = E[i, j]
    for k in range(1, K + 1):
        nk = lc[actor, k]
        w[k] = prod * (m * pi + nk) / (pi + ge)
        prod *= ((1.0 - m) * pi + ge - nk) / (pi + ge)
        ge -= nk
        zc = min(k, other)
        if node_of[i, zc - 1] == node_of[j, zc - 1]:
            a = ones[node_of[i, zc], node_of[j, zc]]
            b = zeros[node_of[i, zc], node_of[j, zc]]
            if e:
                w[k] *= (a + l1) / (a + b + l1 + l2)
            else:
                w[k] *= (b + l2) / (a + b + l1 + l2)
        elif e:
            w[k] = 0.0
    w[0] = 0.0


@njit(**_JIT)
def sample_level_site(i, j, side, u, K, m, pi, l1, l2, E, donor, recv, lc,
                      node_of, ones, zeros, w):
    pair_update(i, j, -1, E, donor, recv, node_of, ones, zeros)
    if side == 0:
        lc[i, donor[i, j]] -= 1
    else:
        lc[j, recv[i, j]] -= 1
    level_weights(i, j, side, K, m, pi, l1, l2, E, donor, recv, lc, node_of,
                  ones, zeros, w)
    total = 0.0
    for k in range(1, K + 1):
        total += w[k]
    if not total > 0.0:
        raise RuntimeError("all level weights are zero")
    target = u * total
    new = K
    acc = 0.0
    for k in range(1, K + 1):
        acc += w[k]
        if target < acc:
            new = k
            break
    if side == 0:
        donor[i, j] = new
        lc[i, new] += 1
    else:
        recv[i, j] = new
        lc[j, new] += 1
    pair_update(i, j, 1, E, donor, recv, node_of, ones, zeros)
    return new


@njit(**_JIT)
def sweep_levels(order_i, order_j, side, K, m, pi, l1, l2, E, donor, recv, lc,
                 node_of, ones, zeros):
    w = np.zeros(K + 1)
    for t in range(order_i.shape[0]):
        sample_level_site(order_i[t], order_j[t], side, np.random.random(), K, m, pi,
                          l1, l2, E, donor, recv, lc, node_of, ones, zeros, w)


# ---------------------------------------------------------------------------
# path updates
# ---------------------------------------------------------------------------

@njit(**_JIT)
def _delta(g, h, r, s, lg1, lg2, lg12):
    return (lg1[g + r] + lg2[h + s] - lg12[g + h + r + s]
            - lg1[g] - lg2[h] + lg12[g + h])


@njit(**_JIT)
def _child_score(c, xs, n_xs, rd1, rd0, rr1, rr0, ones, zeros, lg1, lg2, lg12):
    """Log collapsed-likelihood gain of putting actor i at child ``c`` (-1 for
    a fresh child) of a parent, given the incident pairs resolved there."""
    s = 0.0
    for t in range(n_xs):
        x = xs[t]
        if x == c:
            s += _delta(ones[c, c], zeros[c, c], rd1[x] + rr1[x], rd0[x] + rr0[x],
                        lg1, lg2, lg12)
        else:
            if rd1[x] + rd0[x] > 0:
                g = ones[c, x] if c >= 0 else 0
                h = zeros[c, x] if c >= 0 else 0
                s += _delta(g, h, rd1[x], rd0[x], lg1, lg2, lg12)
            if rr1[x] + rr0[x] > 0:
                g = ones[x, c] if c >= 0 else 0
                h = zeros[x, c] if c >= 0 else 0
                s += _delta(g, h, rr1[x], rr0[x], lg1, lg2, lg12)
    return s


@njit(**_JIT)
def path_candidates(i, K, gamma, E, donor, recv, node_of, tree_parent, tree_count,
                    first_child, next_sib, ones, zeros, lg1, lg2, lg12, work):
    """Score every candidate path of a detached actor.

    Returns ``(end_node, fresh_from, log_prior, log_lik)`` arrays.  A
    candidate either ends at an existing depth-K node (``fresh_from = 0``) or
    leaves the tree through a fresh child of ``end_node`` at level
    ``fresh_from``.  ``log_lik`` is -inf where some incident present edge
    would be incompatible.
    """
    n = E.shape[0]
    M = tree_parent.shape[0]
    (head, nxt, px, pd, pe, o1, rd1, rd0, rr1, rr0, mark, xs, lvl_a, lvl_b,
     cscore, cprior, cvalid) = work
    t1 = np.zeros(K + 2, dtype=np.int64)
    # bucket the incident pairs by the counterpart's node above the coarse level
    n_pairs = 0
    for j in range(n):
        if j == i:
            continue
        for d in range(2):
            if d == 0:
                zc = min(donor[i, j], recv[i, j])
                e = E[i, j]
            else:
                zc = min(donor[j, i], recv[j, i])
                e = E[j, i]
            p = node_of[j, zc - 1]
            px[n_pairs] = node_of[j, zc]
            pd[n_pairs] = d
            pe[n_pairs] = e
            nxt[n_pairs] = head[p]
            head[p] = n_pairs
            o1[p] += e
            t1[zc] += e
            n_pairs += 1
    # ones at levels strictly deeper than k
    deeper = np.zeros(K + 2, dtype=np.int64)
    for k in range(K - 1, -1, -1):
        deeper[k] = deeper[k + 1] + t1[k + 1]

    n_cand = 0
    cand_end = np.empty(M + 1, dtype=np.int64)
    cand_fresh = np.empty(M + 1, dtype=np.int64)
    cand_prior = np.empty(M + 1)
    cand_lik = np.empty(M + 1)

    cur = lvl_a
    nxt_lvl = lvl_b
    cur[0] = 0
    n_cur = 1
    cscore[0] = 0.0
    cprior[0] = 0.0
    cvalid[0] = 1
    for k in range(1, K + 1):
        n_next = 0
        for t in range(n_cur):
            P = cur[t]
            n_xs = 0
            q = head[P]
            while q >= 0:
                x = px[q]
                if mark[x] == 0:
                    mark[x] = 1
                    xs[n_xs] = x
                    n_xs += 1
                if pd[q] == 0:
                    if pe[q]:
                        rd1[x] += 1
                    else:
                        rd0[x] += 1
                else:
                    if pe[q]:
                        rr1[x] += 1
                    else:
                        rr0[x] += 1
                q = nxt[q]
            ok = cvalid[P] == 1 and o1[P] == t1[k]
            denom = tree_count[P] + gamma
            c = first_child[P]
            while c >= 0:
                s = _child_score(c, xs, n_xs, rd1, rd0, rr1, rr0, ones, zeros,
                                 lg1, lg2, lg12)
                cprior[c] = cprior[P] + math.log(tree_count[c] / denom)
                cscore[c] = cscore[P] + s
                cvalid[c] = 1 if ok else 0
                nxt_lvl[n_next] = c
                n_next += 1
                c = next_sib[c]
            s = _child_score(-1, xs, n_xs, rd1, rd0, rr1, rr0, ones, zeros,
                             lg1, lg2, lg12)
            cand_end[n_cand] = P
            cand_fresh[n_cand] = k
            cand_prior[n_cand] = cprior[P] + math.log(gamma / denom)
            if ok and deeper[k] == 0:
                cand_lik[n_cand] = cscore[P] + s
            else:
                cand_lik[n_cand] = -np.inf
            n_cand += 1
            for tt in range(n_xs):
                x = xs[tt]
                mark[x] = 0
                rd1[x] = 0
                rd0[x] = 0
                rr1[x] = 0
                rr0[x] = 0
            head[P] = -1
            o1[P] = 0
        tmp = cur
        cur = nxt_lvl
        nxt_lvl = tmp
        n_cur = n_next
    for t in range(n_cur):
        v = cur[t]
        cand_end[n_cand] = v
        cand_fresh[n_cand] = 0
        cand_prior[n_cand] = cprior[v]
        cand_lik[n_cand] = cscore[v] if cvalid[v] == 1 else -np.inf
        n_cand += 1
    return cand_end[:n_cand], cand_fresh[:n_cand], cand_prior[:n_cand], cand_lik[:n_cand]


@njit(**_JIT)
def remove_incident(i, sign, E, donor, recv, node_of, ones, zeros):
    n = E.shape[0]
    for j in range(n):
        if j != i:
            pair_update(i, j, sign, E, donor, recv, node_of, ones, zeros)
            pair_update(j, i, sign, E, donor, recv, node_of, ones, zeros)


@njit(**_JIT)
def sample_path_site(i, u, K, gamma, E, donor, recv, node_of, tree_parent,
                     tree_depth, tree_count, first_child, next_sib, prev_sib,
                     free_stack, n_free, ones, zeros, lg1, lg2, lg12, work):
    remove_incident(i, -1, E, donor, recv, node_of, ones, zeros)
    detach_actor(i, K, node_of, tree_parent, tree_count, first_child, next_sib,
                 prev_sib, free_stack, n_free)
    end, fresh, prior, lik = path_candidates(
        i, K, gamma, E, donor, recv, node_of, tree_parent, tree_count, first_child,
        next_sib, ones, zeros, lg1, lg2, lg12, work)
    logp = prior + lik
    top = -np.inf
    for c in range(logp.shape[0]):
        if logp[c] > top:
            top = logp[c]
    if top == -np.inf:
        raise RuntimeError("every candidate path has zero probability")
    total = 0.0
    for c in range(logp.shape[0]):
        logp[c] = math.exp(logp[c] - top)
        total += logp[c]
    target = u * total
    pick = logp.shape[0] - 1
    acc = 0.0
    for c in range(logp.shape[0]):
        acc += logp[c]
        if target < acc:
            pick = c
            break
    attach_along(i, K, end[pick], fresh[pick], node_of, tree_parent, tree_depth,
                 tree_count, first_child, next_sib, prev_sib, free_stack, n_free)
    remove_incident(i, 1, E, donor, recv, node_of, ones, zeros)
    return pick


@njit(**_JIT)
def sweep_paths(order, K, gamma, E, donor, recv, node_of, tree_parent, tree_depth,
                tree_count, first_child, next_sib, prev_sib, free_stack, n_free,
                ones, zeros, lg1, lg2, lg12, work):
    for t in range(order.shape[0]):
        sample_path_site(order[t], np.random.random(), K, gamma, E, donor, recv,
                         node_of, tree_parent, tree_depth, tree_count, first_child,
                         next_sib, prev_sib, free_stack, n_free, ones, zeros,
                         lg1, lg2, lg12, work)


# ---------------------------------------------------------------------------
# joint probability
# ---------------------------------------------------------------------------

@njit(**_JIT)
def log_betaln(a, b):
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


@njit(**_JIT)
def edge_log_marginal(tree_parent, tree_count, first_child, next_sib, ones, zeros,
                      lg1, lg2, lg12):
    """Sum over realised B entries of the Beta-Bernoulli log marginal."""
    base = lg1[0] + lg2[0] - lg12[0]
    total = 0.0
    M = tree_parent.shape[0]
    for P in range(M):
        if P != 0 and tree_parent[P] < 0:
            continue
        a = first_child[P]
        while a >= 0:
            b = first_child[P]
            while b >= 0:
                g = ones[a, b]
                h = zeros[a, b]
                if g + h > 0:
                    total += lg1[g] + lg2[h] - lg12[g + h] - base
                b = next_sib[b]
            a = next_sib[a]
    return total


@njit(**_JIT)
def tree_log_prior(K, gamma, tree_parent, tree_depth, tree_count, first_child, next_sib):
    total = 0.0
    M = tree_parent.shape[0]
    lg_gamma = math.lgamma(gamma)
    log_gamma = math.log(gamma)
    for P in range(M):
        if P != 0 and tree_parent[P] < 0:
            continue
        if tree_depth[P] >= K or tree_count[P] == 0:
            continue
        total += lg_gamma - math.lgamma(gamma + tree_count[P])
        c = first_child[P]
        while c >= 0:
            total += log_gamma + math.lgamma(tree_count[c])
            c = next_sib[c]
    return total


@njit(**_JIT)
def levels_log_prior(K, m, pi, lc, log_norm):
    a = m * pi
    b = (1.0 - m) * pi
    base = log_betaln(a, b)
    total = 0.0
    for i in range(lc.shape[0]):
        deeper = 0
        for k in range(K, 0, -1):
            total += log_betaln(a + lc[i, k], b + deeper) - base
            deeper += lc[i, k]
        total -= log_norm
    return total


# ---------------------------------------------------------------------------
# edge regeneration and prior draws
# ---------------------------------------------------------------------------

@njit(**_JIT)
def regenerate_edges(l1, l2, E, donor, recv, node_of, bval):
    """Redraw every edge given paths and levels with fresh B entries from
    the Beta prior; ``bval`` is scratch filled with -1 on entry and exit."""
    n = E.shape[0]
    touched_a = np.empty(n * n, dtype=np.int64)
    touched_b = np.empty(n * n, dtype=np.int64)
    nt = 0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            zc = min(donor[i, j], recv[i, j])
            if node_of[i, zc - 1] != node_of[j, zc - 1]:
                E[i, j] = 0
                continue
            a = node_of[i, zc]
            b = node_of[j, zc]
            if bval[a, b] < 0:
                bval[a, b] = np.random.beta(l1, l2)
                touched_a[nt] = a
                touched_b[nt] = b
                nt += 1
            E[i, j] = 1 if np.random.random() < bval[a, b] else 0
    for t in range(nt):
        bval[touched_a[t], touched_b[t]] = -1.0


@njit(**_JIT)
def is_log_weights(n_draws, K, gamma, E, level_cdf, lg1, lg2, lg12):
    """Log collapsed edge likelihood of ``n_draws`` (paths, levels) draws
    from the prior."""
    n = E.shape[0]
    M = 1 + K * n + 1
    tree_parent = np.full(M, -1, dtype=np.int64)
    tree_depth = np.zeros(M, dtype=np.int64)
    tree_count = np.zeros(M, dtype=np.int64)
    first_child = np.full(M, -1, dtype=np.int64)
    next_sib = np.full(M, -1, dtype=np.int64)
    prev_sib = np.full(M, -1, dtype=np.int64)
    free_stack = np.arange(M - 1, 0, -1).astype(np.int64)
    n_free = np.array([M - 1], dtype=np.int64)
    node_of = np.zeros((n, K + 1), dtype=np.int64)
    donor = np.zeros((n, n), dtype=np.int64)
    recv = np.zeros((n, n), dtype=np.int64)
    ones = np.zeros((M, M), dtype=np.int64)
    zeros = np.zeros((M, M), dtype=np.int64)
    n_ind = 2 * (n - 1)
    z = np.empty(max(n_ind, 1), dtype=np.int64)
    touched_a = np.empty(n * n, dtype=np.int64)
    touched_b = np.empty(n * n, dtype=np.int64)
    base = lg1[0] + lg2[0] - lg12[0]
    out = np.empty(n_draws)
    for s in range(n_draws):
        # paths by sequential nCRP
        for i in range(n):
            P = 0
            end = 0
            fresh_from = 0
            for k in range(1, K + 1):
                target = np.random.random() * (tree_count[P] + gamma)
                acc = 0.0
                chosen = -1
                c = first_child[P]
                while c >= 0:
                    acc += tree_count[c]
                    if target < acc:
                        chosen = c
                        break
                    c = next_sib[c]
                if chosen < 0:
                    end = P
                    fresh_from = k
                    break
                P = chosen
                end = P
            attach_along(i, K, end, fresh_from, node_of, tree_parent, tree_depth,
                         tree_count, first_child, next_sib, prev_sib, free_stack, n_free)
        # levels from the conditioned stick-breaking prior
        if n > 1:
            for i in range(n):
                remaining = n_ind
                pos = 0
                for k in range(1, K):
                    if remaining == 0:
                        break
                    u = np.random.random()
                    cnt = 0
                    while cnt < remaining and level_cdf[k - 1, remaining, cnt] <= u:
                        cnt += 1
                    for t in range(cnt):
                        z[pos] = k
                        pos += 1
                    remaining -= cnt
                for t in range(remaining):
                    z[pos] = K
                    pos += 1
                for t in range(n_ind - 1, 0, -1):
                    r = np.random.randint(0, t + 1)
                    tmp = z[t]
                    z[t] = z[r]
                    z[r] = tmp
                pos = 0
                for j in range(n):
                    if j != i:
                        donor[i, j] = z[pos]
                        recv[j, i] = z[n - 1 + pos]
                        pos += 1
        # collapsed edge likelihood
        lw = 0.0
        nt = 0
        dead = False
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                zc = min(donor[i, j], recv[i, j])
                if node_of[i, zc - 1] != node_of[j, zc - 1]:
                    if E[i, j]:
                        dead = True
                    continue
                a = node_of[i, zc]
                b = node_of[j, zc]
                if ones[a, b] + zeros[a, b] == 0:
                    touched_a[nt] = a
                    touched_b[nt] = b
                    nt += 1
                if E[i, j]:
                    ones[a, b] += 1
                else:
                    zeros[a, b] += 1
        for t in range(nt):
            a = touched_a[t]
            b = touched_b[t]
            g = ones[a, b]
            h = zeros[a, b]
            lw += lg1[g] + lg2[h] - lg12[g + h] - base
            ones[a, b] = 0
            zeros[a, b] = 0
        out[s] = -np.inf if dead else lw
        # tear the tree down
        for i in range(n):
            detach_actor(i, K, node_of, tree_parent, tree_count, first_child, next_sib,
                         prev_sib, free_stack, n_free)
    return out
