"""Independent reference implementations used only by the tests."""
import itertools
import math

import numpy as np


def enumerate_min_flow(c, m, transitions):
    """Brute-force min-cost flow value over all edge subsets forming disjoint paths.

    Each transition subset with in/out degree <= 1 defines paths; every node on a
    path is covered (det + en at heads, ex at tails). Isolated nodes are then
    switched on independently iff ``en + det + ex < 0``. Returns ``(best, x)``.
    """
    c = np.asarray(c, dtype=float)
    E = len(transitions)
    det, en, ex, tran = c[:m], c[m:2 * m], c[2 * m:3 * m], c[3 * m:]
    best, best_x = math.inf, None
    for mask in range(1 << E):
        chosen = [e for e in range(E) if mask >> e & 1]
        outd, ind = [0] * m, [0] * m
        ok = True
        for e in chosen:
            i, j = transitions[e]
            outd[i] += 1
            ind[j] += 1
            if outd[i] > 1 or ind[j] > 1:
                ok = False
                break
        if not ok:
            continue
        x = np.zeros(3 * m + E)
        val = 0.0
        for e in chosen:
            x[3 * m + e] = 1
            val += tran[e]
        for i in range(m):
            touched = outd[i] or ind[i]
            if touched:
                x[i] = 1
                val += det[i]
                if not ind[i]:
                    x[m + i] = 1
                    val += en[i]
                if not outd[i]:
                    x[2 * m + i] = 1
                    val += ex[i]
            elif en[i] + det[i] + ex[i] < 0:
                x[i] = x[m + i] = x[2 * m + i] = 1
                val += en[i] + det[i] + ex[i]
        if val < best - 1e-12:
            best, best_x = val, x
    return best, best_x


def all_binary_feasible(m, transitions):
    """Every feasible binary flow vector (tiny graphs only)."""
    n = 3 * m + len(transitions)
    for bits in itertools.product((0.0, 1.0), repeat=n):
        x = np.array(bits)
        ok = True
        for i in range(m):
            inflow = x[m + i] + sum(x[3 * m + e] for e, (a, b) in enumerate(transitions) if b == i)
            outflow = x[2 * m + i] + sum(x[3 * m + e] for e, (a, b) in enumerate(transitions) if a == i)
            if inflow != x[i] or outflow != x[i]:
                ok = False
                break
        if ok:
            yield x


def scalar_mlp(e, W1, b1, W2, b2):
    """Loop-based forward pass with no numpy broadcasting."""
    hidden = []
    for r in range(len(b1)):
        z = b1[r] + sum(W1[r][k] * e[k] for k in range(len(e)))
        hidden.append(max(z, 0.0))
    logit = b2 + sum(W2[0][r] * hidden[r] for r in range(len(hidden)))
    return 1.0 / (1.0 + math.exp(-logit))


def tracks_of(x, m, transitions):
    """Set of paths (tuples of node indices) encoded by a binary flow."""
    x = np.round(np.asarray(x)).astype(int)
    nxt = {}
    for e, (i, j) in enumerate(transitions):
        if x[3 * m + e]:
            nxt[i] = j
    out = set()
    for i in range(m):
        if x[m + i]:
            path = [i]
            while path[-1] in nxt:
                path.append(nxt[path[-1]])
            out.add(tuple(path))
    return out
