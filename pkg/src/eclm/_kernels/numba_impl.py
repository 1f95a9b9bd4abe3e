"""numba versions of the SGD kernels.

Same contracts as :mod:`eclm._kernels.numpy_impl`; gradients are
accumulated sample by sample in batch order.
"""
import math

import numpy as np
from numba import njit

_jit = njit(cache=True, nogil=True)

SOFTPLUS_CUTOFF = 30.0


@_jit
def _softplus(x):
    if x > SOFTPLUS_CUTOFF:
        return x
    return math.log1p(math.exp(x))


@_jit
def _sign(x):
    if x > 0.0:
        return 1.0
    if x < 0.0:
        return -1.0
    return 0.0


@_jit
def _apply_rows(table, grad, count, lr, renorm):
    n, d = table.shape
    for i in range(n):
        c = count[i]
        if c == 0.0:
            continue
        for k in range(d):
            table[i, k] -= lr * grad[i, k] / c
        if renorm:
            s = 0.0
            for k in range(d):
                s += table[i, k] * table[i, k]
            nrm = math.sqrt(s)
            if nrm > 1.0:
                for k in range(d):
                    table[i, k] /= nrm


@_jit
def transe_scores(E, R, triples):
    n = triples.shape[0]
    d = E.shape[1]
    out = np.empty(n)
    for i in range(n):
        h, r, t = triples[i, 0], triples[i, 1], triples[i, 2]
        s = 0.0
        for k in range(d):
            s += abs(E[h, k] + R[r, k] - E[t, k])
        out[i] = s
    return out


@_jit
def transe_step(E, R, pos, neg, gamma, lr):
    n = pos.shape[0]
    d = E.shape[1]
    gE = np.zeros_like(E)
    cE = np.zeros(E.shape[0])
    gR = np.zeros_like(R)
    cR = np.zeros(R.shape[0])
    dp = np.empty(d)
    dn = np.empty(d)
    loss = 0.0
    for i in range(n):
        hp, rp, tp = pos[i, 0], pos[i, 1], pos[i, 2]
        hn, rn, tn = neg[i, 0], neg[i, 1], neg[i, 2]
        fp = 0.0
        fn = 0.0
        for k in range(d):
            dp[k] = E[hp, k] + R[rp, k] - E[tp, k]
            dn[k] = E[hn, k] + R[rn, k] - E[tn, k]
            fp += abs(dp[k])
            fn += abs(dn[k])
        viol = gamma + fp - fn
        if viol <= 0.0:
            continue
        loss += viol
        for k in range(d):
            g = _sign(dp[k])
            gE[hp, k] += g
            gE[tp, k] -= g
            gR[rp, k] += g
        for k in range(d):
            g = _sign(dn[k])
            gE[hn, k] -= g
            gE[tn, k] += g
            gR[rn, k] -= g
        cE[hp] += 1.0
        cE[tp] += 1.0
        cE[hn] += 1.0
        cE[tn] += 1.0
        cR[rp] += 1.0
        cR[rn] += 1.0
    if lr != 0.0:
        _apply_rows(E, gE, cE, lr, True)
        _apply_rows(R, gR, cR, lr, False)
    return loss


@_jit
def _phi(C, lit, lit_ptr, lit_chars, lit_coef, out):
    d = C.shape[1]
    for k in range(d):
        out[k] = 0.0
    for p in range(lit_ptr[lit], lit_ptr[lit + 1]):
        c = lit_chars[p]
        w = lit_coef[p]
        for k in range(d):
            out[k] += w * C[c, k]


@_jit
def literal_scores(U, R, C, users, rels, lits, lit_ptr, lit_chars, lit_coef):
    n = users.shape[0]
    d = U.shape[1]
    phi = np.empty(d)
    out = np.empty(n)
    for i in range(n):
        _phi(C, lits[i], lit_ptr, lit_chars, lit_coef, phi)
        s = 0.0
        for k in range(d):
            s += abs(U[users[i], k] + R[rels[i], k] - phi[k])
        out[i] = s
    return out


@_jit
def demography_step(U, R, C, users, rels, lits, neg_users, neg_lits,
                    lit_ptr, lit_chars, lit_coef, gamma, alpha, lr):
    n = users.shape[0]
    d = U.shape[1]
    gU = np.zeros_like(U)
    cU = np.zeros(U.shape[0])
    gR = np.zeros_like(R)
    cR = np.zeros(R.shape[0])
    gC = np.zeros_like(C)
    cC = np.zeros(C.shape[0])
    phi_p = np.empty(d)
    phi_n = np.empty(d)
    dp = np.empty(d)
    dn = np.empty(d)
    loss = 0.0
    for i in range(n):
        u, r, un = users[i], rels[i], neg_users[i]
        _phi(C, lits[i], lit_ptr, lit_chars, lit_coef, phi_p)
        _phi(C, neg_lits[i], lit_ptr, lit_chars, lit_coef, phi_n)
        fp = 0.0
        fn = 0.0
        for k in range(d):
            dp[k] = U[u, k] + R[r, k] - phi_p[k]
            dn[k] = U[un, k] + R[r, k] - phi_n[k]
            fp += abs(dp[k])
            fn += abs(dn[k])
        viol = gamma + alpha * (fp - fn)
        if viol <= 0.0:
            continue
        loss += viol
        for k in range(d):
            dp[k] = alpha * _sign(dp[k])
            dn[k] = alpha * _sign(dn[k])
            gU[u, k] += dp[k]
            gU[un, k] -= dn[k]
            gR[r, k] += dp[k] - dn[k]
        cU[u] += 1.0
        cU[un] += 1.0
        cR[r] += 2.0
        for p in range(lit_ptr[lits[i]], lit_ptr[lits[i] + 1]):
            c = lit_chars[p]
            w = lit_coef[p]
            for k in range(d):
                gC[c, k] -= w * dp[k]
            cC[c] += 1.0
        for p in range(lit_ptr[neg_lits[i]], lit_ptr[neg_lits[i] + 1]):
            c = lit_chars[p]
            w = lit_coef[p]
            for k in range(d):
                gC[c, k] += w * dn[k]
            cC[c] += 1.0
    if lr != 0.0:
        _apply_rows(U, gU, cU, lr, True)
        _apply_rows(R, gR, cR, lr, False)
        _apply_rows(C, gC, cC, lr, False)
    return loss


@_jit
def _cnn_forward(rv, vv, W, fb, P, pb, act_max, arg, out):
    F, _, w = W.shape
    d = rv.shape[0]
    npos = d - w + 1
    for f in range(F):
        best = -np.inf
        besti = 0
        for p in range(npos):
            s = fb[f]
            for o in range(w):
                s += W[f, 0, o] * rv[p + o] + W[f, 1, o] * vv[p + o]
            if s > best:
                best = s
                besti = p
        # tanh is monotone, so pooling the pre-activation is equivalent
        act_max[f] = math.tanh(best)
        arg[f] = besti
    for k in range(d):
        s = pb[k]
        for f in range(F):
            s += P[k, f] * act_max[f]
        out[k] = s


@_jit
def loyalty_step(E, R, W, fb, P, pb, users, rels, vals, lr):
    B = users.shape[0]
    d = E.shape[1]
    F, _, w = W.shape
    gE = np.zeros_like(E)
    cE = np.zeros(E.shape[0])
    gR = np.zeros_like(R)
    cR = np.zeros(R.shape[0])
    dW = np.zeros_like(W)
    dfb = np.zeros_like(fb)
    dP = np.zeros_like(P)
    dpb = np.zeros_like(pb)
    pooled = np.empty(F)
    arg = np.empty(F, dtype=np.int64)
    out = np.empty(d)
    up = np.empty(d)
    dpre = np.empty(F)
    loss = 0.0
    for i in range(B):
        u, r, v = users[i], rels[i], vals[i]
        _cnn_forward(R[r], E[v], W, fb, P, pb, pooled, arg, out)
        x = 0.0
        for k in range(d):
            x += abs(E[u, k] - out[k])
        loss += _softplus(x)
        s = 1.0 / (1.0 + math.exp(-x))
        for k in range(d):
            g = s * _sign(E[u, k] - out[k])
            gE[u, k] += g
            up[k] = -g
            dpb[k] += up[k]
        cE[u] += 1.0
        for f in range(F):
            acc = 0.0
            for k in range(d):
                dP[k, f] += up[k] * pooled[f]
                acc += P[k, f] * up[k]
            dpre[f] = acc * (1.0 - pooled[f] * pooled[f])
            dfb[f] += dpre[f]
        for f in range(F):
            p = arg[f]
            for o in range(w):
                dW[f, 0, o] += dpre[f] * R[r, p + o]
                dW[f, 1, o] += dpre[f] * E[v, p + o]
                gR[r, p + o] += dpre[f] * W[f, 0, o]
                gE[v, p + o] += dpre[f] * W[f, 1, o]
        cR[r] += 1.0
        cE[v] += 1.0
    if lr != 0.0 and B > 0:
        for f in range(F):
            fb[f] -= lr * dfb[f] / B
            for rr in range(2):
                for o in range(w):
                    W[f, rr, o] -= lr * dW[f, rr, o] / B
        for k in range(d):
            pb[k] -= lr * dpb[k] / B
            for f in range(F):
                P[k, f] -= lr * dP[k, f] / B
        _apply_rows(E, gE, cE, lr, True)
        _apply_rows(R, gR, cR, lr, False)
    return loss


@_jit
def row_dots(X, idx, q):
    n = idx.shape[0]
    d = X.shape[1]
    out = np.empty(n)
    for i in range(n):
        s = 0.0
        row = idx[i]
        for k in range(d):
            s += X[row, k] * q[k]
        out[i] = s
    return out
