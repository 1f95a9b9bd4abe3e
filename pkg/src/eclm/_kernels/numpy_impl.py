"""Vectorised numpy kernels for the SGD steps.

Every ``*_step`` function updates its parameter arrays in place and returns
the summed batch loss evaluated before the update. Row gradients are
accumulated over the batch and divided by the number of active
contributions to that row; shared dense parameters (CNN weights) are
divided by the batch size. Touched entity rows are projected back onto the
unit L2 ball.
"""
import numpy as np

SOFTPLUS_CUTOFF = 30.0


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > SOFTPLUS_CUTOFF, x, np.log1p(np.exp(np.minimum(x, SOFTPLUS_CUTOFF))))


def _apply_rows(table, grad, count, lr, renorm):
    rows = np.nonzero(count)[0]
    if len(rows) == 0:
        return
    table[rows] -= lr * grad[rows] / count[rows, None]
    if renorm:
        norms = np.sqrt((table[rows] ** 2).sum(axis=1))
        big = norms > 1.0
        if big.any():
            r = rows[big]
            table[r] /= norms[big][:, None]


def renorm_rows(table, rows=None):
    """Project rows onto the unit L2 ball in place."""
    if rows is None:
        rows = np.arange(len(table))
    norms = np.sqrt((table[rows] ** 2).sum(axis=1))
    big = norms > 1.0
    if big.any():
        r = rows[big]
        table[r] /= norms[big][:, None]


# ----------------------------------------------------------------------
# translation scores


def transe_scores(E, R, triples):
    return np.abs(E[triples[:, 0]] + R[triples[:, 1]] - E[triples[:, 2]]).sum(axis=1)


def transe_batch_loss(E, R, pos, neg, gamma):
    viol = gamma + transe_scores(E, R, pos) - transe_scores(E, R, neg)
    return float(np.maximum(viol, 0.0).sum())


def transe_step(E, R, pos, neg, gamma, lr):
    hp, rp, tp = pos[:, 0], pos[:, 1], pos[:, 2]
    hn, rn, tn = neg[:, 0], neg[:, 1], neg[:, 2]
    dp = E[hp] + R[rp] - E[tp]
    dn = E[hn] + R[rn] - E[tn]
    viol = gamma + np.abs(dp).sum(axis=1) - np.abs(dn).sum(axis=1)
    act = viol > 0
    loss = float(viol[act].sum())
    if lr == 0.0 or not act.any():
        return loss
    gp = np.sign(dp[act])
    gn = np.sign(dn[act])
    gE = np.zeros_like(E)
    cE = np.zeros(len(E))
    gR = np.zeros_like(R)
    cR = np.zeros(len(R))
    for ids, g in ((hp[act], gp), (tp[act], -gp), (hn[act], -gn), (tn[act], gn)):
        np.add.at(gE, ids, g)
        np.add.at(cE, ids, 1.0)
    np.add.at(gR, rp[act], gp)
    np.add.at(cR, rp[act], 1.0)
    np.add.at(gR, rn[act], -gn)
    np.add.at(cR, rn[act], 1.0)
    _apply_rows(E, gE, cE, lr, True)
    _apply_rows(R, gR, cR, lr, False)
    return loss


# ----------------------------------------------------------------------
# literal (demography) scores


def literal_phi(C, lits, lit_ptr, lit_chars, lit_coef):
    """n-gram compositions for a batch of literal ids, shape (B, d)."""
    starts = lit_ptr[lits]
    lens = lit_ptr[lits + 1] - starts
    seg = np.repeat(np.arange(len(lits)), lens)
    pos = np.arange(lens.sum()) - np.repeat(np.cumsum(lens) - lens, lens) + np.repeat(starts, lens)
    out = np.zeros((len(lits), C.shape[1]))
    np.add.at(out, seg, lit_coef[pos, None] * C[lit_chars[pos]])
    return out, seg, pos


def literal_scores(U, R, C, users, rels, lits, lit_ptr, lit_chars, lit_coef):
    phi, _, _ = literal_phi(C, lits, lit_ptr, lit_chars, lit_coef)
    return np.abs(U[users] + R[rels] - phi).sum(axis=1)


def demography_batch_loss(U, R, C, users, rels, lits, neg_users, neg_lits,
                          lit_ptr, lit_chars, lit_coef, gamma, alpha):
    fp = literal_scores(U, R, C, users, rels, lits, lit_ptr, lit_chars, lit_coef)
    fn = literal_scores(U, R, C, neg_users, rels, neg_lits, lit_ptr, lit_chars, lit_coef)
    return float(np.maximum(gamma + alpha * (fp - fn), 0.0).sum())


def demography_step(U, R, C, users, rels, lits, neg_users, neg_lits,
                    lit_ptr, lit_chars, lit_coef, gamma, alpha, lr):
    phi_p, seg_p, pos_p = literal_phi(C, lits, lit_ptr, lit_chars, lit_coef)
    phi_n, seg_n, pos_n = literal_phi(C, neg_lits, lit_ptr, lit_chars, lit_coef)
    dp = U[users] + R[rels] - phi_p
    dn = U[neg_users] + R[rels] - phi_n
    viol = gamma + alpha * (np.abs(dp).sum(axis=1) - np.abs(dn).sum(axis=1))
    act = viol > 0
    loss = float(viol[act].sum())
    if lr == 0.0 or not act.any():
        return loss
    gp = alpha * np.sign(dp)
    gn = alpha * np.sign(dn)
    gp[~act] = 0.0
    gn[~act] = 0.0
    gU = np.zeros_like(U)
    cU = np.zeros(len(U))
    gR = np.zeros_like(R)
    cR = np.zeros(len(R))
    gC = np.zeros_like(C)
    cC = np.zeros(len(C))
    a_idx = np.nonzero(act)[0]
    np.add.at(gU, users[a_idx], gp[a_idx])
    np.add.at(cU, users[a_idx], 1.0)
    np.add.at(gU, neg_users[a_idx], -gn[a_idx])
    np.add.at(cU, neg_users[a_idx], 1.0)
    np.add.at(gR, rels[a_idx], gp[a_idx] - gn[a_idx])
    np.add.at(cR, rels[a_idx], 2.0)
    for seg, pos, g, sgn in ((seg_p, pos_p, gp, -1.0), (seg_n, pos_n, gn, 1.0)):
        m = act[seg]
        np.add.at(gC, lit_chars[pos[m]], sgn * lit_coef[pos[m], None] * g[seg[m]])
        np.add.at(cC, lit_chars[pos[m]], 1.0)
    _apply_rows(U, gU, cU, lr, True)
    _apply_rows(R, gR, cR, lr, False)
    _apply_rows(C, gC, cC, lr, False)
    return loss


# ----------------------------------------------------------------------
# loyalty CNN


def cnn_batch_forward(R, E, W, fb, P, pb, rels, vals):
    X = np.stack([R[rels], E[vals]], axis=1)  # (B, 2, d)
    w = W.shape[2]
    win = np.lib.stride_tricks.sliding_window_view(X, w, axis=2)  # (B, 2, Pn, w)
    pre = np.einsum("frw,brpw->bfp", W, win) + fb[None, :, None]
    arg = pre.argmax(axis=2)
    pooled = np.tanh(np.take_along_axis(pre, arg[:, :, None], axis=2)[:, :, 0])
    out = pooled @ P.T + pb
    return out, X, arg, pooled


def loyalty_batch_loss(E, R, W, fb, P, pb, users, rels, vals):
    out, _, _, _ = cnn_batch_forward(R, E, W, fb, P, pb, rels, vals)
    x = np.abs(E[users] - out).sum(axis=1)
    return float(softplus(x).sum())


def loyalty_step(E, R, W, fb, P, pb, users, rels, vals, lr):
    B = len(users)
    out, X, arg, pooled = cnn_batch_forward(R, E, W, fb, P, pb, rels, vals)
    diff = E[users] - out
    x = np.abs(diff).sum(axis=1)
    loss = float(softplus(x).sum())
    if lr == 0.0 or B == 0:
        return loss
    s = 1.0 / (1.0 + np.exp(-x))
    g = s[:, None] * np.sign(diff)  # d loss / d user
    up = -g                         # d loss / d cnn output
    dP = up.T @ pooled
    dpb = up.sum(axis=0)
    dpre = (up @ P) * (1.0 - pooled ** 2)  # (B, F)
    dfb = dpre.sum(axis=0)
    F, _, w = W.shape
    dW = np.zeros_like(W)
    dX = np.zeros_like(X)
    b_idx = np.arange(B)
    for f in range(F):
        for o in range(w):
            cols = arg[:, f] + o
            xs = X[b_idx, :, cols]  # (B, 2)
            dW[f, :, o] = dpre[:, f] @ xs
            dX[b_idx, :, cols] += dpre[:, f, None] * W[f, :, o][None, :]
    gE = np.zeros_like(E)
    cE = np.zeros(len(E))
    gR = np.zeros_like(R)
    cR = np.zeros(len(R))
    np.add.at(gE, users, g)
    np.add.at(cE, users, 1.0)
    np.add.at(gE, vals, dX[:, 1])
    np.add.at(cE, vals, 1.0)
    np.add.at(gR, rels, dX[:, 0])
    np.add.at(cR, rels, 1.0)
    W -= lr * dW / B
    fb -= lr * dfb / B
    P -= lr * dP / B
    pb -= lr * dpb / B
    _apply_rows(E, gE, cE, lr, True)
    _apply_rows(R, gR, cR, lr, False)
    return loss


# ----------------------------------------------------------------------
# similarity


def row_dots(X, idx, q):
    return (X[idx] * q).sum(axis=1)
