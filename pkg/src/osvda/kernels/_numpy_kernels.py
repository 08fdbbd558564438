"""Pure numpy implementations of the loss kernels.

Every kernel returns the scalar value together with the gradients with
respect to each array argument; the compiled module mirrors these
signatures exactly.
"""

import numpy as np


def _normalize(x):
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe[:, None], norms, safe


def _normalize_backward(xhat, norms, safe, dxhat):
    proj = np.einsum("ij,ij->i", xhat, dxhat)
    dx = (dxhat - xhat * proj[:, None]) / safe[:, None]
    dx[norms == 0] = 0.0
    return dx


def masked_contrastive(a, b, pos, den, tau):
    """Sup-Con style loss of anchors ``a`` (n, P) against candidates ``b`` (m, P).

    ``pos`` and ``den`` are (n, m) 0/1 masks; ``den`` must contain ``pos``.
    For every anchor with at least one positive,

        l_i = -1/|P_i| * sum_{j in P_i} log( e^{s_ij/tau} / sum_{k in den_i} e^{s_ik/tau} )

    with ``s`` the cosine similarity. The loss is the mean of ``l_i`` over
    scored anchors (0 when none are scored).

    Returns ``(loss, grad_a, grad_b, n_scored)``.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    ahat, an, asafe = _normalize(a)
    bhat, bn, bsafe = _normalize(b)
    logits = (ahat @ bhat.T) / tau

    npos = pos.sum(axis=1)
    scored = npos > 0
    n_scored = int(scored.sum())
    if n_scored == 0:
        return 0.0, np.zeros_like(a), np.zeros_like(b), 0

    # log-sum-exp over the denominator set, shifted by the row max
    masked = np.where(den > 0, logits, -np.inf)
    shift = np.max(masked, axis=1)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    expd = np.exp(logits - shift[:, None]) * den
    sums = expd.sum(axis=1)
    lse = np.log(np.where(sums > 0, sums, 1.0)) + shift

    inv_npos = np.where(scored, 1.0 / np.where(scored, npos, 1.0), 0.0)
    per_anchor = -(pos * logits).sum(axis=1) * inv_npos + lse
    loss = float(per_anchor[scored].sum() / n_scored)

    soft = expd / np.where(sums > 0, sums, 1.0)[:, None]
    dlogits = (soft - pos * inv_npos[:, None]) * scored[:, None] / n_scored
    dsim = dlogits / tau
    dahat = dsim @ bhat
    dbhat = dsim.T @ ahat
    return (
        loss,
        _normalize_backward(ahat, an, asafe, dahat),
        _normalize_backward(bhat, bn, bsafe, dbhat),
        n_scored,
    )


def triplet(h, hp, hn, alpha):
    """Mean of max(||h - hp|| - ||h - hn|| + alpha, 0) over rows.

    Returns ``(loss, grad_h, grad_hp, grad_hn)``; zero distances get a zero
    subgradient.
    """
    h = np.asarray(h, dtype=np.float64)
    dp_vec = h - hp
    dn_vec = h - hn
    dp = np.sqrt(np.einsum("ij,ij->i", dp_vec, dp_vec))
    dn = np.sqrt(np.einsum("ij,ij->i", dn_vec, dn_vec))
    margin = dp - dn + alpha
    active = margin > 0
    n = h.shape[0]
    loss = float(np.where(active, margin, 0.0).sum() / n) if n else 0.0
    up = np.where(dp > 0, 1.0 / np.where(dp > 0, dp, 1.0), 0.0)
    un = np.where(dn > 0, 1.0 / np.where(dn > 0, dn, 1.0), 0.0)
    w = active / max(n, 1)
    gp = dp_vec * (up * w)[:, None]
    gn = dn_vec * (un * w)[:, None]
    return loss, gp - gn, -gp, gn


def softmax_xent(logits, labels):
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``.

    Returns ``(loss, grad_logits)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    shift = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - shift)
    s = e.sum(axis=1, keepdims=True)
    logp = logits - shift - np.log(s)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].sum() / n)
    grad = e / s
    grad[rows, labels] -= 1.0
    return loss, grad / n
