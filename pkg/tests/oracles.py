"""Slow, independent reference implementations used only by the tests."""
from __future__ import annotations

import math

import numpy as np


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def _elu(v):
    return v if v >= 0 else math.expm1(v)


def _softplus(v):
    return max(v, 0.0) + math.log1p(math.exp(-abs(v)))


def reference_heads(params, history, tau, masks=None):
    """Scalar-loop forward for one window: history (rho, width) -> (mu, sigma, p, lam).

    ``masks`` is a dict with 'input', 'state', 'output', 'c', 'b', 'e' vectors
    (or None for no dropout).
    """
    P = {k: np.asarray(v, dtype=float) for k, v in params.items()}
    H = P["lstm_U"].shape[1]
    ones = {"input": np.ones(P["lstm_W"].shape[1]), "state": np.ones(H), "output": np.ones(H),
            "c": np.ones(P["task_c_W"].shape[0]), "b": np.ones(P["task_c_W"].shape[0]),
            "e": np.ones(P["task_e_W"].shape[0])}
    masks = ones if masks is None else masks
    h = [0.0] * H
    m = [0.0] * H
    for x in history:
        xm = [x[j] * masks["input"][j] for j in range(len(x))]
        hm = [h[j] * masks["state"][j] for j in range(H)]
        pre = []
        for r in range(4 * H):
            v = P["lstm_b"][r]
            v += sum(P["lstm_W"][r, j] * xm[j] for j in range(len(xm)))
            v += sum(P["lstm_U"][r, j] * hm[j] for j in range(H))
            pre.append(v)
        new_m, new_h = [], []
        for j in range(H):
            i, f, o = _sig(pre[j]), _sig(pre[H + j]), _sig(pre[2 * H + j])
            g = _elu(pre[3 * H + j])
            mj = f * m[j] + i * g
            new_m.append(mj)
            new_h.append(o * math.tanh(mj))
        h, m = new_h, new_m
    hd = [h[j] * masks["output"][j] for j in range(H)]
    h_tilde = hd + [float(tau)]

    def layer(W, b, v, mask):
        return [_elu(b[r] + sum(W[r, j] * v[j] for j in range(len(v)))) * mask[r] for r in range(W.shape[0])]

    def head(W, b, z):
        return [b[r] + sum(W[r, j] * z[j] for j in range(len(z))) for r in range(W.shape[0])]

    z_c = layer(P["task_c_W"], P["task_c_b"], h_tilde, masks["c"])
    z_e = layer(P["task_e_W"], P["task_e_b"], hd, masks["e"])
    mu = head(P["mu_W"], P["mu_b"], z_c)
    sigma = [_softplus(v) for v in head(P["sigma_W"], P["sigma_b"], z_c)]
    lam = [_softplus(v) for v in head(P["lambda_W"], P["lambda_b"], z_e)]
    p = []
    if "task_b_W" in P:
        z_b = layer(P["task_b_W"], P["task_b_b"], h_tilde, masks["b"])
        p = [_sig(v) for v in head(P["p_W"], P["p_b"], z_b)]
    return np.array(mu), np.array(sigma), np.array(p), np.array(lam)


def pairwise_auroc(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie) by explicit enumeration."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def rank_walk_auprc(scores, labels):
    """Average precision: walk the ranking (score desc, ties in input order) and
    average precision@k over the ranks holding a positive."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, 0.0
    for k, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            total += hits / k
    return total / hits


def brute_force_windows(records, rho_max, horizons, step=0.5):
    """Every valid (patient, t, rho, tau) by nested loops over grid times and horizons."""
    out = []
    for p, rec in enumerate(records):
        n = len(rec.times)
        for k in range(n):
            if k > rec.last_index:
                continue
            for tau in horizons:
                s = int(round(tau / step))
                if k + s <= n - 1:
                    out.append((p, float(rec.times[k]), min(k + 1, rho_max), float(tau)))
    return out
