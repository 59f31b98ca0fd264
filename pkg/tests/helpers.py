"""Independent reference implementations used as test oracles."""
from __future__ import annotations

import numpy as np

from fusiontrack.core import Detection, Observation
from fusiontrack.filtering import H_SEL


# Kalman update ----------------------------------------------------------------

def _grid_posterior(mu, Sigma, o, R, idx, lo, hi, n):
    """Posterior mean/cov of the 2-dim marginal ``idx`` by brute-force Bayes on a grid.

    The remaining 9 state dims are integrated out analytically: given the grid
    point g, the rest is Gaussian, so p(o | g) is Gaussian with a g-dependent
    mean and a fixed covariance.
    """
    idx = list(idx)
    rest = [i for i in range(len(mu)) if i not in idx]
    S_gg = Sigma[np.ix_(idx, idx)]
    S_rg = Sigma[np.ix_(rest, idx)]
    S_rr = Sigma[np.ix_(rest, rest)]
    gain = S_rg @ np.linalg.inv(S_gg)
    cond_cov = S_rr - gain @ S_rg.T
    H_g, H_r = H_SEL[:, idx], H_SEL[:, rest]
    lik_cov = H_r @ cond_cov @ H_r.T + R
    lik_prec = np.linalg.inv(lik_cov)
    prior_prec = np.linalg.inv(S_gg)

    a = np.linspace(lo[0], hi[0], n)
    b = np.linspace(lo[1], hi[1], n)
    A, B = np.meshgrid(a, b, indexing="ij")
    G = np.stack([A.ravel(), B.ravel()], axis=1)
    dg = G - mu[idx]
    cond_mean = mu[rest][None, :] + dg @ gain.T
    pred = G @ H_g.T + cond_mean @ H_r.T
    resid = o[None, :] - pred
    log_w = -0.5 * np.einsum("ij,jk,ik->i", dg, prior_prec, dg) - 0.5 * np.einsum("ij,jk,ik->i", resid, lik_prec, resid)
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    mean = w @ G
    d = G - mean
    cov = (w[:, None] * d).T @ d
    return mean, cov


def grid_bayes_marginal(mu, Sigma, o, R, idx=(0, 7), n=401):
    """Two passes: a wide grid over the prior, then a tight grid around the first estimate."""
    idx = list(idx)
    sd = np.sqrt(np.diag(Sigma)[idx])
    mean, cov = _grid_posterior(mu, Sigma, o, R, idx, mu[idx] - 8 * sd, mu[idx] + 8 * sd, n)
    sd2 = np.sqrt(np.diag(cov))
    return _grid_posterior(mu, Sigma, o, R, idx, mean - 8 * sd2, mean + 8 * sd2, n)


def random_spd(rng, n, scale=1.0, floor=0.05):
    M = rng.standard_normal((n, n))
    return scale * (M @ M.T / n) + floor * np.eye(n)


# greedy matching -------------------------------------------------------------

def rescan_greedy(D, gate):
    """Rescan the whole matrix for the global minimum at each step."""
    D = np.array(D, dtype=float)
    n, m = D.shape
    used_r, used_c, out = set(), set(), []
    while True:
        best = None
        for i in range(n):
            if i in used_r:
                continue
            for j in range(m):
                if j in used_c or D[i, j] > gate:
                    continue
                key = (D[i, j], i, j)
                if best is None or key < best:
                    best = key
        if best is None:
            return out
        d, i, j = best
        used_r.add(i)
        used_c.add(j)
        out.append((i, j, d))


# finite differences --------------------------------------------------------

def rel_err(a, b, floor=1e-9):
    """Relative error; coordinates where both values are below ``floor`` count as exact."""
    scale = max(abs(a), abs(b))
    if scale < floor:
        return 0.0
    return abs(a - b) / scale


def fd_check_params(loss_fn, store, rng, n_coords=100, h=1e-6):
    """Compare store.grads (already populated for the current params) with central differences.

    Returns the worst relative error over ``n_coords`` random coordinates.
    """
    names = sorted(store.params)
    sizes = np.array([store.params[k].size for k in names])
    analytic = {k: store.grads[k].copy() for k in names}
    worst = 0.0
    picks = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for flat in picks:
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, pos = names[t], int(flat - offsets[t])
        p = store.params[name].reshape(-1)
        old = p[pos]
        p[pos] = old + h
        up = loss_fn()
        p[pos] = old - h
        down = loss_fn()
        p[pos] = old
        num = (up - down) / (2 * h)
        worst = max(worst, rel_err(analytic[name].reshape(-1)[pos], num))
    return worst


def fd_check_array(loss_fn, x, grad, rng, n_coords=100, h=1e-6):
    x = x.reshape(-1)
    grad = np.asarray(grad).reshape(-1)
    worst = 0.0
    for pos in rng.choice(x.size, size=min(n_coords, x.size), replace=False):
        old = x[pos]
        x[pos] = old + h
        up = loss_fn()
        x[pos] = old - h
        down = loss_fn()
        x[pos] = old
        worst = max(worst, rel_err(grad[pos], (up - down) / (2 * h)))
    return worst


# AMOTA ------------------------------------------------------------------------

def motar_ref(ids, fp, fn, r, P):
    return min(1.0, max(0.0, 1.0 - (ids + fp + fn - (1.0 - r) * P) / (r * P)))


# misc builders ---------------------------------------------------------------

def make_detection(x, y, frame, cls="car", conf=0.9, feat=None, a=0.0, d=(0.0, 0.0), feat2d_dim=16, shape=(8, 3, 3)):
    obs = Observation(x, y, 0.8, a, 4.5, 1.9, 1.6, d[0], d[1])
    f3 = np.zeros(shape) if feat is None else np.asarray(feat, dtype=float).reshape(shape)
    return Detection(obs, cls, conf, np.zeros(feat2d_dim), f3, frame)


def box_state(x, y):
    return np.array([x, y, 0.8, 0.0, 4.5, 1.9, 1.6, 0.0, 0.0, 0.0, 0.0])


# A 3-object, 4-frame sequence (P = 12). Track ids and scores:
#   1 on A all frames (0.9); 5 a far false positive in frame 0 (0.85);
#   2 on B frames 0-1 (0.8); 6 on B frames 2-3 (0.7, one id switch);
#   3 on C frames 0-1 (0.6); 4 a far false positive in frames 0-1 (0.3).
SCRIPTED_SWEEP = {  # threshold: (tp, fp, fn, ids), enumerated by hand
    0.9: (4, 0, 8, 0),
    0.85: (4, 1, 8, 0),
    0.8: (6, 1, 6, 0),
    0.7: (8, 1, 4, 1),
    0.6: (10, 1, 2, 1),
    0.3: (10, 3, 2, 1),
}
SCRIPTED_P = 12


def scripted_sequence():
    from fusiontrack.fileio import GtBox, TrackRecord

    gt = [[GtBox(g, "car", box_state(x, 0)) for g, x in ((0, 0), (1, 10), (2, 20))] for _ in range(4)]
    rec = lambda t, tid, x, y, s: TrackRecord(t, tid, "car", box_state(x, y), s)
    tracks = [rec(t, 1, 0, 0, 0.9) for t in range(4)]
    tracks += [rec(0, 5, 50, 50, 0.85)]
    tracks += [rec(t, 2, 10, 0, 0.8) for t in (0, 1)] + [rec(t, 6, 10, 0, 0.7) for t in (2, 3)]
    tracks += [rec(t, 3, 20, 0, 0.6) for t in (0, 1)]
    tracks += [rec(t, 4, 60, 60, 0.3) for t in (0, 1)]
    return gt, tracks


def hand_sweep_motar(n_points=40):
    """Per recall point (threshold, MOTAR) from the hand-enumerated table, highest threshold reaching r."""
    out = []
    steps = n_points - 1
    for k in range(1, steps + 1):
        r = k / steps
        reachable = [t for t in sorted(SCRIPTED_SWEEP, reverse=True)
                     if SCRIPTED_SWEEP[t][0] * steps >= k * SCRIPTED_P]
        if reachable:
            tp, fp, fn, ids = SCRIPTED_SWEEP[reachable[0]]
            out.append((reachable[0], motar_ref(ids, fp, fn, r, SCRIPTED_P)))
        else:
            out.append((None, 0.0))
    return out
