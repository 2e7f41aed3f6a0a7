"""Per-sample numeric kernels, each in a numba and a pure-numpy flavour.

Every kernel mutates its state arrays in place and returns only scalars, so
both flavours share one calling convention. ``KERNELS[backend]`` picks a set.
"""

from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np

from .._accel import HAVE_NUMBA, njit

# ---------------------------------------------------------------------------
# standardization (Welford)


@njit(cache=True)
def standardize_nb(mean, m2, count, x, eps, out):
    n = count[0] + 1
    count[0] = n
    replaced = 0
    for i in range(x.shape[0]):
        xi = x[i]
        if not math.isfinite(xi):
            xi = mean[i] if n > 1 else 0.0
            replaced += 1
        delta = xi - mean[i]
        mean[i] += delta / n
        m2[i] += delta * (xi - mean[i])
        sd = math.sqrt(max(m2[i] / n, 0.0))
        if sd < eps:
            sd = eps
        out[i] = (xi - mean[i]) / sd
    return replaced


def standardize_np(mean, m2, count, x, eps, out):
    n = count[0] + 1
    count[0] = n
    bad = ~np.isfinite(x)
    replaced = int(bad.sum())
    if replaced:
        x = np.where(bad, mean if n > 1 else 0.0, x)
    delta = x - mean
    mean += delta / n
    m2 += delta * (x - mean)
    sd = np.sqrt(np.maximum(m2 / n, 0.0))
    np.maximum(sd, eps, out=sd)
    np.divide(x - mean, sd, out=out)
    return replaced


# ---------------------------------------------------------------------------
# decaying flat micro-cluster list
#
# dist caches squared centroid distances between live clusters (inf on the
# diagonal). Decay scales n and ls alike, so centroids and the cache only
# change for clusters that absorb a point, merge or move slot.


@njit(cache=True)
def _birch_row_nb(n, ls, k, i, dist):
    d = ls.shape[1]
    ii = 1.0 / n[i]
    for a in range(k):
        if a == i:
            dist[i, i] = np.inf
            continue
        ia = 1.0 / n[a]
        d2 = 0.0
        for j in range(d):
            diff = ls[i, j] * ii - ls[a, j] * ia
            d2 += diff * diff
        dist[i, a] = d2
        dist[a, i] = d2


@njit(cache=True)
def _birch_move_nb(n, ls, ss, dist, src, dst, k):
    n[dst] = n[src]
    ss[dst] = ss[src]
    for j in range(ls.shape[1]):
        ls[dst, j] = ls[src, j]
    for a in range(k):
        dist[dst, a] = dist[src, a]
        dist[a, dst] = dist[a, src]
    dist[dst, dst] = np.inf


@njit(cache=True)
def birch_insert_nb(n, ls, ss, dist, k, z, threshold, keep, max_clusters, prune_floor, recon):
    d = z.shape[0]
    if keep != 1.0:
        for i in range(k):
            n[i] *= keep
            ss[i] *= keep
            for j in range(d):
                ls[i, j] *= keep
    zz = 0.0
    for j in range(d):
        zz += z[j] * z[j]
    if k == 0:
        n[0] = 1.0
        ss[0] = zz
        for j in range(d):
            ls[0, j] = z[j]
            recon[j] = z[j]
        dist[0, 0] = np.inf
        return 1, 0.0
    best = 0
    best_d2 = np.inf
    for i in range(k):
        inv = 1.0 / n[i]
        d2 = 0.0
        for j in range(d):
            diff = z[j] - ls[i, j] * inv
            d2 += diff * diff
        if d2 < best_d2:
            best_d2 = d2
            best = i
    inv = 1.0 / n[best]
    for j in range(d):
        recon[j] = ls[best, j] * inv
    err = math.sqrt(best_d2)
    if err <= threshold:
        n[best] += 1.0
        ss[best] += zz
        for j in range(d):
            ls[best, j] += z[j]
        _birch_row_nb(n, ls, k, best, dist)
    else:
        n[k] = 1.0
        ss[k] = zz
        for j in range(d):
            ls[k, j] = z[j]
        k += 1
        _birch_row_nb(n, ls, k, k - 1, dist)
    if k > max_clusters:
        bi = 0
        bj = 1
        bd = np.inf
        for a in range(k):
            for b in range(a + 1, k):
                if dist[a, b] < bd:
                    bd = dist[a, b]
                    bi = a
                    bj = b
        n[bi] += n[bj]
        ss[bi] += ss[bj]
        for j in range(d):
            ls[bi, j] += ls[bj, j]
        if bj != k - 1:
            _birch_move_nb(n, ls, ss, dist, k - 1, bj, k)
        k -= 1
        _birch_row_nb(n, ls, k, bi, dist)
    i = k - 1
    while i >= 0:
        if n[i] < prune_floor:
            if i != k - 1:
                _birch_move_nb(n, ls, ss, dist, k - 1, i, k)
            k -= 1
        i -= 1
    return k, err


def _birch_row_np(n, ls, k, i, dist):
    diff = ls[:k] / n[:k, None] - ls[i] / n[i]
    row = np.einsum("ij,ij->i", diff, diff)
    row[i] = np.inf
    dist[i, :k] = row
    dist[:k, i] = row


def _birch_move_np(n, ls, ss, dist, src, dst, k):
    n[dst] = n[src]
    ss[dst] = ss[src]
    ls[dst] = ls[src]
    dist[dst, :k] = dist[src, :k]
    dist[:k, dst] = dist[:k, src]
    dist[dst, dst] = np.inf


def birch_insert_np(n, ls, ss, dist, k, z, threshold, keep, max_clusters, prune_floor, recon):
    if keep != 1.0:
        n[:k] *= keep
        ss[:k] *= keep
        ls[:k] *= keep
    zz = float(z @ z)
    if k == 0:
        n[0] = 1.0
        ss[0] = zz
        ls[0] = z
        recon[:] = z
        dist[0, 0] = np.inf
        return 1, 0.0
    cent = ls[:k] / n[:k, None]
    diff = cent - z
    d2 = np.einsum("ij,ij->i", diff, diff)
    best = int(np.argmin(d2))
    recon[:] = cent[best]
    err = math.sqrt(d2[best])
    if err <= threshold:
        n[best] += 1.0
        ss[best] += zz
        ls[best] += z
        _birch_row_np(n, ls, k, best, dist)
    else:
        n[k] = 1.0
        ss[k] = zz
        ls[k] = z
        k += 1
        _birch_row_np(n, ls, k, k - 1, dist)
    if k > max_clusters:
        # symmetric with an inf diagonal: the first row-major minimum is the
        # same (a < b) pair the loop version picks
        flat = int(np.argmin(dist[:k, :k]))
        bi, bj = divmod(flat, k)
        n[bi] += n[bj]
        ss[bi] += ss[bj]
        ls[bi] += ls[bj]
        if bj != k - 1:
            _birch_move_np(n, ls, ss, dist, k - 1, bj, k)
        k -= 1
        _birch_row_np(n, ls, k, bi, dist)
    for i in range(k - 1, -1, -1):
        if n[i] < prune_floor:
            if i != k - 1:
                _birch_move_np(n, ls, ss, dist, k - 1, i, k)
            k -= 1
    return k, err


# ---------------------------------------------------------------------------
# per-metric ARIMA(p, d, q) with recursive least squares
#
# coef[m, :p] are AR weights, coef[m, p:] MA weights. raw_hist holds the last
# d raw values (most recent first), diff_hist the last p differenced values,
# res_hist the last q a-priori residuals. signs[k] = (-1)^k * C(d, k).


@njit(cache=True)
def arima_step_nb(coef, P, raw_hist, diff_hist, res_hist, seen, z, signs, forget, delta, trace_cap, cond_cap, pred):
    m = z.shape[0]
    d = raw_hist.shape[1]
    p = diff_hist.shape[1]
    q = res_hist.shape[1]
    r = p + q
    resets = 0
    phi = np.empty(r)
    Pphi = np.empty(r)
    for mi in range(m):
        x = z[mi]
        if seen < d:
            pred[mi] = x
        else:
            for a in range(p):
                phi[a] = diff_hist[mi, a]
            for a in range(q):
                phi[p + a] = res_hist[mi, a]
            yhat = 0.0
            for a in range(r):
                yhat += coef[mi, a] * phi[a]
            # undifference: x_hat = yhat - sum_{k>=1} signs[k] * x_{t-k}
            base = 0.0
            y = x
            for kk in range(1, d + 1):
                base -= signs[kk] * raw_hist[mi, kk - 1]
                y += signs[kk] * raw_hist[mi, kk - 1]
            pred[mi] = yhat + base
            e = y - yhat
            pp = 0.0
            for a in range(r):
                pp += phi[a] * phi[a]
            if r > 0 and pp > 0.0:
                denom = forget
                for a in range(r):
                    s = 0.0
                    for b in range(r):
                        s += P[mi, a, b] * phi[b]
                    Pphi[a] = s
                    denom += phi[a] * s
                for a in range(r):
                    coef[mi, a] += Pphi[a] / denom * e
                for a in range(r):
                    for b in range(r):
                        P[mi, a, b] = (P[mi, a, b] - Pphi[a] * Pphi[b] / denom) / forget
                tr = 0.0
                dmax = 0.0
                dmin = np.inf
                ok = True
                for a in range(r):
                    for b in range(a + 1, r):
                        v = 0.5 * (P[mi, a, b] + P[mi, b, a])
                        P[mi, a, b] = v
                        P[mi, b, a] = v
                    dv = P[mi, a, a]
                    if not math.isfinite(dv) or dv <= 0.0:
                        ok = False
                    tr += dv
                    dmax = max(dmax, dv)
                    dmin = min(dmin, dv)
                if not ok or tr > trace_cap or dmax > cond_cap * dmin:
                    for a in range(r):
                        for b in range(r):
                            P[mi, a, b] = delta if a == b else 0.0
                    resets += 1
            for a in range(p - 1, 0, -1):
                diff_hist[mi, a] = diff_hist[mi, a - 1]
            if p > 0:
                diff_hist[mi, 0] = y
            for a in range(q - 1, 0, -1):
                res_hist[mi, a] = res_hist[mi, a - 1]
            if q > 0:
                res_hist[mi, 0] = e
        for a in range(d - 1, 0, -1):
            raw_hist[mi, a] = raw_hist[mi, a - 1]
        if d > 0:
            raw_hist[mi, 0] = x
    return resets


def arima_step_np(coef, P, raw_hist, diff_hist, res_hist, seen, z, signs, forget, delta, trace_cap, cond_cap, pred):
    d = raw_hist.shape[1]
    p = diff_hist.shape[1]
    q = res_hist.shape[1]
    r = p + q
    resets = 0
    if seen < d:
        pred[:] = z
    else:
        phi = np.concatenate((diff_hist, res_hist), axis=1)
        yhat = np.einsum("ma,ma->m", coef, phi)
        lag = raw_hist @ signs[1:]
        pred[:] = yhat - lag
        y = z + lag
        e = y - yhat
        if r > 0:
            active = (phi * phi).sum(axis=1) > 0.0
            if active.any():
                Pphi = np.einsum("mab,mb->ma", P, phi)
                denom = forget + np.einsum("ma,ma->m", phi, Pphi)
                gain = Pphi / denom[:, None]
                newP = (P - gain[:, :, None] * Pphi[:, None, :]) / forget
                newP = 0.5 * (newP + np.swapaxes(newP, 1, 2))
                coef[active] += gain[active] * e[active, None]
                P[active] = newP[active]
                diag = np.diagonal(P, axis1=1, axis2=2)
                bad = (
                    ~np.isfinite(diag).all(axis=1)
                    | (diag <= 0.0).any(axis=1)
                    | (diag.sum(axis=1) > trace_cap)
                    | (diag.max(axis=1) > cond_cap * diag.min(axis=1))
                ) & active
                if bad.any():
                    P[bad] = delta * np.eye(r)
                    resets = int(bad.sum())
        if p > 0:
            diff_hist[:, 1:] = diff_hist[:, :-1].copy()
            diff_hist[:, 0] = y
        if q > 0:
            res_hist[:, 1:] = res_hist[:, :-1].copy()
            res_hist[:, 0] = e
    if d > 0:
        raw_hist[:, 1:] = raw_hist[:, :-1].copy()
        raw_hist[:, 0] = z
    return resets


# ---------------------------------------------------------------------------
# one LSTM cell + linear readout, single-step truncated backprop
#
# W: (4H, D+H) gate weights in i, f, g, o order over [x, h]; b: (4H,)
# Wy: (D, H), by: (D,). cache holds the inputs of the last cell step:
# x_prev (D), h_pp and c_pp (H), and the gate activations gates (4H).


@njit(cache=True)
def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


@njit(cache=True)
def lstm_grads_nb(W, b, Wy, by, h, c, x_prev, h_pp, c_pp, gates, has_prev, z, gW, gb, gWy, gby, pred):
    D = Wy.shape[0]
    H = Wy.shape[1]
    loss = 0.0
    for r in range(D):
        s = by[r]
        for j in range(H):
            s += Wy[r, j] * h[j]
        pred[r] = s
        diff = s - z[r]
        gby[r] = diff
        loss += 0.5 * diff * diff
        for j in range(H):
            gWy[r, j] = diff * h[j]
    if not has_prev:
        gW[:, :] = 0.0
        gb[:] = 0.0
        return loss
    for j in range(H):
        dh = 0.0
        for r in range(D):
            dh += Wy[r, j] * gby[r]
        ig = gates[j]
        fg = gates[H + j]
        gg = gates[2 * H + j]
        og = gates[3 * H + j]
        tc = math.tanh(c[j])
        do = dh * tc
        dc = dh * og * (1.0 - tc * tc)
        gb[j] = dc * gg * ig * (1.0 - ig)
        gb[H + j] = dc * c_pp[j] * fg * (1.0 - fg)
        gb[2 * H + j] = dc * ig * (1.0 - gg * gg)
        gb[3 * H + j] = do * og * (1.0 - og)
    for a in range(4 * H):
        ga = gb[a]
        for k in range(D):
            gW[a, k] = ga * x_prev[k]
        for k in range(H):
            gW[a, D + k] = ga * h_pp[k]
    return loss


@njit(cache=True)
def lstm_step_nb(W, b, Wy, by, h, c, x_prev, h_pp, c_pp, gates, flags, z, lr, gW, gb, gWy, gby, pred):
    """flags[0]: has_prev. Returns (error, ok)."""
    D = Wy.shape[0]
    H = Wy.shape[1]
    has_prev = flags[0] == 1
    lstm_grads_nb(W, b, Wy, by, h, c, x_prev, h_pp, c_pp, gates, has_prev, z, gW, gb, gWy, gby, pred)
    err2 = 0.0
    for r in range(D):
        err2 += gby[r] * gby[r]
    err = math.sqrt(err2)
    ok = math.isfinite(err)
    if ok:
        for r in range(D):
            for j in range(H):
                if not math.isfinite(gWy[r, j]):
                    ok = False
        if has_prev:
            for a in range(4 * H):
                if not math.isfinite(gb[a]):
                    ok = False
                for k in range(D + H):
                    if not math.isfinite(gW[a, k]):
                        ok = False
    if not ok:
        h[:] = 0.0
        c[:] = 0.0
        flags[0] = 0
        return err, False
    for r in range(D):
        by[r] -= lr * gby[r]
        for j in range(H):
            Wy[r, j] -= lr * gWy[r, j]
    if has_prev:
        for a in range(4 * H):
            b[a] -= lr * gb[a]
            for k in range(D + H):
                W[a, k] -= lr * gW[a, k]
    # advance the cell with the updated weights
    for k in range(D):
        x_prev[k] = z[k]
    for j in range(H):
        h_pp[j] = h[j]
        c_pp[j] = c[j]
    for a in range(4 * H):
        s = b[a]
        for k in range(D):
            s += W[a, k] * z[k]
        for k in range(H):
            s += W[a, D + k] * h_pp[k]
        if 2 * H <= a < 3 * H:
            gates[a] = math.tanh(s)
        else:
            gates[a] = _sigmoid(s)
    for j in range(H):
        c[j] = gates[H + j] * c_pp[j] + gates[j] * gates[2 * H + j]
        h[j] = gates[3 * H + j] * math.tanh(c[j])
    flags[0] = 1
    return err, True


def _sigmoid_np(v):
    return 1.0 / (1.0 + np.exp(-v))


def lstm_grads_np(W, b, Wy, by, h, c, x_prev, h_pp, c_pp, gates, has_prev, z, gW, gb, gWy, gby, pred):
    H = Wy.shape[1]
    np.add(Wy @ h, by, out=pred)
    diff = pred - z
    gby[:] = diff
    np.outer(diff, h, out=gWy)
    loss = 0.5 * float(diff @ diff)
    if not has_prev:
        gW[:] = 0.0
        gb[:] = 0.0
        return loss
    dh = Wy.T @ diff
    ig, fg, gg, og = gates[:H], gates[H : 2 * H], gates[2 * H : 3 * H], gates[3 * H :]
    tc = np.tanh(c)
    dc = dh * og * (1.0 - tc * tc)
    gb[:H] = dc * gg * ig * (1.0 - ig)
    gb[H : 2 * H] = dc * c_pp * fg * (1.0 - fg)
    gb[2 * H : 3 * H] = dc * ig * (1.0 - gg * gg)
    gb[3 * H :] = dh * tc * og * (1.0 - og)
    np.outer(gb, np.concatenate((x_prev, h_pp)), out=gW)
    return loss


def lstm_step_np(W, b, Wy, by, h, c, x_prev, h_pp, c_pp, gates, flags, z, lr, gW, gb, gWy, gby, pred):
    H = Wy.shape[1]
    has_prev = flags[0] == 1
    with np.errstate(over="ignore", invalid="ignore"):
        lstm_grads_np(W, b, Wy, by, h, c, x_prev, h_pp, c_pp, gates, has_prev, z, gW, gb, gWy, gby, pred)
    err = math.sqrt(float(gby @ gby))
    ok = math.isfinite(err) and np.isfinite(gWy).all()
    if ok and has_prev:
        ok = bool(np.isfinite(gb).all() and np.isfinite(gW).all())
    if not ok:
        h[:] = 0.0
        c[:] = 0.0
        flags[0] = 0
        return err, False
    by -= lr * gby
    Wy -= lr * gWy
    if has_prev:
        b -= lr * gb
        W -= lr * gW
    x_prev[:] = z
    h_pp[:] = h
    c_pp[:] = c
    a = W @ np.concatenate((z, h_pp)) + b
    gates[:] = _sigmoid_np(a)
    gates[2 * H : 3 * H] = np.tanh(a[2 * H : 3 * H])
    c[:] = gates[H : 2 * H] * c_pp + gates[:H] * gates[2 * H : 3 * H]
    h[:] = gates[3 * H :] * np.tanh(c)
    flags[0] = 1
    return err, True


KERNELS = {
    "numpy": SimpleNamespace(
        name="numpy",
        standardize=standardize_np,
        birch_insert=birch_insert_np,
        arima_step=arima_step_np,
        lstm_grads=lstm_grads_np,
        lstm_step=lstm_step_np,
    ),
}
if HAVE_NUMBA:
    KERNELS["numba"] = SimpleNamespace(
        name="numba",
        standardize=standardize_nb,
        birch_insert=birch_insert_nb,
        arima_step=arima_step_nb,
        lstm_grads=lstm_grads_nb,
        lstm_step=lstm_step_nb,
    )
else:  # pragma: no cover
    KERNELS["numba"] = KERNELS["numpy"]
