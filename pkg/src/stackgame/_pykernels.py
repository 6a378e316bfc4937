"""Pure-Python twins of the compiled kernels in ``_kernels.pyx``.

``quad_outer_step`` mirrors its compiled counterpart statement for statement,
so both backends produce the same numbers.  The reach-avoid kernels (``ra_*``)
are vectorised over the batch with numpy instead; they follow the same
formulas but may differ from the compiled loops in the last bits of
transcendental functions.
"""
import math

import numpy as np

BACKEND = "python"


def _clip(v, lo, hi):
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def quad_outer_step(Qx, P, Qy, cx, cy, f0, A, B, h, xlo, xhi, ylo, yhi,
                    x, y, lam, cap, sigma, noise, lr_in, lr_out, average):
    """One nested SGDA iteration on a quadratic coupled problem.

    ``y`` and ``lam`` hold the warm start on entry and the inner-loop output
    on exit; ``x`` is replaced by the projected leader step.  Returns
    ``(status, f_hat, delta_hat)`` where status is -1 on success, else the
    index of the first non-finite update (``len(lr_in)`` for the leader step).
    """
    dx = x.shape[0]
    dy = y.shape[0]
    K = lam.shape[0]
    T = lr_in.shape[0]
    noisy = noise.shape[0] > 0
    oy = 1 + dx
    og = 1 + dx + dy
    xc = [float(v) for v in x]
    yc = [float(v) for v in y]
    lc = [float(v) for v in lam]
    y0 = list(yc)
    l0 = list(lc)
    ynew = [0.0] * dy
    lnew = [0.0] * K
    ysum = [0.0] * dy
    lsum = [0.0] * K
    wsum = 0.0
    for s in range(T):
        eta = float(lr_in[s])
        for j in range(dy):
            acc = float(cy[j])
            for i in range(dx):
                acc += P[i, j] * xc[i]
            for k in range(dy):
                acc -= Qy[j, k] * yc[k]
            if noisy:
                acc += sigma * noise[s, oy + j]
            for k in range(K):
                acc -= B[k, j] * lc[k]
            ynew[j] = _clip(yc[j] + eta * acc, ylo[j], yhi[j])
        for k in range(K):
            acc = float(h[k])
            for i in range(dx):
                acc -= A[k, i] * xc[i]
            for j in range(dy):
                acc -= B[k, j] * yc[j]
            if noisy:
                acc += sigma * noise[s, og + k]
            lnew[k] = _clip(lc[k] - eta * acc, 0.0, cap)
        bad = False
        for j in range(dy):
            yc[j] = ynew[j]
            if not math.isfinite(yc[j]):
                bad = True
            ysum[j] += eta * (yc[j] - y0[j])
        for k in range(K):
            lc[k] = lnew[k]
            if not math.isfinite(lc[k]):
                bad = True
            lsum[k] += eta * (lc[k] - l0[k])
        wsum += eta
        if bad:
            return s, math.nan, math.nan
    if average and T > 0:
        for j in range(dy):
            yc[j] = _clip(y0[j] + ysum[j] / wsum, ylo[j], yhi[j])
        for k in range(K):
            lc[k] = _clip(l0[k] + lsum[k] / wsum, 0.0, cap)
    for j in range(dy):
        y[j] = yc[j]
    for k in range(K):
        lam[k] = lc[k]

    # leader step at (x, y_out, lam_out) with the last noise row
    fval = f0
    for i in range(dx):
        qi = 0.0
        for k in range(dx):
            qi += Qx[i, k] * xc[k]
        fval += 0.5 * xc[i] * qi + cx[i] * xc[i]
        for j in range(dy):
            fval += xc[i] * P[i, j] * yc[j]
    for j in range(dy):
        qj = 0.0
        for k in range(dy):
            qj += Qy[j, k] * yc[k]
        fval += -0.5 * yc[j] * qj + cy[j] * yc[j]
    if noisy:
        fval += sigma * noise[T, 0]
    dsq = 0.0
    for k in range(K):
        acc = float(h[k])
        for i in range(dx):
            acc -= A[k, i] * xc[i]
        for j in range(dy):
            acc -= B[k, j] * yc[j]
        if noisy:
            acc += sigma * noise[T, og + k]
        if acc < 0.0:
            dsq += acc * acc
    bad = False
    for i in range(dx):
        acc = float(cx[i])
        for k in range(dx):
            acc += Qx[i, k] * xc[k]
        for j in range(dy):
            acc += P[i, j] * yc[j]
        if noisy:
            acc += sigma * noise[T, 1 + i]
        for k in range(K):
            acc -= A[k, i] * lc[k]
        v = _clip(xc[i] - lr_out * acc, xlo[i], xhi[i])
        if not math.isfinite(v):
            bad = True
        x[i] = v
    if bad or not math.isfinite(fval):
        return T, fval, math.sqrt(dsq)
    return -1, fval, math.sqrt(dsq)


# ---------------------------------------------------------------------------
# reach-avoid kernels.  ``prm`` is ``ReachAvoidConfig.params()``:
# lo, hi, gx, gy, goal_r, cap_r, speed, omega, bonus, penalty,
# soft, prob, exp_constraint, capture_terminal, static_defender

DEG = math.pi / 180.0


def _unpack(prm):
    return [float(v) for v in prm]


def _wrap_deg(h):
    m = np.fmod(h, 360.0)
    m = np.where(m < 0.0, m + 360.0, m)
    return np.where(m >= 360.0, m - 360.0, m)


def _wrap_pi(a):
    return math.pi - np.fmod(np.fmod(math.pi - a, 2 * math.pi) + 2 * math.pi, 2 * math.pi)


def _move(prm, x, y, h, turn, jac=False):
    lo, hi, speed, omega = prm[0], prm[1], prm[6], prm[7]
    u = np.minimum(np.maximum(turn, -1.0), 1.0)
    du = ((turn >= -1.0) & (turn <= 1.0)).astype(float)
    h1 = h + omega * u
    c = np.cos(h1 * DEG)
    s = np.sin(h1 * DEG)
    x1 = x + speed * c
    y1 = y + speed * s
    hx = (x1 > hi) | (x1 < lo)
    x1 = np.where(x1 > hi, hi, np.where(x1 < lo, lo, x1))
    h1 = np.where(hx, 180.0 - h1, h1)
    hy = (y1 > hi) | (y1 < lo)
    y1 = np.where(y1 > hi, hi, np.where(y1 < lo, lo, y1))
    h1 = np.where(hy, -h1, h1)
    h1 = _wrap_deg(h1)
    if not jac:
        return x1, y1, h1
    n = len(x)
    w = omega * du
    J = np.zeros((n, 3, 4))
    J[:, 0, 0] = 1.0
    J[:, 0, 2] = -speed * s * DEG
    J[:, 0, 3] = -speed * s * DEG * w
    J[:, 1, 1] = 1.0
    J[:, 1, 2] = speed * c * DEG
    J[:, 1, 3] = speed * c * DEG * w
    J[:, 2, 2] = 1.0
    J[:, 2, 3] = w
    J[hx, 0] = 0.0
    J[hx, 2] *= -1.0
    J[hy, 1] = 0.0
    J[hy, 2] *= -1.0
    return (x1, y1, h1), J


def _advance(prm, S, a, b, jac=False):
    n = len(S)
    static = prm[14] != 0.0
    nxt = np.empty((n, 6))
    T_s = np.zeros((n, 6, 6))
    T_a = np.zeros((n, 6))
    T_b = np.zeros((n, 6))
    if static:
        nxt[:, :3] = S[:, :3]
        T_s[:, 0, 0] = T_s[:, 1, 1] = T_s[:, 2, 2] = 1.0
    else:
        out = _move(prm, S[:, 0], S[:, 1], S[:, 2], a, jac)
        if jac:
            out, Jd = out
            T_s[:, :3, :3] = Jd[:, :, :3]
            T_a[:, :3] = Jd[:, :, 3]
        nxt[:, 0], nxt[:, 1], nxt[:, 2] = out
    out = _move(prm, S[:, 3], S[:, 4], S[:, 5], b, jac)
    if jac:
        out, Ja = out
        T_s[:, 3:, 3:] = Ja[:, :, :3]
        T_b[:, 3:] = Ja[:, :, 3]
    nxt[:, 3], nxt[:, 4], nxt[:, 5] = out
    return nxt, T_s, T_a, T_b


def _outcome(prm, S, N, jac=False):
    gx, gy, goal_r, cap_r = prm[2], prm[3], prm[4], prm[5]
    bonus, penalty = prm[8], prm[9]
    soft, prob, expc, capterm = prm[10] != 0, prm[11] != 0, prm[12] != 0, prm[13] != 0
    n = len(S)
    gvx, gvy = N[:, 3] - gx, N[:, 4] - gy
    dgoal = np.sqrt(gvx * gvx + gvy * gvy)
    pvx, pvy = N[:, 3] - N[:, 0], N[:, 4] - N[:, 1]
    dpair = np.sqrt(pvx * pvx + pvy * pvy)
    target = dgoal <= goal_r
    capt = dpair < cap_r
    done = np.where(target, 1, np.where(capt & capterm, 2, 0)).astype(np.int64)
    r_s = np.zeros((n, 6))
    r_n = np.zeros((n, 6))
    g_s = np.zeros((n, 6))
    g_n = np.zeros((n, 6))
    if prob:
        r = np.where(target, 1.0, 0.0)
    else:
        gap = dgoal - goal_r
        r = np.where(target, bonus, np.where(soft & capt, -penalty, -gap * gap))
        smooth = ~target & ~(soft & capt)
        with np.errstate(divide="ignore", invalid="ignore"):
            r_n[:, 3] = np.where(smooth, -2.0 * gap * gvx / dgoal, 0.0)
            r_n[:, 4] = np.where(smooth, -2.0 * gap * gvy / dgoal, 0.0)
    if not expc:
        g = dpair - cap_r
        pos = dpair > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            g_n[:, 3] = np.where(pos, pvx / dpair, 0.0)
            g_n[:, 4] = np.where(pos, pvy / dpair, 0.0)
        g_n[:, 0] = -g_n[:, 3]
        g_n[:, 1] = -g_n[:, 4]
    else:
        qx, qy = S[:, 3] - N[:, 0], S[:, 4] - N[:, 1]
        dq = np.sqrt(qx * qx + qy * qy)
        mx, my = N[:, 3] - S[:, 3], N[:, 4] - S[:, 4]
        step = np.sqrt(mx * mx + my * my)
        near = dq - cap_r
        e = np.exp(near)
        far = near > 0.0
        g = np.where(far, e - 1.0 - step, -step)
        with np.errstate(divide="ignore", invalid="ignore"):
            g_s[:, 3] = np.where(far, e * qx / dq, 0.0)
            g_s[:, 4] = np.where(far, e * qy / dq, 0.0)
            g_n[:, 0] = -g_s[:, 3]
            g_n[:, 1] = -g_s[:, 4]
            mv = step > 0
            g_n[:, 3] -= np.where(mv, mx / step, 0.0)
            g_n[:, 4] -= np.where(mv, my / step, 0.0)
            g_s[:, 3] += np.where(mv, mx / step, 0.0)
            g_s[:, 4] += np.where(mv, my / step, 0.0)
    return r, g, done, r_s, r_n, g_s, g_n


def _features(prm, S, jac=False):
    lo, hi, gx, gy = prm[0], prm[1], prm[2], prm[3]
    span = hi - lo
    dx, dy, dh, ax, ay, ah = (S[:, k] for k in range(6))
    ca, sa = np.cos(ah * DEG), np.sin(ah * DEG)
    cd, sd = np.cos(dh * DEG), np.sin(dh * DEG)
    agx, agy = gx - ax, gy - ay
    r_ag = np.sqrt(agx * agx + agy * agy)
    adx, ady = dx - ax, dy - ay
    r_ad = np.sqrt(adx * adx + ady * ady)
    dgx, dgy = gx - dx, gy - dy
    r_dg = np.sqrt(dgx * dgx + dgy * dgy)
    F = np.stack([
        2.0 * (ax - lo) / span - 1.0, 2.0 * (ay - lo) / span - 1.0, ca, sa,
        2.0 * (dx - lo) / span - 1.0, 2.0 * (dy - lo) / span - 1.0, cd, sd,
        r_ag, _wrap_pi(np.arctan2(ady, adx) - ah * DEG), r_ad,
        _wrap_pi(np.arctan2(agy, agx) - ah * DEG), _wrap_pi(np.arctan2(dgy, dgx) - dh * DEG)], axis=1)
    if not jac:
        return F
    n = len(S)
    J = np.zeros((n, 13, 6))
    J[:, 0, 3] = J[:, 1, 4] = J[:, 4, 0] = J[:, 5, 1] = 2.0 / span
    J[:, 2, 5], J[:, 3, 5] = -sa * DEG, ca * DEG
    J[:, 6, 2], J[:, 7, 2] = -sd * DEG, cd * DEG
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = r_ag > 0
        q = r_ag * r_ag
        J[:, 8, 3] = np.where(ok, -agx / r_ag, 0.0)
        J[:, 8, 4] = np.where(ok, -agy / r_ag, 0.0)
        J[:, 11, 3] = np.where(ok, agy / q, 0.0)
        J[:, 11, 4] = np.where(ok, -agx / q, 0.0)
        ok = r_ad > 0
        q = r_ad * r_ad
        J[:, 10, 3] = np.where(ok, -adx / r_ad, 0.0)
        J[:, 10, 4] = np.where(ok, -ady / r_ad, 0.0)
        J[:, 10, 0] = -J[:, 10, 3]
        J[:, 10, 1] = -J[:, 10, 4]
        J[:, 9, 0] = np.where(ok, -ady / q, 0.0)
        J[:, 9, 1] = np.where(ok, adx / q, 0.0)
        J[:, 9, 3] = -J[:, 9, 0]
        J[:, 9, 4] = -J[:, 9, 1]
        ok = r_dg > 0
        q = r_dg * r_dg
        J[:, 12, 0] = np.where(ok, dgy / q, 0.0)
        J[:, 12, 1] = np.where(ok, -dgx / q, 0.0)
    J[:, 9, 5] = J[:, 11, 5] = J[:, 12, 2] = -DEG
    return F, J


def ra_features(prm, S, F):
    F[:] = _features(prm, S)


def ra_step(prm, S, a, b, out, r, g, done):
    nxt = _advance(prm, S, a, b)[0]
    rr, gg, dd = _outcome(prm, S, nxt)[:3]
    out[:] = nxt
    r[:] = rr
    g[:] = gg
    done[:] = dd


def ra_feasible(prm, S, a, M):
    for k, turn in enumerate((-1.0, 0.0, 1.0)):
        nxt = _advance(prm, S, a, np.full(len(S), turn))[0]
        M[:, k] = _outcome(prm, S, nxt)[1] >= 0.0


def ra_pursuit(prm, S, out):
    best = np.full(len(S), np.inf)
    choice = np.zeros(len(S))
    for turn in (0.0, -1.0, 1.0):
        x, y, _ = _move(prm, S[:, 0], S[:, 1], S[:, 2], np.full(len(S), turn))
        d = np.sqrt((x - S[:, 3]) ** 2 + (y - S[:, 4]) ** 2)
        better = d < best
        choice = np.where(better, turn, choice)
        best = np.where(better, d, best)
    out[:] = choice


def ra_pathwise(prm, S0, tx, ty, H, gamma, cw, project, ret, dret, gv, dg):
    """Forward-mode return and constraint derivatives for bilinear turn
    policies ``turn = theta . features(s)``, per episode.  Derivatives are
    w.r.t. the stacked ``[tx, ty]``."""
    B = len(S0)
    nx, ny = len(tx), len(ty)
    if nx != 13 or ny != 13:
        raise ValueError("bilinear reach-avoid policies have 13 parameters each")
    n = nx + ny
    S = np.array(S0, dtype=float)
    dS = np.zeros((B, 6, n))
    alive = np.ones(B, dtype=bool)
    R = np.zeros(B)
    dR = np.zeros((B, n))
    G = np.zeros(B)
    dG = np.zeros((B, n))
    for t in range(H):
        w = gamma ** t
        F, JF = _features(prm, S, True)
        dO = np.einsum("bij,bjk->bik", JF, dS)
        ua = F @ tx
        ub = F @ ty
        dua = np.einsum("j,bjk->bk", tx, dO)
        dua[:, :nx] += F
        dub = np.einsum("j,bjk->bk", ty, dO)
        dub[:, nx:] += F
        nxt, T_s, T_a, T_b = _advance(prm, S, ua, ub, True)
        dN = np.einsum("bij,bjk->bik", T_s, dS) + T_a[:, :, None] * dua[:, None, :] + T_b[:, :, None] * dub[:, None, :]
        r, g, done, r_s, r_n, g_s, g_n = _outcome(prm, S, nxt, True)
        dr = np.einsum("bj,bjk->bk", r_s, dS) + np.einsum("bj,bjk->bk", r_n, dN)
        R += np.where(alive, w * r, 0.0)
        dR += np.where(alive[:, None], w * dr, 0.0)
        if cw[t] != 0.0:
            use = alive & ((g < 0.0) | (not project))
            G += np.where(use, cw[t] * g, 0.0)
            dgt = np.einsum("bj,bjk->bk", g_s, dS) + np.einsum("bj,bjk->bk", g_n, dN)
            dG += np.where(use[:, None], cw[t] * dgt, 0.0)
        alive = alive & (done == 0)
        S = nxt
        dS = dN
        if not alive.any():
            break
    ret[:] = R
    dret[:] = dR
    gv[:] = G
    dg[:] = dG
