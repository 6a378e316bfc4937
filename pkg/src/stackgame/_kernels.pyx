# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.  ``_pykernels`` holds line-for-line Python twins."""
from libc.math cimport sqrt, isfinite, NAN, INFINITY, cos, sin, atan2, exp, fmod, pow, M_PI

import numpy as np

BACKEND = "cython"


cdef inline double _clip(double v, double lo, double hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def quad_outer_step(const double[:, ::1] Qx, const double[:, ::1] P, const double[:, ::1] Qy,
                    const double[::1] cx, const double[::1] cy, double f0,
                    const double[:, ::1] A, const double[:, ::1] B, const double[::1] h,
                    const double[::1] xlo, const double[::1] xhi,
                    const double[::1] ylo, const double[::1] yhi,
                    double[::1] x, double[::1] y, double[::1] lam,
                    double cap, double sigma, const double[:, ::1] noise,
                    const double[::1] lr_in, double lr_out, bint average):
    cdef Py_ssize_t dx = x.shape[0], dy = y.shape[0], K = lam.shape[0], T = lr_in.shape[0]
    cdef bint noisy = noise.shape[0] > 0
    cdef Py_ssize_t oy = 1 + dx, og = 1 + dx + dy
    cdef Py_ssize_t s, i, j, k
    cdef double eta, acc, wsum = 0.0, fval, qi, qj, dsq, v
    cdef bint bad
    cdef double[64] ynew, lnew, ysum, lsum, xold, y0, l0
    if dy > 64 or K > 64:
        raise ValueError("compiled kernel supports at most 64 follower dims and constraints")
    for j in range(dy):
        ysum[j] = 0.0
        y0[j] = y[j]
    for k in range(K):
        lsum[k] = 0.0
        l0[k] = lam[k]
    for s in range(T):
        eta = lr_in[s]
        for j in range(dy):
            acc = cy[j]
            for i in range(dx):
                acc += P[i, j] * x[i]
            for k in range(dy):
                acc -= Qy[j, k] * y[k]
            if noisy:
                acc += sigma * noise[s, oy + j]
            for k in range(K):
                acc -= B[k, j] * lam[k]
            ynew[j] = _clip(y[j] + eta * acc, ylo[j], yhi[j])
        for k in range(K):
            acc = h[k]
            for i in range(dx):
                acc -= A[k, i] * x[i]
            for j in range(dy):
                acc -= B[k, j] * y[j]
            if noisy:
                acc += sigma * noise[s, og + k]
            lnew[k] = _clip(lam[k] - eta * acc, 0.0, cap)
        bad = False
        for j in range(dy):
            y[j] = ynew[j]
            if not isfinite(y[j]):
                bad = True
            ysum[j] += eta * (y[j] - y0[j])
        for k in range(K):
            lam[k] = lnew[k]
            if not isfinite(lam[k]):
                bad = True
            lsum[k] += eta * (lam[k] - l0[k])
        wsum += eta
        if bad:
            return s, NAN, NAN
    if average and T > 0:
        for j in range(dy):
            y[j] = _clip(y0[j] + ysum[j] / wsum, ylo[j], yhi[j])
        for k in range(K):
            lam[k] = _clip(l0[k] + lsum[k] / wsum, 0.0, cap)

    fval = f0
    for i in range(dx):
        qi = 0.0
        for k in range(dx):
            qi += Qx[i, k] * x[k]
        fval += 0.5 * x[i] * qi + cx[i] * x[i]
        for j in range(dy):
            fval += x[i] * P[i, j] * y[j]
    for j in range(dy):
        qj = 0.0
        for k in range(dy):
            qj += Qy[j, k] * y[k]
        fval += -0.5 * y[j] * qj + cy[j] * y[j]
    if noisy:
        fval += sigma * noise[T, 0]
    dsq = 0.0
    for k in range(K):
        acc = h[k]
        for i in range(dx):
            acc -= A[k, i] * x[i]
        for j in range(dy):
            acc -= B[k, j] * y[j]
        if noisy:
            acc += sigma * noise[T, og + k]
        if acc < 0.0:
            dsq += acc * acc
    if dx > 64:
        raise ValueError("compiled kernel supports at most 64 leader dims")
    for i in range(dx):
        xold[i] = x[i]
    bad = False
    for i in range(dx):
        acc = cx[i]
        for k in range(dx):
            acc += Qx[i, k] * xold[k]
        for j in range(dy):
            acc += P[i, j] * y[j]
        if noisy:
            acc += sigma * noise[T, 1 + i]
        for k in range(K):
            acc -= A[k, i] * lam[k]
        v = _clip(xold[i] - lr_out * acc, xlo[i], xhi[i])
        if not isfinite(v):
            bad = True
        x[i] = v
    if bad or not isfinite(fval):
        return T, fval, sqrt(dsq)
    return -1, fval, sqrt(dsq)


# ---------------------------------------------------------------------------
# reach-avoid kernels; see _pykernels for the parameter layout

cdef double DEG = M_PI / 180.0


cdef struct RA:
    double lo, hi, gx, gy, goal_r, cap_r, speed, omega, bonus, penalty
    bint soft, prob, expc, capterm, static


cdef RA _unpack(const double[::1] prm):
    cdef RA p
    p.lo = prm[0]
    p.hi = prm[1]
    p.gx = prm[2]
    p.gy = prm[3]
    p.goal_r = prm[4]
    p.cap_r = prm[5]
    p.speed = prm[6]
    p.omega = prm[7]
    p.bonus = prm[8]
    p.penalty = prm[9]
    p.soft = prm[10] != 0.0
    p.prob = prm[11] != 0.0
    p.expc = prm[12] != 0.0
    p.capterm = prm[13] != 0.0
    p.static = prm[14] != 0.0
    return p


cdef inline double _wrap_deg(double h) nogil:
    cdef double m = fmod(h, 360.0)
    if m < 0.0:
        m += 360.0
    if m >= 360.0:
        m -= 360.0
    return m


cdef inline double _wrap_pi(double a) nogil:
    return M_PI - fmod(fmod(M_PI - a, 2 * M_PI) + 2 * M_PI, 2 * M_PI)


cdef void _move(RA* p, double x, double y, double h, double turn,
                double* out, double* J, bint jac) nogil:
    """out = (x', y', h'); J is 3x4 row-major w.r.t. (x, y, h, turn)."""
    cdef double u = _clip(turn, -1.0, 1.0)
    cdef double du = 1.0 if (turn >= -1.0 and turn <= 1.0) else 0.0
    cdef double h1 = h + p.omega * u
    cdef double c = cos(h1 * DEG), s = sin(h1 * DEG)
    cdef double x1 = x + p.speed * c, y1 = y + p.speed * s
    cdef bint hx = False, hy = False
    cdef double w
    cdef int k
    if x1 > p.hi or x1 < p.lo:
        x1 = p.hi if x1 > p.hi else p.lo
        h1 = 180.0 - h1
        hx = True
    if y1 > p.hi or y1 < p.lo:
        y1 = p.hi if y1 > p.hi else p.lo
        h1 = -h1
        hy = True
    out[0] = x1
    out[1] = y1
    out[2] = _wrap_deg(h1)
    if not jac:
        return
    w = p.omega * du
    J[0] = 1.0
    J[1] = 0.0
    J[2] = -p.speed * s * DEG
    J[3] = -p.speed * s * DEG * w
    J[4] = 0.0
    J[5] = 1.0
    J[6] = p.speed * c * DEG
    J[7] = p.speed * c * DEG * w
    J[8] = 0.0
    J[9] = 0.0
    J[10] = 1.0
    J[11] = w
    if hx:
        for k in range(4):
            J[k] = 0.0
            J[8 + k] = -J[8 + k]
    if hy:
        for k in range(4):
            J[4 + k] = 0.0
            J[8 + k] = -J[8 + k]


cdef void _advance(RA* p, double* s, double a, double b, double* nxt,
                   double* Ts, double* Ta, double* Tb, bint jac) nogil:
    """Ts is 6x6 row-major; Ta, Tb length 6."""
    cdef double J[12]
    cdef int i, j
    if jac:
        for i in range(36):
            Ts[i] = 0.0
        for i in range(6):
            Ta[i] = 0.0
            Tb[i] = 0.0
    if p.static:
        nxt[0] = s[0]
        nxt[1] = s[1]
        nxt[2] = s[2]
        if jac:
            Ts[0] = 1.0
            Ts[7] = 1.0
            Ts[14] = 1.0
    else:
        _move(p, s[0], s[1], s[2], a, nxt, J, jac)
        if jac:
            for i in range(3):
                for j in range(3):
                    Ts[i * 6 + j] = J[i * 4 + j]
                Ta[i] = J[i * 4 + 3]
    _move(p, s[3], s[4], s[5], b, nxt + 3, J, jac)
    if jac:
        for i in range(3):
            for j in range(3):
                Ts[(3 + i) * 6 + 3 + j] = J[i * 4 + j]
            Tb[3 + i] = J[i * 4 + 3]


cdef int _outcome(RA* p, double* s, double* n, double* r, double* g,
                  double* rs, double* rn, double* gs, double* gn, bint jac) nogil:
    """Writes reward and constraint (and gradients w.r.t. s and n); returns the done code."""
    cdef double gvx = n[3] - p.gx, gvy = n[4] - p.gy
    cdef double dgoal = sqrt(gvx * gvx + gvy * gvy)
    cdef double pvx = n[3] - n[0], pvy = n[4] - n[1]
    cdef double dpair = sqrt(pvx * pvx + pvy * pvy)
    cdef bint target = dgoal <= p.goal_r
    cdef bint capt = dpair < p.cap_r
    cdef int done = 0
    cdef double gap, qx, qy, dq, mx, my, step, near, e
    cdef int i
    if target:
        done = 1
    elif capt and p.capterm:
        done = 2
    if jac:
        for i in range(6):
            rs[i] = 0.0
            rn[i] = 0.0
            gs[i] = 0.0
            gn[i] = 0.0
    if p.prob:
        r[0] = 1.0 if target else 0.0
    elif target:
        r[0] = p.bonus
    elif p.soft and capt:
        r[0] = -p.penalty
    else:
        gap = dgoal - p.goal_r
        r[0] = -gap * gap
        if jac:
            rn[3] = -2.0 * gap * gvx / dgoal
            rn[4] = -2.0 * gap * gvy / dgoal
    if not p.expc:
        g[0] = dpair - p.cap_r
        if jac and dpair > 0:
            gn[3] = pvx / dpair
            gn[4] = pvy / dpair
            gn[0] = -gn[3]
            gn[1] = -gn[4]
    else:
        qx = s[3] - n[0]
        qy = s[4] - n[1]
        dq = sqrt(qx * qx + qy * qy)
        mx = n[3] - s[3]
        my = n[4] - s[4]
        step = sqrt(mx * mx + my * my)
        near = dq - p.cap_r
        if near > 0.0:
            e = exp(near)
            g[0] = e - 1.0 - step
            if jac:
                gs[3] = e * qx / dq
                gs[4] = e * qy / dq
                gn[0] = -gs[3]
                gn[1] = -gs[4]
        else:
            g[0] = -step
        if jac and step > 0:
            gn[3] -= mx / step
            gn[4] -= my / step
            gs[3] += mx / step
            gs[4] += my / step
    return done


cdef void _features(RA* p, double* s, double* f, double* J, bint jac) nogil:
    """f has 13 entries; J is 13x6 row-major."""
    cdef double span = p.hi - p.lo
    cdef double dx = s[0], dy = s[1], dh = s[2], ax = s[3], ay = s[4], ah = s[5]
    cdef double ca = cos(ah * DEG), sa = sin(ah * DEG)
    cdef double cd = cos(dh * DEG), sd = sin(dh * DEG)
    cdef double agx = p.gx - ax, agy = p.gy - ay
    cdef double r_ag = sqrt(agx * agx + agy * agy)
    cdef double adx = dx - ax, ady = dy - ay
    cdef double r_ad = sqrt(adx * adx + ady * ady)
    cdef double dgx = p.gx - dx, dgy = p.gy - dy
    cdef double r_dg = sqrt(dgx * dgx + dgy * dgy)
    cdef double q
    cdef int i
    f[0] = 2.0 * (ax - p.lo) / span - 1.0
    f[1] = 2.0 * (ay - p.lo) / span - 1.0
    f[2] = ca
    f[3] = sa
    f[4] = 2.0 * (dx - p.lo) / span - 1.0
    f[5] = 2.0 * (dy - p.lo) / span - 1.0
    f[6] = cd
    f[7] = sd
    f[8] = r_ag
    f[9] = _wrap_pi(atan2(ady, adx) - ah * DEG)
    f[10] = r_ad
    f[11] = _wrap_pi(atan2(agy, agx) - ah * DEG)
    f[12] = _wrap_pi(atan2(dgy, dgx) - dh * DEG)
    if not jac:
        return
    for i in range(78):
        J[i] = 0.0
    J[0 * 6 + 3] = 2.0 / span
    J[1 * 6 + 4] = 2.0 / span
    J[4 * 6 + 0] = 2.0 / span
    J[5 * 6 + 1] = 2.0 / span
    J[2 * 6 + 5] = -sa * DEG
    J[3 * 6 + 5] = ca * DEG
    J[6 * 6 + 2] = -sd * DEG
    J[7 * 6 + 2] = cd * DEG
    if r_ag > 0:
        q = r_ag * r_ag
        J[8 * 6 + 3] = -agx / r_ag
        J[8 * 6 + 4] = -agy / r_ag
        J[11 * 6 + 3] = agy / q
        J[11 * 6 + 4] = -agx / q
    if r_ad > 0:
        q = r_ad * r_ad
        J[10 * 6 + 3] = -adx / r_ad
        J[10 * 6 + 4] = -ady / r_ad
        J[10 * 6 + 0] = adx / r_ad
        J[10 * 6 + 1] = ady / r_ad
        J[9 * 6 + 0] = -ady / q
        J[9 * 6 + 1] = adx / q
        J[9 * 6 + 3] = ady / q
        J[9 * 6 + 4] = -adx / q
    if r_dg > 0:
        q = r_dg * r_dg
        J[12 * 6 + 0] = dgy / q
        J[12 * 6 + 1] = -dgx / q
    J[9 * 6 + 5] = -DEG
    J[11 * 6 + 5] = -DEG
    J[12 * 6 + 2] = -DEG


def ra_features(const double[::1] prm, const double[:, ::1] S, double[:, ::1] F):
    cdef RA p = _unpack(prm)
    cdef Py_ssize_t i, n = S.shape[0]
    cdef double s[6]
    cdef double J[78]
    cdef int k
    for i in range(n):
        for k in range(6):
            s[k] = S[i, k]
        _features(&p, s, &F[i, 0], J, False)


def ra_step(const double[::1] prm, const double[:, ::1] S, const double[::1] a,
            const double[::1] b, double[:, ::1] out, double[::1] r, double[::1] g,
            long[::1] done):
    cdef RA p = _unpack(prm)
    cdef Py_ssize_t i, n = S.shape[0]
    cdef double s[6]
    cdef double nxt[6]
    cdef double dummy[36]
    cdef int k
    for i in range(n):
        for k in range(6):
            s[k] = S[i, k]
        _advance(&p, s, a[i], b[i], nxt, dummy, dummy, dummy, False)
        done[i] = _outcome(&p, s, nxt, &r[i], &g[i], dummy, dummy, dummy, dummy, False)
        for k in range(6):
            out[i, k] = nxt[k]


def ra_feasible(const double[::1] prm, const double[:, ::1] S, const double[::1] a,
                unsigned char[:, ::1] M):
    cdef RA p = _unpack(prm)
    cdef Py_ssize_t i, n = S.shape[0]
    cdef double s[6]
    cdef double nxt[6]
    cdef double dummy[36]
    cdef double r, g
    cdef int k, j
    for i in range(n):
        for k in range(6):
            s[k] = S[i, k]
        for j in range(3):
            _advance(&p, s, a[i], <double>(j - 1), nxt, dummy, dummy, dummy, False)
            _outcome(&p, s, nxt, &r, &g, dummy, dummy, dummy, dummy, False)
            M[i, j] = 1 if g >= 0.0 else 0


def ra_pursuit(const double[::1] prm, const double[:, ::1] S, double[::1] out):
    cdef RA p = _unpack(prm)
    cdef Py_ssize_t i, n = S.shape[0]
    cdef double turns[3]
    cdef double mv[3]
    cdef double dummy[12]
    cdef double best, d, ex, ey
    cdef int j
    turns[0] = 0.0
    turns[1] = -1.0
    turns[2] = 1.0
    for i in range(n):
        best = INFINITY
        out[i] = 0.0
        for j in range(3):
            _move(&p, S[i, 0], S[i, 1], S[i, 2], turns[j], mv, dummy, False)
            ex = mv[0] - S[i, 3]
            ey = mv[1] - S[i, 4]
            d = sqrt(ex * ex + ey * ey)
            if d < best:
                best = d
                out[i] = turns[j]


def ra_pathwise(const double[::1] prm, const double[:, ::1] S0, const double[::1] tx,
                const double[::1] ty, int H, double gamma, const double[::1] cw, bint project,
                double[::1] ret, double[:, ::1] dret, double[::1] gv, double[:, ::1] dg):
    cdef RA p = _unpack(prm)
    cdef Py_ssize_t B = S0.shape[0], nx = tx.shape[0], ny = ty.shape[0]
    cdef Py_ssize_t n = nx + ny
    cdef Py_ssize_t i, t, j, k, m
    cdef double s[6]
    cdef double nxt[6]
    cdef double f[13]
    cdef double JF[78]
    cdef double Ts[36]
    cdef double Ta[6]
    cdef double Tb[6]
    cdef double rs[6]
    cdef double rn[6]
    cdef double gs[6]
    cdef double gn[6]
    cdef double r, g, w, ua, ub, acc, dr, dgt
    cdef int done
    if nx != 13 or ny != 13:
        raise ValueError("bilinear reach-avoid policies have 13 parameters each")
    # forward-mode tangents, 6 x n, plus scratch
    cdef double[:, ::1] dS = np.zeros((6, n))
    cdef double[:, ::1] dN = np.zeros((6, n))
    cdef double[:, ::1] dO = np.zeros((13, n))
    cdef double[::1] dua = np.zeros(n)
    cdef double[::1] dub = np.zeros(n)
    for i in range(B):
        for k in range(6):
            s[k] = S0[i, k]
            for m in range(n):
                dS[k, m] = 0.0
        ret[i] = 0.0
        gv[i] = 0.0
        for m in range(n):
            dret[i, m] = 0.0
            dg[i, m] = 0.0
        for t in range(H):
            w = pow(gamma, <double>t)
            _features(&p, s, f, JF, True)
            for j in range(13):
                for m in range(n):
                    acc = 0.0
                    for k in range(6):
                        acc += JF[j * 6 + k] * dS[k, m]
                    dO[j, m] = acc
            ua = 0.0
            ub = 0.0
            for j in range(13):
                ua += f[j] * tx[j]
                ub += f[j] * ty[j]
            for m in range(n):
                acc = 0.0
                for j in range(13):
                    acc += tx[j] * dO[j, m]
                dua[m] = acc
                acc = 0.0
                for j in range(13):
                    acc += ty[j] * dO[j, m]
                dub[m] = acc
            for j in range(13):
                dua[j] += f[j]
                dub[nx + j] += f[j]
            _advance(&p, s, ua, ub, nxt, Ts, Ta, Tb, True)
            for k in range(6):
                for m in range(n):
                    acc = 0.0
                    for j in range(6):
                        acc += Ts[k * 6 + j] * dS[j, m]
                    dN[k, m] = acc + Ta[k] * dua[m] + Tb[k] * dub[m]
            done = _outcome(&p, s, nxt, &r, &g, rs, rn, gs, gn, True)
            ret[i] += w * r
            for m in range(n):
                dr = 0.0
                for k in range(6):
                    dr += rs[k] * dS[k, m]
                for k in range(6):
                    dr += rn[k] * dN[k, m]
                dret[i, m] += w * dr
            if cw[t] != 0.0 and (g < 0.0 or not project):
                gv[i] += cw[t] * g
                for m in range(n):
                    dgt = 0.0
                    for k in range(6):
                        dgt += gs[k] * dS[k, m]
                    for k in range(6):
                        dgt += gn[k] * dN[k, m]
                    dg[i, m] += cw[t] * dgt
            for k in range(6):
                s[k] = nxt[k]
                for m in range(n):
                    dS[k, m] = dN[k, m]
            if done != 0:
                break
