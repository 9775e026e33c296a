# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused per-sequence ELBO forward pass and hand-derived backward pass.

Mirrors ``ssnn.inference.walk`` followed by
``ssnn.generative.soft_path_log_prob``; see ``ssnn._pykernel`` for the
tape-based version this is tested against.
"""
import numpy as np
from libc.math cimport exp, log, tanh, sqrt

cdef double LOG_2PI = log(2.0 * 3.141592653589793)
cdef double NEG_MASK = -1e30


cdef inline double sigm(double v) noexcept nogil:
    cdef double z
    if v >= 0:
        return 1.0 / (1.0 + exp(-v))
    z = exp(v)
    return z / (1.0 + z)


cdef void log_softmax_row(double[::1] src, double[::1] dst, double[::1] prob) noexcept nogil:
    cdef Py_ssize_t i, n = src.shape[0]
    cdef double mx = src[0], s = 0.0, lse
    for i in range(1, n):
        if src[i] > mx:
            mx = src[i]
    for i in range(n):
        s += exp(src[i] - mx)
    lse = log(s) + mx
    for i in range(n):
        dst[i] = src[i] - lse
        prob[i] = exp(dst[i])


cdef void softmax_backward_row(double[::1] dlog, double[::1] prob, double[::1] dlogit) noexcept nogil:
    cdef Py_ssize_t i, n = dlog.shape[0]
    cdef double s = 0.0
    for i in range(n):
        s += dlog[i]
    for i in range(n):
        dlogit[i] += dlog[i] - prob[i] * s


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def elbo_and_grad(x_in, dict theta, dict phi, noise_in, double tau, bint relaxed=False,
                  bint self_transitions=True, bint need_grad=True, enc_state=None):
    """Return ``(F, log_joint, log_q, z, d, grad_theta, grad_phi, (h, c))``."""
    cdef double[:, ::1] x = _c(x_in)
    cdef double[:, ::1] noise = _c(noise_in)
    cdef Py_ssize_t T = x.shape[0], m = x.shape[1]

    cdef double[::1] init_logits = _c(theta["init_logits"])
    cdef double[:, ::1] trans_logits = _c(theta["trans_logits"])
    cdef double[:, ::1] dur_logits = _c(theta["dur_logits"])
    cdef double[:, :, ::1] W_x = _c(theta["W_x"])
    cdef double[:, :, ::1] W_h = _c(theta["W_h"])
    cdef double[:, ::1] b_h = _c(theta["b_h"])
    cdef double[:, ::1] h0 = _c(theta["h0"])
    cdef double[:, :, ::1] W_mu = _c(theta["W_mu"])
    cdef double[:, ::1] b_mu = _c(theta["b_mu"])
    cdef double[:, :, ::1] W_sig = _c(theta["W_sigma"])
    cdef double[:, ::1] b_sig = _c(theta["b_sigma"])

    cdef double[:, ::1] fW = _c(phi["enc_fwd_W"])
    cdef double[::1] fb = _c(phi["enc_fwd_b"])
    cdef double[:, ::1] bW = _c(phi["enc_bwd_W"])
    cdef double[::1] bb = _c(phi["enc_bwd_b"])
    cdef double[:, ::1] sW = _c(phi["sum_W"])
    cdef double[:, ::1] sU = _c(phi["sum_U"])
    cdef double[::1] sb = _c(phi["sum_b"])
    cdef double[::1] s_end = _c(phi["sum_end"])
    cdef double[:, ::1] Wz = _c(phi["W_z"])
    cdef double[:, ::1] Wd = _c(phi["W_d"])

    cdef Py_ssize_t K = dur_logits.shape[0], M = dur_logits.shape[1], N = K * M
    cdef Py_ssize_t H = h0.shape[1], E = fb.shape[0] // 4, Q = s_end.shape[0]
    cdef Py_ssize_t UD = m + 2 * E
    if noise.shape[0] != T or noise.shape[1] != N:
        raise ValueError(f"noise shape {(noise.shape[0], noise.shape[1])} != {(T, N)}")

    cdef Py_ssize_t t, i, j, k, kk, r, b, s, nb, st, ln
    cdef double acc, v, mx, tot

    # ---- probability tables ------------------------------------------------
    cdef double[::1] log_init = np.empty(K), p_init = np.empty(K)
    cdef double[:, ::1] log_trans = np.empty((K, K)), p_trans = np.empty((K, K))
    cdef double[:, ::1] log_dur = np.empty((K, M)), p_dur = np.empty((K, M))
    cdef double[:, ::1] masked = np.array(trans_logits, copy=True)
    if not self_transitions:
        for k in range(K):
            masked[k, k] += NEG_MASK
    log_softmax_row(init_logits, log_init, p_init)
    for k in range(K):
        log_softmax_row(masked[k], log_trans[k], p_trans[k])
        log_softmax_row(dur_logits[k], log_dur[k], p_dur[k])

    # ---- bidirectional LSTM encoder -------------------------------------
    cdef double[:, ::1] hf = np.zeros((T + 1, E)), cf = np.zeros((T + 1, E))
    cdef double[:, ::1] gf = np.empty((T, 4 * E))
    cdef double[:, ::1] hb = np.zeros((T + 1, E)), cb = np.zeros((T + 1, E))
    cdef double[:, ::1] gb = np.empty((T, 4 * E))
    cdef double[::1] pre = np.empty(4 * E)
    cdef double[::1] h_in, c_in
    if enc_state is not None:
        h_in = _c(enc_state[0])
        c_in = _c(enc_state[1])
        if h_in.shape[0] != E or c_in.shape[0] != E:
            raise ValueError(f"encoder state must have length {E}")
        hf[0, :] = h_in
        cf[0, :] = c_in
    for t in range(T):
        _lstm_step(x[t], hf[t], cf[t], fW, fb, pre, gf[t], hf[t + 1], cf[t + 1], m, E)
    for t in range(T - 1, -1, -1):
        _lstm_step(x[t], hb[t + 1], cb[t + 1], bW, bb, pre, gb[t], hb[t], cb[t], m, E)

    # ---- backward summaries ---------------------------------------------
    cdef double[:, ::1] Is = np.empty((T + 1, Q))
    cdef double[:, ::1] gr = np.empty((T, Q)), gz = np.empty((T, Q)), gn = np.empty((T, Q))
    cdef double[:, ::1] rp = np.empty((T, Q))
    cdef double[:, ::1] U = np.empty((T, UD))
    cdef double[::1] wu = np.empty(3 * Q)
    Is[T, :] = s_end
    for t in range(T - 1, -1, -1):
        for i in range(m):
            U[t, i] = x[t, i]
        for i in range(E):
            U[t, m + i] = hf[t + 1, i]
            U[t, m + E + i] = hb[t, i]
        for r in range(3 * Q):
            acc = sb[r]
            for i in range(UD):
                acc = acc + sW[r, i] * U[t, i]
            wu[r] = acc
        for i in range(Q):
            acc = wu[i]
            v = wu[Q + i]
            for j in range(Q):
                acc = acc + sU[i, j] * Is[t + 1, j]
                v = v + sU[Q + i, j] * Is[t + 1, j]
            gr[t, i] = sigm(acc)
            gz[t, i] = sigm(v)
        for i in range(Q):
            rp[t, i] = gr[t, i] * Is[t + 1, i]
        for i in range(Q):
            acc = wu[2 * Q + i]
            for j in range(Q):
                acc = acc + sU[2 * Q + i, j] * rp[t, j]
            gn[t, i] = tanh(acc)
            Is[t, i] = (1.0 - gz[t, i]) * gn[t, i] + gz[t, i] * Is[t + 1, i]

    # ---- posterior walk ---------------------------------------------------
    cdef long[::1] z = np.empty(T, dtype=np.int64)
    cdef long[::1] d = np.empty(T, dtype=np.int64)
    cdef long[::1] bt = np.empty(T, dtype=np.int64)
    cdef long[::1] blen = np.empty(T, dtype=np.int64)
    cdef double[:, ::1] Y = np.empty((T, N)), Yh = np.empty((T, N)), LP = np.empty((T, N))
    cdef double[:, ::1] PZ = np.empty((T, K)), PD = np.empty((T, M))
    cdef double[::1] lz = np.empty(K), ld = np.empty(M), lsz = np.empty(K), lsd = np.empty(M)
    cdef Py_ssize_t pick
    nb = 0
    for t in range(T):
        if t > 0 and d[t - 1] > 1:
            z[t] = z[t - 1]
            d[t] = d[t - 1] - 1
            continue
        for k in range(K):
            acc = 0.0
            for i in range(Q):
                acc = acc + Wz[i, k] * Is[t, i]
            lz[k] = acc
        if not self_transitions and t > 0:
            lz[z[t - 1]] += NEG_MASK
        for j in range(M):
            acc = 0.0
            for i in range(Q):
                acc = acc + Wd[i, j] * Is[t, i]
            ld[j] = acc
        log_softmax_row(lz, lsz, PZ[nb])
        log_softmax_row(ld, lsd, PD[nb])
        pick = 0
        mx = lsz[0] + lsd[0] + noise[t, 0]
        for k in range(K):
            for j in range(M):
                LP[nb, k * M + j] = lsz[k] + lsd[j]
                v = LP[nb, k * M + j] + noise[t, k * M + j]
                if v > mx:
                    mx = v
                    pick = k * M + j
        tot = 0.0
        for i in range(N):
            Y[nb, i] = exp((LP[nb, i] + noise[t, i] - mx) / tau)
            tot += Y[nb, i]
        for i in range(N):
            Y[nb, i] /= tot
            if relaxed:
                Yh[nb, i] = Y[nb, i]
            else:
                Yh[nb, i] = 1.0 if i == pick else 0.0
        z[t] = pick // M
        d[t] = pick % M + 1
        bt[nb] = t
        blen[nb] = d[t] if d[t] < T - t else T - t
        nb += 1

    # ---- objective ----------------------------------------------------------
    cdef double[:, ::1] Wst = np.zeros((nb, K))
    for b in range(nb):
        for k in range(K):
            acc = 0.0
            for j in range(M):
                acc = acc + Yh[b, k * M + j]
            Wst[b, k] = acc

    cdef double structural = 0.0, log_q = 0.0, emission = 0.0
    for b in range(nb):
        for i in range(N):
            structural += Yh[b, i] * log_dur[i // M, i % M]
            log_q += Yh[b, i] * LP[b, i]
        if b == 0:
            for k in range(K):
                structural += Wst[b, k] * log_init[k]
        else:
            for kk in range(K):
                acc = 0.0
                for k in range(K):
                    acc = acc + log_trans[kk, k] * Wst[b, k]
                structural += Wst[b - 1, kk] * acc

    cdef double[:, ::1] mWx = np.empty((H, m)), mWh = np.empty((H, H)), mWmu = np.empty((m, H)), mWsig = np.empty((m, H))
    cdef double[::1] mbh = np.empty(H), mh0 = np.empty(H), mbmu = np.empty(m), mbsig = np.empty(m)
    cdef double[:, ::1] hs = np.empty((T, H)), mus = np.empty((T, m)), lvs = np.empty((T, m))
    cdef double diff
    for b in range(nb):
        st = bt[b]
        ln = blen[b]
        _mix_all(Wst[b], W_x, W_h, b_h, h0, W_mu, b_mu, W_sig, b_sig,
                 mWx, mWh, mbh, mh0, mWmu, mbmu, mWsig, mbsig)
        for t in range(st, st + ln):
            for i in range(H):
                acc = mbh[i]
                if t > st:
                    for j in range(m):
                        acc = acc + mWx[i, j] * x[t - 1, j]
                    for j in range(H):
                        acc = acc + mWh[i, j] * hs[t - 1, j]
                else:
                    for j in range(H):
                        acc = acc + mWh[i, j] * mh0[j]
                hs[t, i] = tanh(acc)
            for j in range(m):
                acc = mbmu[j]
                v = mbsig[j]
                for i in range(H):
                    acc = acc + mWmu[j, i] * hs[t, i]
                    v = v + mWsig[j, i] * hs[t, i]
                mus[t, j] = acc
                lvs[t, j] = v
                diff = x[t, j] - acc
                emission += -0.5 * (LOG_2PI + v + diff * diff * exp(-v))

    cdef double log_joint = structural + emission
    cdef double F = log_joint - log_q
    zs = np.asarray(z).copy()
    ds = np.asarray(d).copy()
    final_state = (np.asarray(hf[T]).copy(), np.asarray(cf[T]).copy())
    if not need_grad:
        return F, log_joint, log_q, zs, ds, None, None, final_state

    # =========================================================================
    # backward pass (adjoint of F)
    # =========================================================================
    g_theta = {name: np.zeros(np.shape(theta[name])) for name in theta}
    g_phi = {name: np.zeros(np.shape(phi[name])) for name in phi}
    cdef double[::1] d_init_l = g_theta["init_logits"]
    cdef double[:, ::1] d_trans_l = g_theta["trans_logits"]
    cdef double[:, ::1] d_dur_l = g_theta["dur_logits"]
    cdef double[:, :, ::1] dW_x = g_theta["W_x"]
    cdef double[:, :, ::1] dW_h = g_theta["W_h"]
    cdef double[:, ::1] db_h = g_theta["b_h"]
    cdef double[:, ::1] dh0 = g_theta["h0"]
    cdef double[:, :, ::1] dW_mu = g_theta["W_mu"]
    cdef double[:, ::1] db_mu = g_theta["b_mu"]
    cdef double[:, :, ::1] dW_sig = g_theta["W_sigma"]
    cdef double[:, ::1] db_sig = g_theta["b_sigma"]

    cdef double[::1] d_log_init = np.zeros(K)
    cdef double[:, ::1] d_log_trans = np.zeros((K, K)), d_log_dur = np.zeros((K, M))
    cdef double[:, ::1] dYh = np.zeros((nb, N)), dW = np.zeros((nb, K)), dLP = np.zeros((nb, N))

    for b in range(nb):
        for i in range(N):
            dYh[b, i] += log_dur[i // M, i % M] - LP[b, i]
            d_log_dur[i // M, i % M] += Yh[b, i]
            dLP[b, i] -= Yh[b, i]
        if b == 0:
            for k in range(K):
                dW[b, k] += log_init[k]
                d_log_init[k] += Wst[b, k]
        else:
            for k in range(K):
                for kk in range(K):
                    dW[b, k] += Wst[b - 1, kk] * log_trans[kk, k]
                    dW[b - 1, kk] += Wst[b, k] * log_trans[kk, k]
                    d_log_trans[kk, k] += Wst[b - 1, kk] * Wst[b, k]

    # emissions, segment by segment
    cdef double[:, ::1] gWx = np.empty((H, m)), gWh = np.empty((H, H)), gWmu = np.empty((m, H)), gWsig = np.empty((m, H))
    cdef double[::1] gbh = np.empty(H), gh0 = np.empty(H), gbmu = np.empty(m), gbsig = np.empty(m)
    cdef double[::1] dh = np.empty(H), dnext = np.zeros(H), da = np.empty(H), dmu = np.empty(m), dlv = np.empty(m)
    cdef double iv, w
    for b in range(nb):
        st = bt[b]
        ln = blen[b]
        _mix_all(Wst[b], W_x, W_h, b_h, h0, W_mu, b_mu, W_sig, b_sig,
                 mWx, mWh, mbh, mh0, mWmu, mbmu, mWsig, mbsig)
        gWx[:, :] = 0.0
        gWh[:, :] = 0.0
        gWmu[:, :] = 0.0
        gWsig[:, :] = 0.0
        gbh[:] = 0.0
        gh0[:] = 0.0
        gbmu[:] = 0.0
        gbsig[:] = 0.0
        dnext[:] = 0.0
        for t in range(st + ln - 1, st - 1, -1):
            for j in range(m):
                diff = x[t, j] - mus[t, j]
                iv = exp(-lvs[t, j])
                dmu[j] = diff * iv
                dlv[j] = -0.5 + 0.5 * diff * diff * iv
                gbmu[j] += dmu[j]
                gbsig[j] += dlv[j]
                for i in range(H):
                    gWmu[j, i] += dmu[j] * hs[t, i]
                    gWsig[j, i] += dlv[j] * hs[t, i]
            for i in range(H):
                acc = dnext[i]
                for j in range(m):
                    acc = acc + mWmu[j, i] * dmu[j] + mWsig[j, i] * dlv[j]
                da[i] = acc * (1.0 - hs[t, i] * hs[t, i])
                gbh[i] += da[i]
            for i in range(H):
                if t > st:
                    for j in range(m):
                        gWx[i, j] += da[i] * x[t - 1, j]
                    for j in range(H):
                        gWh[i, j] += da[i] * hs[t - 1, j]
                else:
                    for j in range(H):
                        gWh[i, j] += da[i] * mh0[j]
            for j in range(H):
                acc = 0.0
                for i in range(H):
                    acc = acc + mWh[i, j] * da[i]
                dnext[j] = acc
        for i in range(H):
            gh0[i] = dnext[i]
        # mixture adjoints: banks get w_k * g, weights get <bank_k, g>
        for k in range(K):
            w = Wst[b, k]
            acc = 0.0
            for i in range(H):
                for j in range(m):
                    dW_x[k, i, j] += w * gWx[i, j]
                    acc = acc + W_x[k, i, j] * gWx[i, j]
                for j in range(H):
                    dW_h[k, i, j] += w * gWh[i, j]
                    acc = acc + W_h[k, i, j] * gWh[i, j]
                db_h[k, i] += w * gbh[i]
                acc = acc + b_h[k, i] * gbh[i]
                dh0[k, i] += w * gh0[i]
                acc = acc + h0[k, i] * gh0[i]
            for j in range(m):
                for i in range(H):
                    dW_mu[k, j, i] += w * gWmu[j, i]
                    acc = acc + W_mu[k, j, i] * gWmu[j, i]
                    dW_sig[k, j, i] += w * gWsig[j, i]
                    acc = acc + W_sig[k, j, i] * gWsig[j, i]
                db_mu[k, j] += w * gbmu[j]
                acc = acc + b_mu[k, j] * gbmu[j]
                db_sig[k, j] += w * gbsig[j]
                acc = acc + b_sig[k, j] * gbsig[j]
            dW[b, k] += acc

    # probability-table logits
    softmax_backward_row(d_log_init, p_init, d_init_l)
    for k in range(K):
        softmax_backward_row(d_log_trans[k], p_trans[k], d_trans_l[k])
        softmax_backward_row(d_log_dur[k], p_dur[k], d_dur_l[k])

    # boundary samples -> posterior logits -> heads
    cdef double[:, ::1] dWz = g_phi["W_z"], dWd = g_phi["W_d"]
    cdef double[:, ::1] dI = np.zeros((T + 1, Q))
    cdef double[::1] dlsz = np.empty(K), dlsd = np.empty(M), dlz = np.empty(K), dld = np.empty(M)
    for b in range(nb):
        t = bt[b]
        for k in range(K):
            for j in range(M):
                dYh[b, k * M + j] += dW[b, k]
        acc = 0.0
        for i in range(N):
            acc = acc + Y[b, i] * dYh[b, i]
        for i in range(N):
            dLP[b, i] += Y[b, i] * (dYh[b, i] - acc) / tau
        dlsz[:] = 0.0
        dlsd[:] = 0.0
        for k in range(K):
            for j in range(M):
                dlsz[k] += dLP[b, k * M + j]
                dlsd[j] += dLP[b, k * M + j]
        dlz[:] = 0.0
        dld[:] = 0.0
        softmax_backward_row(dlsz, PZ[b], dlz)
        softmax_backward_row(dlsd, PD[b], dld)
        for i in range(Q):
            acc = 0.0
            for k in range(K):
                dWz[i, k] += Is[t, i] * dlz[k]
                acc = acc + Wz[i, k] * dlz[k]
            for j in range(M):
                dWd[i, j] += Is[t, i] * dld[j]
                acc = acc + Wd[i, j] * dld[j]
            dI[t, i] += acc

    # summary recurrence, t = 0 .. T-1 (reverse of its evaluation order)
    cdef double[:, ::1] dsW = g_phi["sum_W"], dsU = g_phi["sum_U"]
    cdef double[::1] dsb = g_phi["sum_b"], dsend = g_phi["sum_end"]
    cdef double[::1] dwu = np.empty(3 * Q), drp = np.empty(Q), dprev = np.empty(Q)
    cdef double[:, ::1] dhf = np.zeros((T + 1, E)), dhb = np.zeros((T + 1, E))
    cdef double dn, dzg, prev
    for t in range(T):
        for i in range(Q):
            prev = Is[t + 1, i]
            dn = dI[t, i] * (1.0 - gz[t, i])
            dzg = dI[t, i] * (prev - gn[t, i])
            dprev[i] = dI[t, i] * gz[t, i]
            dwu[2 * Q + i] = dn * (1.0 - gn[t, i] * gn[t, i])
            dwu[Q + i] = dzg * gz[t, i] * (1.0 - gz[t, i])
        for j in range(Q):
            acc = 0.0
            for i in range(Q):
                acc = acc + sU[2 * Q + i, j] * dwu[2 * Q + i]
            drp[j] = acc
        for i in range(Q):
            dwu[i] = drp[i] * Is[t + 1, i] * gr[t, i] * (1.0 - gr[t, i])
            dprev[i] += drp[i] * gr[t, i]
        for j in range(Q):
            acc = 0.0
            for i in range(Q):
                acc = acc + sU[i, j] * dwu[i] + sU[Q + i, j] * dwu[Q + i]
            dprev[j] += acc
        for i in range(Q):
            for j in range(Q):
                dsU[i, j] += dwu[i] * Is[t + 1, j]
                dsU[Q + i, j] += dwu[Q + i] * Is[t + 1, j]
                dsU[2 * Q + i, j] += dwu[2 * Q + i] * rp[t, j]
        for r in range(3 * Q):
            dsb[r] += dwu[r]
            for i in range(UD):
                dsW[r, i] += dwu[r] * U[t, i]
        for i in range(UD):
            if i < m:
                continue
            acc = 0.0
            for r in range(3 * Q):
                acc = acc + sW[r, i] * dwu[r]
            if i < m + E:
                dhf[t + 1, i - m] += acc
            else:
                dhb[t, i - m - E] += acc
        for i in range(Q):
            dI[t + 1, i] += dprev[i]
    for i in range(Q):
        dsend[i] += dI[T, i]

    # encoder LSTMs
    cdef double[::1] dh_c = np.zeros(E), dc_c = np.zeros(E), dpre = np.empty(4 * E)
    cdef double[:, ::1] dfW = g_phi["enc_fwd_W"], dbW = g_phi["enc_bwd_W"]
    cdef double[::1] dfb = g_phi["enc_fwd_b"], dbb = g_phi["enc_bwd_b"]
    for t in range(T - 1, -1, -1):
        _lstm_back(x[t], hf[t], cf[t], cf[t + 1], gf[t], dhf[t + 1], dh_c, dc_c, dpre, fW, dfW, dfb, m, E)
    dh_c[:] = 0.0
    dc_c[:] = 0.0
    for t in range(T):
        _lstm_back(x[t], hb[t + 1], cb[t + 1], cb[t], gb[t], dhb[t], dh_c, dc_c, dpre, bW, dbW, dbb, m, E)

    return F, log_joint, log_q, zs, ds, g_theta, g_phi, final_state


cdef void _lstm_step(double[::1] xt, double[::1] h, double[::1] c, double[:, ::1] W, double[::1] bias,
                     double[::1] pre, double[::1] gates, double[::1] h_out, double[::1] c_out,
                     Py_ssize_t m, Py_ssize_t E) noexcept nogil:
    cdef Py_ssize_t r, i
    cdef double acc
    for r in range(4 * E):
        acc = bias[r]
        for i in range(m):
            acc = acc + W[r, i] * xt[i]
        for i in range(E):
            acc = acc + W[r, m + i] * h[i]
        pre[r] = acc
    for i in range(E):
        gates[i] = sigm(pre[i])
        gates[E + i] = sigm(pre[E + i])
        gates[2 * E + i] = tanh(pre[2 * E + i])
        gates[3 * E + i] = sigm(pre[3 * E + i])
        c_out[i] = gates[E + i] * c[i] + gates[i] * gates[2 * E + i]
        h_out[i] = gates[3 * E + i] * tanh(c_out[i])


cdef void _lstm_back(double[::1] xt, double[::1] h_prev, double[::1] c_prev, double[::1] c,
                     double[::1] gates, double[::1] dh_in, double[::1] dh_c, double[::1] dc_c,
                     double[::1] dpre, double[:, ::1] W, double[:, ::1] dW, double[::1] db,
                     Py_ssize_t m, Py_ssize_t E) noexcept nogil:
    cdef Py_ssize_t r, i
    cdef double dh, tc, dc, gi, gfv, gg, go, acc
    for i in range(E):
        dh = dh_in[i] + dh_c[i]
        tc = tanh(c[i])
        gi = gates[i]
        gfv = gates[E + i]
        gg = gates[2 * E + i]
        go = gates[3 * E + i]
        dc = dc_c[i] + dh * go * (1.0 - tc * tc)
        dpre[3 * E + i] = dh * tc * go * (1.0 - go)
        dpre[i] = dc * gg * gi * (1.0 - gi)
        dpre[E + i] = dc * c_prev[i] * gfv * (1.0 - gfv)
        dpre[2 * E + i] = dc * gi * (1.0 - gg * gg)
        dc_c[i] = dc * gfv
    for r in range(4 * E):
        db[r] += dpre[r]
        for i in range(m):
            dW[r, i] += dpre[r] * xt[i]
        for i in range(E):
            dW[r, m + i] += dpre[r] * h_prev[i]
    for i in range(E):
        acc = 0.0
        for r in range(4 * E):
            acc = acc + W[r, m + i] * dpre[r]
        dh_c[i] = acc


cdef void _mix_all(double[::1] w, double[:, :, ::1] W_x, double[:, :, ::1] W_h, double[:, ::1] b_h,
                   double[:, ::1] h0, double[:, :, ::1] W_mu, double[:, ::1] b_mu,
                   double[:, :, ::1] W_sig, double[:, ::1] b_sig,
                   double[:, ::1] mWx, double[:, ::1] mWh, double[::1] mbh, double[::1] mh0,
                   double[:, ::1] mWmu, double[::1] mbmu, double[:, ::1] mWsig, double[::1] mbsig) noexcept nogil:
    cdef Py_ssize_t K = w.shape[0], H = mWh.shape[0], m = mWx.shape[1], k, i, j
    cdef double wk
    mWx[:, :] = 0.0
    mWh[:, :] = 0.0
    mbh[:] = 0.0
    mh0[:] = 0.0
    mWmu[:, :] = 0.0
    mbmu[:] = 0.0
    mWsig[:, :] = 0.0
    mbsig[:] = 0.0
    for k in range(K):
        wk = w[k]
        for i in range(H):
            for j in range(m):
                mWx[i, j] += wk * W_x[k, i, j]
            for j in range(H):
                mWh[i, j] += wk * W_h[k, i, j]
            mbh[i] += wk * b_h[k, i]
            mh0[i] += wk * h0[k, i]
        for j in range(m):
            for i in range(H):
                mWmu[j, i] += wk * W_mu[k, j, i]
                mWsig[j, i] += wk * W_sig[k, j, i]
            mbmu[j] += wk * b_mu[k, j]
            mbsig[j] += wk * b_sig[k, j]
