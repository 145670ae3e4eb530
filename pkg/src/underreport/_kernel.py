"""Compiled single-site Metropolis-within-Gibbs sweeps.

The state is a flat vector laid out by ``model.Layout``; ``off`` holds the
start index of each block in that order. Per-area caches (log relative
risk before clamping, log reporting probability, log-likelihood term) are
rebuilt from scratch once per sweep so incremental updates never drift
for more than one sweep.
"""

import math

import numpy as np
from numba import njit

# iopt slots
MECH, USE_LIK, N_ITER, BURN, THIN, WINDOW, CHECK, N_AREA, N_COV, N_K, N_DEG = range(11)
# pri slots
B0M, B0V, BV, A0M, A0V, AV, VV, G1UP, GUP, CLAMP, TARGET = range(11)
# off slots
O_B0, O_B, O_SU, O_SS, O_U, O_S, O_G, O_A0, O_A, O_SD, O_D = range(11)
# stats slots
ST_DRIFT, ST_CLAMP, ST_CHECKS, ST_BAD = range(4)

LOG_EPS_CAP = math.log1p(-1e-12)
LOG_2PI = math.log(2.0 * math.pi)
LOG_HN = math.log(2.0) - 0.5 * LOG_2PI


@njit(cache=True, nogil=True)
def _clamp(v, c):
    if v > c:
        return c
    if v < -c:
        return -c
    return v


@njit(cache=True, nogil=True)
def _log_expit(z):
    if z >= 0:
        r = -math.log1p(math.exp(-z))
    else:
        r = z - math.log1p(math.exp(z))
    return min(r, LOG_EPS_CAP)


@njit(cache=True, nogil=True)
def _ll(y, lgy, lm):
    return y * lm - math.exp(lm) - lgy


@njit(cache=True, nogil=True)
def _norm(x, m, v):
    return -0.5 * (LOG_2PI + math.log(v)) - (x - m) * (x - m) / (2.0 * v)


@njit(cache=True, nogil=True)
def _half_norm(x, v):
    return LOG_HN - 0.5 * math.log(v) - x * x / (2.0 * v)


@njit(cache=True, nogil=True)
def _recenter(x, off, comp, comp_size, n_comp, n):
    sums = np.zeros(n_comp)
    for i in range(n):
        sums[comp[i]] += x[off[O_S] + i]
    for i in range(n):
        x[off[O_S] + i] -= sums[comp[i]] / comp_size[comp[i]]


@njit(cache=True, nogil=True)
def _refresh(x, off, iopt, pri, y, lgy, loge, X, labels, G, eta, reta, leps, ll):
    """Rebuild caches; returns (sum of log-likelihood, clamped count, max |eta|)."""
    n, p, d = iopt[N_AREA], iopt[N_COV], iopt[N_DEG]
    c = pri[CLAMP]
    nclamp = 0
    emax = 0.0
    tot = 0.0
    for i in range(n):
        e = x[off[O_B0]] + x[off[O_U] + i] + x[off[O_S] + i]
        for k in range(p):
            e += X[i, k] * x[off[O_B] + k]
        eta[i] = e
        if abs(e) > c and iopt[USE_LIK]:
            nclamp += 1
        if abs(e) > emax:
            emax = abs(e)
        if iopt[MECH] == 0:
            leps[i] = math.log(1.0 - x[off[O_G] + labels[i]])
        else:
            r = x[off[O_A0]] + x[off[O_D] + i]
            for k in range(d):
                r += G[i, k] * x[off[O_A] + k]
            reta[i] = r
            if abs(r) > c and iopt[USE_LIK]:
                nclamp += 1
            leps[i] = _log_expit(_clamp(r, c))
        if iopt[USE_LIK]:
            ll[i] = _ll(y[i], lgy[i], loge[i] + _clamp(e, c) + leps[i])
            tot += ll[i]
        else:
            ll[i] = 0.0
    return tot, nclamp, emax


@njit(cache=True, nogil=True)
def _log_prior(x, off, iopt, pri, ei, ej, n_comp):
    n, p, d, K = iopt[N_AREA], iopt[N_COV], iopt[N_DEG], iopt[N_K]
    su, ss = x[off[O_SU]], x[off[O_SS]]
    if su <= 0 or ss <= 0:
        return -np.inf
    lp = _norm(x[off[O_B0]], pri[B0M], pri[B0V])
    for k in range(p):
        lp += _norm(x[off[O_B] + k], 0.0, pri[BV])
    for i in range(n):
        lp += _norm(x[off[O_U] + i], 0.0, su)
    tau = 1.0 / ss
    q = 0.0
    for m in range(ei.shape[0]):
        df = x[off[O_S] + ei[m]] - x[off[O_S] + ej[m]]
        q += df * df
    lp += 0.5 * (n - n_comp) * math.log(tau) - 0.5 * tau * q
    lp += _half_norm(su, pri[VV]) + _half_norm(ss, pri[VV])
    if iopt[MECH] == 0:
        g0 = x[off[O_G]]
        if g0 < 0 or g0 > pri[G1UP]:
            return -np.inf
        lp -= math.log(pri[G1UP])
        for j in range(1, K):
            lo = x[off[O_G] + j - 1]
            g = x[off[O_G] + j]
            if g < lo or g >= pri[GUP]:
                return -np.inf
            lp -= math.log(pri[GUP] - lo)
        if x[off[O_G] + K - 1] >= pri[GUP]:
            return -np.inf
    else:
        sd = x[off[O_SD]]
        if sd <= 0:
            return -np.inf
        lp += _norm(x[off[O_A0]], pri[A0M], pri[A0V])
        for k in range(d):
            lp += _norm(x[off[O_A] + k], 0.0, pri[AV])
        for i in range(n):
            lp += _norm(x[off[O_D] + i], 0.0, sd)
        lp += _half_norm(sd, pri[VV])
    return lp


@njit(cache=True, nogil=True)
def _accept(rng, delta):
    if delta >= 0:
        return True
    if not delta > -np.inf:
        return False
    return math.log(rng.random()) < delta


@njit(cache=True, nogil=True)
def run_sweeps(rng, x, scale, iopt, pri, off, y, lgy, loge, X, G, labels,
               nb_ptr, nb_idx, ei, ej, comp, comp_size, cm_ptr, cm_idx, n_comp,
               cl_ptr, cl_idx, draws, lls, lps, acc_post, tries_post, stats):
    n, p, d, K = iopt[N_AREA], iopt[N_COV], iopt[N_DEG], iopt[N_K]
    c = pri[CLAMP]
    target = pri[TARGET]
    use_lik = iopt[USE_LIK] != 0
    pogit = iopt[MECH] == 1
    n_iter, burn, thin = iopt[N_ITER], iopt[BURN], iopt[THIN]
    window, check = iopt[WINDOW], iopt[CHECK]
    P = x.shape[0]

    eta = np.zeros(n)
    reta = np.zeros(n)
    leps = np.zeros(n)
    ll = np.zeros(n)
    tmp = np.zeros(n)
    sm = np.zeros(n_comp)
    sy = np.zeros(n_comp)
    for i in range(n):
        sy[comp[i]] += y[i]
    acc = np.zeros(P)
    tries = np.zeros(P)
    batch = 0

    _recenter(x, off, comp, comp_size, n_comp, n)
    lik, ncl, emax = _refresh(x, off, iopt, pri, y, lgy, loge, X, labels, G, eta, reta, leps, ll)
    lp = _log_prior(x, off, iopt, pri, ei, ej, n_comp) + lik
    row = 0

    for it in range(1, n_iter + 1):
        # -- intercept and covariate effects
        for k in range(-1, p):
            idx = off[O_B0] if k < 0 else off[O_B] + k
            dd = scale[idx] * rng.standard_normal()
            old = x[idx]
            if k < 0:
                dprior = _norm(old + dd, pri[B0M], pri[B0V]) - _norm(old, pri[B0M], pri[B0V])
            else:
                dprior = _norm(old + dd, 0.0, pri[BV]) - _norm(old, 0.0, pri[BV])
            dlik = 0.0
            if use_lik:
                for i in range(n):
                    step = dd if k < 0 else dd * X[i, k]
                    tmp[i] = _ll(y[i], lgy[i], loge[i] + _clamp(eta[i] + step, c) + leps[i])
                    dlik += tmp[i] - ll[i]
            tries[idx] += 1
            if _accept(rng, dprior + dlik):
                acc[idx] += 1
                x[idx] = old + dd
                lp += dprior + dlik
                for i in range(n):
                    eta[i] += dd if k < 0 else dd * X[i, k]
                    if abs(eta[i]) > emax:
                        emax = abs(eta[i])
                    if use_lik:
                        ll[i] = tmp[i]

        # -- iid local effects
        su = x[off[O_SU]]
        for i in range(n):
            idx = off[O_U] + i
            dd = scale[idx] * rng.standard_normal()
            old = x[idx]
            dprior = -((old + dd) ** 2 - old * old) / (2.0 * su)
            nl = 0.0
            dlik = 0.0
            if use_lik:
                nl = _ll(y[i], lgy[i], loge[i] + _clamp(eta[i] + dd, c) + leps[i])
                dlik = nl - ll[i]
            tries[idx] += 1
            if _accept(rng, dprior + dlik):
                acc[idx] += 1
                x[idx] = old + dd
                eta[i] += dd
                if abs(eta[i]) > emax:
                    emax = abs(eta[i])
                ll[i] = nl
                lp += dprior + dlik

        # -- spatial effects: moves stay on the per-component sum-to-zero plane
        tau = 1.0 / x[off[O_SS]]
        if use_lik:
            for m in range(n_comp):
                sm[m] = 0.0
            for i in range(n):
                sm[comp[i]] += math.exp(loge[i] + _clamp(eta[i], c) + leps[i])
        for i in range(n):
            cc = comp[i]
            nc = comp_size[cc]
            if nc < 2:
                continue
            idx = off[O_S] + i
            dd = scale[idx] * rng.standard_normal()
            si = x[idx]
            nbs = 0.0
            for t in range(nb_ptr[i], nb_ptr[i + 1]):
                nbs += x[off[O_S] + nb_idx[t]]
            deg = nb_ptr[i + 1] - nb_ptr[i]
            dprior = -0.5 * tau * (2.0 * dd * (deg * si - nbs) + deg * dd * dd)
            sh_i = dd * (1.0 - 1.0 / nc)
            sh_o = -dd / nc
            dlik = 0.0
            if use_lik:
                if emax + abs(sh_o) < c and abs(eta[i]) + abs(sh_i) < c:
                    lm_i = loge[i] + eta[i] + leps[i]
                    mu_i = math.exp(lm_i)
                    dlik = _ll(y[i], lgy[i], lm_i + sh_i) - ll[i]
                    dlik += sh_o * (sy[cc] - y[i]) - (math.exp(sh_o) - 1.0) * (sm[cc] - mu_i)
                else:
                    for t in range(cm_ptr[cc], cm_ptr[cc + 1]):
                        j = cm_idx[t]
                        sh = sh_i if j == i else sh_o
                        dlik += _ll(y[j], lgy[j], loge[j] + _clamp(eta[j] + sh, c) + leps[j]) - ll[j]
            tries[idx] += 1
            if _accept(rng, dprior + dlik):
                acc[idx] += 1
                lp += dprior + dlik
                smc = 0.0
                for t in range(cm_ptr[cc], cm_ptr[cc + 1]):
                    j = cm_idx[t]
                    sh = sh_i if j == i else sh_o
                    x[off[O_S] + j] += sh
                    eta[j] += sh
                    if abs(eta[j]) > emax:
                        emax = abs(eta[j])
                    if use_lik:
                        lm = loge[j] + _clamp(eta[j], c) + leps[j]
                        ll[j] = _ll(y[j], lgy[j], lm)
                        smc += math.exp(lm)
                sm[cc] = smc

        # -- variances
        nv = 3 if pogit else 2
        for v in range(nv):
            if v == 0:
                idx, blk, m0 = off[O_SU], off[O_U], n
            elif v == 1:
                idx, blk, m0 = off[O_SS], off[O_S], n
            else:
                idx, blk, m0 = off[O_SD], off[O_D], n
            old = x[idx]
            new = old + scale[idx] * rng.standard_normal()
            tries[idx] += 1
            if new <= 0:
                continue
            dprior = _half_norm(new, pri[VV]) - _half_norm(old, pri[VV])
            if v == 1:
                q = 0.0
                for m in range(ei.shape[0]):
                    df = x[blk + ei[m]] - x[blk + ej[m]]
                    q += df * df
                dprior += 0.5 * (n - n_comp) * (math.log(old) - math.log(new)) \
                    - 0.5 * q * (1.0 / new - 1.0 / old)
            else:
                ss = 0.0
                for i in range(m0):
                    ss += x[blk + i] * x[blk + i]
                dprior += -0.5 * m0 * math.log(new / old) - 0.5 * ss * (1.0 / new - 1.0 / old)
            if _accept(rng, dprior):
                acc[idx] += 1
                x[idx] = new
                lp += dprior

        # -- reporting parameters
        if not pogit:
            for j in range(K):
                idx = off[O_G] + j
                old = x[idx]
                new = old + scale[idx] * rng.standard_normal()
                lo = x[idx - 1] if j > 0 else 0.0
                hi = x[idx + 1] if j < K - 1 else pri[GUP]
                if j == 0 and pri[G1UP] < hi:
                    hi = pri[G1UP]
                tries[idx] += 1
                if not (lo < new < hi) or (j == 0 and new <= 0.0):
                    continue
                dprior = 0.0
                if j < K - 1:
                    dprior = math.log(pri[GUP] - old) - math.log(pri[GUP] - new)
                dlik = 0.0
                nle = math.log(1.0 - new)
                if use_lik:
                    for t in range(cl_ptr[j], cl_ptr[j + 1]):
                        a = cl_idx[t]
                        tmp[a] = _ll(y[a], lgy[a], loge[a] + _clamp(eta[a], c) + nle)
                        dlik += tmp[a] - ll[a]
                if _accept(rng, dprior + dlik):
                    acc[idx] += 1
                    x[idx] = new
                    lp += dprior + dlik
                    for t in range(cl_ptr[j], cl_ptr[j + 1]):
                        a = cl_idx[t]
                        leps[a] = nle
                        if use_lik:
                            ll[a] = tmp[a]
        else:
            for k in range(-1, d):
                idx = off[O_A0] if k < 0 else off[O_A] + k
                old = x[idx]
                dd = scale[idx] * rng.standard_normal()
                if k < 0:
                    dprior = _norm(old + dd, pri[A0M], pri[A0V]) - _norm(old, pri[A0M], pri[A0V])
                else:
                    dprior = _norm(old + dd, 0.0, pri[AV]) - _norm(old, 0.0, pri[AV])
                dlik = 0.0
                if use_lik:
                    for i in range(n):
                        step = dd if k < 0 else dd * G[i, k]
                        tmp[i] = _ll(y[i], lgy[i], loge[i] + _clamp(eta[i], c)
                                     + _log_expit(_clamp(reta[i] + step, c)))
                        dlik += tmp[i] - ll[i]
                tries[idx] += 1
                if _accept(rng, dprior + dlik):
                    acc[idx] += 1
                    x[idx] = old + dd
                    lp += dprior + dlik
                    for i in range(n):
                        reta[i] += dd if k < 0 else dd * G[i, k]
                        leps[i] = _log_expit(_clamp(reta[i], c))
                        if use_lik:
                            ll[i] = tmp[i]
            sd = x[off[O_SD]]
            for i in range(n):
                idx = off[O_D] + i
                old = x[idx]
                dd = scale[idx] * rng.standard_normal()
                dprior = -((old + dd) ** 2 - old * old) / (2.0 * sd)
                nle = _log_expit(_clamp(reta[i] + dd, c))
                nl = 0.0
                dlik = 0.0
                if use_lik:
                    nl = _ll(y[i], lgy[i], loge[i] + _clamp(eta[i], c) + nle)
                    dlik = nl - ll[i]
                tries[idx] += 1
                if _accept(rng, dprior + dlik):
                    acc[idx] += 1
                    x[idx] = old + dd
                    reta[i] += dd
                    leps[i] = nle
                    ll[i] = nl
                    lp += dprior + dlik

        # -- end of sweep bookkeeping
        _recenter(x, off, comp, comp_size, n_comp, n)
        lik, ncl, emax = _refresh(x, off, iopt, pri, y, lgy, loge, X, labels, G, eta, reta, leps, ll)
        stats[ST_CLAMP] += ncl

        if check > 0 and it % check == 0:
            fresh = _log_prior(x, off, iopt, pri, ei, ej, n_comp) + lik
            rel = abs(fresh - lp) / max(1.0, abs(fresh))
            if rel > stats[ST_DRIFT]:
                stats[ST_DRIFT] = rel
            if not (rel <= 1e-8):
                stats[ST_BAD] += 1
            stats[ST_CHECKS] += 1
            lp = fresh

        if it <= burn:
            if window > 0 and it % window == 0:
                batch += 1
                gain = 1.0 / math.sqrt(batch)
                for m in range(P):
                    if tries[m] > 0:
                        scale[m] *= math.exp(gain * (acc[m] / tries[m] - target))
                        acc[m] = 0.0
                        tries[m] = 0.0
            if it == burn:
                for m in range(P):
                    acc[m] = 0.0
                    tries[m] = 0.0
        elif (it - burn) % thin == 0:
            for m in range(P):
                draws[row, m] = x[m]
            if use_lik:
                for i in range(n):
                    lls[row, i] = ll[i]
            lps[row] = lp
            row += 1

    for m in range(P):
        acc_post[m] = acc[m]
        tries_post[m] = tries[m]
    return lp
