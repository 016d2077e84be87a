"""Compiled inner loops for the composite EL fit.

The optimizer works on a QR-whitened copy of the basis matrix (an
exact linear reparametrization; see drm.py for the map back), with
per-observation multiplicity weights so that bootstrap refits never
copy or re-sort the data.  Everything here is deterministic: plain
float64 arithmetic in a fixed order.
"""

import numpy as np
from numba import njit

STATUS_CONVERGED = 0
STATUS_MAXITER = 1
STATUS_SEPARATED = 2


@njit(cache=True)
def fgh(Q, pop, w, logrho, theta, want):
    """Weighted profile log composite EL with derivatives.

    want: 0 = value only, 1 = value+gradient, 2 = +negated Hessian.
    Returns (f, grad, neg_hessian); unrequested outputs are zero arrays.
    """
    N, q = Q.shape
    m = theta.shape[0]
    f = 0.0
    grad = np.zeros(m * q)
    Hneg = np.zeros((m * q, m * q))
    h = np.empty(m + 1)
    s = np.empty(m + 1)
    for i in range(N):
        wi = w[i]
        if wi == 0.0:
            continue
        smax = logrho[0]
        s[0] = logrho[0]
        for r in range(m):
            acc = logrho[r + 1]
            for j in range(q):
                acc += theta[r, j] * Q[i, j]
            s[r + 1] = acc
            if acc > smax:
                smax = acc
        tot = 0.0
        for r in range(m + 1):
            h[r] = np.exp(s[r] - smax)
            tot += h[r]
        k = pop[i]
        f -= wi * (smax + np.log(tot))
        if k > 0:
            f += wi * (s[k] - logrho[k])
        if want == 0:
            continue
        for r in range(m + 1):
            h[r] /= tot
        for r in range(m):
            c = wi * ((1.0 if k == r + 1 else 0.0) - h[r + 1])
            for j in range(q):
                grad[r * q + j] += c * Q[i, j]
        if want < 2:
            continue
        for r in range(m):
            hr = h[r + 1]
            for s2 in range(r, m):
                ww = wi * hr * ((1.0 if s2 == r else 0.0) - h[s2 + 1])
                for j in range(q):
                    wq = ww * Q[i, j]
                    for l in range(q):
                        Hneg[r * q + j, s2 * q + l] += wq * Q[i, l]
    if want == 2:
        for a in range(m * q):
            for b in range(a):
                Hneg[a, b] = Hneg[b, a]
    return f, grad, Hneg


@njit(cache=True)
def weighted_quantiles(Qs_sorted, w_sorted, values_sorted, logrho, theta, alphas):
    """Quantiles of every population's fitted CDF on a resample.

    Masses are w_i * h_r(y_i) walked in value order; the inversion uses
    the same relative 1e-9 slack as FittedCdf.quantile.  Returns an
    (m+1, len(alphas)) array of support values.
    """
    N, q = Qs_sorted.shape
    m = theta.shape[0]
    A = alphas.size
    U = np.empty((N, m + 1))
    tot = np.zeros(m + 1)
    s = np.empty(m + 1)
    for i in range(N):
        wi = w_sorted[i]
        if wi == 0.0:
            for r in range(m + 1):
                U[i, r] = 0.0
            continue
        smax = logrho[0]
        s[0] = logrho[0]
        for r in range(m):
            acc = logrho[r + 1]
            for j in range(q):
                acc += theta[r, j] * Qs_sorted[i, j]
            s[r + 1] = acc
            if acc > smax:
                smax = acc
        denom = 0.0
        for r in range(m + 1):
            s[r] = np.exp(s[r] - smax)
            denom += s[r]
        for r in range(m + 1):
            u = wi * s[r] / denom
            U[i, r] = u
            tot[r] += u
    out = np.empty((m + 1, A))
    for r in range(m + 1):
        for j in range(A):
            target = tot[r] * (alphas[j] - 1e-9)
            cum = 0.0
            val = values_sorted[N - 1]
            for i in range(N):
                cum += U[i, r]
                if cum >= target:
                    val = values_sorted[i]
                    break
            out[r, j] = val
    return out


@njit(cache=True)
def _chol_solve(A, b, out):
    """Solve A x = b for symmetric positive definite A; returns success flag."""
    n = A.shape[0]
    L = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            acc = A[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            if i == j:
                if acc <= 0.0 or not np.isfinite(acc):
                    return False
                L[i, i] = np.sqrt(acc)
            else:
                L[i, j] = acc / L[j, j]
    for i in range(n):
        acc = b[i]
        for k in range(i):
            acc -= L[i, k] * out[k]
        out[i] = acc / L[i, i]
    for i in range(n - 1, -1, -1):
        acc = out[i]
        for k in range(i + 1, n):
            acc -= L[k, i] * out[k]
        out[i] = acc / L[i, i]
    return True


@njit(cache=True)
def newton(Q, pop, w, logrho, theta0, tol_g, tol_c, max_iter, T, Tinv):
    """Damped Newton ascent of the (whitened) profile log composite EL.

    Convergence is declared on the gradient mapped back to the original
    basis scale (per block: T' g_white), with the constant-component
    scores additionally held below tol_c, which keeps the EL weights'
    distribution-function constraint residuals tight.  T is the upper
    triangular whitening map theta_white = T theta; Tinv its inverse,
    used for the unboundedness guard on the original-scale ||theta||.

    Returns (theta, f, iterations, gnorm, status, bad_block).
    """
    m, q = theta0.shape
    theta = theta0.copy()
    f, g, Hn = fgh(Q, pop, w, logrho, theta, 2)
    step = np.empty(m * q)
    status = STATUS_MAXITER
    bad_block = -1
    gnorm = 0.0
    best_gnorm = np.inf
    it = 0
    while it < max_iter:
        gnorm = 0.0
        gcon = 0.0
        for r in range(m):
            for j in range(q):
                # original-scale gradient component: sum_k T[k, j] g'[k]
                acc = 0.0
                for k in range(j + 1):
                    acc += T[k, j] * g[r * q + k]
                if abs(acc) > gnorm:
                    gnorm = abs(acc)
                if j == 0 and abs(acc) > gcon:
                    gcon = abs(acc)
        if gnorm <= tol_g and gcon <= tol_c:
            status = STATUS_CONVERGED
            break
        if gnorm < best_gnorm:
            best_gnorm = gnorm
        ok = _chol_solve(Hn, g, step)
        if not ok:
            ridge = 0.0
            for a in range(m * q):
                if Hn[a, a] > ridge:
                    ridge = Hn[a, a]
            Hr = Hn + (1e-10 * ridge + 1e-300) * np.eye(m * q)
            ok = _chol_solve(Hr, g, step)
        newton_step = ok
        if not ok:
            sc = max(gnorm, 1.0)
            for a in range(m * q):
                step[a] = g[a] / sc
        gd = 0.0
        smax = 0.0
        for a in range(m * q):
            gd += g[a] * step[a]
            if abs(step[a]) > smax:
                smax = abs(step[a])
        if not np.isfinite(gd) or gd <= 0.0:
            newton_step = False
            sc = max(gnorm, 1.0)
            for a in range(m * q):
                step[a] = g[a] / sc
            gd = gnorm * gnorm / sc
            smax = gnorm / sc
        # deep in the quadratic basin the objective improvement falls below
        # float resolution; a tiny full Newton step on a concave objective is
        # safe and keeps the gradient contracting, so skip the ascent test
        if newton_step and smax <= 1e-5:
            t = 1.0
        else:
            t = 1.0
            accepted = False
            while t > 1e-14:
                th_try = theta + t * step.reshape(m, q)
                ft, _, _ = fgh(Q, pop, w, logrho, th_try, 0)
                if np.isfinite(ft) and ft >= f + 1e-4 * t * gd:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                break
        theta = theta + t * step.reshape(m, q)
        f, g, Hn = fgh(Q, pop, w, logrho, theta, 2)
        it += 1
        # unboundedness guard: huge original-scale theta with no gradient progress
        tmax = 0.0
        tblock = -1
        for r in range(m):
            bmax = 0.0
            for j in range(q):
                # original theta component: sum_k Tinv[j, k] theta'_k
                acc = 0.0
                for k in range(q):
                    acc += Tinv[j, k] * theta[r, k]
                if abs(acc) > bmax:
                    bmax = abs(acc)
            if bmax > tmax:
                tmax = bmax
                tblock = r
        gnow = 0.0
        for r in range(m):
            for j in range(q):
                acc = 0.0
                for k in range(j + 1):
                    acc += T[k, j] * g[r * q + k]
                if abs(acc) > gnow:
                    gnow = abs(acc)
        if tmax > 1e3 and gnow >= best_gnorm:
            status = STATUS_SEPARATED
            bad_block = tblock
            break
    gnorm = 0.0
    for r in range(m):
        for j in range(q):
            acc = 0.0
            for k in range(j + 1):
                acc += T[k, j] * g[r * q + k]
            if abs(acc) > gnorm:
                gnorm = abs(acc)
    return theta, f, it, gnorm, status, bad_block
