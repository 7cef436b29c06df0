"""Compiled kernels for the block-parameterized objective and the cyclic solver.

Everything in here works on plain arrays:

    b      (K,)    diagonal value of Theta for members of each cluster
    R      (K, K)  symmetric between/within values, R[k, k] is the within value
    sizes  (K,)    cluster sizes as floats
    USU    (K, K)  u_k' S u_l
    trS    (K,)    tr S_k
    UWU    (K, K)  u_k' W u_l
    UZU    (K, K)  u_k' Z u_l (diagonal holds within-cluster sparsity weight)

The state of cluster ``k`` is a vector of length K + 1 ordered as
(b_kk, r_km for m != k in index order, r_kk).
"""

import numpy as np
from numba import njit

KINK_TOL = 1e-12
STEP_CAP = 1e6
_INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0


@njit(cache=True)
def smooth_abs(x, eps):
    ax = abs(x)
    if ax < eps:
        return (x * x + eps * eps) / (2.0 * eps), x / eps, 1.0 / eps
    if x > 0.0:
        return ax, 1.0, 0.0
    return ax, -1.0, 0.0


@njit(cache=True)
def cholesky(A):
    n = A.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        s = A[j, j]
        for q in range(j):
            s -= L[j, q] * L[j, q]
        if not (s > 0.0):
            return L, False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            t = A[i, j]
            for q in range(j):
                t -= L[i, q] * L[j, q]
            L[i, j] = t / L[j, j]
    return L, True


@njit(cache=True)
def chol_solve(L, rhs):
    n = L.shape[0]
    y = np.empty(n)
    for i in range(n):
        t = rhs[i]
        for q in range(i):
            t -= L[i, q] * y[q]
        y[i] = t / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        t = y[i]
        for q in range(i + 1, n):
            t -= L[q, i] * x[q]
        x[i] = t / L[i, i]
    return x


@njit(cache=True)
def chol_inverse(L):
    """(L L')^-1 from the lower Cholesky factor, via the triangular inverse."""
    n = L.shape[0]
    Li = np.zeros((n, n))
    for j in range(n):
        Li[j, j] = 1.0 / L[j, j]
        for i in range(j + 1, n):
            t = 0.0
            for q in range(j, i):
                t -= L[i, q] * Li[q, j]
            Li[i, j] = t / L[i, i]
    out = np.empty((n, n))
    for i in range(n):
        for j in range(i + 1):
            t = 0.0
            for q in range(i, n):
                t += Li[q, i] * Li[q, j]
            out[i, j] = t
            out[j, i] = t
    return out


@njit(cache=True)
def materialize(b, R, labels):
    p = labels.shape[0]
    T = np.empty((p, p))
    for i in range(p):
        for j in range(p):
            T[i, j] = R[labels[i], labels[j]]
        T[i, i] = b[labels[i]]
    return T


@njit(cache=True)
def cluster_sums(M, labels, K):
    """Symmetrized u_k' M u_l and per-cluster traces."""
    p = labels.shape[0]
    UMU = np.zeros((K, K))
    tr = np.zeros(K)
    for i in range(p):
        li = labels[i]
        tr[li] += M[i, i]
        for j in range(p):
            UMU[li, labels[j]] += 0.5 * (M[i, j] + M[j, i])
    return UMU, tr


@njit(cache=True)
def scaled_rstar(b, R, sizes):
    """P^1/2 R* P^1/2 with R* = R + P^-1 A."""
    K = b.shape[0]
    M = np.empty((K, K))
    for k in range(K):
        for l in range(K):
            if k == l:
                M[k, k] = sizes[k] * R[k, k] + (b[k] - R[k, k])
            else:
                M[k, l] = np.sqrt(sizes[k] * sizes[l]) * R[k, l]
    return M


@njit(cache=True)
def block_logdet(b, R, sizes):
    """log|Theta| from the K x K decomposition; ok=False when not PD."""
    K = b.shape[0]
    total = 0.0
    for k in range(K):
        a = b[k] - R[k, k]
        if not (a > 0.0):
            return 0.0, False
        if sizes[k] > 1.0:
            total += (sizes[k] - 1.0) * np.log(a)
    L, ok = cholesky(scaled_rstar(b, R, sizes))
    if not ok:
        return 0.0, False
    for k in range(K):
        total += 2.0 * np.log(L[k, k])
    return total, True


@njit(cache=True)
def cluster_distance(b, R, sizes, k, l):
    d2 = (b[k] - b[l]) ** 2
    d2 += (sizes[k] - 1.0) * (R[k, k] - R[k, l]) ** 2
    d2 += (sizes[l] - 1.0) * (R[l, l] - R[k, l]) ** 2
    for m in range(b.shape[0]):
        if m != k and m != l:
            d2 += sizes[m] * (R[k, m] - R[l, m]) ** 2
    return np.sqrt(d2)


@njit(cache=True)
def full_objective(b, R, sizes, USU, trS, UWU, UZU, lam_c, lam_s, eps):
    ld, ok = block_logdet(b, R, sizes)
    if not ok:
        return np.inf
    K = b.shape[0]
    val = -ld
    for k in range(K):
        val += (b[k] - R[k, k]) * trS[k]
        for l in range(K):
            val += R[k, l] * USU[k, l]
    if lam_c != 0.0:
        for k in range(K):
            for l in range(k):
                if UWU[k, l] != 0.0:
                    val += lam_c * UWU[k, l] * cluster_distance(b, R, sizes, k, l)
    if lam_s != 0.0:
        for k in range(K):
            for l in range(K):
                if UZU[k, l] != 0.0:
                    val += lam_s * UZU[k, l] * smooth_abs(R[k, l], eps)[0]
    return val


# ---------------------------------------------------------------------------
# per-cluster view
# ---------------------------------------------------------------------------


@njit(cache=True)
def positions(K, k):
    pos = np.empty(K, dtype=np.int64)
    for m in range(K):
        if m < k:
            pos[m] = 1 + m
        elif m > k:
            pos[m] = m
        else:
            pos[m] = K
    return pos


@njit(cache=True)
def prepare_view(b, R, sizes, UWU, k, lam_c):
    """V = (R*_0)^-1 and squared distances between other clusters without the k term.

    Returns (V, Dpart, ok). V is indexed in the order of the other clusters.
    """
    K = b.shape[0]
    others = np.empty(K - 1, dtype=np.int64)
    i = 0
    for m in range(K):
        if m != k:
            others[i] = m
            i += 1
    R0 = np.empty((K - 1, K - 1))
    for i in range(K - 1):
        mi = others[i]
        for j in range(K - 1):
            mj = others[j]
            if i == j:
                R0[i, i] = R[mi, mi] + (b[mi] - R[mi, mi]) / sizes[mi]
            else:
                R0[i, j] = R[mi, mj]
    L, ok = cholesky(R0)
    V = np.zeros((K - 1, K - 1))
    if ok:
        V = chol_inverse(L)
    Dpart = np.zeros((K, K))
    if lam_c != 0.0:
        for l in range(K):
            if l == k:
                continue
            for m in range(l + 1, K):
                if m == k or UWU[l, m] == 0.0:
                    continue
                d2 = (b[l] - b[m]) ** 2
                d2 += (sizes[l] - 1.0) * (R[l, l] - R[l, m]) ** 2
                d2 += (sizes[m] - 1.0) * (R[m, m] - R[l, m]) ** 2
                for q in range(K):
                    if q != l and q != m and q != k:
                        d2 += sizes[q] * (R[l, q] - R[m, q]) ** 2
                Dpart[l, m] = d2
                Dpart[m, l] = d2
    return V, Dpart, ok


@njit(cache=True)
def load_state(b, R, k, x):
    """Write cluster k's state vector into b and R (in place)."""
    K = b.shape[0]
    b[k] = x[0]
    for m in range(K):
        if m < k:
            R[k, m] = x[1 + m]
            R[m, k] = x[1 + m]
        elif m > k:
            R[k, m] = x[m]
            R[m, k] = x[m]
    R[k, k] = x[K]


@njit(cache=True)
def read_state(b, R, k):
    K = b.shape[0]
    x = np.empty(K + 1)
    x[0] = b[k]
    for m in range(K):
        if m < k:
            x[1 + m] = R[k, m]
        elif m > k:
            x[m] = R[k, m]
    x[K] = R[k, k]
    return x


@njit(cache=True)
def _quad_r(R, k, V):
    K = R.shape[0]
    q = 0.0
    i = 0
    for mi in range(K):
        if mi == k:
            continue
        j = 0
        for mj in range(K):
            if mj == k:
                continue
            q += R[k, mi] * V[i, j] * R[k, mj]
            j += 1
        i += 1
    return q


@njit(cache=True)
def cluster_objective_loaded(b, R, sizes, k, USU, trS, UWU, UZU, V, Dpart,
                             lam_c, lam_s, eps):
    """Cluster-k objective (up to a constant) with k's state already in b, R.

    Returns +inf outside the positive definite region.
    """
    K = b.shape[0]
    pk = sizes[k]
    bk = b[k]
    rkk = R[k, k]
    a = bk - rkk
    if pk > 1.0 and not (a > 0.0):
        return np.inf
    h = bk + (pk - 1.0) * rkk - pk * _quad_r(R, k, V)
    if not (h > 0.0):
        return np.inf
    val = -np.log(h)
    if pk > 1.0:
        val -= (pk - 1.0) * np.log(a)
    val += bk * trS[k] + rkk * (USU[k, k] - trS[k])
    for m in range(K):
        if m != k:
            val += 2.0 * R[k, m] * USU[k, m]
    if lam_c != 0.0:
        for m in range(K):
            if m != k and UWU[k, m] != 0.0:
                val += lam_c * UWU[k, m] * cluster_distance(b, R, sizes, k, m)
        for l in range(K):
            if l == k:
                continue
            for m in range(l + 1, K):
                if m == k or UWU[l, m] == 0.0:
                    continue
                d2 = Dpart[l, m] + pk * (R[k, l] - R[k, m]) ** 2
                val += lam_c * UWU[l, m] * np.sqrt(d2)
    if lam_s != 0.0:
        for m in range(K):
            if m != k and UZU[k, m] != 0.0:
                val += 2.0 * lam_s * UZU[k, m] * smooth_abs(R[k, m], eps)[0]
        if UZU[k, k] != 0.0:
            val += lam_s * UZU[k, k] * smooth_abs(rkk, eps)[0]
    return val


@njit(cache=True)
def grad_hess_loaded(b, R, sizes, k, USU, trS, UWU, UZU, V, Dpart,
                     lam_c, lam_s, eps):
    """Analytic gradient and Hessian of the cluster-k objective."""
    K = b.shape[0]
    n = K + 1
    g = np.zeros(n)
    H = np.zeros((n, n))
    pos = positions(K, k)
    pk = sizes[k]
    bk = b[k]
    rkk = R[k, k]
    a = bk - rkk

    others = np.empty(K - 1, dtype=np.int64)
    i = 0
    for m in range(K):
        if m != k:
            others[i] = m
            i += 1
    Vr = np.zeros(K - 1)
    quad = 0.0
    for i in range(K - 1):
        t = 0.0
        for j in range(K - 1):
            t += V[i, j] * R[k, others[j]]
        Vr[i] = t
        quad += R[k, others[i]] * t
    h = bk + (pk - 1.0) * rkk - pk * quad

    # -log h
    dh = np.zeros(n)
    dh[0] = 1.0
    dh[K] = pk - 1.0
    for i in range(K - 1):
        dh[pos[others[i]]] = -2.0 * pk * Vr[i]
    for i in range(n):
        g[i] -= dh[i] / h
        for j in range(n):
            H[i, j] += dh[i] * dh[j] / (h * h)
    for i in range(K - 1):
        pi = pos[others[i]]
        for j in range(K - 1):
            H[pi, pos[others[j]]] += 2.0 * pk * V[i, j] / h

    # -(p_k - 1) log(b - r_kk)
    if pk > 1.0:
        c1 = (pk - 1.0) / a
        c2 = (pk - 1.0) / (a * a)
        g[0] -= c1
        g[K] += c1
        H[0, 0] += c2
        H[K, K] += c2
        H[0, K] -= c2
        H[K, 0] -= c2

    # trace
    g[0] += trS[k]
    g[K] += USU[k, k] - trS[k]
    for m in range(K):
        if m != k:
            g[pos[m]] += 2.0 * USU[k, m]

    # clusterpath penalty
    if lam_c != 0.0:
        gq = np.zeros(n)
        for m in others:
            if UWU[k, m] == 0.0:
                continue
            pm = sizes[m]
            rkm = R[k, m]
            gq[:] = 0.0
            d2 = (bk - b[m]) ** 2
            d2 += (pk - 1.0) * (rkk - rkm) ** 2
            d2 += (pm - 1.0) * (R[m, m] - rkm) ** 2
            gq[0] = 2.0 * (bk - b[m])
            gq[pos[m]] = 2.0 * ((pk - 1.0) * (rkm - rkk) + (pm - 1.0) * (rkm - R[m, m]))
            gq[K] = 2.0 * (pk - 1.0) * (rkk - rkm)
            for q in others:
                if q != m:
                    diff = R[k, q] - R[m, q]
                    d2 += sizes[q] * diff * diff
                    gq[pos[q]] = 2.0 * sizes[q] * diff
            d = np.sqrt(d2)
            if d < KINK_TOL:
                continue
            w = lam_c * UWU[k, m]
            c_lin = w / (2.0 * d)
            c_out = w / (4.0 * d * d * d)
            for i in range(n):
                g[i] += c_lin * gq[i]
                if gq[i] != 0.0:
                    for j in range(n):
                        H[i, j] -= c_out * gq[i] * gq[j]
            # Hessian of the quadratic form (constant)
            H[0, 0] += c_lin * 2.0
            H[pos[m], pos[m]] += c_lin * 2.0 * (pk - 1.0 + pm - 1.0)
            H[K, K] += c_lin * 2.0 * (pk - 1.0)
            H[pos[m], K] -= c_lin * 2.0 * (pk - 1.0)
            H[K, pos[m]] -= c_lin * 2.0 * (pk - 1.0)
            for q in others:
                if q != m:
                    H[pos[q], pos[q]] += c_lin * 2.0 * sizes[q]
        for l in others:
            for m in others:
                if m <= l or UWU[l, m] == 0.0:
                    continue
                delta = R[k, l] - R[k, m]
                d2 = Dpart[l, m] + pk * delta * delta
                d = np.sqrt(d2)
                if d < KINK_TOL:
                    continue
                w = lam_c * UWU[l, m]
                gl = 2.0 * pk * delta
                g[pos[l]] += w * gl / (2.0 * d)
                g[pos[m]] -= w * gl / (2.0 * d)
                coef = w * (pk / d - gl * gl / (4.0 * d * d * d))
                pl_ = pos[l]
                pm_ = pos[m]
                H[pl_, pl_] += coef
                H[pm_, pm_] += coef
                H[pl_, pm_] -= coef
                H[pm_, pl_] -= coef

    # sparsity penalty, off-diagonal entries appear twice in the full sum
    if lam_s != 0.0:
        for m in others:
            if UZU[k, m] != 0.0:
                _, d1, dd = smooth_abs(R[k, m], eps)
                g[pos[m]] += 2.0 * lam_s * UZU[k, m] * d1
                H[pos[m], pos[m]] += 2.0 * lam_s * UZU[k, m] * dd
        if UZU[k, k] != 0.0:
            _, d1, dd = smooth_abs(rkk, eps)
            g[K] += lam_s * UZU[k, k] * d1
            H[K, K] += lam_s * UZU[k, k] * dd

    if pk <= 1.0:
        g[K] = 0.0
        for i in range(n):
            H[K, i] = 0.0
            H[i, K] = 0.0
    return g, H


@njit(cache=True)
def max_step(x, delta, k, sizes, V):
    """Largest s keeping both positive definiteness inequalities strict."""
    K = x.shape[0] - 1
    pk = sizes[k]
    nr = K - 1
    r = np.empty(nr)
    dr = np.empty(nr)
    for i in range(nr):
        r[i] = x[1 + i]
        dr[i] = delta[1 + i]
    rVr = 0.0
    rVd = 0.0
    dVd = 0.0
    for i in range(nr):
        for j in range(nr):
            rVr += r[i] * V[i, j] * r[j]
            rVd += r[i] * V[i, j] * dr[j]
            dVd += dr[i] * V[i, j] * dr[j]
    c0 = x[0] + (pk - 1.0) * x[K] - pk * rVr
    c1 = delta[0] + (pk - 1.0) * delta[K] - 2.0 * pk * rVd
    c2 = pk * dVd
    s = STEP_CAP
    if c2 < 0.0:
        c2 = 0.0
    disc = c1 * c1 + 4.0 * c2 * c0
    if c1 <= 0.0:
        denom = np.sqrt(disc) - c1
        if denom > 0.0:
            s = min(s, 2.0 * c0 / denom)
    elif c2 > 0.0:
        s = min(s, (c1 + np.sqrt(disc)) / (2.0 * c2))
    if pk > 1.0:
        da = delta[0] - delta[K]
        if da < 0.0:
            s = min(s, (x[0] - x[K]) / (-da))
    return s


@njit(cache=True)
def line_model(x, delta, b, R, sizes, k, USU, trS, UWU, UZU, V, Dpart, lam_c,
               lam_s, eps):
    """Cluster-k objective restricted to the line x + s * delta, up to a constant.

    Squared distances are quadratics in s, stored by their coefficients, so
    one evaluation is a single pass over flat arrays.
    """
    K = b.shape[0]
    pk = sizes[k]
    nr = K - 1
    rVr = 0.0
    rVd = 0.0
    dVd = 0.0
    for i in range(nr):
        for j in range(nr):
            rVr += x[1 + i] * V[i, j] * x[1 + j]
            rVd += x[1 + i] * V[i, j] * delta[1 + j]
            dVd += delta[1 + i] * V[i, j] * delta[1 + j]
    scal = np.empty(7)
    scal[0] = x[0] + (pk - 1.0) * x[K] - pk * rVr
    scal[1] = delta[0] + (pk - 1.0) * delta[K] - 2.0 * pk * rVd
    scal[2] = pk * dVd
    scal[3] = pk
    scal[4] = x[0] - x[K]
    scal[5] = delta[0] - delta[K]
    lin = trS[k] * delta[0] + (USU[k, k] - trS[k]) * delta[K]
    pos = positions(K, k)
    for m in range(K):
        if m != k:
            lin += 2.0 * USU[k, m] * delta[pos[m]]
    scal[6] = lin

    # each distance is a quadratic qa + s * (qb + s * qc) along the line
    npair = 0
    if lam_c != 0.0:
        for l in range(K):
            for m in range(l + 1, K):
                if UWU[l, m] != 0.0:
                    npair += 1
    pw = np.empty(npair)
    qa = np.empty(npair)
    qb = np.empty(npair)
    qc = np.empty(npair)
    ip = 0
    if lam_c != 0.0:
        for m in range(K):
            if m == k or UWU[k, m] == 0.0:
                continue
            pm_ = pos[m]
            u = x[0] - b[m]
            v = delta[0]
            A = u * u
            B = u * v
            C = v * v
            u = x[K] - x[pm_]
            v = delta[K] - delta[pm_]
            A += (pk - 1.0) * u * u
            B += (pk - 1.0) * u * v
            C += (pk - 1.0) * v * v
            u = R[m, m] - x[pm_]
            v = -delta[pm_]
            A += (sizes[m] - 1.0) * u * u
            B += (sizes[m] - 1.0) * u * v
            C += (sizes[m] - 1.0) * v * v
            for q in range(K):
                if q != k and q != m:
                    u = x[pos[q]] - R[m, q]
                    v = delta[pos[q]]
                    A += sizes[q] * u * u
                    B += sizes[q] * u * v
                    C += sizes[q] * v * v
            pw[ip] = lam_c * UWU[k, m]
            qa[ip] = A
            qb[ip] = 2.0 * B
            qc[ip] = C
            ip += 1
        for l in range(K):
            for m in range(l + 1, K):
                if l == k or m == k or UWU[l, m] == 0.0:
                    continue
                u = x[pos[l]] - x[pos[m]]
                v = delta[pos[l]] - delta[pos[m]]
                pw[ip] = lam_c * UWU[l, m]
                qa[ip] = Dpart[l, m] + pk * u * u
                qb[ip] = 2.0 * pk * u * v
                qc[ip] = pk * v * v
                ip += 1

    nz = 0
    if lam_s != 0.0:
        for m in range(K):
            if UZU[k, m] != 0.0:
                nz += 1
    zw = np.empty(nz)
    z0 = np.empty(nz)
    zd = np.empty(nz)
    iz = 0
    if lam_s != 0.0:
        for m in range(K):
            if UZU[k, m] == 0.0:
                continue
            if m == k:
                zw[iz] = lam_s * UZU[k, k]
            else:
                zw[iz] = 2.0 * lam_s * UZU[k, m]
            z0[iz] = x[pos[m]]
            zd[iz] = delta[pos[m]]
            iz += 1
    return scal, pw, qa, qb, qc, zw, z0, zd, eps


@njit(cache=True)
def line_eval(s, lm):
    scal, pw, qa, qb, qc, zw, z0, zd, eps = lm
    h = scal[0] + s * (scal[1] - scal[2] * s)
    if not (h > 0.0):
        return np.inf
    pk = scal[3]
    val = -np.log(h) + s * scal[6]
    if pk > 1.0:
        a = scal[4] + s * scal[5]
        if not (a > 0.0):
            return np.inf
        val -= (pk - 1.0) * np.log(a)
    for ip in range(pw.shape[0]):
        d2 = qa[ip] + s * (qb[ip] + s * qc[ip])
        if d2 > 0.0:
            val += pw[ip] * np.sqrt(d2)
    for iz in range(zw.shape[0]):
        val += zw[iz] * smooth_abs(z0[iz] + s * zd[iz], eps)[0]
    return val


@njit(cache=True)
def golden(upper, tol, lm):
    """Golden-section search on (0, upper); returns best interior point and value."""
    lo = 0.0
    hi = upper
    c = hi - _INV_PHI * (hi - lo)
    d = lo + _INV_PHI * (hi - lo)
    fc = line_eval(c, lm)
    fd = line_eval(d, lm)
    while hi - lo > tol * upper:
        if fc <= fd:
            hi = d
            d = c
            fd = fc
            c = hi - _INV_PHI * (hi - lo)
            fc = line_eval(c, lm)
        else:
            lo = c
            c = d
            fc = fd
            d = lo + _INV_PHI * (hi - lo)
            fd = line_eval(d, lm)
    if fc <= fd:
        return c, fc
    return d, fd


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


@njit(cache=True)
def _drop(M, hi):
    K = M.shape[0]
    out = np.empty((K - 1, K - 1))
    ii = 0
    for i in range(K):
        if i == hi:
            continue
        jj = 0
        for j in range(K):
            if j == hi:
                continue
            out[ii, jj] = M[i, j]
            jj += 1
        ii += 1
    return out


@njit(cache=True)
def _drop_vec(v, hi):
    out = np.empty(v.shape[0] - 1)
    ii = 0
    for i in range(v.shape[0]):
        if i != hi:
            out[ii] = v[i]
            ii += 1
    return out


@njit(cache=True)
def _merge_agg(M, lo, hi):
    out = M.copy()
    K = M.shape[0]
    for m in range(K):
        out[lo, m] = M[lo, m] + M[hi, m]
        out[m, lo] = out[lo, m]
    out[lo, lo] = M[lo, lo] + M[hi, hi] + M[lo, hi] + M[hi, lo]
    return _drop(out, hi)


@njit(cache=True)
def fuse_params(b, R, sizes, k, l):
    """Size-weighted merge of clusters k and l; merged cluster sits at min(k, l)."""
    lo = min(k, l)
    hi = max(k, l)
    pk = sizes[k]
    pl = sizes[l]
    tot = pk + pl
    b2 = b.copy()
    R2 = R.copy()
    b2[lo] = (pk * b[k] + pl * b[l]) / tot
    for m in range(b.shape[0]):
        if m != k and m != l:
            v = (pk * R[k, m] + pl * R[l, m]) / tot
            R2[lo, m] = v
            R2[m, lo] = v
    within = pk * (pk - 1.0) * R[k, k] + pl * (pl - 1.0) * R[l, l] + 2.0 * pk * pl * R[k, l]
    R2[lo, lo] = within / (tot * (tot - 1.0))
    s2 = sizes.copy()
    s2[lo] = tot
    return _drop_vec(b2, hi), _drop(R2, hi), _drop_vec(s2, hi)


# ---------------------------------------------------------------------------
# solver loop
# ---------------------------------------------------------------------------


@njit(cache=True)
def _dense_min_eig(b, R, labels):
    p = labels.shape[0]
    T = np.empty((p, p))
    for i in range(p):
        for j in range(p):
            if i == j:
                T[i, i] = b[labels[i]]
            else:
                T[i, j] = R[labels[i], labels[j]]
    return np.linalg.eigvalsh(T)[0]


@njit(cache=True)
def newton_update(b, R, sizes, k, USU, trS, UWU, UZU, pinned, lam_c, lam_s,
                  eps, golden_tol):
    """One Newton + line-search update of cluster k, in place. Returns moved flag."""
    K = b.shape[0]
    n = K + 1
    V, Dpart, ok = prepare_view(b, R, sizes, UWU, k, lam_c)
    if not ok:
        return False
    x = read_state(b, R, k)
    g, H = grad_hess_loaded(b, R, sizes, k, USU, trS, UWU, UZU, V, Dpart,
                            lam_c, lam_s, eps)
    pos = positions(K, k)
    free = np.ones(n, dtype=np.bool_)
    for m in range(K):
        if pinned[k, m]:
            free[pos[m]] = False
    if sizes[k] <= 1.0:
        free[K] = False
    idx = np.nonzero(free)[0]
    nf = idx.shape[0]
    gf = np.empty(nf)
    Hf = np.empty((nf, nf))
    gnorm = 0.0
    for i in range(nf):
        gf[i] = g[idx[i]]
        gnorm += gf[i] * gf[i]
        for j in range(nf):
            Hf[i, j] = H[idx[i], idx[j]]
    if not (gnorm > 0.0):
        return False

    mu = 0.0
    df = np.empty(nf)
    while True:
        A = Hf.copy()
        for i in range(nf):
            A[i, i] += mu
        L, ok = cholesky(A)
        if ok:
            df = -chol_solve(L, gf)
            slope = 0.0
            for i in range(nf):
                slope += df[i] * gf[i]
            if slope < 0.0 and np.all(np.isfinite(df)):
                break
        mu = 1e-6 if mu == 0.0 else mu * 10.0
        if mu > 1e8:
            df = -gf
            break
    delta = np.zeros(n)
    for i in range(nf):
        delta[idx[i]] = df[i]

    smax = max_step(x, delta, k, sizes, V)
    lm = line_model(x, delta, b, R, sizes, k, USU, trS, UWU, UZU, V, Dpart,
                    lam_c, lam_s, eps)
    f0 = line_eval(0.0, lm)
    s_unit = 0.0
    f_unit = np.inf
    upper = smax
    if smax > 1.0:
        s_unit = 1.0
        f_unit = line_eval(1.0, lm)
        while 2.0 * s_unit < smax and s_unit < STEP_CAP:
            f2 = line_eval(2.0 * s_unit, lm)
            if f2 < f_unit:
                s_unit *= 2.0
                f_unit = f2
            else:
                break
        upper = min(2.0 * s_unit, smax)
    s_best, f_best = golden(upper, golden_tol, lm)
    if f_unit < f_best:
        s_best = s_unit
        f_best = f_unit
    if not (f_best < f0):
        return False
    load_state(b, R, k, x + s_best * delta)
    return True


@njit(cache=True)
def fit_loop(b, R, sizes, labels, USU, trS, UWU, UZU, pinned, lam_c, lam_s,
             eps, eps_f, eps_conv, max_iter, golden_tol, allow_fusion, check_pd):
    """Cyclic block coordinate descent.

    Returns (b, R, sizes, labels, trace, n_trace, merges, n_merges, iterations,
    converged, pd_violations, status). status 0 = ok, 1 = non-finite objective.
    """
    p = labels.shape[0]
    b = b.copy()
    R = R.copy()
    sizes = sizes.copy()
    labels = labels.copy()
    USU = USU.copy()
    trS = trS.copy()
    UWU = UWU.copy()
    UZU = UZU.copy()
    trace = np.empty(max_iter + 1)
    merges = np.zeros((p, 3), dtype=np.int64)
    n_merges = 0
    violations = 0

    L_old = full_objective(b, R, sizes, USU, trS, UWU, UZU, lam_c, lam_s, eps)
    trace[0] = L_old
    if not np.isfinite(L_old):
        return (b, R, sizes, labels, trace, 1, merges, n_merges, 0, False,
                violations, 1)
    n_trace = 1
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        merges_before = n_merges
        k = 0
        while k < b.shape[0]:
            K = b.shape[0]
            fused = False
            if allow_fusion and K > 1:
                best = -1
                best_d = np.inf
                for l in range(K):
                    if l == k:
                        continue
                    d = cluster_distance(b, R, sizes, k, l)
                    if d < best_d:
                        best_d = d
                        best = l
                if best_d <= eps_f:
                    b2, R2, s2 = fuse_params(b, R, sizes, k, best)
                    _, ok = block_logdet(b2, R2, s2)
                    if ok:
                        lo = min(k, best)
                        hi = max(k, best)
                        merges[n_merges, 0] = it
                        merges[n_merges, 1] = k
                        merges[n_merges, 2] = best
                        n_merges += 1
                        b = b2
                        R = R2
                        sizes = s2
                        USU = _merge_agg(USU, lo, hi)
                        UWU = _merge_agg(UWU, lo, hi)
                        UZU = _merge_agg(UZU, lo, hi)
                        trS[lo] += trS[hi]
                        trS = _drop_vec(trS, hi)
                        for j in range(p):
                            if labels[j] == hi:
                                labels[j] = lo
                            elif labels[j] > hi:
                                labels[j] -= 1
                        fused = True
                        if best < k:
                            k -= 1
            if not fused:
                newton_update(b, R, sizes, k, USU, trS, UWU, UZU, pinned,
                              lam_c, lam_s, eps, golden_tol)
            if check_pd:
                _, ok = block_logdet(b, R, sizes)
                if not ok or not (_dense_min_eig(b, R, labels) > 0.0):
                    violations += 1
            k += 1
        L_new = full_objective(b, R, sizes, USU, trS, UWU, UZU, lam_c, lam_s, eps)
        trace[n_trace] = L_new
        n_trace += 1
        if not np.isfinite(L_new):
            return (b, R, sizes, labels, trace, n_trace, merges, n_merges, it,
                    False, violations, 1)
        # a sweep that fused clusters has not yet updated the merged blocks
        if n_merges == merges_before and abs(L_old - L_new) <= eps_conv * max(abs(L_new), 1e-300):
            converged = True
            break
        L_old = L_new
    return (b, R, sizes, labels, trace, n_trace, merges, n_merges, it, converged,
            violations, 0)
