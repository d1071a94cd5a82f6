"""Compiled kernels for the left-looking sparse LU (Gilbert-Peierls with partial pivoting).

Storage follows the usual CSC conventions: every column of L starts with its unit
diagonal, every column of U ends with its pivot.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _grow(a, size):
    out = np.empty(size, dtype=a.dtype)
    out[: a.shape[0]] = a
    return out


@njit(cache=True)
def _reach_dfs(j, Lp, Li, pinv, top, xi, stack, pstack, mark, stamp):
    head = 0
    stack[0] = j
    while head >= 0:
        j = stack[head]
        jnew = pinv[j]
        if mark[j] != stamp:
            mark[j] = stamp
            pstack[head] = 0 if jnew < 0 else Lp[jnew] + 1
        done = True
        p_end = 0 if jnew < 0 else Lp[jnew + 1]
        for p in range(pstack[head], p_end):
            i = Li[p]
            if mark[i] == stamp:
                continue
            pstack[head] = p + 1
            head += 1
            stack[head] = i
            done = False
            break
        if done:
            head -= 1
            top -= 1
            xi[top] = j
    return top


@njit(cache=True)
def lu_factor(n, Ap, Ai, Ax, q, rowmax, piv_tol):
    """Factor P A Q = L U.

    Returns ``(status, Lp, Li, Lx, Up, Ui, Ux, pinv, pivot_magnitude)``; ``status``
    is -1 on success, otherwise the pivot step at which no acceptable pivot exists.
    """
    cap_l = max(4 * Ax.shape[0], 4 * n, 16)
    cap_u = cap_l
    Lp = np.zeros(n + 1, dtype=np.int64)
    Li = np.empty(cap_l, dtype=np.int64)
    Lx = np.empty(cap_l, dtype=np.float64)
    Up = np.zeros(n + 1, dtype=np.int64)
    Ui = np.empty(cap_u, dtype=np.int64)
    Ux = np.empty(cap_u, dtype=np.float64)
    pinv = -np.ones(n, dtype=np.int64)
    x = np.zeros(n, dtype=np.float64)
    xi = np.empty(n, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    pstack = np.empty(n, dtype=np.int64)
    mark = np.zeros(n, dtype=np.int64)
    lnz = 0
    unz = 0
    for k in range(n):
        Lp[k] = lnz
        Up[k] = unz
        if lnz + n > cap_l:
            cap_l = 2 * cap_l + n
            Li = _grow(Li, cap_l)
            Lx = _grow(Lx, cap_l)
        if unz + n > cap_u:
            cap_u = 2 * cap_u + n
            Ui = _grow(Ui, cap_u)
            Ux = _grow(Ux, cap_u)
        col = q[k]
        stamp = k + 1
        top = n
        for p in range(Ap[col], Ap[col + 1]):
            i = Ai[p]
            if mark[i] != stamp:
                top = _reach_dfs(i, Lp, Li, pinv, top, xi, stack, pstack, mark, stamp)
        for px in range(top, n):
            x[xi[px]] = 0.0
        for p in range(Ap[col], Ap[col + 1]):
            x[Ai[p]] += Ax[p]
        for px in range(top, n):
            j = xi[px]
            jj = pinv[j]
            if jj < 0:
                continue
            xj = x[j]
            for p in range(Lp[jj] + 1, Lp[jj + 1]):
                x[Li[p]] -= Lx[p] * xj
        ipiv = -1
        a = -1.0
        for px in range(top, n):
            i = xi[px]
            if pinv[i] < 0:
                t = abs(x[i])
                if t > a:
                    a = t
                    ipiv = i
            else:
                Ui[unz] = pinv[i]
                Ux[unz] = x[i]
                unz += 1
        if ipiv < 0:
            return k, Lp, Li, Lx, Up, Ui, Ux, pinv, 0.0
        if a == 0.0 or a <= piv_tol * rowmax[ipiv]:
            return k, Lp, Li, Lx, Up, Ui, Ux, pinv, a
        pivot = x[ipiv]
        Ui[unz] = k
        Ux[unz] = pivot
        unz += 1
        pinv[ipiv] = k
        Li[lnz] = ipiv
        Lx[lnz] = 1.0
        lnz += 1
        for px in range(top, n):
            i = xi[px]
            if pinv[i] < 0:
                Li[lnz] = i
                Lx[lnz] = x[i] / pivot
                lnz += 1
            x[i] = 0.0
    Lp[n] = lnz
    Up[n] = unz
    for p in range(lnz):
        Li[p] = pinv[Li[p]]
    return -1, Lp, Li[:lnz].copy(), Lx[:lnz].copy(), Up, Ui[:unz].copy(), Ux[:unz].copy(), pinv, 0.0


@njit(cache=True)
def lu_solve(n, Lp, Li, Lx, Up, Ui, Ux, pinv, q, b):
    y = np.empty(n, dtype=np.float64)
    for i in range(n):
        y[pinv[i]] = b[i]
    for j in range(n):
        yj = y[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            y[Li[p]] -= Lx[p] * yj
    for j in range(n - 1, -1, -1):
        y[j] /= Ux[Up[j + 1] - 1]
        yj = y[j]
        for p in range(Up[j], Up[j + 1] - 1):
            y[Ui[p]] -= Ux[p] * yj
    x = np.empty(n, dtype=np.float64)
    for k in range(n):
        x[q[k]] = y[k]
    return x


@njit(cache=True)
def lu_solve_transpose(n, Lp, Li, Lx, Up, Ui, Ux, pinv, q, b):
    y = np.empty(n, dtype=np.float64)
    for k in range(n):
        y[k] = b[q[k]]
    for j in range(n):
        s = y[j]
        for p in range(Up[j], Up[j + 1] - 1):
            s -= Ux[p] * y[Ui[p]]
        y[j] = s / Ux[Up[j + 1] - 1]
    for j in range(n - 1, -1, -1):
        s = y[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            s -= Lx[p] * y[Li[p]]
        y[j] = s
    x = np.empty(n, dtype=np.float64)
    for i in range(n):
        x[i] = y[pinv[i]]
    return x
