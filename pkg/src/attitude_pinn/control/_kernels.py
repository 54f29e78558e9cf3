"""numba kernels for single-shooting MPC: prediction model, cost and adjoint gradient.

State layout (13): quaternion error (4), body rate (3), wheel rate (3), body
acceleration (3). One step of length ``dt`` with wheel torque ``u`` held:

    d      = increment(omega, omega_rw, u, omega_dot)   (learned or analytic)
    omega' = omega + d
    wdot'  = d / dt
    w_rw'  = w_rw + dt * u / I_rw - d
    q'     = normalize(q + dt/2 * Omega(omega) q)
"""

import numba
import numpy as np

ANALYTIC = 0
LEARNED = 1


@numba.njit(cache=True)
def _mlp_increment(xin, theta, dims, x_mean, x_std, y_mean, y_std, tanh_act):
    """First predicted increment of the MLP and its Jacobian w.r.t. the 12 state inputs."""
    n_layers = dims.size - 1
    width = 0
    for i in range(dims.size):
        width = max(width, dims[i])
    acts = np.zeros((n_layers + 1, width))
    for i in range(dims[0]):
        acts[0, i] = (xin[i] - x_mean[i]) / x_std[i]
    offsets = np.zeros(n_layers, dtype=np.int64)
    k = 0
    for layer in range(n_layers):
        offsets[layer] = k
        n_in, n_out = dims[layer], dims[layer + 1]
        last = layer == n_layers - 1
        rows = 3 if last else n_out
        for j in range(rows):
            z = theta[k + n_in * n_out + j]
            base = k + j * n_in
            for i in range(n_in):
                z += theta[base + i] * acts[layer, i]
            if not last and tanh_act:
                z = np.tanh(z)
            acts[layer + 1, j] = z
        k += n_in * n_out + n_out
    dw = np.empty(3)
    jac = np.zeros((3, 12))
    g = np.zeros(width)
    g2 = np.zeros(width)
    for out in range(3):
        dw[out] = acts[n_layers, out] * y_std[out] + y_mean[out]
        # reverse pass for one output row
        for i in range(width):
            g[i] = 0.0
        g[out] = 1.0
        for layer in range(n_layers - 1, -1, -1):
            n_in, n_out = dims[layer], dims[layer + 1]
            last = layer == n_layers - 1
            rows = 3 if last else n_out
            base = offsets[layer]
            for i in range(n_in):
                g2[i] = 0.0
            for j in range(rows):
                gj = g[j]
                if gj == 0.0:
                    continue
                row = base + j * n_in
                for i in range(n_in):
                    g2[i] += gj * theta[row + i]
            if layer > 0:
                for i in range(n_in):
                    a = acts[layer, i]
                    g[i] = g2[i] * (1.0 - a * a) if tanh_act else g2[i]
            else:
                for i in range(n_in):
                    g[i] = g2[i]
        for i in range(12):
            jac[out, i] = g[i] / x_std[i] * y_std[out]
    return dw, jac


@numba.njit(cache=True)
def _cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@numba.njit(cache=True)
def _skew(v):
    out = np.zeros((3, 3))
    out[0, 1] = -v[2]
    out[0, 2] = v[1]
    out[1, 0] = v[2]
    out[1, 2] = -v[0]
    out[2, 0] = -v[1]
    out[2, 1] = v[0]
    return out


@numba.njit(cache=True)
def _analytic_increment(w, r, u, dt, Is, Minv, irw):
    """Explicit-Euler increment of the coupled rigid-body model and its Jacobian."""
    h = Is @ w + irw * r
    dw = dt * (Minv @ (_cross(h, w) - u))
    jac = np.zeros((3, 12))
    Sw = _skew(w)
    jw = dt * (Minv @ (_skew(h) - Sw @ Is))
    jr = -dt * (Minv @ Sw)
    for i in range(3):
        for j in range(3):
            jac[i, j] = jw[i, j]
            jac[i, 3 + j] = jr[i, j] * irw[j]
            jac[i, 6 + j] = -dt * Minv[i, j]
    return dw, jac


@numba.njit(cache=True)
def _increment(s, u, dt, mode, theta, dims, xm, xs, ym, ys, tanh_act, ctx, Is, Minv, irw):
    if mode == LEARNED:
        xin = np.empty(dims[0])
        for i in range(3):
            xin[i] = s[4 + i]
            xin[3 + i] = s[7 + i]
            xin[6 + i] = u[i]
            xin[9 + i] = s[10 + i]
        for i in range(dims[0] - 12):
            xin[12 + i] = ctx[i]
        return _mlp_increment(xin, theta, dims, xm, xs, ym, ys, tanh_act)
    return _analytic_increment(s[4:7], s[7:10], u, dt, Is, Minv, irw)


@numba.njit(cache=True)
def _omega_q(w, q):
    out = np.empty(4)
    out[0] = -w[0] * q[1] - w[1] * q[2] - w[2] * q[3]
    out[1] = w[0] * q[0] + w[2] * q[2] - w[1] * q[3]
    out[2] = w[1] * q[0] - w[2] * q[1] + w[0] * q[3]
    out[3] = w[2] * q[0] + w[1] * q[1] - w[0] * q[2]
    return out


@numba.njit(cache=True)
def _step(s, u, dt, mode, theta, dims, xm, xs, ym, ys, tanh_act, ctx, Is, Minv, irw):
    dw, jac = _increment(s, u, dt, mode, theta, dims, xm, xs, ym, ys, tanh_act, ctx, Is, Minv, irw)
    out = np.empty(13)
    q = s[0:4]
    p = q + 0.5 * dt * _omega_q(s[4:7], q)
    pn = np.sqrt(p[0] ** 2 + p[1] ** 2 + p[2] ** 2 + p[3] ** 2)
    for i in range(4):
        out[i] = p[i] / pn
    for i in range(3):
        out[4 + i] = s[4 + i] + dw[i]
        out[7 + i] = s[7 + i] + dt * u[i] / irw[i] - dw[i]
        out[10 + i] = dw[i] / dt
    return out, jac, p, pn


@numba.njit(cache=True)
def predict(s0, U, dt, mode, theta, dims, xm, xs, ym, ys, tanh_act, ctx, Is, Minv, irw):
    n = U.shape[0]
    traj = np.empty((n + 1, 13))
    traj[0] = s0
    for k in range(n):
        traj[k + 1] = _step(traj[k], U[k], dt, mode, theta, dims, xm, xs, ym, ys, tanh_act,
                            ctx, Is, Minv, irw)[0]
    return traj


@numba.njit(cache=True)
def _state_cost(s, qd):
    c = qd[0] * (1.0 - s[0]) ** 2
    for i in range(1, 13):
        c += qd[i] * s[i] * s[i]
    return c


@numba.njit(cache=True)
def cost_grad(U, s0, u_prev, qd, cd, rd, dt, mode, theta, dims, xm, xs, ym, ys, tanh_act,
              ctx, Is, Minv, irw):
    """Horizon cost and its gradient with respect to the torque sequence ``U`` (n, 3)."""
    n = U.shape[0]
    traj = np.empty((n + 1, 13))
    jacs = np.empty((n, 3, 12))
    ps = np.empty((n, 4))
    pns = np.empty(n)
    traj[0] = s0
    cost = _state_cost(s0, qd)
    for k in range(n):
        nxt, jac, p, pn = _step(traj[k], U[k], dt, mode, theta, dims, xm, xs, ym, ys,
                                tanh_act, ctx, Is, Minv, irw)
        traj[k + 1] = nxt
        jacs[k] = jac
        ps[k] = p
        pns[k] = pn
        cost += _state_cost(nxt, qd)
        for i in range(3):
            prev = u_prev[i] if k == 0 else U[k - 1, i]
            du = U[k, i] - prev
            cost += cd[i] * U[k, i] ** 2 + rd[i] * du * du

    grad = np.zeros((n, 3))
    for k in range(n):
        for i in range(3):
            grad[k, i] += 2.0 * cd[i] * U[k, i]
            prev = u_prev[i] if k == 0 else U[k - 1, i]
            du = U[k, i] - prev
            grad[k, i] += 2.0 * rd[i] * du
            if k > 0:
                grad[k - 1, i] -= 2.0 * rd[i] * du

    lam = np.empty(13)
    sn = traj[n]
    lam[0] = -2.0 * qd[0] * (1.0 - sn[0])
    for i in range(1, 13):
        lam[i] = 2.0 * qd[i] * sn[i]
    for k in range(n - 1, -1, -1):
        s = traj[k]
        q = s[0:4]
        w = s[4:7]
        # quaternion normalisation
        qn = traj[k + 1, 0:4]
        dot = 0.0
        for i in range(4):
            dot += qn[i] * lam[i]
        lp = (lam[0:4] - qn * dot) / pns[k]
        # p = q + dt/2 Omega(w) q ; Omega^T = -Omega
        lq = lp - 0.5 * dt * _omega_q(w, lp)
        lw = np.empty(3)
        lw[0] = 0.5 * dt * (-q[1] * lp[0] + q[0] * lp[1] + q[3] * lp[2] - q[2] * lp[3])
        lw[1] = 0.5 * dt * (-q[2] * lp[0] - q[3] * lp[1] + q[0] * lp[2] + q[1] * lp[3])
        lw[2] = 0.5 * dt * (-q[3] * lp[0] + q[2] * lp[1] - q[1] * lp[2] + q[0] * lp[3])
        ldw = lam[4:7] + lam[10:13] / dt - lam[7:10]
        lr = lam[7:10].copy()
        lu = dt * lam[7:10] / irw
        lw += lam[4:7]
        jac = jacs[k]
        lwd = np.zeros(3)
        for j in range(3):
            for i in range(3):
                lw[j] += jac[i, j] * ldw[i]
                lr[j] += jac[i, 3 + j] * ldw[i]
                lu[j] += jac[i, 6 + j] * ldw[i]
                lwd[j] += jac[i, 9 + j] * ldw[i]
        for i in range(3):
            grad[k, i] += lu[i]
        if k > 0:
            lam[0] = lq[0] - 2.0 * qd[0] * (1.0 - s[0])
            for i in range(1, 4):
                lam[i] = lq[i] + 2.0 * qd[i] * s[i]
            for i in range(3):
                lam[4 + i] = lw[i] + 2.0 * qd[4 + i] * s[4 + i]
                lam[7 + i] = lr[i] + 2.0 * qd[7 + i] * s[7 + i]
                lam[10 + i] = lwd[i] + 2.0 * qd[10 + i] * s[10 + i]
    return cost, grad
