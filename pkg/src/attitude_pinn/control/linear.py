"""Linear MPC on the small-angle model about the target attitude.

State is ``x = (q_v, omega)`` of the error quaternion. Near identity attitude and
zero rate, ``q_v_dot = omega / 2`` and ``I_s omega_dot = N_c`` with the body torque
``N_c = -u`` set by the wheel torque ``u``. Discretization is an exact zero-order
hold. The condensed box-constrained QP is solved by a primal-dual active-set
(semismooth Newton) iteration, with a bounded least-squares fallback.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, expm, solve_triangular
from scipy.optimize import lsq_linear

from .. import quaternion as quat
from .nonlinear import ControlOutput


@dataclass
class LinearModel:
    A: np.ndarray
    B: np.ndarray
    dt: float
    Q_lin: np.ndarray = field(default_factory=lambda: 1000.0 * np.eye(6))

    def __post_init__(self):
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ValueError("linear model matrices must be finite")

    def step(self, x, u):
        return self.A @ x + self.B @ u


def build_linear_model(params, dt=0.1):
    Ac = np.zeros((6, 6))
    Ac[0:3, 3:6] = 0.5 * np.eye(3)
    Bc = np.zeros((6, 3))
    Bc[3:6, :] = -np.linalg.inv(params.I_s)
    aug = np.zeros((9, 9))
    aug[0:6, 0:6] = Ac
    aug[0:6, 6:9] = Bc
    E = expm(aug * dt)
    return LinearModel(A=E[0:6, 0:6], B=E[0:6, 6:9], dt=float(dt))


def box_qp(H, f, lo, hi, x0=None, max_iter=50):
    """Minimize ``0.5 x'Hx + f'x`` subject to ``lo <= x <= hi``.

    Returns ``(x, iterations, used_fallback)``.
    """
    n = f.size
    d = np.diag(H).copy()
    x = np.clip(np.linalg.solve(H, -f) if x0 is None else x0, lo, hi)
    prev = None
    for it in range(1, max_iter + 1):
        g = H @ x + f
        y = x - g / d
        at_lo = y <= lo
        at_hi = y >= hi
        key = (at_lo.tobytes(), at_hi.tobytes())
        if key == prev:
            return x, it, False
        prev = key
        free = ~(at_lo | at_hi)
        x = np.where(at_lo, lo, np.where(at_hi, hi, 0.0))
        if free.any():
            fixed = ~free
            rhs = -f[free] - H[np.ix_(free, fixed)] @ x[fixed]
            x[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
    L = np.linalg.cholesky(H)
    b = -solve_triangular(L, f, lower=True)
    res = lsq_linear(L.T, b, bounds=(lo, hi), method="bvls", tol=1e-15)
    return res.x, max_iter + res.nit, True


def kkt_residual(H, f, x, lo, hi):
    """Infinity norm of ``x - clip(x - grad)``, zero exactly at the box-QP optimum."""
    g = H @ x + f
    return float(np.max(np.abs(x - np.clip(x - g, lo, hi))))


class LinearMpc:
    def __init__(self, model, horizon=10, c_diag=(0.1,) * 3, r_diag=(0.1,) * 3, u_max=0.05,
                 Q_lin=None):
        self.model = model
        self.n = int(horizon)
        self.u_max = float(u_max)
        Q = model.Q_lin if Q_lin is None else np.asarray(Q_lin, dtype=float)
        n, A, B = self.n, model.A, model.B
        Phi = np.zeros((6 * n, 6))
        Gam = np.zeros((6 * n, 3 * n))
        Ak = np.eye(6)
        for k in range(n):
            for j in range(k + 1):
                Gam[6 * k:6 * k + 6, 3 * j:3 * j + 3] = np.linalg.matrix_power(A, k - j) @ B
            Ak = A @ Ak
            Phi[6 * k:6 * k + 6] = Ak
        Qb = np.kron(np.eye(n), Q)
        Cb = np.kron(np.eye(n), np.diag(c_diag))
        Rb = np.kron(np.eye(n), np.diag(r_diag))
        D = np.eye(3 * n) - np.eye(3 * n, k=-3)
        E = np.zeros((3 * n, 3))
        E[0:3] = np.eye(3)
        self.H = 2.0 * (Gam.T @ Qb @ Gam + Cb + D.T @ Rb @ D)
        self.H = 0.5 * (self.H + self.H.T)
        self._fx = 2.0 * Gam.T @ Qb @ Phi
        self._fu = -2.0 * D.T @ Rb @ E
        self._chol = cho_factor(self.H)
        self.lo = np.full(3 * n, -self.u_max)
        self.hi = np.full(3 * n, self.u_max)
        self.reset()

    def reset(self):
        self.u_prev = np.zeros(3)
        self.last_kkt = 0.0

    def linear_term(self, x0, u_prev=None):
        u_prev = self.u_prev if u_prev is None else u_prev
        return self._fx @ x0 + self._fu @ u_prev

    def unconstrained(self, x0, u_prev=None):
        return cho_solve(self._chol, -self.linear_term(x0, u_prev))

    def solve_x(self, x0, u_prev=None):
        f = self.linear_term(np.asarray(x0, dtype=float), u_prev)
        U, iters, fallback = box_qp(self.H, f, self.lo, self.hi)
        self.last_kkt = kkt_residual(self.H, f, U, self.lo, self.hi)
        return U.reshape(self.n, 3), iters, float(0.5 * U @ self.H @ U + f @ U)

    def solve(self, state, target_q):
        qe = quat.error(state.q, target_q)
        x0 = np.concatenate((qe[1:4], state.omega))
        U, iters, cost = self.solve_x(x0)
        self.u_prev = U[0].copy()
        return ControlOutput(U[0].copy(), "linear", iters, cost, False, U)

    def step(self, state, target_q):
        return self.solve(state, target_q)
