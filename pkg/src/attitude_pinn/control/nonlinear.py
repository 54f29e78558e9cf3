"""Nonlinear MPC by single shooting over the torque sequence.

The horizon cost is

    sum_{k=0}^{n} e(x_k)' Q e(x_k) + sum_{k=0}^{n-1} u_k' C u_k + du_k' R du_k

with ``e(x) = (1 - q0, q1, q2, q3, omega, omega_rw, omega_dot)`` built from the
error quaternion, and ``du_0`` measured against the torque applied on the
previous control step. Gradients come from an adjoint pass through the
prediction model, and L-BFGS-B handles the box ``|u| <= u_max``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .. import quaternion as quat
from ..dynamics import BodyState, SpacecraftParams
from . import _kernels as K

ORACLES = ("learned", "analytic")


class DynamicsError(RuntimeError):
    """The prediction model produced a non-finite state."""


def default_q_diag():
    return np.array([1e4] * 4 + [1e-2] * 3 + [1e-4] * 3 + [1e-2] * 3)


@dataclass
class MpcProblem:
    horizon: int = 10
    q_diag: np.ndarray = field(default_factory=default_q_diag)
    c_diag: np.ndarray = field(default_factory=lambda: np.full(3, 0.1))
    r_diag: np.ndarray = field(default_factory=lambda: np.full(3, 0.1))
    u_max: float = 0.05
    dt: float = 0.1
    oracle: str = "learned"
    max_iter: int = 50

    def __post_init__(self):
        self.q_diag = np.asarray(self.q_diag, dtype=float)
        self.c_diag = np.asarray(self.c_diag, dtype=float)
        self.r_diag = np.asarray(self.r_diag, dtype=float)
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.q_diag.shape != (13,) or self.c_diag.shape != (3,) or self.r_diag.shape != (3,):
            raise ValueError("cost weights must be diagonals of length 13, 3 and 3")
        for w in (self.q_diag, self.c_diag, self.r_diag):
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("cost weights must be finite and non-negative")
        if self.oracle not in ORACLES:
            raise ValueError(f"oracle must be one of {ORACLES}")
        if not (self.u_max > 0 and self.dt > 0 and self.max_iter >= 1):
            raise ValueError("u_max, dt and max_iter must be positive")


@dataclass
class ControlOutput:
    u: np.ndarray
    mode: str
    iterations: int = 0
    cost: float = 0.0
    degraded: bool = False
    sequence: np.ndarray = None


class PredictionModel:
    """Packs a learned or analytic one-step model into kernel arguments."""

    def __init__(self, oracle, params, model=None, dt=0.1):
        self.oracle = oracle
        self.params = params
        self.dt = float(dt)
        Is = np.ascontiguousarray(params.I_s, dtype=float)
        Minv = np.linalg.inv(params.I_s - params.I_rw)
        irw = params.irw_diag
        if oracle == "learned":
            if model is None:
                raise ValueError("the learned oracle needs a trained model")
            theta = model.flat_params()
            if not np.all(np.isfinite(theta)):
                raise DynamicsError("model parameters are not finite")
            dims = np.array(model.config.layer_dims, dtype=np.int64)
            if dims[0] != 21:
                raise ValueError("model input width must be 21")
            mode = K.LEARNED
            norms = (model.x_mean, model.x_std, model.y_mean, model.y_std)
            tanh_act = model.config.activation == "tanh"
        else:
            mode = K.ANALYTIC
            theta = np.zeros(1)
            dims = np.array([21, 3], dtype=np.int64)
            norms = (np.zeros(21), np.ones(21), np.zeros(3), np.ones(3))
            tanh_act = True
        self.args = (self.dt, mode, theta, dims,
                     *(np.ascontiguousarray(a, dtype=float) for a in norms),
                     tanh_act, params.inertia_context(), Is, Minv, irw)

    def predict(self, s0, U):
        return K.predict(np.asarray(s0, dtype=float), np.atleast_2d(np.asarray(U, dtype=float)),
                         *self.args)

    def cost_grad(self, U, s0, u_prev, problem):
        return K.cost_grad(U, s0, u_prev, problem.q_diag, problem.c_diag, problem.r_diag,
                           *self.args)


def error_state(state, target_q):
    """13-vector in the target frame: error quaternion, rates, wheel speeds, acceleration."""
    qe = quat.error(state.q, target_q)
    return np.concatenate((qe, state.omega, state.omega_rw, state.omega_dot))


def predict_step_learned(model, state, u, params, dt=0.1):
    """One control step of the learned prediction model.

    The first predicted increment advances the body rate, the wheel speed
    follows from the commanded wheel torque minus the body increment, and the
    quaternion takes an Euler step with the current rate before renormalizing.
    """
    u = np.clip(np.asarray(u, dtype=float), -params.u_max, params.u_max)
    pm = PredictionModel("learned", params, model, dt)
    s1 = pm.predict(state.as_vector(), u[None, :])[1]
    if not np.all(np.isfinite(s1)):
        raise DynamicsError("non-finite prediction")
    return BodyState(s1[0:4], s1[4:7], s1[7:10], s1[10:13])


def predict_step_analytic(state, u, params, dt=0.1):
    u = np.clip(np.asarray(u, dtype=float), -params.u_max, params.u_max)
    s1 = PredictionModel("analytic", params, dt=dt).predict(state.as_vector(), u[None, :])[1]
    return BodyState(s1[0:4], s1[4:7], s1[7:10], s1[10:13])


class NonlinearMpc:
    def __init__(self, problem, params=None, model=None):
        self.problem = problem
        self.params = params if params is not None else SpacecraftParams.nominal()
        self.prediction = PredictionModel(problem.oracle, self.params, model, problem.dt)
        self.reset()

    def reset(self):
        self.u_prev = np.zeros(3)
        self._plan = None

    def horizon_cost(self, s0, U, u_prev=None):
        u_prev = self.u_prev if u_prev is None else u_prev
        c, _ = self.prediction.cost_grad(np.asarray(U, dtype=float).reshape(-1, 3), s0,
                                         np.asarray(u_prev, dtype=float), self.problem)
        return c

    def solve(self, state, target_q, warm_start=True):
        """Optimize the torque sequence; the first torque is what should be applied."""
        pb = self.problem
        n, umax = pb.horizon, pb.u_max
        s0 = error_state(state, target_q)
        if not np.all(np.isfinite(s0)):
            raise DynamicsError("current state is not finite")
        u_prev = self.u_prev.copy()
        zeros = np.zeros((n, 3))
        if warm_start and self._plan is not None:
            guess = np.vstack((self._plan[1:], self._plan[-1:]))
        else:
            guess = zeros
        cost_zero, _ = self.prediction.cost_grad(zeros, s0, u_prev, pb)
        cost_guess, _ = self.prediction.cost_grad(guess, s0, u_prev, pb)
        if not np.isfinite(cost_guess) or cost_guess > cost_zero:
            guess, cost_guess = zeros, cost_zero
        scale = max(cost_guess, 1e-12)

        def fun(v):
            c, g = self.prediction.cost_grad(v.reshape(n, 3) * umax, s0, u_prev, pb)
            if not np.isfinite(c):
                return 1e30, np.zeros_like(v)
            return c / scale, g.ravel() * (umax / scale)

        res = minimize(fun, guess.ravel() / umax, jac=True, method="L-BFGS-B",
                       bounds=[(-1.0, 1.0)] * (3 * n),
                       options={"maxiter": pb.max_iter, "ftol": 1e-12, "gtol": 1e-10})
        U = np.clip(res.x.reshape(n, 3) * umax, -umax, umax)
        cost, _ = self.prediction.cost_grad(U, s0, u_prev, pb)
        degraded = not res.success
        if not np.isfinite(cost):
            U, cost, degraded = zeros, cost_zero, True
        elif cost > cost_zero:
            U, cost = zeros, cost_zero
        self._plan = U
        self.u_prev = U[0].copy()
        return ControlOutput(U[0].copy(), "nonlinear", int(res.nit), float(cost), degraded, U)

    def step(self, state, target_q):
        return self.solve(state, target_q)
