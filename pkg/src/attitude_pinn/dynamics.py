"""Rigid-body attitude dynamics of a spacecraft actuated by three reaction wheels.

The plant solves the body and wheel equations together. Eliminating the wheel
acceleration from the body equation gives

    (I_s - I_rw) omega_dot = -omega x (I_s omega + I_rw omega_rw) - u + N_e
    omega_rw_dot           = I_rw^-1 u - omega_dot

where ``u`` is the torque applied to the wheels and ``-u`` is its reaction on the
body. With ``N_e = 0`` the norm of ``I_s omega + I_rw omega_rw`` is an exact
invariant. :func:`angular_accel` keeps the textbook form with ``I_s`` on the
left-hand side; it is what the physics-informed loss uses.

Hot loops run in numba kernels; the public functions are thin numpy wrappers.
"""

from dataclasses import dataclass, field

import numba
import numpy as np

RPM = 2.0 * np.pi / 60.0
MU_EARTH = 3.986004418e14  # m^3/s^2
R_EARTH = 6.3781e6  # m
B_EQUATOR = 3.12e-5  # T, dipole field magnitude at the equator surface


class ConfigurationError(ValueError):
    pass


class IntegrationError(RuntimeError):
    def __init__(self, step, message="non-finite state"):
        super().__init__(f"{message} at integration step {step}")
        self.step = step


@dataclass(eq=False)
class SpacecraftParams:
    I_s: np.ndarray
    I_rw: np.ndarray
    mass: float = 58.0
    u_max: float = 0.05
    omega_rw_max: float = 6000.0 * RPM

    def __post_init__(self):
        self.I_s = np.array(self.I_s, dtype=float)
        self.I_rw = np.array(self.I_rw, dtype=float)
        if self.I_s.shape != (3, 3) or self.I_rw.shape != (3, 3):
            raise ConfigurationError("inertia matrices must be 3x3")
        if np.max(np.abs(self.I_s - self.I_s.T)) > 1e-12:
            raise ConfigurationError("I_s must be symmetric")
        if np.any(np.abs(self.I_rw - np.diag(np.diag(self.I_rw))) > 0):
            raise ConfigurationError("I_rw must be diagonal")
        if np.min(np.linalg.eigvalsh(self.I_s)) <= 0 or np.min(np.diag(self.I_rw)) <= 0:
            raise ConfigurationError("inertia matrices must be positive definite")
        if np.min(np.linalg.eigvalsh(self.I_s - self.I_rw)) <= 0:
            raise ConfigurationError("I_s - I_rw must be positive definite")
        if not self.u_max > 0:
            raise ConfigurationError("u_max must be positive")
        if not self.omega_rw_max > 0:
            raise ConfigurationError("omega_rw_max must be positive")

    @classmethod
    def nominal(cls):
        """Cubesat parameters used throughout the experiments."""
        I_s = np.array([
            [5.700, 0.045, 0.002],
            [0.045, 3.300, 0.012],
            [0.002, 0.012, 6.100],
        ])
        return cls(I_s=I_s, I_rw=0.001 * np.eye(3), mass=58.0, u_max=0.05,
                   omega_rw_max=6000.0 * RPM)

    @property
    def irw_diag(self):
        return np.diag(self.I_rw).copy()

    def inertia_context(self):
        """9 numbers: the 6 unique entries of I_s then the wheel inertias."""
        I = self.I_s
        return np.array([I[0, 0], I[0, 1], I[0, 2], I[1, 1], I[1, 2], I[2, 2],
                         *np.diag(self.I_rw)])

    @classmethod
    def from_context(cls, ctx, mass=58.0, u_max=0.05, omega_rw_max=6000.0 * RPM):
        c = np.asarray(ctx, dtype=float)
        I_s = np.array([[c[0], c[1], c[2]], [c[1], c[3], c[4]], [c[2], c[4], c[5]]])
        return cls(I_s=I_s, I_rw=np.diag(c[6:9]), mass=mass, u_max=u_max,
                   omega_rw_max=omega_rw_max)

    def perturbed(self, rng, inertia_frac, mass_frac):
        """Independent uniform scaling of each principal moment and of the mass.

        Off-diagonal products are scaled by sqrt(s_i s_j) so the matrix stays
        symmetric and congruent to the original (hence positive definite).
        """
        s = 1.0 + rng.uniform(-inertia_frac, inertia_frac, size=3)
        root = np.sqrt(s)
        I_s = self.I_s * np.outer(root, root)
        mass = self.mass * (1.0 + rng.uniform(-mass_frac, mass_frac))
        return SpacecraftParams(I_s=I_s, I_rw=self.I_rw.copy(), mass=mass,
                                u_max=self.u_max, omega_rw_max=self.omega_rw_max)


@dataclass
class DisturbanceConfig:
    """Closed-form LEO environment: circular orbit, tilted dipole, constant density."""

    enabled: bool = True
    gravity_gradient_enabled: bool = True
    magnetic_dipole: np.ndarray = field(default_factory=lambda: np.array([0.02, 0.02, 0.05]))
    drag_coefficient: float = 2.2
    reference_area: float = 0.1
    orbital_rate: float = float(np.sqrt(MU_EARTH / (R_EARTH + 500e3) ** 3))
    initial_phase: float = 0.0
    inclination: float = float(np.deg2rad(51.6))
    dipole_tilt: float = float(np.deg2rad(11.5))
    atmospheric_density: float = 5e-13  # kg/m^3
    cp_offset: np.ndarray = field(default_factory=lambda: np.array([0.02, 0.01, 0.0]))

    def __post_init__(self):
        self.magnetic_dipole = np.asarray(self.magnetic_dipole, dtype=float)
        self.cp_offset = np.asarray(self.cp_offset, dtype=float)
        if self.enabled and not self.orbital_rate > 0:
            raise ConfigurationError("orbital_rate must be positive")

    @classmethod
    def disabled(cls):
        return cls(enabled=False)

    def pack(self):
        """Flat float array consumed by the numba kernels."""
        if not self.enabled:
            return np.zeros(16)
        radius = (MU_EARTH / self.orbital_rate ** 2) ** (1.0 / 3.0)
        speed = self.orbital_rate * radius
        field_at_orbit = B_EQUATOR * (R_EARTH / radius) ** 3
        return np.array([
            1.0, float(self.gravity_gradient_enabled), self.orbital_rate, self.initial_phase,
            self.inclination, *self.magnetic_dipole, field_at_orbit, self.dipole_tilt,
            self.drag_coefficient, self.reference_area,
            0.5 * self.atmospheric_density * speed ** 2, *self.cp_offset,
        ])


@dataclass
class FrictionConfig:
    viscous_coeff: float = 1e-5  # N m s / rad
    activation_fraction: float = 0.5
    activation_jitter: float = 0.125

    def __post_init__(self):
        if self.viscous_coeff < 0:
            raise ConfigurationError("viscous_coeff must be non-negative")
        lo = self.activation_fraction - self.activation_jitter
        hi = self.activation_fraction + self.activation_jitter
        if lo < 0 or hi > 1 or self.activation_jitter < 0:
            raise ConfigurationError("activation range must lie inside [0, 1]")

    def draw_activation_speed(self, rng, omega_rw_max):
        """Per-wheel activation speed, drawn once per simulation."""
        frac = rng.uniform(self.activation_fraction - self.activation_jitter,
                           self.activation_fraction + self.activation_jitter, size=3)
        return frac * omega_rw_max


@dataclass
class BodyState:
    q: np.ndarray
    omega: np.ndarray
    omega_rw: np.ndarray
    omega_dot: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q = np.array(self.q, dtype=float)
        self.omega = np.array(self.omega, dtype=float)
        self.omega_rw = np.array(self.omega_rw, dtype=float)
        self.omega_dot = np.array(self.omega_dot, dtype=float)

    @classmethod
    def at_rest(cls, q=(1.0, 0.0, 0.0, 0.0), omega_rw=(0.0, 0.0, 0.0)):
        return cls(q=q, omega=np.zeros(3), omega_rw=omega_rw)

    def copy(self):
        return BodyState(self.q.copy(), self.omega.copy(), self.omega_rw.copy(),
                         self.omega_dot.copy())

    def as_vector(self):
        return np.concatenate((self.q, self.omega, self.omega_rw, self.omega_dot))


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@numba.njit(cache=True)
def _quat_rate(q, w):
    out = np.empty(4)
    out[0] = 0.5 * (-w[0] * q[1] - w[1] * q[2] - w[2] * q[3])
    out[1] = 0.5 * (w[0] * q[0] + w[2] * q[2] - w[1] * q[3])
    out[2] = 0.5 * (w[1] * q[0] - w[2] * q[1] + w[0] * q[3])
    out[3] = 0.5 * (w[2] * q[0] + w[1] * q[1] - w[0] * q[2])
    return out


@numba.njit(cache=True)
def _to_body(q, v):
    # C^T v with C the body-to-inertial rotation of q
    q0, q1, q2, q3 = q[0], q[1], q[2], q[3]
    out = np.empty(3)
    out[0] = ((1 - 2 * (q2 * q2 + q3 * q3)) * v[0] + 2 * (q1 * q2 + q0 * q3) * v[1]
              + 2 * (q1 * q3 - q0 * q2) * v[2])
    out[1] = (2 * (q1 * q2 - q0 * q3) * v[0] + (1 - 2 * (q1 * q1 + q3 * q3)) * v[1]
              + 2 * (q2 * q3 + q0 * q1) * v[2])
    out[2] = (2 * (q1 * q3 + q0 * q2) * v[0] + 2 * (q2 * q3 - q0 * q1) * v[1]
              + (1 - 2 * (q1 * q1 + q2 * q2)) * v[2])
    return out


@numba.njit(cache=True)
def _disturbance_parts(q, t, Is, d):
    """Gravity-gradient, magnetic and drag torques (3 rows) in the body frame."""
    out = np.zeros((3, 3))
    if d[0] == 0.0:
        return out
    n = d[2]
    theta = d[3] + n * t
    ci, si = np.cos(d[4]), np.sin(d[4])
    ct, st = np.cos(theta), np.sin(theta)
    r_in = np.array([ct, ci * st, si * st])
    v_in = np.array([-st, ci * ct, si * ct])
    rb = _to_body(q, r_in)
    if d[1] != 0.0:
        out[0] = 3.0 * n * n * _cross(rb, Is @ rb)
    m_earth = np.array([np.sin(d[9]), 0.0, np.cos(d[9])])
    mr = m_earth[0] * r_in[0] + m_earth[1] * r_in[1] + m_earth[2] * r_in[2]
    b_in = d[8] * (3.0 * mr * r_in - m_earth)
    out[1] = _cross(d[5:8], _to_body(q, b_in))
    force = -(d[12] * d[10] * d[11]) * _to_body(q, v_in)
    out[2] = _cross(d[13:16], force)
    return out


@numba.njit(cache=True)
def _disturbance(q, t, Is, d):
    parts = _disturbance_parts(q, t, Is, d)
    return parts[0] + parts[1] + parts[2]


@numba.njit(cache=True)
def _friction(r, coeff, activation):
    out = np.zeros(3)
    if coeff == 0.0:
        return out
    for i in range(3):
        a = activation[i]
        out[i] = -coeff * min(max(r[i], -a), a)
    return out


@numba.njit(cache=True)
def _body_accel(w, r, u_wheel, n_e, Is, Minv, irw):
    h = Is @ w + irw * r
    return Minv @ (_cross(h, w) - u_wheel + n_e)


@numba.njit(cache=True)
def _stage(q, w, r, u, t, Is, Minv, irw, dist, fc, fa):
    u_wheel = u + _friction(r, fc, fa)
    wd = _body_accel(w, r, u_wheel, _disturbance(q, t, Is, dist), Is, Minv, irw)
    return _quat_rate(q, w), wd, u_wheel / irw - wd


@numba.njit(cache=True)
def _rk4(q, w, r, u_cmd, t, dt, Is, Minv, irw, rmax, dist, fc, fa):
    # Torque toward a limit is capped at what closes the remaining gap in one step,
    # so it is exactly zero at the limit and round-off below it cannot re-enable it.
    u = u_cmd.copy()
    for i in range(3):
        if u[i] > 0.0:
            u[i] = min(u[i], max(0.0, irw[i] * (rmax - r[i]) / dt))
        elif u[i] < 0.0:
            u[i] = max(u[i], min(0.0, irw[i] * (-rmax - r[i]) / dt))
    k1q, k1w, k1r = _stage(q, w, r, u, t, Is, Minv, irw, dist, fc, fa)
    h2 = 0.5 * dt
    k2q, k2w, k2r = _stage(q + h2 * k1q, w + h2 * k1w, r + h2 * k1r, u, t + h2,
                           Is, Minv, irw, dist, fc, fa)
    k3q, k3w, k3r = _stage(q + h2 * k2q, w + h2 * k2w, r + h2 * k2r, u, t + h2,
                           Is, Minv, irw, dist, fc, fa)
    k4q, k4w, k4r = _stage(q + dt * k3q, w + dt * k3w, r + dt * k3r, u, t + dt,
                           Is, Minv, irw, dist, fc, fa)
    s = dt / 6.0
    qn = q + s * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    wn = w + s * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)
    rn = r + s * (k1r + 2.0 * k2r + 2.0 * k3r + k4r)
    qn = qn / np.sqrt(qn[0] ** 2 + qn[1] ** 2 + qn[2] ** 2 + qn[3] ** 2)
    if qn[0] < 0.0:
        qn = -qn
    for i in range(3):
        rn[i] = min(max(rn[i], -rmax), rmax)
    return qn, wn, rn, u


@numba.njit(cache=True)
def _propagate(q, w, r, u_cmd, t0, dt, n_steps, Is, Minv, irw, rmax, dist, fc, fa):
    u = u_cmd
    for k in range(n_steps):
        q, w, r, u = _rk4(q, w, r, u_cmd, t0 + k * dt, dt, Is, Minv, irw, rmax, dist, fc, fa)
        ok = True
        for i in range(4):
            ok = ok and np.isfinite(q[i])
        for i in range(3):
            ok = ok and np.isfinite(w[i]) and np.isfinite(r[i])
        if not ok:
            return q, w, r, np.zeros(3), k
    u_wheel = u + _friction(r, fc, fa)
    wd = _body_accel(w, r, u_wheel, _disturbance(q, t0 + n_steps * dt, Is, dist), Is, Minv, irw)
    return q, w, r, wd, -1


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def skew(omega):
    w1, w2, w3 = np.asarray(omega, dtype=float)
    return np.array([[0.0, -w3, w2], [w3, 0.0, -w1], [-w2, w1, 0.0]])


def omega_matrix(omega):
    w0, w1, w2 = np.asarray(omega, dtype=float)
    return np.array([
        [0.0, -w0, -w1, -w2],
        [w0, 0.0, w2, -w1],
        [w1, -w2, 0.0, w0],
        [w2, w1, -w0, 0.0],
    ])


def angular_accel(state, n_c, n_e, params):
    """Body angular acceleration with ``I_s`` as the only body inertia.

    ``n_c`` is the control torque acting on the body (the negated wheel torque).
    """
    Is = params.I_s
    w = state.omega
    S = skew(w)
    rhs = -S @ Is @ w - S @ params.I_rw @ state.omega_rw + np.asarray(n_c) + np.asarray(n_e)
    return np.linalg.solve(Is, rhs)


def body_accel(state, u_wheel, n_e, params):
    """Exact body acceleration of the coupled plant for applied wheel torque ``u_wheel``."""
    Minv = np.linalg.inv(params.I_s - params.I_rw)
    return _body_accel(state.omega, state.omega_rw, np.asarray(u_wheel, dtype=float),
                       np.asarray(n_e, dtype=float), params.I_s, Minv, params.irw_diag)


def rw_accel(omega_dot, u_rw, params):
    return np.asarray(u_rw, dtype=float) / params.irw_diag - np.asarray(omega_dot, dtype=float)


def quat_deriv(q, omega):
    return 0.5 * omega_matrix(omega) @ np.asarray(q, dtype=float)


def total_momentum(state, params):
    """Body-frame angular momentum of spacecraft plus wheels."""
    return params.I_s @ state.omega + params.I_rw @ state.omega_rw


def disturbance_components(state, config, params, t=0.0):
    """Rows: gravity gradient, magnetic dipole, drag (N m, body frame)."""
    return _disturbance_parts(state.q, float(t), params.I_s, config.pack())


def disturbance_torque(state, config, params, t=0.0):
    return disturbance_components(state, config, params, t).sum(axis=0)


def friction_torque(omega_rw, config, activation_speed):
    act = np.broadcast_to(np.asarray(activation_speed, dtype=float), (3,)).copy()
    return _friction(np.asarray(omega_rw, dtype=float), float(config.viscous_coeff), act)


def attitude_error(q):
    """Rotation angle in degrees between ``q`` and the identity attitude."""
    return float(np.degrees(2.0 * np.arccos(np.clip(abs(q[0]), -1.0, 1.0))))


def propagate(state, u_rw, dt, n_steps, params, disturbances=None, friction=None,
              activation_speed=None, t0=0.0):
    """Advance ``n_steps`` RK4 steps of size ``dt`` holding the wheel torque command.

    The command is clamped to +/- ``u_max``; friction is added to the applied wheel
    torque; wheel speeds are hard-limited at +/- ``omega_rw_max``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    u = np.clip(np.asarray(u_rw, dtype=float), -params.u_max, params.u_max)
    dist = disturbances.pack() if disturbances is not None else np.zeros(16)
    if friction is not None and activation_speed is not None:
        fc = float(friction.viscous_coeff)
        fa = np.broadcast_to(np.asarray(activation_speed, dtype=float), (3,)).copy()
    else:
        fc, fa = 0.0, np.zeros(3)
    Minv = np.linalg.inv(params.I_s - params.I_rw)
    q, w, r, wd, fail = _propagate(state.q.copy(), state.omega.copy(), state.omega_rw.copy(),
                                   u, float(t0), float(dt), int(n_steps), params.I_s, Minv,
                                   params.irw_diag, float(params.omega_rw_max), dist, fc, fa)
    if fail >= 0:
        raise IntegrationError(fail)
    return BodyState(q, w, r, wd)


def rk4_step(state, u_rw, dt, params, disturbances=None, friction=None,
             activation_speed=None, t=0.0):
    return propagate(state, u_rw, dt, 1, params, disturbances, friction, activation_speed, t)


@dataclass
class Plant:
    """Truth plant with its environment, advanced one control period at a time."""

    params: SpacecraftParams
    disturbances: DisturbanceConfig = field(default_factory=DisturbanceConfig.disabled)
    friction: FrictionConfig | None = None
    activation_speed: np.ndarray | None = None
    integration_dt: float = 0.001
    t: float = 0.0

    def step(self, state, u_rw, period):
        n = int(round(period / self.integration_dt))
        if abs(n * self.integration_dt - period) > 1e-9 * period:
            raise ConfigurationError("control period must be a multiple of integration_dt")
        new = propagate(state, u_rw, self.integration_dt, n, self.params, self.disturbances,
                        self.friction, self.activation_speed, self.t)
        self.t += period
        return new
