"""Scalar-first unit quaternion helpers.

Attitude quaternions map body-frame vectors to the inertial frame
(``v_I = q * v_B * q^-1``) and obey ``q_dot = 0.5 * q * (0, omega_B)``.
"""

import numpy as np


def normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def canonical(q):
    """Flip sign so the scalar part is non-negative."""
    q = np.asarray(q, dtype=float)
    return -q if q[0] < 0.0 else q.copy()


def conj(q):
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def multiply(p, q):
    p0, p1, p2, p3 = p
    q0, q1, q2, q3 = q
    return np.array([
        p0 * q0 - p1 * q1 - p2 * q2 - p3 * q3,
        p0 * q1 + p1 * q0 + p2 * q3 - p3 * q2,
        p0 * q2 - p1 * q3 + p2 * q0 + p3 * q1,
        p0 * q3 + p1 * q2 - p2 * q1 + p3 * q0,
    ])


def error(q, q_target):
    """Error quaternion ``q_target^-1 * q``, canonicalized."""
    return canonical(multiply(conj(q_target), q))


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate(([np.cos(0.5 * angle)], np.sin(0.5 * angle) * axis))


def to_dcm(q):
    """Rotation matrix taking body-frame vectors to the inertial frame."""
    q0, q1, q2, q3 = q
    return np.array([
        [1 - 2 * (q2 * q2 + q3 * q3), 2 * (q1 * q2 - q0 * q3), 2 * (q1 * q3 + q0 * q2)],
        [2 * (q1 * q2 + q0 * q3), 1 - 2 * (q1 * q1 + q3 * q3), 2 * (q2 * q3 - q0 * q1)],
        [2 * (q1 * q3 - q0 * q2), 2 * (q2 * q3 + q0 * q1), 1 - 2 * (q1 * q1 + q2 * q2)],
    ])


def random_uniform(rng):
    """Uniformly distributed rotation (Shoemake's method), canonicalized."""
    u1, u2, u3 = rng.random(3)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    q = np.array([
        a * np.sin(2 * np.pi * u2),
        a * np.cos(2 * np.pi * u2),
        b * np.sin(2 * np.pi * u3),
        b * np.cos(2 * np.pi * u3),
    ])
    return canonical(q)


def random_with_angle(rng, low, high):
    """Rotation about a uniformly random axis by an angle uniform in (low, high)."""
    axis = rng.normal(size=3)
    return canonical(from_axis_angle(axis, rng.uniform(low, high)))
