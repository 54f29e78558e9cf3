"""Switching between a nonlinear MPC far from the target and a linear MPC close to it."""

from dataclasses import dataclass, field

import numpy as np

from .. import quaternion as quat
from ..dynamics import attitude_error


@dataclass
class HybridConfig:
    switch_threshold: float = 1.0  # degrees
    hysteresis: float = 0.1

    def __post_init__(self):
        if not (self.switch_threshold > self.hysteresis >= 0.0):
            raise ValueError("need switch_threshold > hysteresis >= 0")


def select_mode(error_deg, current_mode, config):
    """Below the threshold the linear model takes over; it hands back only above threshold + hysteresis."""
    if current_mode == "linear":
        return "nonlinear" if error_deg > config.switch_threshold + config.hysteresis else "linear"
    return "linear" if error_deg < config.switch_threshold else "nonlinear"


@dataclass
class HybridController:
    nonlinear: object
    linear: object
    config: HybridConfig = field(default_factory=HybridConfig)
    mode: str = None
    switches: list = field(default_factory=list)

    def reset(self):
        self.nonlinear.reset()
        self.linear.reset()
        self.mode = None
        self.switches = []

    def step(self, state, target_q, t=None):
        err = attitude_error(quat.error(state.q, target_q))
        if self.mode is None:
            new = "linear" if err < self.config.switch_threshold else "nonlinear"
        else:
            new = select_mode(err, self.mode, self.config)
            if new != self.mode:
                self.switches.append((t, self.mode, new))
        self.mode = new
        active = self.linear if new == "linear" else self.nonlinear
        idle = self.nonlinear if new == "linear" else self.linear
        out = active.step(state, target_q)
        # both solvers see the same previously applied torque for the rate penalty
        idle.u_prev = np.array(out.u, dtype=float)
        return out
