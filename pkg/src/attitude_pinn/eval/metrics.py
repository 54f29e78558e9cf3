"""Regressor metrics: relative error, physics error and recursive self-loop prediction."""

from dataclasses import dataclass

import numpy as np

from ..training import CONTROL_DT, physics_accel, rollout_terms

MRE_FLOOR = 1e-12


def mre(pred, target, floor=MRE_FLOOR):
    """Mean relative error in percent of velocity increments, norm taken per sample."""
    pred = np.asarray(pred, dtype=float).reshape(-1, 3)
    target = np.asarray(target, dtype=float).reshape(-1, 3)
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes differ")
    num = np.linalg.norm(pred - target, axis=1)
    den = np.maximum(np.linalg.norm(target, axis=1), floor)
    return float(100.0 * np.mean(num / den))


def _relative_errors(pred, target, floor=MRE_FLOOR):
    num = np.linalg.norm(pred - target, axis=-1)
    return num / np.maximum(np.linalg.norm(target, axis=-1), floor)


def wdot_scale(batch):
    """Per-axis spread of the rigid-body acceleration at the start states.

    Evaluation fixes this normalizer once per dataset so that physics errors of
    different models and of different subsets are on the same scale.
    """
    ref = physics_accel(batch.omega, batch.omega_rw, batch.u, batch.Is, batch.irw, batch.Is_inv)
    s = ref.std(axis=0)
    return np.where(s > 0, s, 1.0)


def physics_error(pred, batch, dt=CONTROL_DT, p=1e-2, sigma_wdot=None):
    """Physics-informed loss ``L_wdot + p * L_h`` of predicted increments on a rollout batch.

    ``pred`` is (B, S, 3) or (B, 3). This calls the very function the training loop
    uses, so on identical inputs the two agree bit for bit.
    """
    pred = np.asarray(pred, dtype=float)
    if pred.ndim == 2:
        pred = pred[:, None, :]
    terms = rollout_terms(pred, batch, np.ones(3), dt, p, sigma_wdot)
    return terms.l_pi


def self_loop_predictions(model, batch, steps=10, dt=CONTROL_DT):
    """Feed the model's first predicted increment back ``steps`` times, torque held.

    Returns ``(pred, failed)`` with ``pred`` of shape (B, steps, 3). Rows whose
    prediction turned non-finite are flagged and their remaining steps set to NaN.
    """
    x = np.array(batch.features, dtype=float)
    B = len(x)
    pred = np.full((B, steps, 3), np.nan)
    failed = np.zeros(B, dtype=bool)
    spin = dt * batch.u / batch.irw
    for s in range(steps):
        with np.errstate(all="ignore"):
            d = model.predict_next(x)
        bad = ~np.all(np.isfinite(d), axis=1)
        failed |= bad
        d = np.where(failed[:, None], np.nan, d)
        pred[:, s] = d
        x = x.copy()
        x[:, 0:3] += d
        x[:, 3:6] += spin - d
        x[:, 9:12] = d / dt
    return pred, failed


@dataclass
class SelfLoopResult:
    mre: float
    physics_error: float
    per_step_mre: np.ndarray
    failed: np.ndarray
    pred: np.ndarray

    @property
    def n_failed(self):
        return int(self.failed.sum())


def self_loop_rollout(model, batch, steps=10, dt=CONTROL_DT, p=1e-2, sigma_wdot=None):
    """Recursive prediction metrics aggregated over ``steps`` steps.

    Failed (diverged) rows are excluded from the averages and reported separately.
    """
    if steps > batch.steps:
        raise ValueError("batch does not hold enough ground-truth steps")
    pred, failed = self_loop_predictions(model, batch, steps, dt)
    ok = ~failed
    if not ok.any():
        return SelfLoopResult(np.inf, np.inf, np.full(steps, np.inf), failed, pred)
    sub = batch.subset(np.flatnonzero(ok)) if failed.any() else batch
    p_ok = pred[ok]
    rel = _relative_errors(p_ok, sub.targets[:, :steps])
    per_step = 100.0 * rel.mean(axis=0)
    phys = physics_error(p_ok, sub, dt, p, sigma_wdot)
    return SelfLoopResult(float(per_step.mean()), phys, per_step, failed, pred)


@dataclass
class RegressorMetrics:
    mre_single: float
    physics_single: float
    mre_self_loop: float
    physics_self_loop: float
    n_failed: int
    per_trajectory_mre: dict
    per_trajectory_physics: dict

    def as_dict(self):
        return {
            "mre_single_step": self.mre_single,
            "physics_error_single_step": self.physics_single,
            "mre_self_loop": self.mre_self_loop,
            "physics_error_self_loop": self.physics_self_loop,
            "n_failed": self.n_failed,
        }


def regressor_metrics(model, batch, steps=10, dt=CONTROL_DT, p=1e-2, sigma_wdot=None):
    """Single-step and self-loop metrics, overall and per simulation."""
    if sigma_wdot is None:
        sigma_wdot = wdot_scale(batch)
    single = self_loop_rollout(model, batch, 1, dt, p, sigma_wdot)
    loop = self_loop_rollout(model, batch, steps, dt, p, sigma_wdot)
    per_mre, per_phys = {}, {}
    ok = ~loop.failed
    for sim in np.unique(batch.sim_id):
        rows = np.flatnonzero((batch.sim_id == sim) & ok)
        if len(rows) == 0:
            per_mre[int(sim)] = per_phys[int(sim)] = np.inf
            continue
        sub = batch.subset(rows)
        rel = _relative_errors(loop.pred[rows], sub.targets[:, :steps])
        per_mre[int(sim)] = float(100.0 * rel.mean())
        per_phys[int(sim)] = physics_error(loop.pred[rows], sub, dt, p, sigma_wdot)
    return RegressorMetrics(single.mre, single.physics_error, loop.mre, loop.physics_error,
                            loop.n_failed, per_mre, per_phys)
