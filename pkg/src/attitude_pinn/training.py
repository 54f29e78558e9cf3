"""Data-driven and physics-informed losses, multi-step rollouts and the training loop.

All losses come with hand-written reverse-mode gradients with respect to the
predicted increments; :meth:`MlpModel.backward` carries them into the weights.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .mlp import GradientBuffer

log = logging.getLogger(__name__)

CONTROL_DT = 0.1


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class RolloutConstructionError(ValueError):
    pass


@dataclass
class LossConfig:
    p: float = 1e-2
    beta_init: float = 0.5
    dual_step: float = 1e-2
    target_eps: float | None = None
    dt: float = CONTROL_DT
    mode: str = "ld"  # "dd" or "ld"

    def __post_init__(self):
        if self.p < 0:
            raise ValueError("p must be non-negative")
        if not 0.0 <= self.beta_init <= 1.0:
            raise ValueError("beta_init must lie in [0, 1]")
        if self.mode not in ("dd", "ld"):
            raise ValueError("mode must be 'dd' or 'ld'")
        if self.dual_step <= 0:
            raise ValueError("dual_step must be positive")


@dataclass
class TrainConfig:
    batch_size: int = 16384
    epochs: int = 500
    learning_rate: float = 1e-3
    lr_patience: int = 20
    lr_factor: float = 0.5
    min_lr: float = 1e-5
    early_stop_patience: int = 50
    seed: int = 0


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _nrmse(pred, ref, sigma):
    """Per-axis RMSE over the batch divided by ``sigma``, averaged over axes.

    Returns the value and its gradient with respect to ``pred``.
    """
    err = pred - ref
    rmse = np.sqrt(np.mean(err * err, axis=0))
    value = float(np.mean(rmse / sigma))
    safe = np.where(rmse > 0, rmse, 1.0)
    grad = np.where(rmse > 0, err / (len(err) * safe * sigma * len(sigma)), 0.0)
    return value, grad


def physics_accel(omega, omega_rw, u, Is, irw, Is_inv=None):
    """Batched body acceleration with zero external torque and body torque ``-u``."""
    h = np.einsum("bij,bj->bi", Is, omega) + irw * omega_rw
    rhs = -np.cross(omega, h) - u
    if Is_inv is None:
        Is_inv = np.linalg.inv(Is)
    return np.einsum("bij,bj->bi", Is_inv, rhs)


def _physics_accel_vjp(g, omega, omega_rw, Is, irw, Is_inv):
    """Pull ``g`` (adjoint of the acceleration) back to omega and omega_rw."""
    v = np.einsum("bij,bj->bi", Is_inv, g)
    h = np.einsum("bij,bj->bi", Is, omega) + irw * omega_rw
    wv = np.cross(omega, v)
    g_omega = -np.cross(h, v) + np.einsum("bij,bj->bi", Is, wv)
    g_rw = irw * wv
    return g_omega, g_rw


def loss_dd(pred, target, sigma):
    return _nrmse(np.asarray(pred), np.asarray(target), np.asarray(sigma))[0]


def loss_omega_dot(pred, omega, omega_rw, u, Is, irw, dt=CONTROL_DT, sigma=None):
    """NRMSE between ``pred / dt`` and the rigid-body acceleration at the same state."""
    ref = physics_accel(omega, omega_rw, u, Is, irw)
    if sigma is None:
        sigma = _safe_std(ref)
    return _nrmse(np.asarray(pred) / dt, ref, sigma)[0]


def loss_h(pred, omega, omega_rw, u, Is, irw, omega_next, omega_rw_next, dt=CONTROL_DT):
    """Mean squared difference of total angular momentum norms after one step."""
    rw_hat = omega_rw + dt * u / irw - pred
    h_hat = np.einsum("bij,bj->bi", Is, omega + pred) + irw * rw_hat
    h_true = np.einsum("bij,bj->bi", Is, omega_next) + irw * omega_rw_next
    diff = np.linalg.norm(h_hat, axis=1) - np.linalg.norm(h_true, axis=1)
    return float(np.mean(diff * diff))


def loss_total(l_dd, l_pi, beta):
    return (1.0 - beta) * l_dd + beta * l_pi


def _safe_std(a):
    s = a.std(axis=0)
    return np.where(s > 0, s, 1.0)


def beta_from_multiplier(lam):
    return lam / (1.0 + lam)


def multiplier_from_beta(beta):
    if beta >= 1.0:
        return np.inf
    return beta / (1.0 - beta)


def dual_update(lam, l_pi, target_eps, dual_step):
    """Projected dual ascent on the constraint ``L_PI <= target_eps``.

    Returns the new multiplier and the loss weight ``beta = lam / (1 + lam)``.
    """
    lam = max(0.0, lam + dual_step * (l_pi - target_eps))
    return lam, beta_from_multiplier(lam)


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    """Start states with the next ``S`` ground-truth steps of the same simulation."""

    features: np.ndarray  # (B, 21) model input at the start
    omega: np.ndarray  # (B, 3)
    omega_rw: np.ndarray  # (B, 3)
    u: np.ndarray  # (B, 3), held over the rollout
    targets: np.ndarray  # (B, S, 3) true increments
    omega_true: np.ndarray  # (B, S, 3) true rates after each step
    omega_rw_true: np.ndarray  # (B, S, 3)
    Is: np.ndarray  # (B, 3, 3)
    irw: np.ndarray  # (B, 3)
    sim_id: np.ndarray
    step_id: np.ndarray
    Is_inv: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.Is_inv is None:
            self.Is_inv = np.linalg.inv(self.Is)

    def __len__(self):
        return len(self.u)

    @property
    def steps(self):
        return self.targets.shape[1]

    def subset(self, idx):
        return RolloutBatch(*(getattr(self, f)[idx] for f in (
            "features", "omega", "omega_rw", "u", "targets", "omega_true", "omega_rw_true",
            "Is", "irw", "sim_id", "step_id", "Is_inv")))


def _ctx_to_inertia(ctx):
    c = ctx
    Is = np.stack([
        np.stack([c[:, 0], c[:, 1], c[:, 2]], axis=1),
        np.stack([c[:, 1], c[:, 3], c[:, 4]], axis=1),
        np.stack([c[:, 2], c[:, 4], c[:, 5]], axis=1),
    ], axis=1)
    return Is, c[:, 6:9].copy()


def build_rollouts(starts, pool, steps):
    """Pair every start sample with ``steps`` consecutive samples from ``pool``.

    Starts whose window would run past the end of their simulation are dropped,
    so a rollout never crosses a trajectory boundary.
    """
    key_pool = pool.sim_id * 10_000_000 + pool.step_id
    order = np.argsort(key_pool, kind="stable")
    sorted_keys = key_pool[order]
    key_start = starts.sim_id * 10_000_000 + starts.step_id
    rows = []
    ok = np.ones(len(starts), dtype=bool)
    for s in range(steps + 1):
        pos = np.searchsorted(sorted_keys, key_start + s)
        pos = np.minimum(pos, len(sorted_keys) - 1)
        ok &= sorted_keys[pos] == key_start + s
        rows.append(order[pos])
    rows = np.stack(rows, axis=1)[ok]
    if len(rows) == 0:
        raise RolloutConstructionError("no start sample has a full window of future steps")
    sel = np.flatnonzero(ok)
    targets = pool.y[rows[:, :steps]]
    omega_true = pool.x[rows[:, 1:], 0:3]
    omega_rw_true = pool.x[rows[:, 1:], 3:6]
    if np.any(pool.sim_id[rows] != starts.sim_id[sel, None]):
        raise RolloutConstructionError("rollout window crosses a simulation boundary")
    Is, irw = _ctx_to_inertia(starts.ctx[sel])
    return RolloutBatch(starts.features[sel], starts.x[sel, 0:3].copy(), starts.x[sel, 3:6].copy(),
                        starts.x[sel, 6:9].copy(), targets, omega_true, omega_rw_true, Is, irw,
                        starts.sim_id[sel], starts.step_id[sel])


@dataclass
class RolloutTerms:
    l_dd: float
    l_omega_dot: float
    l_h: float
    p: float
    per_step_dd: np.ndarray
    per_step_omega_dot: np.ndarray
    per_step_h: np.ndarray
    _cache: dict = field(default=None, repr=False)

    @property
    def l_pi(self):
        return self.l_omega_dot + self.p * self.l_h


def rollout_terms(pred, batch, sigma_dw, dt=CONTROL_DT, p=1e-2, sigma_wdot=None):
    """Propagate predicted increments with the torque held and evaluate both losses.

    ``pred`` has shape (B, S', 3) with ``S' <= batch.steps``. The rates follow the
    predicted increments; the wheel speeds follow the wheel equation driven by the
    predicted acceleration ``pred / dt``. The physics reference at step ``s`` is the
    rigid-body acceleration at the propagated state ``s``.
    """
    B, S, _ = pred.shape
    Is, irw, Is_inv, u = batch.Is, batch.irw, batch.Is_inv, batch.u
    ref0 = physics_accel(batch.omega, batch.omega_rw, u, Is, irw, Is_inv)
    if sigma_wdot is None:
        sigma_wdot = _safe_std(ref0)
    w, r = batch.omega.copy(), batch.omega_rw.copy()
    spin = dt * u / irw
    dd, wd, hh = np.zeros(S), np.zeros(S), np.zeros(S)
    cache = {"w": [], "r": [], "g_dd": [], "g_wd": [], "hvec": [], "hdiff": []}
    for s in range(S):
        d = pred[:, s]
        ref = ref0 if s == 0 else physics_accel(w, r, u, Is, irw, Is_inv)
        dd[s], g_dd = _nrmse(d, batch.targets[:, s], sigma_dw)
        wd[s], g_wd = _nrmse(d / dt, ref, sigma_wdot)
        cache["w"].append(w)
        cache["r"].append(r)
        w = w + d
        r = r + spin - d
        hvec = np.einsum("bij,bj->bi", Is, w) + irw * r
        htrue = (np.einsum("bij,bj->bi", Is, batch.omega_true[:, s])
                 + irw * batch.omega_rw_true[:, s])
        diff = np.linalg.norm(hvec, axis=1) - np.linalg.norm(htrue, axis=1)
        hh[s] = np.mean(diff * diff)
        cache["g_dd"].append(g_dd)
        cache["g_wd"].append(g_wd)
        cache["hvec"].append(hvec)
        cache["hdiff"].append(diff)
    cache.update(batch=batch, dt=dt)
    return RolloutTerms(float(dd.mean()), float(wd.mean()), float(hh.mean()), p, dd, wd, hh, cache)


def rollout_grad(terms, w_dd, w_pi):
    """Gradient of ``w_dd * L_DD + w_pi * L_PI`` with respect to the predictions."""
    c = terms._cache
    batch, dt = c["batch"], c["dt"]
    S = len(terms.per_step_dd)
    B = len(batch)
    grad = np.zeros((B, S, 3))
    g_w = np.zeros((B, 3))
    g_r = np.zeros((B, 3))
    for s in range(S - 1, -1, -1):
        if w_pi != 0.0:
            hvec, diff = c["hvec"][s], c["hdiff"][s]
            norm = np.linalg.norm(hvec, axis=1)
            safe = np.where(norm > 0, norm, 1.0)
            g_h = (w_pi * terms.p / S) * (2.0 * diff / B / safe)[:, None] * hvec
            g_w = g_w + np.einsum("bji,bj->bi", batch.Is, g_h)
            g_r = g_r + batch.irw * g_h
        g_d = g_w - g_r
        if w_dd != 0.0:
            g_d = g_d + (w_dd / S) * c["g_dd"][s]
        if w_pi != 0.0:
            g_acc = (w_pi / S) * c["g_wd"][s]
            g_d = g_d + g_acc / dt
            gw_prev, gr_prev = _physics_accel_vjp(-g_acc, c["w"][s], c["r"][s], batch.Is,
                                                  batch.irw, batch.Is_inv)
            g_w = g_w + gw_prev
            g_r = g_r + gr_prev
        grad[:, s] = g_d
    return grad


def rollout_losses(model, batch, loss_config, sigma_dw=None):
    """(L_DD, L_PI) of the model's single-pass S-step prediction on ``batch``."""
    pred = model.forward(batch.features).reshape(len(batch), -1, 3)[:, :batch.steps]
    sigma = model.y_std if sigma_dw is None else sigma_dw
    terms = rollout_terms(pred, batch, sigma, loss_config.dt, loss_config.p)
    return terms.l_dd, terms.l_pi


def loss_and_grad(model, batch, sigma_dw, w_dd, w_pi, dt=CONTROL_DT, p=1e-2):
    """Total loss and parameter gradients for one mini-batch."""
    out = model.forward(batch.features)
    pred = out.reshape(len(batch), -1, 3)
    terms = rollout_terms(pred, batch, sigma_dw, dt, p)
    g_pred = rollout_grad(terms, w_dd, w_pi)
    grads, _ = model.backward(g_pred.reshape(len(batch), -1))
    value = w_dd * terms.l_dd + w_pi * terms.l_pi
    return value, terms, grads


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    l_dd: float
    l_pi: float
    beta: float
    val_l_dd: float
    val_l_pi: float
    lr: float


@dataclass
class TrainResult:
    model: object
    history: list
    best_epoch: int
    target_eps: float | None


def _flat_grads(grads):
    out = []
    for w, b in zip(grads.weights, grads.biases):
        out += [w, b]
    return out


def evaluate_rollouts(model, batch, sigma_dw, loss_config, chunk=65536):
    """Batch-level (L_DD, L_PI) on a possibly large rollout set."""
    if len(batch) <= chunk:
        return rollout_losses(model, batch, loss_config, sigma_dw)
    idx = np.arange(len(batch))
    vals = [rollout_losses(model, batch.subset(idx[i:i + chunk]), loss_config, sigma_dw)
            for i in range(0, len(batch), chunk)]
    sizes = [min(chunk, len(batch) - i) for i in range(0, len(batch), chunk)]
    dd = np.average([v[0] for v in vals], weights=sizes)
    pi = np.average([v[1] for v in vals], weights=sizes)
    return float(dd), float(pi)


def train(model, split, train_config, loss_config, callback=None, checkpoint=None):
    """Mini-batch Adam over S-step rollouts with optional Lagrangian-dual weighting.

    In ``dd`` mode the physics weight is pinned to zero and the physics terms only
    feed the history. In ``ld`` mode the physics loss is treated as the constraint
    ``L_PI <= target_eps``; after every epoch the multiplier takes a projected
    ascent step and the loss weight becomes ``beta = lam / (1 + lam)``.

    ``checkpoint(model, epoch)`` is called with a copy of every new best model.
    """
    model.set_normalization(split.normalization)
    steps = model.config.steps
    train_b = build_rollouts(split.train, split.pool, steps)
    val_b = build_rollouts(split.val, split.pool, steps)
    sigma = split.normalization.y_std
    ld = loss_config.mode == "ld"
    if ld and loss_config.target_eps is None:
        raise ValueError("ld mode needs loss_config.target_eps")
    lam = multiplier_from_beta(loss_config.beta_init) if ld else 0.0
    beta = beta_from_multiplier(lam) if ld else 0.0

    rng = np.random.default_rng(train_config.seed)
    opt = Adam(model.params, lr=train_config.learning_rate)
    bs = min(train_config.batch_size, len(train_b))
    history = []
    best = (np.inf, -1, model.copy())
    lr_wait = stop_wait = 0
    lr_best = np.inf
    for epoch in range(train_config.epochs):
        perm = rng.permutation(len(train_b))
        sums = np.zeros(2)
        for i in range(0, len(perm), bs):
            mb = train_b.subset(perm[i:i + bs])
            _, terms, grads = loss_and_grad(model, mb, sigma, 1.0 - beta, beta,
                                            loss_config.dt, loss_config.p)
            if not (np.isfinite(terms.l_dd) and (np.isfinite(terms.l_pi) or not ld)):
                raise TrainingDivergedError(epoch)
            opt.step(_flat_grads(grads))
            sums += len(mb) * np.array([terms.l_dd, terms.l_pi])
        l_dd, l_pi = sums / len(perm)
        val_dd, val_pi = evaluate_rollouts(model, val_b, sigma, loss_config)
        if not (np.isfinite(val_dd) and (np.isfinite(val_pi) or not ld)):
            raise TrainingDivergedError(epoch)
        history.append(EpochRecord(epoch, float(l_dd), float(l_pi), float(beta), val_dd, val_pi,
                                   opt.lr))
        if callback is not None:
            callback(history[-1])
        metric = val_dd + val_pi if ld else val_dd
        if metric < best[0]:
            best = (metric, epoch, model.copy())
            stop_wait = 0
            if checkpoint is not None:
                checkpoint(best[2], epoch)
        else:
            stop_wait += 1
        if metric < lr_best * (1.0 - 1e-4):
            lr_best, lr_wait = metric, 0
        else:
            lr_wait += 1
            if lr_wait >= train_config.lr_patience:
                opt.lr = max(train_config.min_lr, opt.lr * train_config.lr_factor)
                lr_wait = 0
        if ld:
            lam, beta = dual_update(lam, l_pi, loss_config.target_eps, loss_config.dual_step)
        if stop_wait >= train_config.early_stop_patience:
            break
    return TrainResult(best[2], history, best[1], loss_config.target_eps if ld else None)
