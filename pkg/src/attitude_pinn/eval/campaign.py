"""Closed-loop Monte-Carlo campaigns: rest-to-rest maneuvers under uncertainty and noise.

Each run perturbs the plant once (inertia, mass, wheel-friction activation), then
steps a controller that only sees a noisy copy of the true state. Controllers
always work with the nominal parameters.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import quaternion as quat
from ..control import (HybridConfig, HybridController, LinearMpc, MpcProblem, NonlinearMpc,
                       build_linear_model)
from ..dynamics import (RPM, BodyState, DisturbanceConfig, FrictionConfig, IntegrationError,
                        Plant, SpacecraftParams, attitude_error)

log = logging.getLogger(__name__)

CONTROLLERS = ("mlp-ld", "mlp-ld+linear", "nonlinear", "linear")
SETTLE_DEG = 1.0
TRACE_COLUMNS = ["t", "mode", "error_deg", "omega_x", "omega_y", "omega_z", "omega_rw_x",
                 "omega_rw_y", "omega_rw_z", "u_x", "u_y", "u_z", "iterations", "cost"]


@dataclass
class NoiseConfig:
    state_noise_frac: float = 0.03
    inertia_err_frac: float = 0.10
    mass_err_frac: float = 0.20
    friction: FrictionConfig | None = field(default_factory=FrictionConfig)
    init_error_range: tuple = (math.pi / 8, math.pi / 2)
    n_runs: int = 30
    seed: int = 0
    horizon: float = 360.0
    control_period: float = 0.1
    integration_dt: float = 0.001
    rw_init_rpm: float = 300.0
    disturbances: bool = True
    steady_window: float = 60.0

    def __post_init__(self):
        for name in ("state_noise_frac", "inertia_err_frac", "mass_err_frac", "rw_init_rpm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        lo, hi = self.init_error_range
        if not 0 <= lo < hi <= math.pi:
            raise ValueError("init_error_range must be a non-degenerate interval in [0, pi]")
        if self.n_runs < 1:
            raise ValueError("n_runs must be at least 1")
        if not (self.horizon > self.steady_window > 0 and self.control_period > 0):
            raise ValueError("horizon must exceed the steady-state window")

    @classmethod
    def noise_free(cls, **kw):
        """Nominal plant, exact state feedback, no friction."""
        base = dict(state_noise_frac=0.0, inertia_err_frac=0.0, mass_err_frac=0.0,
                    friction=None)
        base.update(kw)
        return cls(**base)

    @property
    def n_steps(self):
        return int(round(self.horizon / self.control_period))


@dataclass
class ControllerSpec:
    kind: str
    model: object = None
    hybrid: HybridConfig = field(default_factory=HybridConfig)
    max_iter: int = 50

    def __post_init__(self):
        if self.kind not in CONTROLLERS:
            raise ValueError(f"unknown controller {self.kind!r}; valid: {', '.join(CONTROLLERS)}")
        if self.kind.startswith("mlp") and self.model is None:
            raise ValueError(f"controller {self.kind!r} needs a trained model")

    def build(self, params, dt):
        if self.kind == "linear":
            return LinearMpc(build_linear_model(params, dt), u_max=params.u_max)
        oracle = "analytic" if self.kind == "nonlinear" else "learned"
        nl = NonlinearMpc(MpcProblem(oracle=oracle, u_max=params.u_max, dt=dt,
                                     max_iter=self.max_iter), params, self.model)
        if self.kind == "mlp-ld+linear":
            lin = LinearMpc(build_linear_model(params, dt), u_max=params.u_max)
            return HybridController(nl, lin, self.hybrid)
        return nl


@dataclass
class RunResult:
    run: int
    settling_time: float
    steady_state_error: float
    rms_torque: float
    initial_error: float
    failed: bool
    trace: dict
    switches: list
    message: str = ""

    @property
    def settled(self):
        return math.isfinite(self.settling_time)


def settling_time(errors, dt, threshold=SETTLE_DEG):
    """First time after which the error stays below ``threshold``; ``errors[0]`` is at t = 0."""
    errors = np.asarray(errors)
    above = np.flatnonzero(~(errors < threshold))
    if len(above) == 0:
        return 0.0
    last = above[-1]
    if last == len(errors) - 1:
        return math.inf
    return float((last + 1) * dt)


def observe(state, prev_omega, dt, frac, rng):
    """Noisy copy of the state; the acceleration is a backward difference of the true rate."""
    wdot = (state.omega - prev_omega) / dt

    def noisy(v):
        return v + frac * np.abs(v) * rng.standard_normal(v.shape) if frac > 0 else v.copy()

    q = noisy(state.q)
    return BodyState(q / np.linalg.norm(q), noisy(state.omega), noisy(state.omega_rw),
                     noisy(wdot))


def run_single(spec, noise, run_index, nominal=None):
    nominal = nominal or SpacecraftParams.nominal()
    rng = np.random.default_rng([noise.seed, run_index])
    noise_rng = np.random.default_rng([noise.seed, run_index, 1])
    angle = rng.uniform(*noise.init_error_range)
    axis = rng.standard_normal(3)
    q0 = quat.from_axis_angle(axis, angle)
    w_rw0 = rng.uniform(-noise.rw_init_rpm, noise.rw_init_rpm, size=3) * RPM
    if noise.inertia_err_frac > 0 or noise.mass_err_frac > 0:
        params = nominal.perturbed(rng, noise.inertia_err_frac, noise.mass_err_frac)
    else:
        params = nominal
    activation = (noise.friction.draw_activation_speed(rng, params.omega_rw_max)
                  if noise.friction is not None else None)
    env = (DisturbanceConfig(initial_phase=rng.uniform(0.0, 2.0 * np.pi))
           if noise.disturbances else DisturbanceConfig.disabled())
    plant = Plant(params, env, noise.friction, activation, noise.integration_dt)
    dt = noise.control_period
    controller = spec.build(nominal, dt)
    target = np.array([1.0, 0.0, 0.0, 0.0])

    n = noise.n_steps
    err = np.full(n + 1, np.nan)
    modes = np.empty(n, dtype=object)
    omega = np.full((n + 1, 3), np.nan)
    omega_rw = np.full((n + 1, 3), np.nan)
    u = np.zeros((n, 3))
    iters = np.zeros(n, dtype=np.int64)
    cost = np.full(n, np.nan)
    state = BodyState(q0, np.zeros(3), w_rw0)
    err[0], omega[0], omega_rw[0] = attitude_error(q0), state.omega, state.omega_rw
    prev_w = state.omega.copy()
    failed, message = False, ""
    for k in range(n):
        obs = observe(state, prev_w, dt, noise.state_noise_frac, noise_rng)
        try:
            if isinstance(controller, HybridController):
                out = controller.step(obs, target, t=k * dt)
            else:
                out = controller.step(obs, target)
            cmd = np.clip(out.u, -params.u_max, params.u_max)
            prev_w = state.omega.copy()
            state = plant.step(state, cmd, dt)
        except (IntegrationError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
            failed, message = True, f"step {k}: {exc}"
            log.warning("run %d failed at step %d: %s", run_index, k, exc)
            break
        modes[k], u[k], iters[k], cost[k] = out.mode, cmd, out.iterations, out.cost
        err[k + 1] = attitude_error(state.q)
        omega[k + 1], omega_rw[k + 1] = state.omega, state.omega_rw
    if failed:
        settle, sse = math.inf, math.inf
    else:
        settle = settling_time(err, dt)
        window = int(round(noise.steady_window / dt))
        sse = float(np.mean(err[-window:]))
    trace = {"t": np.arange(n + 1) * dt, "error_deg": err, "omega": omega, "omega_rw": omega_rw,
             "u": u, "mode": modes, "iterations": iters, "cost": cost}
    switches = list(getattr(controller, "switches", []))
    rms = float(np.sqrt(np.mean(u ** 2)))
    return RunResult(run_index, settle, sse, rms, float(np.degrees(angle)), failed, trace,
                     switches, message)


def _percentile(sorted_v, frac):
    # linear interpolation that keeps +inf where numpy would produce inf - inf
    pos = frac * (len(sorted_v) - 1)
    lo, hi = int(math.floor(pos)), int(math.ceil(pos))
    if lo == hi or math.isinf(sorted_v[hi]):
        return float(sorted_v[hi] if lo != hi else sorted_v[lo])
    return float(sorted_v[lo] + (sorted_v[hi] - sorted_v[lo]) * (pos - lo))


def _quartiles(values):
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 0:
        return (math.nan,) * 3
    return tuple(_percentile(v, f) for f in (0.25, 0.5, 0.75))


def _iqr(q1, q3):
    return math.nan if math.isinf(q1) else q3 - q1


@dataclass
class CampaignSummary:
    controller: str
    n_runs: int
    n_settled: int
    n_failed: int
    settling_q1: float
    settling_median: float
    settling_q3: float
    sse_q1: float
    sse_median: float
    sse_q3: float
    campaign_failure: bool


def summarize(kind, results):
    """Medians and quartiles; unsettled runs are dropped from settling statistics only if rare."""
    settle = np.array([r.settling_time for r in results])
    finite = np.isfinite(settle)
    n = len(results)
    unsettled = n - int(finite.sum())
    failure = unsettled >= 0.1 * n and unsettled > 0
    st = _quartiles(settle if failure else settle[finite])
    sse = np.array([r.steady_state_error for r in results])
    ss = _quartiles(sse[np.isfinite(sse)])
    return CampaignSummary(kind, n, int(finite.sum()), sum(r.failed for r in results),
                           st[0], st[1], st[2], ss[0], ss[1], ss[2], bool(failure))


@dataclass
class MetricReport:
    summaries: list
    p_values: dict = field(default_factory=dict)
    regressor: dict = field(default_factory=dict)

    def table(self):
        head = ("controller", "steady_state_error_median_deg", "steady_state_error_iqr_deg",
                "settling_time_median_s", "settling_time_iqr_s", "settled_runs")
        lines = ["\t".join(head)]
        for s in self.summaries:
            lines.append("\t".join([
                s.controller, repr(s.sse_median), repr(_iqr(s.sse_q1, s.sse_q3)),
                repr(s.settling_median), repr(_iqr(s.settling_q1, s.settling_q3)),
                f"{s.n_settled}/{s.n_runs}",
            ]))
        for key, p in sorted(self.p_values.items()):
            lines.append(f"# wilcoxon {key}\t{p!r}")
        return "\n".join(lines) + "\n"


def _run_star(args):
    return run_single(*args)


def run_mc_campaign(spec, noise, jobs=1, nominal=None):
    """All runs of one controller; results come back ordered by run index."""
    tasks = [(spec, noise, i, nominal) for i in range(noise.n_runs)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_star, tasks))
    else:
        results = [_run_star(t) for t in tasks]
    return results, MetricReport([summarize(spec.kind, results)])


def compare_settling(results_a, results_b):
    """Paired Wilcoxon p-value on settling times (unsettled runs are capped at the horizon)."""
    from .stats import wilcoxon_signed_rank
    cap = max(r.trace["t"][-1] for r in results_a + results_b)
    a = [min(r.settling_time, cap) for r in results_a]
    b = [min(r.settling_time, cap) for r in results_b]
    return wilcoxon_signed_rank(a, b)


def write_trace(path, result):
    """Per-step columnar text trace of one run."""
    tr = result.trace
    rows = ["\t".join(TRACE_COLUMNS)]
    for k in range(len(tr["u"])):
        if tr["mode"][k] is None:
            break
        vals = [repr(float(tr["t"][k + 1])), str(tr["mode"][k]), repr(float(tr["error_deg"][k + 1]))]
        vals += [repr(float(v)) for v in tr["omega"][k + 1]]
        vals += [repr(float(v)) for v in tr["omega_rw"][k + 1]]
        vals += [repr(float(v)) for v in tr["u"][k]]
        vals += [str(int(tr["iterations"][k])), repr(float(tr["cost"][k]))]
        rows.append("\t".join(vals))
    from ..dataset import atomic_write
    atomic_write(path, ("\n".join(rows) + "\n").encode())
