"""Excitation campaigns, supervised transition samples and the on-disk dataset format."""

import io
import os
from dataclasses import dataclass, field

import numpy as np

from . import quaternion as quat
from .dynamics import (RPM, BodyState, ConfigurationError, DisturbanceConfig, IntegrationError,
                       Plant, SpacecraftParams)

FORMAT_NAME = "attitude_pinn-dataset"
FORMAT_VERSION = 1

STATE_COLUMNS = [
    "omega_x", "omega_y", "omega_z",
    "omega_rw_x", "omega_rw_y", "omega_rw_z",
    "u_rw_x", "u_rw_y", "u_rw_z",
    "omega_dot_x", "omega_dot_y", "omega_dot_z",
]
TARGET_COLUMNS = ["d_omega_x", "d_omega_y", "d_omega_z"]
INERTIA_COLUMNS = ["Is_xx", "Is_xy", "Is_xz", "Is_yy", "Is_yz", "Is_zz",
                   "Irw_x", "Irw_y", "Irw_z"]
COLUMNS = ["split", "sim_id", "step_id"] + STATE_COLUMNS + TARGET_COLUMNS + INERTIA_COLUMNS


class DatasetParseError(ValueError):
    def __init__(self, offset, message):
        super().__init__(f"byte {offset}: {message}")
        self.offset = offset


class DatasetVersionError(ValueError):
    pass


class DegenerateDatasetError(ValueError):
    pass


@dataclass
class CampaignConfig:
    n_simulations: int = 300
    n_perturbed: int = 50
    duration: float = 180.0
    control_period: float = 0.1
    integration_dt: float = 0.001
    rw_init_rpm: float = 300.0
    attitude_seed_range: float = np.pi
    perturb_inertia_frac: float = 0.10
    perturb_mass_frac: float = 0.10
    retarget_period: float = 60.0
    kp: float = 0.03
    kd: float = 0.2
    dither_amplitude: float = 0.04
    dither_hold: float = 10.0
    rate_guard: float = 0.05
    disturbances: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        ratio = self.control_period / self.integration_dt
        if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
            raise ConfigurationError("control_period must be an integer multiple of integration_dt")
        steps = self.duration / self.control_period
        if abs(steps - round(steps)) > 1e-9 * steps or round(steps) < 3:
            raise ConfigurationError("duration must be a multiple of control_period (>= 3 steps)")
        if self.rw_init_rpm < 0 or not self.attitude_seed_range > 0:
            raise ConfigurationError("sampling ranges must be non-degenerate")
        if self.n_simulations < 0 or self.n_perturbed < 0:
            raise ConfigurationError("simulation counts must be non-negative")

    @property
    def n_steps(self):
        return int(round(self.duration / self.control_period))

    @property
    def total_simulations(self):
        return self.n_simulations + self.n_perturbed


@dataclass
class Trajectory:
    """States sampled at the control period; ``u[t]`` is held over ``[t, t+1)``."""

    sim_id: int
    params: SpacecraftParams
    t: np.ndarray
    q: np.ndarray
    omega: np.ndarray
    omega_rw: np.ndarray
    omega_dot: np.ndarray
    u: np.ndarray
    dt: float

    @property
    def n_states(self):
        return len(self.t)


@dataclass
class TransitionSample:
    x: np.ndarray  # omega, omega_rw, u_rw, omega_dot
    y: np.ndarray  # omega_{t+1} - omega_t
    inertia_ctx: np.ndarray
    sim_id: int
    step_id: int


@dataclass
class SampleSet:
    """Column-stacked transition samples."""

    x: np.ndarray
    y: np.ndarray
    ctx: np.ndarray
    sim_id: np.ndarray
    step_id: np.ndarray

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i):
        return TransitionSample(self.x[i].copy(), self.y[i].copy(), self.ctx[i].copy(),
                                int(self.sim_id[i]), int(self.step_id[i]))

    def subset(self, idx):
        return SampleSet(self.x[idx], self.y[idx], self.ctx[idx], self.sim_id[idx],
                         self.step_id[idx])

    @property
    def features(self):
        """21-column model input: state/command then inertia context."""
        return np.hstack((self.x, self.ctx))

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        return cls(*(np.concatenate([getattr(s, f) for s in sets])
                     for f in ("x", "y", "ctx", "sim_id", "step_id")))

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 12)), np.zeros((0, 3)), np.zeros((0, 9)),
                   np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))


@dataclass
class Normalization:
    x_mean: np.ndarray  # 21
    x_std: np.ndarray
    y_mean: np.ndarray  # 3
    y_std: np.ndarray  # sigma of the target velocity increment, per axis

    @classmethod
    def from_samples(cls, samples):
        feats = samples.features
        x_mean = feats.mean(axis=0)
        x_std = feats.std(axis=0)
        # constant columns (e.g. nominal-only inertia) are centred but not scaled
        flat = x_std <= 1e-9 * np.maximum(np.abs(x_mean), 1e-300)
        x_std[flat] = 1.0
        y_mean = samples.y.mean(axis=0)
        y_std = samples.y.std(axis=0)
        if np.any(y_std <= 0) or not np.all(np.isfinite(y_std)):
            raise DegenerateDatasetError("target variance is zero on some axis")
        return cls(x_mean, x_std, y_mean, y_std)


@dataclass
class DatasetSplit:
    train: SampleSet
    val: SampleSet
    normalization: Normalization = field(default=None)

    def __post_init__(self):
        if self.normalization is None:
            self.normalization = Normalization.from_samples(self.train)

    @property
    def pool(self):
        return SampleSet.concat([self.train, self.val])


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def excitation_torque(q_err, omega, kp, kd, u_max, dither=0.0):
    """Quaternion-error PD law plus a held dither, expressed as wheel torque.

    The body feels ``-u``.
    """
    return np.clip(kp * q_err[1:] + kd * omega + dither, -u_max, u_max)


def draw_dither(rng, omega, amplitude, rate_guard):
    """Fresh held dither; on axes spinning faster than ``rate_guard`` it opposes the rate.

    This keeps body rates, and through momentum exchange the wheel speeds, away
    from their limits without a separate momentum-management loop.
    """
    d = rng.uniform(-amplitude, amplitude, size=3)
    fast = np.abs(omega) > rate_guard
    d[fast] = np.sign(omega[fast]) * np.abs(d[fast])
    return d


def sim_params(config, sim_index, nominal=None):
    nominal = nominal or SpacecraftParams.nominal()
    if sim_index < config.n_simulations:
        return nominal
    rng = np.random.default_rng([config.rng_seed, sim_index, 1])
    return nominal.perturbed(rng, config.perturb_inertia_frac, config.perturb_mass_frac)


def run_excitation_sim(config, sim_index, nominal=None):
    """One excitation run; simulations past ``n_simulations`` use perturbed inertia."""
    rng = np.random.default_rng([config.rng_seed, sim_index])
    params = sim_params(config, sim_index, nominal)
    if config.attitude_seed_range >= np.pi:
        q0 = quat.random_uniform(rng)
    else:
        q0 = quat.random_with_angle(rng, 0.0, config.attitude_seed_range)
    w_rw0 = rng.uniform(-config.rw_init_rpm, config.rw_init_rpm, size=3) * RPM
    if config.disturbances:
        env = DisturbanceConfig(initial_phase=rng.uniform(0.0, 2.0 * np.pi))
    else:
        env = DisturbanceConfig.disabled()
    plant = Plant(params, env, integration_dt=config.integration_dt)

    n = config.n_steps
    dt = config.control_period
    retarget = max(1, int(round(config.retarget_period / dt)))
    hold = max(1, int(round(config.dither_hold / dt)))
    dither = np.zeros(3)
    q = np.zeros((n + 1, 4))
    w = np.zeros((n + 1, 3))
    r = np.zeros((n + 1, 3))
    wd = np.zeros((n + 1, 3))
    u = np.zeros((n, 3))
    state = BodyState(q0, np.zeros(3), w_rw0)
    target = np.array([1.0, 0.0, 0.0, 0.0])
    for k in range(n + 1):
        q[k], w[k], r[k], wd[k] = state.q, state.omega, state.omega_rw, state.omega_dot
        if k == n:
            break
        if k % retarget == 0 and k > 0:
            target = quat.random_uniform(rng)
        if k % hold == 0:
            dither = draw_dither(rng, state.omega, config.dither_amplitude, config.rate_guard)
        q_err = quat.error(state.q, target)
        u[k] = excitation_torque(q_err, state.omega, config.kp, config.kd, params.u_max, dither)
        try:
            state = plant.step(state, u[k], dt)
        except IntegrationError as exc:
            raise IntegrationError(exc.step, f"simulation {sim_index}: non-finite state") from exc
    return Trajectory(sim_index, params, np.arange(n + 1) * dt, q, w, r, wd, u, dt)


def extract_samples(traj):
    """One sample per interior step ``t = 1 .. T-1``.

    Input angular acceleration is the backward difference of the stored rates;
    the target is the next increment ``omega_{t+1} - omega_t``.
    """
    if traj.n_states < 3:
        raise ValueError("trajectory needs at least 3 states")
    w = traj.omega
    t = np.arange(1, traj.n_states - 1)
    wdot = (w[t] - w[t - 1]) / traj.dt
    x = np.hstack((w[t], traj.omega_rw[t], traj.u[t], wdot))
    y = w[t + 1] - w[t]
    ctx = np.tile(traj.params.inertia_context(), (len(t), 1))
    return SampleSet(x, y, ctx, np.full(len(t), traj.sim_id, dtype=np.int64), t.astype(np.int64))


def run_campaign(config, jobs=1, nominal=None):
    """Simulate every run of the campaign and return the pooled samples."""
    indices = range(config.total_simulations)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trajs = list(pool.map(run_excitation_sim, [config] * len(indices), indices))
    else:
        trajs = [run_excitation_sim(config, i, nominal) for i in indices]
    return SampleSet.concat(extract_samples(tr) for tr in trajs)


def build_split(samples, ratio=0.67, seed=0):
    if len(samples) < 100:
        raise ValueError("need at least 100 samples to split")
    perm = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(ratio * len(samples)))
    train_idx = np.sort(perm[:n_train])
    val_idx = np.sort(perm[n_train:])
    return DatasetSplit(samples.subset(train_idx), samples.subset(val_idx))


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------
#
#   #attitude_pinn-dataset,version=1
#   #n_train=<int>,n_val=<int>
#   split,sim_id,step_id,<12 input columns>,<3 target columns>,<9 inertia columns>
#   T|V,<int>,<int>,<24 floats in repr form>      (one row per sample)
#   #end,rows=<int>
#
# Floats are written with repr() so a round trip is exact.

def _rows(tag, s):
    for i in range(len(s)):
        vals = [*s.x[i], *s.y[i], *s.ctx[i]]
        yield f"{tag},{int(s.sim_id[i])},{int(s.step_id[i])}," + ",".join(map(repr, map(float, vals)))


def dumps_dataset(split):
    buf = io.StringIO()
    buf.write(f"#{FORMAT_NAME},version={FORMAT_VERSION}\n")
    buf.write(f"#n_train={len(split.train)},n_val={len(split.val)}\n")
    buf.write(",".join(COLUMNS) + "\n")
    for line in _rows("T", split.train):
        buf.write(line + "\n")
    for line in _rows("V", split.val):
        buf.write(line + "\n")
    buf.write(f"#end,rows={len(split.train) + len(split.val)}\n")
    return buf.getvalue()


def atomic_write(path, data):
    tmp = f"{path}.tmp{os.getpid()}"
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_dataset(split, path):
    atomic_write(path, dumps_dataset(split))


def loads_dataset(text):
    offset = 0
    lines = text.split("\n")
    if not lines or not lines[0].startswith("#" + FORMAT_NAME):
        raise DatasetParseError(0, "missing dataset signature")
    try:
        version = int(lines[0].split("version=")[1])
    except (IndexError, ValueError):
        raise DatasetParseError(0, "malformed version field") from None
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"dataset version {version}, expected {FORMAT_VERSION}")
    offset += len(lines[0]) + 1
    try:
        counts = dict(kv.split("=") for kv in lines[1].lstrip("#").split(","))
        n_train, n_val = int(counts["n_train"]), int(counts["n_val"])
    except (IndexError, KeyError, ValueError):
        raise DatasetParseError(offset, "malformed count line") from None
    offset += len(lines[1]) + 1
    if len(lines) < 3 or lines[2].split(",") != COLUMNS:
        raise DatasetParseError(offset, "column header does not match the expected layout")
    offset += len(lines[2]) + 1

    n_rows = n_train + n_val
    data = np.empty((n_rows, 24))
    sim = np.empty(n_rows, dtype=np.int64)
    step = np.empty(n_rows, dtype=np.int64)
    tags = []
    for i in range(n_rows):
        li = 3 + i
        if li >= len(lines) or lines[li].startswith("#") or not lines[li]:
            raise DatasetParseError(offset, f"truncated: expected {n_rows} rows, found {i}")
        parts = lines[li].split(",")
        if len(parts) != len(COLUMNS) or parts[0] not in ("T", "V"):
            raise DatasetParseError(offset, f"row {i} has a malformed layout")
        try:
            sim[i], step[i] = int(parts[1]), int(parts[2])
            data[i] = [float(v) for v in parts[3:]]
        except ValueError:
            raise DatasetParseError(offset, f"row {i} has a non-numeric field") from None
        tags.append(parts[0])
        offset += len(lines[li]) + 1
    end = lines[3 + n_rows] if 3 + n_rows < len(lines) else ""
    if end != f"#end,rows={n_rows}":
        raise DatasetParseError(offset, "missing or inconsistent end marker")
    is_train = np.array([t == "T" for t in tags], dtype=bool)
    if is_train.sum() != n_train:
        raise DatasetParseError(offset, "split tags disagree with the declared counts")
    full = SampleSet(data[:, :12], data[:, 12:15], data[:, 15:24], sim, step)
    return DatasetSplit(full.subset(is_train), full.subset(~is_train))


def load_dataset(path):
    with open(path) as fh:
        return loads_dataset(fh.read())
