"""Fully connected regressor from (state, command, inertia) to an S-step increment trajectory.

Inputs are z-scored with training statistics and outputs are de-normalized to
physical rad/s, so callers only ever see SI quantities. Output block ``s``
(``out[3s:3s+3]``) is the predicted velocity increment ``s + 1`` steps ahead.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"APINNMLP"
FILE_VERSION = 1

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "identity": (lambda z: z, lambda a: np.ones_like(a)),
}


class ModelCorruptError(RuntimeError):
    pass


class ModelVersionError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


@dataclass
class MlpConfig:
    input_dim: int = 21
    hidden_layers: int = 4
    hidden_units: int = 16
    steps: int = 10
    activation: str = "tanh"

    def __post_init__(self):
        if min(self.input_dim, self.hidden_units, self.steps) < 1 or self.hidden_layers < 0:
            raise ValueError("MLP dimensions must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def output_dim(self):
        return 3 * self.steps

    @property
    def layer_dims(self):
        return [self.input_dim] + [self.hidden_units] * self.hidden_layers + [self.output_dim]


@dataclass
class GradientBuffer:
    weights: list
    biases: list

    @classmethod
    def zeros_like(cls, model):
        return cls([np.zeros_like(w) for w in model.weights],
                   [np.zeros_like(b) for b in model.biases])

    def zero(self):
        for a in self.weights + self.biases:
            a.fill(0.0)

    def flat(self):
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


@dataclass
class MlpModel:
    config: MlpConfig
    weights: list  # weights[l] has shape (fan_out, fan_in)
    biases: list
    x_mean: np.ndarray = None
    x_std: np.ndarray = None
    y_mean: np.ndarray = None  # per axis, 3
    y_std: np.ndarray = None
    _cache: tuple = field(default=None, repr=False)

    def __post_init__(self):
        if self.x_mean is None:
            self.x_mean = np.zeros(self.config.input_dim)
            self.x_std = np.ones(self.config.input_dim)
            self.y_mean = np.zeros(3)
            self.y_std = np.ones(3)

    def set_normalization(self, norm):
        self.x_mean = np.array(norm.x_mean, dtype=float)
        self.x_std = np.array(norm.x_std, dtype=float)
        self.y_mean = np.array(norm.y_mean, dtype=float)
        self.y_std = np.array(norm.y_std, dtype=float)

    # -- parameters ---------------------------------------------------------

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat_params(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat_params(self, theta):
        k = 0
        for p in self.params:
            p[...] = theta[k:k + p.size].reshape(p.shape)
            k += p.size

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def copy(self):
        return MlpModel(self.config, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.x_mean.copy(), self.x_std.copy(),
                        self.y_mean.copy(), self.y_std.copy())

    # -- evaluation ---------------------------------------------------------

    def _out_scale(self):
        return np.tile(self.y_std, self.config.steps), np.tile(self.y_mean, self.config.steps)

    def forward(self, x):
        """Physical increments for a single 21-vector or a (B, 21) batch."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        for p in self.params:
            if not np.all(np.isfinite(p)):
                raise ModelCorruptError("model parameters contain non-finite values")
        act, _ = _ACTIVATIONS[self.config.activation]
        a = (xb - self.x_mean) / self.x_std
        acts = [a]
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            a = act(z) if i < n_layers - 1 else z
            acts.append(a)
        scale, shift = self._out_scale()
        out = a * scale + shift
        self._cache = (acts, single)
        return out[0] if single else out

    def backward(self, upstream):
        """Reverse pass for the most recent :meth:`forward`.

        Returns the parameter gradients of ``sum(out * upstream)`` and the
        gradient with respect to the (physical) input.
        """
        if self._cache is None:
            raise UsageError("backward called before forward")
        acts, single = self._cache
        g = np.asarray(upstream, dtype=float)
        g = g[None, :] if single else g
        _, dact = _ACTIVATIONS[self.config.activation]
        scale, _ = self._out_scale()
        g = g * scale
        grads = GradientBuffer.zeros_like(self)
        for i in range(len(self.weights) - 1, -1, -1):
            grads.weights[i] += g.T @ acts[i]
            grads.biases[i] += g.sum(axis=0)
            g = g @ self.weights[i]
            if i > 0:
                g = g * dact(acts[i])
        dx = g / self.x_std
        return grads, (dx[0] if single else dx)

    def predict_next(self, x):
        """Inference mode: only the one-step-ahead increment."""
        out = self.forward(x)
        return out[..., :3]

    def lipschitz_bound(self):
        """Upper bound on the input-output Lipschitz constant (2-norm)."""
        L = 1.0 / np.min(self.x_std)
        for w in self.weights:
            L *= np.linalg.norm(w, 2)
        return L * np.max(self.y_std)


def init_params(config, seed=0):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = config.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(config, weights, biases)


def forward(model, x):
    return model.forward(x)


def backward(model, upstream):
    return model.backward(upstream)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------
#
#   bytes 0-7   : b"APINNMLP"
#   bytes 8-11  : uint32 little-endian N, length of the JSON header
#   next N bytes: UTF-8 JSON header {format_version, input_dim, hidden_layers,
#                 hidden_units, steps, activation, n_params, x_mean, x_std,
#                 y_mean, y_std}
#   remainder   : n_params float64 little-endian values, layer by layer,
#                 each weight matrix row-major (fan_out, fan_in) then its bias

def dumps_model(model):
    c = model.config
    header = {
        "format_version": FILE_VERSION,
        "input_dim": c.input_dim,
        "hidden_layers": c.hidden_layers,
        "hidden_units": c.hidden_units,
        "steps": c.steps,
        "activation": c.activation,
        "n_params": model.n_params,
        "x_mean": [float(v) for v in model.x_mean],
        "x_std": [float(v) for v in model.x_std],
        "y_mean": [float(v) for v in model.y_mean],
        "y_std": [float(v) for v in model.y_std],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    blob = model.flat_params().astype("<f8").tobytes()
    return MAGIC + struct.pack("<I", len(raw)) + raw + blob


def loads_model(data):
    if data[:8] != MAGIC:
        raise ModelVersionError("not a model file")
    (n,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + n].decode())
    except ValueError as exc:
        raise ModelVersionError(f"unreadable header: {exc}") from None
    if header.get("format_version") != FILE_VERSION:
        raise ModelVersionError(f"model format {header.get('format_version')} is not supported")
    try:
        config = MlpConfig(header["input_dim"], header["hidden_layers"], header["hidden_units"],
                           header["steps"], header["activation"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ModelVersionError(f"bad model configuration: {exc}") from None
    model = init_params(config)
    blob = np.frombuffer(data[12 + n:], dtype="<f8")
    if header["n_params"] != model.n_params or blob.size != model.n_params:
        raise ModelVersionError("parameter count does not match the declared dimensions")
    norms = [np.array(header[k], dtype=float) for k in ("x_mean", "x_std", "y_mean", "y_std")]
    if norms[0].size != config.input_dim or norms[2].size != 3:
        raise ModelVersionError("normalization constants do not match the declared dimensions")
    model.set_flat_params(blob.astype(float))
    model.x_mean, model.x_std, model.y_mean, model.y_std = norms
    return model


def save_model(model, path):
    from .dataset import atomic_write
    atomic_write(path, dumps_model(model))


def load_model(path):
    with open(path, "rb") as fh:
        return loads_model(fh.read())
