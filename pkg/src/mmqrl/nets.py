"""Policy and value networks with hand-written backprop.

Both architectures keep every weight in one flat vector. ``layout`` lists the
tensors in storage order (each layer's weight, then its bias); ``unflatten``
returns reshaped views into the flat vector, so gradients and Adam state can
be handled as plain 1-D arrays.

Observation layouts:

* plane: ``[pose 15, goal 2]``
* obstacles: ``[pose 15, goal 2, map 16*16*2]`` with the map stored row-major
  as (row, column, channel).

Dense weights are (in, out); conv kernels are (kh, kw, c_in, c_out) and act
as valid cross-correlations with stride 1 on (H, W, C) maps.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .env_obstacles import MAP_CELLS, OBSTACLE_OBS_DIM
from .env_plane import ACTION_DIM, PLANE_OBS_DIM

LOG_STD_INIT = -0.5
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOW_DIM = PLANE_OBS_DIM  # pose + goal

MLP_HIDDEN = (32, 32)
CONV1 = (4, 4, 2, 16)
CONV2 = (3, 3, 16, 32)
CONV1_OUT = (13, 13, 16)
CONV2_OUT = (11, 11, 32)
CONV_FLAT = 11 * 11 * 32
CONV_EMBED = 128
CONCAT_WIDTH = CONV_EMBED + LOW_DIM
CONV_HIDDEN = (256, 128)


class ShapeError(ValueError):
    pass


def relu(x):
    return np.maximum(x, 0.0)


def _orthogonal(rng: np.random.Generator, shape, gain: float) -> np.ndarray:
    """Orthogonal init on the (fan_in, fan_out) matrix view of ``shape``."""
    fan_out = shape[-1]
    fan_in = int(np.prod(shape[:-1]))
    a = rng.normal(size=(max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return (gain * q).reshape(shape)


def _conv_cols(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, H, W, C) -> (B, H-kh+1, W-kw+1, kh*kw*C) patches, ordered (kh, kw, C)."""
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # B, Ho, Wo, C, kh, kw
    b, ho, wo = win.shape[:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b, ho, wo, -1)


def _conv_input_grad(gout: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the input of a valid conv, accumulated one kernel offset at a time."""
    kh, kw, c, f = w.shape
    b, ho, wo, _ = gout.shape
    g = gout.reshape(-1, f)
    out = np.zeros((b, ho + kh - 1, wo + kw - 1, c), dtype=gout.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + ho, j:j + wo, :] += (g @ w[i, j].T).reshape(b, ho, wo, c)
    return out


class Network:
    """Base class: fixed tensor layout inside one flat parameter vector."""

    arch = ""
    obs_dim = 0

    def __init__(self, out_dim: int):
        self.out_dim = int(out_dim)
        self.layout = self._layout()
        self.sizes = [int(np.prod(s)) for _, s in self.layout]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.n_params = int(self.offsets[-1])

    def _layout(self) -> list[tuple[str, tuple[int, ...]]]:
        raise NotImplementedError

    @property
    def tag(self) -> str:
        return f"{self.arch}:{self.out_dim}"

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        if flat.shape != (self.n_params,):
            raise ShapeError(f"{self.tag} expects {self.n_params} parameters, got {flat.shape}")
        return {name: flat[a:b].reshape(shape)
                for (name, shape), a, b in zip(self.layout, self.offsets[:-1], self.offsets[1:])}

    def flatten(self, tensors: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(tensors[name]).reshape(-1) for name, _ in self.layout])

    def init(self, rng: np.random.Generator, head_gain: float, dtype=np.float32) -> np.ndarray:
        flat = np.zeros(self.n_params)
        p = self.unflatten(flat)
        weights = [name for name, _ in self.layout if name.startswith("w")]
        for name in weights:
            gain = head_gain if name == weights[-1] else np.sqrt(2.0)
            p[name][...] = _orthogonal(rng, p[name].shape, gain)
        return flat.astype(dtype)

    def _check_obs(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs)
        if obs.ndim == 1:
            obs = obs[None]
        if obs.ndim != 2 or obs.shape[1] != self.obs_dim:
            raise ShapeError(f"{self.tag} expects observations of width {self.obs_dim}, got {obs.shape}")
        return obs

    def forward(self, params: np.ndarray, obs: np.ndarray, keep: bool = False):
        """Outputs for a batch (or a single observation). With ``keep`` also returns a cache."""
        raise NotImplementedError

    def backward(self, params: np.ndarray, cache, gout: np.ndarray, input_grad: bool = False):
        """Gradient of ``sum(gout * out)`` w.r.t. the flat parameters (and the input)."""
        raise NotImplementedError

    def __call__(self, params, obs):
        return self.forward(params, obs)


def _dense_chain_forward(p, names, h, acts):
    """Dense layers ``names`` (w/b pairs); ``acts[k]`` says whether layer k is rectified."""
    pre = []
    for (w, b), act in zip(names, acts):
        z = h @ p[w] + p[b]
        pre.append(z)
        h = relu(z) if act else z
    return h, pre


def _dense_chain_backward(p, g, names, acts, inputs, pre, grads):
    for k in reversed(range(len(names))):
        w, b = names[k]
        if acts[k]:
            g = g * (pre[k] > 0)
        grads[w] += inputs[k].T @ g
        grads[b] += g.sum(axis=0)
        g = g @ p[w].T
    return g


class MlpNet(Network):
    """17 -> 32 -> 32 -> out, rectified hidden layers, linear output."""

    arch = "mlp"
    obs_dim = PLANE_OBS_DIM

    def _layout(self):
        dims = (self.obs_dim, *MLP_HIDDEN, self.out_dim)
        out = []
        for k in range(3):
            out += [(f"w{k}", (dims[k], dims[k + 1])), (f"b{k}", (dims[k + 1],))]
        return out

    _names = [("w0", "b0"), ("w1", "b1"), ("w2", "b2")]
    _acts = (True, True, False)

    def forward(self, params, obs, keep=False):
        x = self._check_obs(obs).astype(params.dtype, copy=False)
        p = self.unflatten(params)
        out, pre = _dense_chain_forward(p, self._names, x, self._acts)
        if keep:
            return out, (x, pre)
        return out

    def backward(self, params, cache, gout, input_grad=False):
        x, pre = cache
        p = self.unflatten(params)
        flat = np.zeros_like(params)
        grads = self.unflatten(flat)
        inputs = [x, relu(pre[0]), relu(pre[1])]
        gx = _dense_chain_backward(p, np.asarray(gout, dtype=params.dtype), self._names, self._acts,
                                   inputs, pre, grads)
        return (flat, gx) if input_grad else flat


class ConvNet(Network):
    """Obstacle-map branch (two valid convs, dense 128) joined with pose and goal, then 256 -> 128 -> out."""

    arch = "conv"
    obs_dim = OBSTACLE_OBS_DIM

    def _layout(self):
        return [
            ("wc1", CONV1), ("bc1", (CONV1[3],)),
            ("wc2", CONV2), ("bc2", (CONV2[3],)),
            ("w0", (CONV_FLAT, CONV_EMBED)), ("b0", (CONV_EMBED,)),
            ("w1", (CONCAT_WIDTH, CONV_HIDDEN[0])), ("b1", (CONV_HIDDEN[0],)),
            ("w2", (CONV_HIDDEN[0], CONV_HIDDEN[1])), ("b2", (CONV_HIDDEN[1],)),
            ("w3", (CONV_HIDDEN[1], self.out_dim)), ("b3", (self.out_dim,)),
        ]

    _head = [("w1", "b1"), ("w2", "b2"), ("w3", "b3")]
    _head_acts = (True, True, False)

    @staticmethod
    def split(obs):
        low = obs[:, :LOW_DIM]
        maps = obs[:, LOW_DIM:].reshape(-1, MAP_CELLS, MAP_CELLS, 2)
        return low, maps

    def forward(self, params, obs, keep=False):
        obs = self._check_obs(obs).astype(params.dtype, copy=False)
        p = self.unflatten(params)
        low, maps = self.split(obs)
        n = len(obs)
        cols1 = _conv_cols(maps, CONV1[0], CONV1[1])
        z1 = cols1 @ p["wc1"].reshape(-1, CONV1[3]) + p["bc1"]
        a1 = relu(z1)
        cols2 = _conv_cols(a1, CONV2[0], CONV2[1])
        z2 = cols2 @ p["wc2"].reshape(-1, CONV2[3]) + p["bc2"]
        a2 = relu(z2).reshape(n, CONV_FLAT)
        z3 = a2 @ p["w0"] + p["b0"]
        joined = np.concatenate([relu(z3), low], axis=1)
        out, pre = _dense_chain_forward(p, self._head, joined, self._head_acts)
        if keep:
            return out, (cols1, z1, cols2, z2, a2, z3, joined, pre)
        return out

    def backward(self, params, cache, gout, input_grad=False):
        cols1, z1, cols2, z2, a2, z3, joined, pre = cache
        p = self.unflatten(params)
        flat = np.zeros_like(params)
        grads = self.unflatten(flat)
        g = np.asarray(gout, dtype=params.dtype)
        inputs = [joined, relu(pre[0]), relu(pre[1])]
        gj = _dense_chain_backward(p, g, self._head, self._head_acts, inputs, pre, grads)
        g3 = gj[:, :CONV_EMBED] * (z3 > 0)
        grads["w0"] += a2.T @ g3
        grads["b0"] += g3.sum(axis=0)
        g2 = (g3 @ p["w0"].T).reshape(z2.shape) * (z2 > 0)
        grads["wc2"] += (cols2.reshape(-1, cols2.shape[-1]).T @ g2.reshape(-1, CONV2[3])).reshape(CONV2)
        grads["bc2"] += g2.sum(axis=(0, 1, 2))
        ga1 = _conv_input_grad(g2, p["wc2"])
        g1 = ga1 * (z1 > 0)
        grads["wc1"] += (cols1.reshape(-1, cols1.shape[-1]).T @ g1.reshape(-1, CONV1[3])).reshape(CONV1)
        grads["bc1"] += g1.sum(axis=(0, 1, 2))
        if not input_grad:
            return flat
        gmap = _conv_input_grad(g1, p["wc1"])
        gx = np.concatenate([gj[:, CONV_EMBED:], gmap.reshape(len(gmap), -1)], axis=1)
        return flat, gx


def make_network(arch: str, out_dim: int) -> Network:
    if arch == "mlp":
        return MlpNet(out_dim)
    if arch == "conv":
        return ConvNet(out_dim)
    raise ValueError(f"unknown architecture {arch!r}")


def arch_for_env(env: str) -> str:
    return {"plane": "mlp", "obstacles": "conv"}[env]


# -- Gaussian policy ---------------------------------------------------------

LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_log_prob(actions, mean, log_std):
    """Diagonal Gaussian log density, summed over action dimensions."""
    z = (actions - mean) * np.exp(-log_std)
    return -0.5 * (z * z).sum(axis=-1) - log_std.sum() - 0.5 * mean.shape[-1] * LOG_2PI


@dataclass
class ActorCritic:
    """Separate policy and value networks plus a state-independent log std.

    Policy parameters are ``[policy net ..., log_std (12)]``; the value
    network has its own flat vector. Nothing is shared.
    """

    arch: str

    def __post_init__(self):
        self.policy_net = make_network(self.arch, ACTION_DIM)
        self.value_net = make_network(self.arch, 1)
        self.obs_dim = self.policy_net.obs_dim
        self.n_policy = self.policy_net.n_params + ACTION_DIM
        self.n_value = self.value_net.n_params

    @property
    def n_params(self) -> int:
        return self.n_policy + self.n_value

    def init(self, seed, dtype=np.float32) -> np.ndarray:
        """Flat ``[policy params, log_std, value params]``."""
        rng = np.random.default_rng(seed)
        pol = self.policy_net.init(rng, 0.01, dtype)
        val = self.value_net.init(rng, 1.0, dtype)
        return np.concatenate([pol, np.full(ACTION_DIM, LOG_STD_INIT, dtype=dtype), val])

    def split(self, params):
        n = self.policy_net.n_params
        return params[:n], params[n:self.n_policy], params[self.n_policy:]

    def log_std(self, params):
        return np.clip(self.split(params)[1], LOG_STD_MIN, LOG_STD_MAX)

    def mean(self, params, obs):
        return self.policy_net.forward(self.split(params)[0], obs)

    def value(self, params, obs):
        return self.value_net.forward(self.split(params)[2], obs)[:, 0]

    def act(self, params, obs, rng: np.random.Generator, deterministic: bool = False):
        """Action, its log-probability and the value estimate for one observation."""
        obs = np.asarray(obs)[None]
        mean = self.mean(params, obs)[0].astype(float)
        log_std = self.log_std(params).astype(float)
        if deterministic:
            action = mean
        else:
            action = mean + np.exp(log_std) * rng.standard_normal(ACTION_DIM)
        logp = float(gaussian_log_prob(action, mean, log_std))
        return action, logp, float(self.value(params, obs)[0])

    def sample_action(self, params, obs, rng: np.random.Generator):
        action, logp, _ = self.act(params, obs, rng)
        return action, logp


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1
_HEADER = struct.Struct("<4sII")  # magic, version, json length


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arch: str, params: np.ndarray, state: dict, moments: tuple | None = None) -> None:
    """Header, architecture tag + JSON trainer state, then little-endian float32 arrays.

    Arrays follow in order: parameters, then (if given) Adam first and second
    moments, each of length ``len(params)``.
    """
    meta = dict(state, arch=arch, n_params=int(len(params)), has_moments=moments is not None)
    blob = json.dumps(meta, sort_keys=True).encode()
    arrays = [params] + (list(moments) if moments is not None else [])
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        f.write(blob)
        for a in arrays:
            f.write(np.asarray(a, dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path):
    """-> (arch, params, state, moments or None)."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, n_json = _HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(data[_HEADER.size:_HEADER.size + n_json])
    n = meta["n_params"]
    k = 3 if meta["has_moments"] else 1
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size + n_json)
    if len(body) != k * n:
        raise CheckpointError(f"{path}: expected {k * n} floats, found {len(body)}")
    arrays = [body[i * n:(i + 1) * n].astype(np.float32) for i in range(k)]
    moments = (arrays[1], arrays[2]) if k == 3 else None
    arch = meta.pop("arch")
    meta.pop("n_params")
    meta.pop("has_moments")
    return arch, arrays[0], meta, moments
