"""Feed-forward policies with hand-written backpropagation.

Canonical flattening order of parameters: layer by layer, each layer's weight
matrix row-major followed by its bias. A Gaussian policy flattens as trunk,
mean head, std head.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .models import ConfigurationError, InvalidStateError

logger = logging.getLogger(__name__)

FINAL_LAYER_SCALE = 5e-3
LOG_2PI = float(np.log(2.0 * np.pi))

CHECKPOINT_MAGIC = b"RHCK"
CHECKPOINT_KINDS = ("deterministic", "gaussian")


# -------------------------
# Parameters
# -------------------------

@dataclass
class MlpParams:
    """Weights A_l (d_l x d_{l-1}) and biases b_l of a tanh network.

    An MlpParams is also a deterministic rollout policy: its output is the action.
    """
    layer_dims: Tuple[int, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    draw_dim = 0
    draw_kind = "normal"

    def __post_init__(self) -> None:
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ConfigurationError("layer count does not match layer_dims.", "policy.layers")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[l + 1], self.layer_dims[l]) or b.shape != (self.layer_dims[l + 1],):
                raise ConfigurationError(f"layer {l + 1} has inconsistent shapes.", "policy.layers")

    @property
    def d_in(self) -> int:
        return self.layer_dims[0]

    @property
    def d_a(self) -> int:
        return self.layer_dims[-1]

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts) if parts else np.zeros(0)

    @classmethod
    def unflatten(cls, layer_dims: Sequence[int], flat: np.ndarray) -> "MlpParams":
        flat = np.asarray(flat, dtype=float)
        needed = sum((d_prev + 1) * d_next for d_prev, d_next in zip(layer_dims[:-1], layer_dims[1:]))
        if flat.size != needed:
            raise ConfigurationError(
                f"flat vector has {flat.size} entries, layer_dims need {needed}.", "policy.layers")
        weights, biases = [], []
        offset = 0
        for d_prev, d_next in zip(layer_dims[:-1], layer_dims[1:]):
            w = flat[offset: offset + d_next * d_prev].reshape(d_next, d_prev)
            offset += d_next * d_prev
            b = flat[offset: offset + d_next]
            offset += d_next
            weights.append(w.copy())
            biases.append(b.copy())
        return cls(tuple(layer_dims), weights, biases)

    def with_flat(self, flat: np.ndarray) -> "MlpParams":
        return MlpParams.unflatten(self.layer_dims, flat)

    def act(self, states: np.ndarray, draws: np.ndarray) -> np.ndarray:
        return mlp_forward(self, states)


def _validate_dims(layer_dims: Sequence[int]) -> Tuple[int, ...]:
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ConfigurationError(
            f"layer_dims must list at least two positive widths, got {list(layer_dims)}.",
            "policy.layers")
    return dims


def _uniform_layer(rng: np.random.Generator, d_in: int, d_out: int, scale: float):
    w = rng.uniform(-scale, scale, size=(d_out, d_in))
    b = rng.uniform(-scale, scale, size=d_out)
    return w, b


def _init_layers(dims: Sequence[int], rng: np.random.Generator, final_small: bool):
    weights, biases = [], []
    n_layers = len(dims) - 1
    for l in range(n_layers):
        last = final_small and l == n_layers - 1
        scale = FINAL_LAYER_SCALE if last else 1.0 / np.sqrt(dims[l])
        w, b = _uniform_layer(rng, dims[l], dims[l + 1], scale)
        weights.append(w)
        biases.append(b)
    return weights, biases


def init_params(layer_dims: Sequence[int], rng: np.random.Generator) -> MlpParams:
    """Hidden layers from U(+-1/sqrt(fan_in)); final layer from U(+-5e-3)."""
    dims = _validate_dims(layer_dims)
    weights, biases = _init_layers(dims, rng, final_small=True)
    return MlpParams(dims, weights, biases)


# -------------------------
# Forward / backward
# -------------------------

def _as_batch(x: np.ndarray, width: int) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = x[None, :] if single else x
    if x.shape[-1] != width:
        raise InvalidStateError(f"input has dimension {x.shape[-1]}, expected {width}.")
    return x, single


def _forward(params: MlpParams, x: np.ndarray, activate_last: bool):
    """Batched forward pass; returns the output and the per-layer inputs/outputs."""
    inputs, outputs = [], []
    h = x
    n_layers = len(params.weights)
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w.T + b
        h = np.tanh(z) if (l < n_layers - 1 or activate_last) else z
        outputs.append(h)
    return h, (inputs, outputs)


def _backward(params: MlpParams, cache, delta: np.ndarray, activate_last: bool,
              per_sample: bool):
    """
    Backpropagate `delta` (d loss / d output, shape (n, d_L)).

    Returns the parameter gradient (summed over the batch, or one row per sample
    when `per_sample`) and d loss / d input.
    """
    inputs, outputs = cache
    n_layers = len(params.weights)
    grads: List[np.ndarray] = [None] * n_layers
    for l in reversed(range(n_layers)):
        if l < n_layers - 1 or activate_last:
            delta = delta * (1.0 - outputs[l] ** 2)
        h = inputs[l]
        if per_sample:
            dw = np.einsum("ni,nj->nij", delta, h).reshape(len(delta), -1)
            grads[l] = np.concatenate([dw, delta], axis=1)
        else:
            grads[l] = np.concatenate([(delta.T @ h).ravel(), delta.sum(axis=0)])
        delta = delta @ params.weights[l]
    axis = 1 if per_sample else 0
    if not grads:
        flat = np.zeros((len(delta), 0)) if per_sample else np.zeros(0)
    else:
        flat = np.concatenate(grads, axis=axis)
    return flat, delta


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    batch, single = _as_batch(x, params.d_in)
    out, _ = _forward(params, batch, activate_last=False)
    return out[0] if single else out


def deterministic_action(params: MlpParams, s: np.ndarray) -> np.ndarray:
    return mlp_forward(params, s)


def vjp_policy(params: MlpParams, s: np.ndarray, v: np.ndarray,
               per_sample: bool = False) -> np.ndarray:
    """grad_theta mu_theta(s)^T v, summed over a stack of (s, v) pairs."""
    batch, _ = _as_batch(s, params.d_in)
    v = np.asarray(v, dtype=float).reshape(len(batch), params.d_a)
    _, cache = _forward(params, batch, activate_last=False)
    grad, _ = _backward(params, cache, v, activate_last=False, per_sample=per_sample)
    return grad


# -------------------------
# Gaussian policy
# -------------------------

def _std_map(x: np.ndarray) -> np.ndarray:
    """x + sqrt(x^2 + 1), written as 1 / (sqrt(x^2 + 1) - x) for x < 0 so it stays positive."""
    x = np.asarray(x, dtype=float)
    r = np.hypot(x, 1.0)
    return np.where(x >= 0.0, x + r, 1.0 / (r - np.minimum(x, 0.0)))


def _std_map_grad(x: np.ndarray) -> np.ndarray:
    return _std_map(x) / np.hypot(x, 1.0)



@dataclass
class GaussianPolicy:
    """pi(s, .) = N(mean(s), diag(std(s)^2)) from a two-head network.

    The trunk is a tanh network shared by both heads (it may have no layers);
    each head is one linear layer, the std head followed by x + sqrt(x^2 + 1).
    """
    trunk: MlpParams
    mean_head: MlpParams
    std_head: MlpParams

    draw_kind = "normal"

    @classmethod
    def init(cls, layer_dims: Sequence[int], rng: np.random.Generator) -> "GaussianPolicy":
        dims = _validate_dims(layer_dims)
        trunk_dims = dims[:-1]
        tw, tb = _init_layers(trunk_dims, rng, final_small=False)
        mw, mb = _init_layers(dims[-2:], rng, final_small=True)
        sw, sb = _init_layers(dims[-2:], rng, final_small=True)
        return cls(MlpParams(trunk_dims, tw, tb),
                   MlpParams(dims[-2:], mw, mb),
                   MlpParams(dims[-2:], sw, sb))

    @property
    def layer_dims(self) -> Tuple[int, ...]:
        return self.trunk.layer_dims + (self.d_a,)

    @property
    def d_in(self) -> int:
        return self.trunk.d_in

    @property
    def d_a(self) -> int:
        return self.mean_head.d_a

    @property
    def draw_dim(self) -> int:
        return self.d_a

    @property
    def size(self) -> int:
        return self.trunk.size + self.mean_head.size + self.std_head.size

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.trunk.flatten(), self.mean_head.flatten(), self.std_head.flatten()])

    @classmethod
    def unflatten(cls, layer_dims: Sequence[int], flat: np.ndarray) -> "GaussianPolicy":
        dims = _validate_dims(layer_dims)
        trunk_dims, head_dims = dims[:-1], dims[-2:]
        n_trunk = sum((a + 1) * b for a, b in zip(trunk_dims[:-1], trunk_dims[1:]))
        n_head = (head_dims[0] + 1) * head_dims[1]
        flat = np.asarray(flat, dtype=float)
        if flat.size != n_trunk + 2 * n_head:
            raise ConfigurationError(
                f"flat vector has {flat.size} entries, layer_dims need {n_trunk + 2 * n_head}.",
                "policy.layers")
        return cls(MlpParams.unflatten(trunk_dims, flat[:n_trunk]),
                   MlpParams.unflatten(head_dims, flat[n_trunk: n_trunk + n_head]),
                   MlpParams.unflatten(head_dims, flat[n_trunk + n_head:]))

    def with_flat(self, flat: np.ndarray) -> "GaussianPolicy":
        return GaussianPolicy.unflatten(self.layer_dims, flat)

    def _heads(self, batch: np.ndarray):
        h, trunk_cache = _forward(self.trunk, batch, activate_last=True)
        mean, mean_cache = _forward(self.mean_head, h, activate_last=False)
        pre_std, std_cache = _forward(self.std_head, h, activate_last=False)
        return mean, pre_std, (trunk_cache, mean_cache, std_cache)

    def mean_std(self, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        batch, single = _as_batch(s, self.d_in)
        mean, pre_std, _ = self._heads(batch)
        std = _std_map(pre_std)
        return (mean[0], std[0]) if single else (mean, std)

    def act(self, states: np.ndarray, draws: np.ndarray) -> np.ndarray:
        mean, std = self.mean_std(states)
        return mean + std * draws

    def log_prob(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        batch, single = _as_batch(s, self.d_in)
        a = np.asarray(a, dtype=float).reshape(len(batch), self.d_a)
        mean, pre_std, _ = self._heads(batch)
        std = _std_map(pre_std)
        lp = np.sum(-0.5 * LOG_2PI - np.log(std) - (a - mean) ** 2 / (2.0 * std ** 2), axis=1)
        return lp[0] if single else lp

    def grad_log_prob(self, s: np.ndarray, a: np.ndarray,
                      weights: Optional[np.ndarray] = None, per_sample: bool = False) -> np.ndarray:
        """
        Gradient of sum_i w_i log pi(s_i, a_i) with respect to the flat parameters.

        With `per_sample` the unweighted gradient of every pair is returned,
        shape (n, p).
        """
        batch, _ = _as_batch(s, self.d_in)
        n = len(batch)
        a = np.asarray(a, dtype=float).reshape(n, self.d_a)
        mean, pre_std, (trunk_cache, mean_cache, std_cache) = self._heads(batch)
        std = _std_map(pre_std)
        diff = a - mean
        d_mean = diff / std ** 2
        d_std = (-1.0 / std + diff ** 2 / std ** 3) * _std_map_grad(pre_std)
        if weights is not None and not per_sample:
            w = np.asarray(weights, dtype=float).reshape(n, 1)
            d_mean = d_mean * w
            d_std = d_std * w
        g_mean, dh_mean = _backward(self.mean_head, mean_cache, d_mean, False, per_sample)
        g_std, dh_std = _backward(self.std_head, std_cache, d_std, False, per_sample)
        g_trunk, _ = _backward(self.trunk, trunk_cache, dh_mean + dh_std, True, per_sample)
        return np.concatenate([g_trunk, g_mean, g_std], axis=1 if per_sample else 0)


def gaussian_sample(policy: GaussianPolicy, s: np.ndarray,
                    rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    z = rng.standard_normal(policy.d_a)
    mean, std = policy.mean_std(s)
    return mean + std * z, z


def gaussian_log_prob(policy: GaussianPolicy, s: np.ndarray, a: np.ndarray) -> float:
    return float(policy.log_prob(s, a))


def grad_log_prob(policy, s: np.ndarray, a: np.ndarray,
                  weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Score function of any policy exposing `grad_log_prob` (Gaussian or tabular)."""
    return policy.grad_log_prob(s, a, weights=weights)


Policy = Union[GaussianPolicy, MlpParams]


# -------------------------
# Checkpoints
# -------------------------

def _policy_kind(policy) -> str:
    return "gaussian" if isinstance(policy, GaussianPolicy) else "deterministic"


def save_checkpoint(policy: Policy, path: Path, fmt: str = "json") -> Path:
    """
    Write the flat parameters plus a layer-dims header.

    JSON: {"kind", "layer_dims", "params"}. Binary (little-endian): magic
    b"RHCK", uint8 kind index, uint32 number of dims, uint32 dims, float64 params.
    """
    path = Path(path)
    kind = _policy_kind(policy)
    flat = policy.flatten()
    if fmt == "json":
        payload = {"kind": kind, "layer_dims": list(policy.layer_dims),
                   "params": [float(v) for v in flat]}
        path.write_text(json.dumps(payload))
    elif fmt == "binary":
        dims = list(policy.layer_dims)
        header = CHECKPOINT_MAGIC + struct.pack("<BI", CHECKPOINT_KINDS.index(kind), len(dims))
        header += np.asarray(dims, dtype="<u4").tobytes()
        path.write_bytes(header + np.asarray(flat, dtype="<f8").tobytes())
    else:
        raise ConfigurationError(f"unknown checkpoint format {fmt!r}.", "policy.checkpoint_format")
    return path


def load_checkpoint(path: Path) -> Policy:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc.strerror}", "checkpoint") from exc
    if raw.startswith(CHECKPOINT_MAGIC):
        try:
            offset = len(CHECKPOINT_MAGIC)
            kind_idx, n_dims = struct.unpack_from("<BI", raw, offset)
            offset += struct.calcsize("<BI")
            dims = np.frombuffer(raw, dtype="<u4", count=n_dims, offset=offset).tolist()
            offset += 4 * n_dims
            flat = np.frombuffer(raw, dtype="<f8", offset=offset).astype(float)
            kind = CHECKPOINT_KINDS[kind_idx]
        except (struct.error, ValueError, IndexError) as exc:
            raise ConfigurationError(f"{path} is a truncated or corrupt checkpoint.", "checkpoint") from exc
    else:
        try:
            payload = json.loads(raw.decode("utf-8"))
            kind, dims = payload["kind"], payload["layer_dims"]
            flat = np.asarray(payload["params"], float)
        except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
            raise ConfigurationError(f"{path} is not a policy checkpoint.", "checkpoint") from exc
    if kind == "gaussian":
        return GaussianPolicy.unflatten(dims, flat)
    return MlpParams.unflatten(dims, flat)
