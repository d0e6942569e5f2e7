"""Small tanh MLPs with hand-written reverse-mode gradients, and Adam.

Parameters live in one flat float64 vector per network. Layer ``l`` stores
its weight matrix ``(n_in, n_out)`` row-major followed by its bias.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteGradient, ShapeMismatch


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"need >= 2 positive layer sizes, got {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum((a + 1) * b for a, b in zip(s[:-1], s[1:]))

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class MlpParams:
    spec: MlpSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.spec.n_params,):
            raise ShapeMismatch(f"expected {self.spec.n_params} params, got {self.flat.shape}")

    def layers(self):
        """Yield (W, b) views into the flat vector."""
        off = 0
        s = self.spec.layer_sizes
        for a, b in zip(s[:-1], s[1:]):
            W = self.flat[off : off + a * b].reshape(a, b)
            off += a * b
            yield W, self.flat[off : off + b]
            off += b

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, self.flat.copy())


def init_params(spec: MlpSpec, rng: np.random.Generator, output_scale: float = 1.0) -> MlpParams:
    params = MlpParams(spec, np.zeros(spec.n_params))
    layers = list(params.layers())
    for i, (W, b) in enumerate(layers):
        limit = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
        if i == len(layers) - 1:
            W *= output_scale
    return params


def _activations(params: MlpParams, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    layers = list(params.layers())
    for i, (W, b) in enumerate(layers):
        z = acts[-1] @ W + b
        acts.append(z if i == len(layers) - 1 else np.tanh(z))
    return acts


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.n_in:
        raise ShapeMismatch(f"input of width {params.spec.n_in} expected, got shape {x.shape}")
    return x, single


def forward(params: MlpParams, x) -> np.ndarray:
    """Evaluate the network on one input vector or a (B, n_in) batch."""
    xb, single = _as_batch(params, x)
    out = _activations(params, xb)[-1]
    return out[0] if single else out


def hidden_activations(params: MlpParams, x) -> list[np.ndarray]:
    xb, _ = _as_batch(params, x)
    return _activations(params, xb)[1:-1]


def backward(params: MlpParams, x, output_grad) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(output * output_grad)`` w.r.t. params and input.

    For a batch the parameter gradient is summed over rows.
    """
    xb, single = _as_batch(params, x)
    g = np.asarray(output_grad, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (xb.shape[0], params.spec.n_out):
        raise ShapeMismatch(f"output_grad shape {g.shape} does not match ({xb.shape[0]}, {params.spec.n_out})")
    acts = _activations(params, xb)
    layers = list(params.layers())
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        if i != len(layers) - 1:
            g = g * (1.0 - acts[i + 1] ** 2)
        grads.append((acts[i].T @ g, g.sum(axis=0)))
        g = g @ W.T
    flat = np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in reversed(grads)])
    return flat, (g[0] if single else g)


# ---------------------------------------------------------------------------
# categorical heads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_logprob_entropy(logits, action_index: int) -> tuple[float, float, np.ndarray]:
    """log pi(a), H(pi) and d log pi(a) / d logits for one logit vector."""
    logp = log_softmax(logits)
    p = np.exp(logp)
    entropy = float(-(p * logp).sum())
    grad = -p
    grad[action_index] += 1.0
    return float(logp[action_index]), entropy, grad


def categorical_terms(logits: np.ndarray, actions: np.ndarray):
    """Batched log-probs, entropies and their logit gradients.

    Returns ``(logp, entropy, dlogp_dlogits, dentropy_dlogits)``.
    """
    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    rows = np.arange(len(actions))
    logp = logp_all[rows, actions]
    entropy = -(p * logp_all).sum(axis=-1)
    dlogp = -p
    dlogp[rows, actions] += 1.0
    dent = -p * (logp_all + entropy[:, None])
    return logp, entropy, dlogp, dent


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 5e-4) -> "OptimizerState":
        n = params.spec.n_params
        return cls(np.zeros(n), np.zeros(n), 0, lr)


def optimizer_step(state: OptimizerState, params: MlpParams, grad) -> tuple[OptimizerState, MlpParams]:
    """Bias-corrected Adam step (descent on ``grad``); inputs are not mutated."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.flat.shape or state.m.shape != params.flat.shape:
        raise ShapeMismatch("gradient, moments and params must share a shape")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("gradient contains NaN or inf")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad**2
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    flat = params.flat - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = OptimizerState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_state, MlpParams(params.spec, flat)


# ---------------------------------------------------------------------------
# checkpoint files

MAGIC = b"ARSCKPT"
VERSION = 1


def write_checkpoint(stream, arrays: dict[str, np.ndarray], metadata: dict) -> None:
    """Versioned header, JSON metadata, then length-prefixed float64 vectors."""
    meta = dict(metadata)
    meta["arrays"] = list(arrays)
    blob = json.dumps(meta, sort_keys=True).encode()
    stream.write(MAGIC)
    stream.write(struct.pack("<I", VERSION))
    stream.write(struct.pack("<Q", len(blob)))
    stream.write(blob)
    for name in arrays:
        vec = np.ascontiguousarray(arrays[name], dtype="<f8").ravel()
        stream.write(struct.pack("<Q", len(vec)))
        stream.write(vec.tobytes())


def read_checkpoint(stream) -> tuple[dict[str, np.ndarray], dict]:
    if stream.read(len(MAGIC)) != MAGIC:
        raise ValueError("not a checkpoint file")
    (version,) = struct.unpack("<I", stream.read(4))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<Q", stream.read(8))
    meta = json.loads(stream.read(n).decode())
    arrays = {}
    for name in meta["arrays"]:
        (length,) = struct.unpack("<Q", stream.read(8))
        arrays[name] = np.frombuffer(stream.read(8 * length), dtype="<f8").astype(np.float64)
    return arrays, meta


def params_to_bytes(params: MlpParams) -> bytes:
    buf = io.BytesIO()
    write_checkpoint(buf, {"params": params.flat}, {"layer_sizes": list(params.spec.layer_sizes)})
    return buf.getvalue()


def params_from_bytes(data: bytes) -> MlpParams:
    arrays, meta = read_checkpoint(io.BytesIO(data))
    return MlpParams(MlpSpec(tuple(meta["layer_sizes"])), arrays["params"])
